use std::io::Write;

use crate::tensor::Tensor;

/// Decodes a binary (P6) PPM with 8-bit samples into `[3, H, W]` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?.to_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("expected magic P6, found {:?}", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err("image has zero size".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit images are supported, maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        format!("raster needs {need} bytes, file has {}", bytes.len().saturating_sub(pos))
    })?;
    let mut data = vec![0.0; need];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = px[ch] as f64 / maxval as f64;
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Encodes a `[3, H, W]` tensor in `[0, 1]` as P6, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = image.data();
    let mut raster = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            raster.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&raster)
}

/// Nearest-neighbour resize of `[C, H, W]` to `[C, s, s]`.
pub fn resize_nearest(image: &Tensor, s: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == s && w == s {
        return image.clone();
    }
    let src = image.data();
    let mut out = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..s {
            let sy = y * h / s;
            for x in 0..s {
                let sx = x * w / s;
                out[(ch * s + y) * s + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_parts(vec![c, s, s], out)
}
