use super::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Cuts a `[C, H, W]` image into non-overlapping `P×P` patches in raster
/// order, each flattened channel-major to length `C·P·P`.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(shape_err(format!("image shape {:?} does not match [{c}, {s}, {s}]", image.shape())));
    }
    let side = s / p;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * s + py * p + y) * s + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![side * side, c * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let side = s / p;
    if patches.shape() != [side * side, c * p * p] {
        return Err(shape_err(format!("patch tensor {:?} does not fit config", patches.shape())));
    }
    let src = patches.data();
    let mut out = vec![0.0; c * s * s];
    let mut at = 0;
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * s + py * p + y) * s + px * p;
                    out[row..row + p].copy_from_slice(&src[at..at + p]);
                    at += p;
                }
            }
        }
    }
    Tensor::new(vec![c, s, s], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, s: usize) -> Tensor {
        Tensor::new(vec![c, s, s], (0..c * s * s).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn base_geometry_gives_196_patches() {
        let cfg = ModelConfig::encoder(768, 1, 12, 224, 16);
        let p = patchify(&Tensor::zeros(vec![3, 224, 224]), &cfg).unwrap();
        assert_eq!(p.shape(), &[196, 768]);
    }

    #[test]
    fn toy_geometry_gives_16_patches() {
        let cfg = ModelConfig::encoder(16, 1, 2, 32, 8);
        let p = patchify(&ramp(3, 32), &cfg).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        // second patch starts 8 pixels to the right of the first
        assert_eq!(p.at(&[1, 0]), 8.0);
        // fifth patch is the first of the second patch row
        assert_eq!(p.at(&[4, 0]), (8 * 32) as f64);
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ModelConfig::encoder(16, 1, 2, 32, 8);
        let img = ramp(3, 32);
        let back = unpatchify(&patchify(&img, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn wrong_size_is_a_shape_error() {
        let cfg = ModelConfig::encoder(16, 1, 2, 32, 8);
        assert!(matches!(patchify(&ramp(3, 24), &cfg), Err(crate::Error::Shape(_))));
    }
}
