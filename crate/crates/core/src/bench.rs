//! End-to-end caption latency and memory benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generation::{greedy_caption, GenerationConfig};
use crate::model::EncoderDecoderModel;
use crate::tensor::storage::{live_bytes, peak_bytes, reset_peak};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
    /// Every model decodes exactly this many positions (BOS included).
    pub decode_len: usize,
    pub baseline: String,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 3 {
            return Err(invalid(format!("need at least 3 timed runs, got {}", self.runs)));
        }
        if self.warmup < 1 {
            return Err(invalid("need at least 1 warmup run"));
        }
        if self.decode_len < 2 {
            return Err(invalid("decode length must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Linear-interpolated percentile of sorted samples, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        LatencyStats { median: percentile(&s, 0.5), p10: percentile(&s, 0.1), p90: percentile(&s, 0.9) }
    }
}

/// One model's raw measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub inference_time_s: LatencyStats,
    /// Weight storage plus the largest amount of tensor memory live at once
    /// during a captioning run.
    pub peak_memory_bytes: u64,
    pub samples_s: Vec<f64>,
}

/// A model to benchmark, with the size of the file it was loaded from.
pub struct BenchModel<'a> {
    pub name: String,
    pub model: &'a EncoderDecoderModel,
    pub weight_size_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub parameters: usize,
    pub inference_time_s: LatencyStats,
    pub peak_memory_bytes: u64,
    pub weight_size_bytes: u64,
    pub speedup_vs_baseline: f64,
    /// Process peak resident set after this model ran, when the OS reports it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub process_peak_rss_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hardware {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cpu_model: Option<String>,
}

impl Hardware {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_owned())
        });
        Hardware {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            cpu_model,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: String,
    pub runs: usize,
    pub warmup: usize,
    pub decode_len: usize,
    pub hardware: Hardware,
    pub rows: Vec<BenchRow>,
}

/// Peak resident set size of this process (Linux `VmHWM`).
pub fn process_peak_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Times `warmup + runs` captioning passes (encode plus a forced-length
/// greedy decode) on the calling thread.
pub fn measure(model: &EncoderDecoderModel, image: &Tensor, runs: usize, warmup: usize, decode_len: usize) -> Result<Measurement> {
    let gen = GenerationConfig { max_len: decode_len, force_length: true, ..Default::default() };
    let weights = 8 * model.num_parameters() as u64;
    for _ in 0..warmup {
        greedy_caption(image, model, &gen)?;
    }
    let start_live = live_bytes();
    reset_peak();
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let ids = greedy_caption(image, model, &gen)?;
        samples.push(t.elapsed().as_secs_f64());
        debug_assert_eq!(ids.len(), decode_len);
    }
    let transient = peak_bytes().saturating_sub(start_live);
    Ok(Measurement {
        inference_time_s: LatencyStats::from_samples(&samples),
        peak_memory_bytes: weights + transient,
        samples_s: samples,
    })
}

/// Benchmarks each model in turn and expresses speed relative to the
/// model named `cfg.baseline`.
pub fn run_bench(models: &[BenchModel<'_>], image: &Tensor, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if !models.iter().any(|m| m.name == cfg.baseline) {
        let names: Vec<&str> = models.iter().map(|m| m.name.as_str()).collect();
        return Err(invalid(format!("baseline {:?} is not among the benchmarked models {names:?}", cfg.baseline)));
    }
    for m in models {
        let limit = m.model.decoder_config().max_text_len;
        if cfg.decode_len > limit {
            return Err(invalid(format!("decode length {} exceeds {}'s positional table ({limit})", cfg.decode_len, m.name)));
        }
    }
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let meas = measure(m.model, image, cfg.runs, cfg.warmup, cfg.decode_len)?;
        rows.push(BenchRow {
            name: m.name.clone(),
            parameters: m.model.num_parameters(),
            inference_time_s: meas.inference_time_s,
            peak_memory_bytes: meas.peak_memory_bytes,
            weight_size_bytes: m.weight_size_bytes,
            speedup_vs_baseline: 0.0,
            process_peak_rss_bytes: process_peak_rss(),
        });
    }
    let base = rows.iter().find(|r| r.name == cfg.baseline).expect("checked above").inference_time_s.median;
    for r in &mut rows {
        r.speedup_vs_baseline = base / r.inference_time_s.median;
    }
    Ok(BenchReport {
        baseline: cfg.baseline.clone(),
        runs: cfg.runs,
        warmup: cfg.warmup,
        decode_len: cfg.decode_len,
        hardware: Hardware::detect(),
        rows,
    })
}

fn mb(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

impl BenchReport {
    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>12} {:>11} {:>11} {:>11} {:>14} {:>11} {:>8}",
            "model", "params", "median(s)", "p10(s)", "p90(s)", "peak mem(MB)", "weights(MB)", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>12} {:>11.5} {:>11.5} {:>11.5} {:>14.3} {:>11.3} {:>7.2}x",
                r.name,
                r.parameters,
                r.inference_time_s.median,
                r.inference_time_s.p10,
                r.inference_time_s.p90,
                mb(r.peak_memory_bytes),
                mb(r.weight_size_bytes),
                r.speedup_vs_baseline
            );
        }
        let _ = writeln!(
            s,
            "baseline {} | {} runs after {} warmup | {} decode positions | {} {} x{}{}",
            self.baseline,
            self.runs,
            self.warmup,
            self.decode_len,
            self.hardware.os,
            self.hardware.arch,
            self.hardware.logical_cpus,
            self.hardware.cpu_model.as_deref().map(|m| format!(" ({m})")).unwrap_or_default()
        );
        if self.rows.iter().any(|r| r.process_peak_rss_bytes.is_some()) {
            let rss: Vec<String> = self
                .rows
                .iter()
                .map(|r| format!("{}={:.1}MB", r.name, r.process_peak_rss_bytes.map(mb).unwrap_or(0.0)))
                .collect();
            let _ = writeln!(s, "process peak RSS after each model: {}", rss.join(", "));
        }
        s
    }
}
