//! Run manifests, host description and latency benchmarks.

use std::path::Path;
use std::time::Instant;

use gmbinet_core::graph::Model;
use gmbinet_core::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;

/// CPU model, logical core count, OS and architecture.
pub fn hardware() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| t.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split_once(':')).map(|(_, v)| v.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model}; {cpus} logical cpus; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Everything needed to re-run a command and find what it wrote.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub hardware: String,
    pub threads: usize,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_text(path, &serde_json::to_string_pretty(self)?)
    }
}

pub const MIN_WARMUP: usize = 3;
pub const MIN_REPEATS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub input: [usize; 4],
    pub warmup: usize,
    pub raw_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub images_per_second: f64,
    pub params: usize,
    pub macs: u64,
    pub hardware: String,
    pub threads: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Times full inference passes on the calling thread.
pub fn bench_latency(model: &Model, input: &Tensor, warmup: usize, repeats: usize) -> Result<LatencyReport> {
    if warmup < MIN_WARMUP || repeats < MIN_REPEATS {
        return Err(Error::usage(format!("bench needs at least {MIN_WARMUP} warm-up runs and {MIN_REPEATS} repeats")));
    }
    for _ in 0..warmup {
        model.infer(input)?;
    }
    let mut raw_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(model.infer(input)?);
        raw_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = raw_ms.iter().sum::<f64>() / repeats as f64;
    let s = input.shape();
    let cost = gmbinet_core::cost::count_graph(&model.graph, s)?;
    Ok(LatencyReport {
        input: s.dims(),
        warmup,
        median_ms: median(&raw_ms),
        images_per_second: s.n as f64 * 1e3 / mean_ms,
        raw_ms,
        mean_ms,
        params: model.param_count(),
        macs: cost.macs,
        hardware: hardware(),
        threads: 1,
    })
}

/// Left-aligned first column, right-aligned rest.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
