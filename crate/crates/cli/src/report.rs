//! Run summaries and columnar series derived from controller traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use anyhow::{bail, Result};
use mixcache::controller::{CacheMode, TimestepTrace};
use mixcache::tensor::{psnr, ssim_with_peak};
use mixcache::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub total_steps: usize,
    pub num_blocks: usize,
    pub executed: u64,
    pub baseline: u64,
    pub skip_fraction: f64,
    /// Steps per mode, keyed by mode name.
    pub mode_counts: BTreeMap<String, usize>,
    /// Quality against the paired uncached run, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub timeline: Vec<CacheMode>,
}

/// Depth recovered from the trace: the first step is always fully computed
/// and costs two passes over every block.
pub fn infer_num_blocks(trace: &[TimestepTrace]) -> Result<usize> {
    let Some(full) = trace.iter().find(|r| r.mode == CacheMode::Full) else {
        bail!("trace has no full step");
    };
    if full.block_forwards == 0 || full.block_forwards % 2 != 0 {
        bail!("full step at {} records {} block forwards", full.step_index, full.block_forwards);
    }
    Ok((full.block_forwards / 2) as usize)
}

impl Report {
    pub fn from_trace(trace: &[TimestepTrace]) -> Result<Self> {
        if trace.is_empty() {
            bail!("empty trace");
        }
        for (i, r) in trace.iter().enumerate() {
            if r.step_index != i {
                bail!("trace record {i} has step_index {}", r.step_index);
            }
        }
        let l = infer_num_blocks(trace)?;
        let mut mode_counts = BTreeMap::new();
        let mut executed = 0;
        for r in trace {
            if r.block_forwards != r.mode.cost(l) {
                bail!(
                    "step {}: {} block forwards recorded for mode {}",
                    r.step_index,
                    r.block_forwards,
                    r.mode
                );
            }
            *mode_counts.entry(r.mode.to_string()).or_insert(0) += 1;
            executed += r.block_forwards;
        }
        let baseline = 2 * l as u64 * trace.len() as u64;
        Ok(Self {
            total_steps: trace.len(),
            num_blocks: l,
            executed,
            baseline,
            skip_fraction: 1.0 - executed as f64 / baseline as f64,
            mode_counts,
            psnr: None,
            ssim: None,
            timeline: trace.iter().map(|r| r.mode).collect(),
        })
    }

    /// Adds PSNR/SSIM against the uncached latent, with the baseline's
    /// value range as the peak.
    pub fn with_quality(mut self, latent: &Tensor, baseline: &Tensor) -> Result<Self> {
        let peak = data_range(baseline);
        self.psnr = Some(psnr(latent, baseline, peak)?);
        self.ssim = Some(ssim_with_peak(latent, baseline, peak)?);
        Ok(self)
    }

    pub fn count(&self, mode: CacheMode) -> usize {
        self.mode_counts.get(&mode.to_string()).copied().unwrap_or(0)
    }

    /// One character per step: F, S, C, or B for a block cache.
    pub fn timeline_string(&self) -> String {
        self.timeline
            .iter()
            .map(|m| match m {
                CacheMode::Full => 'F',
                CacheMode::Step => 'S',
                CacheMode::Cfg => 'C',
                CacheMode::Block(_) => 'B',
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "skip fraction {:.4} ({} of {} block forwards executed)",
            self.skip_fraction, self.executed, self.baseline
        );
        for (mode, n) in &self.mode_counts {
            let _ = writeln!(
                s,
                "  {mode:<9} {n:>4}  {:>5.1}%",
                100.0 * *n as f64 / self.total_steps as f64
            );
        }
        if let (Some(p), Some(q)) = (self.psnr, self.ssim) {
            let _ = writeln!(s, "psnr {p:.3} dB, ssim {q:.6}");
        }
        let _ = writeln!(s, "timeline {}", self.timeline_string());
        s
    }
}

pub fn data_range(t: &Tensor) -> f64 {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-step series: mode, phase, interval, distances and selection scores.
/// Distances carried from earlier steps are left blank and listed in `stale`.
pub fn series_tsv(trace: &[TimestepTrace]) -> String {
    let d_keys: BTreeSet<&String> = trace.iter().flat_map(|r| r.d_values.keys()).collect();
    let p_keys: BTreeSet<&String> = trace.iter().flat_map(|r| r.p_values.keys()).collect();
    let mut out = String::from("step\tmode\tphase\tn_after\tcnt_after\tblock_forwards\td_full");
    for k in &d_keys {
        let _ = write!(out, "\td_{k}");
    }
    for k in &p_keys {
        let _ = write!(out, "\tp_{k}");
    }
    out.push_str("\tstale\n");
    for r in trace {
        let phase = serde_json::to_value(r.phase)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.step_index,
            r.mode,
            phase,
            r.n_after.map(|n| n.to_string()).unwrap_or_default(),
            r.cnt_after,
            r.block_forwards,
            cell(r.d_full)
        );
        for k in &d_keys {
            let _ = write!(out, "\t{}", cell(r.d_values.get(*k).copied()));
        }
        for k in &p_keys {
            let _ = write!(out, "\t{}", cell(r.p_values.get(*k).copied()));
        }
        let _ = writeln!(out, "\t{}", r.stale.join(","));
    }
    out
}

pub fn distribution_tsv(report: &Report) -> String {
    let mut out = String::from("mode\tsteps\tfraction\n");
    for (mode, n) in &report.mode_counts {
        let _ = writeln!(out, "{mode}\t{n}\t{}", *n as f64 / report.total_steps as f64);
    }
    out
}
