//! Offline profiling: redundancy traces from fully computed runs, Gaussian
//! perturbation parameters, per-granularity accuracy impacts and threshold
//! suggestions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{default_block_candidates, ProfileArtifact, Thresholds};
use crate::dit::ToyDiT;
use crate::error::{Error, Result};
use crate::sampler::{
    cfg_combine, full_dual_forward, initial_latent, phi_step, DiffusionSchedule, GuidanceConfig,
};
use crate::tensor::{derive_seed, diff_stats, gaussian_like, relative_l1, Tensor};

const SITE_STEP: u64 = 1;
const SITE_CFG: u64 = 2;
const SITE_BLOCK: u64 = 3;
const BLOCK_SMOOTHING_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingConfig {
    pub num_prompts: usize,
    /// One seed per prompt; empty means `0..num_prompts`.
    #[serde(default)]
    pub prompt_seeds: Vec<u64>,
    #[serde(default = "default_warmup_exclude")]
    pub warmup_exclude_fraction: f64,
    #[serde(default = "default_sigma_window")]
    pub sigma_window_fraction: f64,
    #[serde(default)]
    pub perturbation_seed: u64,
    /// Percentiles for (theta, delta1, delta2).
    #[serde(default = "default_percentiles")]
    pub threshold_percentiles: [f64; 3],
    /// Step distance used to emulate consecutive full computations.
    #[serde(default = "default_full_stride")]
    pub full_stride: usize,
    /// Empty means the 25/50/75% default for the model depth.
    #[serde(default)]
    pub block_candidates: Vec<usize>,
}

fn default_warmup_exclude() -> f64 {
    0.2
}
fn default_sigma_window() -> f64 {
    0.8
}
fn default_percentiles() -> [f64; 3] {
    [60.0, 30.0, 70.0]
}
fn default_full_stride() -> usize {
    4
}

impl Default for ProfilingConfig {
    fn default() -> Self {
        Self {
            num_prompts: 5,
            prompt_seeds: Vec::new(),
            warmup_exclude_fraction: default_warmup_exclude(),
            sigma_window_fraction: default_sigma_window(),
            perturbation_seed: 0,
            threshold_percentiles: default_percentiles(),
            full_stride: default_full_stride(),
            block_candidates: Vec::new(),
        }
    }
}

impl ProfilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 {
            return Err(Error::InvalidConfig("num_prompts must be at least 1".into()));
        }
        if !self.prompt_seeds.is_empty() && self.prompt_seeds.len() != self.num_prompts {
            return Err(Error::InvalidConfig(format!(
                "{} prompt seeds given for {} prompts",
                self.prompt_seeds.len(),
                self.num_prompts
            )));
        }
        for (name, f) in [
            ("warmup_exclude_fraction", self.warmup_exclude_fraction),
            ("sigma_window_fraction", self.sigma_window_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1], got {f}")));
            }
        }
        if self
            .threshold_percentiles
            .iter()
            .any(|p| !(0.0..=100.0).contains(p))
        {
            return Err(Error::InvalidConfig("percentiles must be in [0, 100]".into()));
        }
        if self.full_stride == 0 {
            return Err(Error::InvalidConfig("full_stride must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.prompt_seeds.is_empty() {
            (0..self.num_prompts as u64).collect()
        } else {
            self.prompt_seeds.clone()
        }
    }

    pub fn candidates(&self, num_blocks: usize) -> Vec<usize> {
        if self.block_candidates.is_empty() {
            default_block_candidates(num_blocks)
        } else {
            self.block_candidates.clone()
        }
    }

    fn warmup_steps(&self, total: usize) -> usize {
        ((self.warmup_exclude_fraction * total as f64).round() as usize).min(total)
    }

    fn sigma_window_start(&self, total: usize) -> usize {
        let window = (self.sigma_window_fraction * total as f64).round() as usize;
        self.warmup_steps(total).max(total.saturating_sub(window))
    }
}

/// Noise seed of a profiling prompt's initial latent.
pub fn prompt_noise_seed(prompt_seed: u64) -> u64 {
    derive_seed(prompt_seed, 0x4015E)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyRecord {
    pub prompt_id: u64,
    pub step: usize,
    pub d_step: Option<f64>,
    pub d_cfg: f64,
    /// Blocks without a previous activation (step 0) are absent.
    pub d_block: BTreeMap<usize, f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    /// Distance to the output `full_stride` steps earlier.
    #[serde(default)]
    pub d_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RedundancyTrace {
    pub total_steps: usize,
    pub records: Vec<RedundancyRecord>,
}

impl RedundancyTrace {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records: Vec<RedundancyRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let total_steps = records.iter().map(|r| r.step + 1).max().unwrap_or(0);
        Ok(Self {
            total_steps,
            records,
        })
    }

    /// Pooled `D_step` series per step index, averaged over prompts.
    pub fn mean_d_step_series(&self) -> Vec<Option<f64>> {
        let mut sums = vec![(0.0, 0usize); self.total_steps];
        for r in &self.records {
            if let Some(d) = r.d_step {
                sums[r.step].0 += d;
                sums[r.step].1 += 1;
            }
        }
        sums.into_iter()
            .map(|(s, n)| (n > 0).then(|| s / n as f64))
            .collect()
    }
}

fn collect_one(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    prompt_id: u64,
    noise_seed: u64,
    candidates: &[usize],
    full_stride: usize,
) -> Result<Vec<RedundancyRecord>> {
    let mut x = initial_latent(model, noise_seed);
    let mut history: Vec<Tensor> = Vec::new();
    let mut prev_acts: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut records = Vec::with_capacity(schedule.total_steps());
    for step in 0..schedule.total_steps() {
        let t = schedule.timestep(step)?;
        let out = full_dual_forward(model, &x, t, guidance, candidates)?;
        let prev = history.last();
        let d_step = prev.map(|p| relative_l1(&out.eps, p)).transpose()?;
        let stats = prev.map(|p| diff_stats(&out.eps, p)).transpose()?;
        let d_full = (step >= full_stride)
            .then(|| relative_l1(&out.eps, &history[step - full_stride]))
            .transpose()?;
        let mut d_block = BTreeMap::new();
        for (i, act) in &out.captured {
            if let Some(p) = prev_acts.get(i) {
                d_block.insert(*i, relative_l1(act, p)?);
            }
        }
        records.push(RedundancyRecord {
            prompt_id,
            step,
            d_step,
            d_cfg: relative_l1(&out.uncond, &out.cond)?,
            d_block,
            mu: stats.map(|s| s.mu),
            sigma: stats.map(|s| s.sigma),
            d_full,
        });
        x = phi_step(schedule, &x, t, &out.eps)?;
        prev_acts = out.captured;
        history.push(out.eps);
    }
    Ok(records)
}

/// Fully computed runs over the profiling prompts, recording every distance.
pub fn collect_redundancy(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    config: &ProfilingConfig,
) -> Result<RedundancyTrace> {
    config.validate()?;
    let candidates = config.candidates(model.num_blocks());
    let cond_dim = model.config().cond_dim;
    let per_prompt: Vec<Result<Vec<RedundancyRecord>>> = config
        .seeds()
        .par_iter()
        .map(|&seed| {
            let guidance = GuidanceConfig::for_prompt(guidance_scale, cond_dim, seed)?;
            collect_one(
                model,
                schedule,
                &guidance,
                seed,
                prompt_noise_seed(seed),
                &candidates,
                config.full_stride,
            )
        })
        .collect();
    let mut records = Vec::new();
    for r in per_prompt {
        records.extend(r?);
    }
    Ok(RedundancyTrace {
        total_steps: schedule.total_steps(),
        records,
    })
}

/// `mu_hat`: mean step-difference mean over all steps. `sigma_hat`: mean
/// step-difference deviation over the trailing window, warm-up excluded.
pub fn estimate_noise_params(trace: &RedundancyTrace, config: &ProfilingConfig) -> Result<(f64, f64)> {
    let total = trace.total_steps;
    let start = config.sigma_window_start(total);
    let mus: Vec<f64> = trace.records.iter().filter_map(|r| r.mu).collect();
    let sigmas: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.step >= start)
        .filter_map(|r| r.sigma)
        .collect();
    if mus.is_empty() || sigmas.is_empty() {
        return Err(Error::InvalidArgument(
            "redundancy trace has no difference statistics".into(),
        ));
    }
    Ok((mean(&mus), mean(&sigmas)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Which perturbation sites receive noise; masked sites get `eta = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteMask {
    pub step: bool,
    pub cfg: bool,
    pub block: bool,
}

impl Default for SiteMask {
    fn default() -> Self {
        Self {
            step: true,
            cfg: true,
            block: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impacts {
    pub impact_step: f64,
    pub impact_cfg: f64,
    pub impact_block: BTreeMap<usize, Vec<f64>>,
}

/// Raw per-step impacts of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptImpacts {
    pub step: Vec<f64>,
    pub cfg: Vec<f64>,
    pub block: BTreeMap<usize, Vec<f64>>,
}

/// Seed of the perturbation drawn for one (prompt, step, site).
pub fn perturbation_seed(base: u64, prompt_seed: u64, step: usize, site: u64, block: usize) -> u64 {
    let s = derive_seed(base, prompt_seed);
    let s = derive_seed(s, step as u64);
    derive_seed(s, site << 32 | block as u64)
}

#[allow(clippy::too_many_arguments)]
fn perturbation(
    shape: &[usize],
    mu: f64,
    sigma: f64,
    enabled: bool,
    seed: u64,
) -> Result<Tensor> {
    if enabled {
        gaussian_like(shape, mu, sigma, seed)
    } else {
        Ok(Tensor::zeros(shape))
    }
}

/// Single-step perturbation impacts along one prompt's uncached trajectory.
#[allow(clippy::too_many_arguments)]
pub fn measure_prompt_impacts(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    noise_seed: u64,
    prompt_seed: u64,
    mu_hat: f64,
    sigma_hat: f64,
    candidates: &[usize],
    pert_seed: u64,
    mask: SiteMask,
) -> Result<PromptImpacts> {
    let total = schedule.total_steps();
    let latent_shape = model.config().latent_shape();
    let act_shape = model.config().activation_shape();
    let g = guidance.scale();
    let mut x = initial_latent(model, noise_seed);
    let mut out = PromptImpacts {
        step: Vec::with_capacity(total),
        cfg: Vec::with_capacity(total),
        block: candidates.iter().map(|&i| (i, Vec::with_capacity(total))).collect(),
    };
    for s in 0..total {
        let t = schedule.timestep(s)?;
        let r = full_dual_forward(model, &x, t, guidance, candidates)?;
        let x_ref = phi_step(schedule, &x, t, &r.eps)?;

        let eta = perturbation(
            &latent_shape,
            mu_hat,
            sigma_hat,
            mask.step,
            perturbation_seed(pert_seed, prompt_seed, s, SITE_STEP, 0),
        )?;
        let x_p = phi_step(schedule, &x, t, &r.eps.add(&eta)?)?;
        out.step.push(relative_l1(&x_p, &x_ref)?);

        let eta = perturbation(
            &latent_shape,
            mu_hat,
            sigma_hat,
            mask.cfg,
            perturbation_seed(pert_seed, prompt_seed, s, SITE_CFG, 0),
        )?;
        let eps_p = cfg_combine(&r.cond, &r.uncond.add(&eta)?, g)?;
        let x_p = phi_step(schedule, &x, t, &eps_p)?;
        out.cfg.push(relative_l1(&x_p, &x_ref)?);

        for &i in candidates {
            let eta = perturbation(
                &act_shape,
                mu_hat,
                sigma_hat,
                mask.block,
                perturbation_seed(pert_seed, prompt_seed, s, SITE_BLOCK, i),
            )?;
            let act = r.captured[&i].add(&eta)?;
            let cond_p = model.forward(&act, t, guidance.cond(), i + 1, &[])?.eps;
            let eps_p = cfg_combine(&cond_p, &r.uncond, g)?;
            let x_p = phi_step(schedule, &x, t, &eps_p)?;
            out.block.get_mut(&i).unwrap().push(relative_l1(&x_p, &x_ref)?);
        }
        x = x_ref;
    }
    Ok(out)
}

/// Centered moving average, truncated at the ends.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            mean(&v[lo..hi])
        })
        .collect()
}

pub fn measure_impacts(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    mu_hat: f64,
    sigma_hat: f64,
    config: &ProfilingConfig,
) -> Result<Impacts> {
    measure_impacts_masked(
        model,
        schedule,
        guidance_scale,
        mu_hat,
        sigma_hat,
        config,
        SiteMask::default(),
    )
}

pub fn measure_impacts_masked(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    mu_hat: f64,
    sigma_hat: f64,
    config: &ProfilingConfig,
    mask: SiteMask,
) -> Result<Impacts> {
    config.validate()?;
    if !(sigma_hat >= 0.0) || !mu_hat.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "invalid perturbation parameters mu={mu_hat} sigma={sigma_hat}"
        )));
    }
    let candidates = config.candidates(model.num_blocks());
    let cond_dim = model.config().cond_dim;
    let per_prompt: Vec<Result<PromptImpacts>> = config
        .seeds()
        .par_iter()
        .map(|&seed| {
            let guidance = GuidanceConfig::for_prompt(guidance_scale, cond_dim, seed)?;
            measure_prompt_impacts(
                model,
                schedule,
                &guidance,
                prompt_noise_seed(seed),
                seed,
                mu_hat,
                sigma_hat,
                &candidates,
                config.perturbation_seed,
                mask,
            )
        })
        .collect();
    let per_prompt: Vec<PromptImpacts> = per_prompt.into_iter().collect::<Result<_>>()?;

    let total = schedule.total_steps();
    let n = per_prompt.len() as f64;
    let avg = |pick: &dyn Fn(&PromptImpacts) -> &Vec<f64>| -> Vec<f64> {
        (0..total)
            .map(|s| per_prompt.iter().map(|p| pick(p)[s]).sum::<f64>() / n)
            .collect()
    };
    let warm = config.warmup_steps(total).min(total - 1);
    let step_series = avg(&|p| &p.step);
    let cfg_series = avg(&|p| &p.cfg);
    let impact_block = candidates
        .iter()
        .map(|&i| {
            let series = avg(&|p| &p.block[&i]);
            (i, moving_average(&series, BLOCK_SMOOTHING_WINDOW))
        })
        .collect();
    Ok(Impacts {
        impact_step: mean(&step_series[warm..]),
        impact_cfg: mean(&cfg_series[warm..]),
        impact_block,
    })
}

/// Linear-interpolation percentile (`p` in 0..=100) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    Ok(v[lo] + frac * (v[hi] - v[lo]))
}

/// Percentile-based `(theta, delta1, delta2)`; `delta1 < delta2` always holds.
pub fn suggest_thresholds(trace: &RedundancyTrace, config: &ProfilingConfig) -> Result<Thresholds> {
    let d_step: Vec<f64> = trace.records.iter().filter_map(|r| r.d_step).collect();
    let warm = config.warmup_steps(trace.total_steps);
    let mut d_full: Vec<f64> = trace
        .records
        .iter()
        .filter(|r| r.step >= warm)
        .filter_map(|r| r.d_full)
        .collect();
    if d_full.is_empty() {
        d_full = trace.records.iter().filter_map(|r| r.d_full).collect();
    }
    if d_full.is_empty() {
        d_full = d_step.clone();
    }
    let [p_theta, p1, p2] = config.threshold_percentiles;
    let theta = percentile(&d_step, p_theta)?;
    let mut delta1 = percentile(&d_full, p1.min(p2))?;
    let mut delta2 = percentile(&d_full, p1.max(p2))?;
    if !(delta1 > 0.0) {
        delta1 = f64::EPSILON;
    }
    if delta2 <= delta1 {
        delta2 = delta1 + delta1 * 4.0 * f64::EPSILON;
    }
    Ok(Thresholds {
        theta,
        delta1,
        delta2,
    })
}

/// Published thresholds, keyed by preset name.
pub fn preset_thresholds(name: &str) -> Option<Thresholds> {
    let (theta, delta1, delta2) = match name {
        "paper-wan" | "paper-hunyuan" => (0.1, 0.05, 0.1),
        "paper-cogvideox" => (0.1, 0.3, 0.4),
        _ => return None,
    };
    Some(Thresholds {
        theta,
        delta1,
        delta2,
    })
}

pub fn provenance_digest(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    config: &ProfilingConfig,
) -> Result<String> {
    let alpha_bars: Vec<u64> = (0..=schedule.total_steps())
        .map(|t| schedule.alpha_bar(t).to_bits())
        .collect();
    let doc = serde_json::json!({
        "model": model.config(),
        "params": model.param_checksum(),
        "alpha_bars": alpha_bars,
        "guidance_scale": guidance_scale,
        "profiling": config,
    });
    let digest = Sha256::digest(serde_json::to_vec(&doc)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// The complete offline pipeline.
pub fn run_profile(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    config: &ProfilingConfig,
) -> Result<(ProfileArtifact, RedundancyTrace)> {
    let trace = collect_redundancy(model, schedule, guidance_scale, config)?;
    let (mu_hat, sigma_hat) = estimate_noise_params(&trace, config)?;
    let impacts = measure_impacts(model, schedule, guidance_scale, mu_hat, sigma_hat, config)?;
    let thresholds = suggest_thresholds(&trace, config)?;
    let artifact = ProfileArtifact {
        mu_hat,
        sigma_hat,
        impact_step: impacts.impact_step,
        impact_cfg: impacts.impact_cfg,
        impact_block: impacts.impact_block,
        provenance: provenance_digest(model, schedule, guidance_scale, config)?,
        suggested_thresholds: Some(thresholds),
    };
    artifact.validate()?;
    Ok((artifact, trace))
}
