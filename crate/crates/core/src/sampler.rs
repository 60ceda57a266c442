//! Noise schedule, deterministic DDIM update, CFG combination and the
//! generation loop that hosts the cache controller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::controller::{CacheMode, MixCache, Phase, TimestepTrace};
use crate::dit::{Conditioning, ToyDiT};
use crate::error::{Error, Result};
use crate::tensor::{gaussian_like, relative_l1, Tensor};

/// Linear-beta schedule with per-step retention `delta_t = 1 - beta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    total_steps: usize,
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`, with `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// The default is the usual 1000-step linear schedule (1e-4..2e-2) compressed
/// to 50 steps, so each step covers twenty of the original betas.
impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 2e-3,
            beta_max: 0.4,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

pub fn build_schedule(total_steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if total_steps < 2 {
        return Err(Error::InvalidConfig(format!(
            "schedule needs at least 2 steps, got {total_steps}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "beta bounds must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..total_steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (total_steps - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(total_steps + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * (1.0 - b));
    }
    Ok(DiffusionSchedule {
        total_steps,
        betas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative retention; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Closed-form forward diffusion of `x0` to timestep `t`.
    pub fn diffuse(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        x0.lincomb(ab.sqrt(), noise, (1.0 - ab).sqrt())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Timestep for a sampling index (0 is the first, noisiest step).
    pub fn timestep(&self, step_index: usize) -> Result<usize> {
        if step_index >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step index {step_index} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        Ok(self.total_steps - step_index)
    }
}

/// Deterministic DDIM update from `t` to `t - 1`. At `t == 1` this is the
/// clean-sample estimate.
pub fn phi_step(schedule: &DiffusionSchedule, x_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    x_t.check_same_shape(eps)?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let x0 = x_t.lincomb(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())?;
    if t == 1 {
        return Ok(x0);
    }
    x0.lincomb(ab_prev.sqrt(), eps, (1.0 - ab_prev).sqrt())
}

/// `(1 + g) * cond - g * uncond`.
pub fn cfg_combine(cond_out: &Tensor, uncond_out: &Tensor, g: f64) -> Result<Tensor> {
    cond_out.check_same_shape(uncond_out)?;
    if g == 0.0 {
        return Ok(cond_out.clone());
    }
    cond_out.lincomb(1.0 + g, uncond_out, -g)
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    scale: f64,
    cond: Conditioning,
    uncond: Conditioning,
}

impl GuidanceConfig {
    pub fn new(scale: f64, cond: Conditioning, uncond: Conditioning) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "guidance scale must be non-negative, got {scale}"
            )));
        }
        if !uncond.is_null() {
            return Err(Error::InvalidConfig(
                "unconditional branch must use the null conditioning".into(),
            ));
        }
        Ok(Self { scale, cond, uncond })
    }

    /// Prompt `prompt_id` against the null prompt.
    pub fn for_prompt(scale: f64, cond_dim: usize, prompt_id: u64) -> Result<Self> {
        Self::new(
            scale,
            Conditioning::prompt(cond_dim, prompt_id),
            Conditioning::null(cond_dim),
        )
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn cond(&self) -> &Conditioning {
        &self.cond
    }

    pub fn uncond(&self) -> &Conditioning {
        &self.uncond
    }
}

/// Both CFG branches of one timestep, conditional first.
#[derive(Debug, Clone)]
pub struct DualForward {
    pub cond: Tensor,
    pub uncond: Tensor,
    pub eps: Tensor,
    /// Conditional-branch activations at the requested blocks.
    pub captured: BTreeMap<usize, Tensor>,
}

pub fn full_dual_forward(
    model: &ToyDiT,
    x_t: &Tensor,
    t: usize,
    guidance: &GuidanceConfig,
    capture: &[usize],
) -> Result<DualForward> {
    let c = model.forward(x_t, t, guidance.cond(), 0, capture)?;
    let u = model.forward(x_t, t, guidance.uncond(), 0, &[])?;
    let eps = cfg_combine(&c.eps, &u.eps, guidance.scale())?;
    Ok(DualForward {
        cond: c.eps,
        uncond: u.eps,
        eps,
        captured: c.captured,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    /// Block forwards actually executed.
    pub executed: u64,
    /// Block forwards an uncached run would execute (`2 * L * T`).
    pub baseline: u64,
}

impl ComputeLedger {
    pub fn skip_fraction(&self) -> f64 {
        if self.baseline == 0 {
            return 0.0;
        }
        1.0 - self.executed as f64 / self.baseline as f64
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub final_latent: Tensor,
    pub trace: Vec<TimestepTrace>,
    pub compute_ledger: ComputeLedger,
}

/// Runs the reverse loop from `x_T`, asking `eps_at(x_t, step_index, t)` for
/// the noise estimate at every step.
pub fn sample_loop(
    schedule: &DiffusionSchedule,
    x_start: Tensor,
    mut eps_at: impl FnMut(&Tensor, usize, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut x = x_start;
    for step_index in 0..schedule.total_steps() {
        let t = schedule.timestep(step_index)?;
        let eps = eps_at(&x, step_index, t)?;
        x = phi_step(schedule, &x, t, &eps)?;
    }
    Ok(x)
}

pub fn initial_latent(model: &ToyDiT, noise_seed: u64) -> Tensor {
    gaussian_like(&model.config().latent_shape(), 0.0, 1.0, noise_seed).expect("unit sigma")
}

/// Full generation from seeded noise. Without a controller every step runs
/// both CFG branches; with one, each step is delegated to it.
pub fn generate(
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    mut controller: Option<&mut MixCache>,
    noise_seed: u64,
) -> Result<GenerationResult> {
    let l = model.num_blocks() as u64;
    if let Some(c) = controller.as_deref() {
        c.config().validate(model.num_blocks())?;
        if c.config().guidance_scale != guidance.scale() {
            return Err(Error::InvalidConfig(format!(
                "controller guidance scale {} differs from sampler guidance scale {}",
                c.config().guidance_scale,
                guidance.scale()
            )));
        }
    }
    let mut trace = Vec::with_capacity(schedule.total_steps());
    let mut prev_eps: Option<Tensor> = None;
    let final_latent = sample_loop(schedule, initial_latent(model, noise_seed), |x, step_index, t| {
        match controller.as_deref_mut() {
            Some(c) => {
                let (eps, rec) = c.step(model, schedule, guidance, x, step_index)?;
                trace.push(rec);
                Ok(eps)
            }
            None => {
                let out = full_dual_forward(model, x, t, guidance, &[])?;
                let mut d_values = BTreeMap::new();
                if let Some(p) = &prev_eps {
                    d_values.insert("step".to_string(), relative_l1(&out.eps, p)?);
                }
                d_values.insert("cfg".to_string(), relative_l1(&out.uncond, &out.cond)?);
                trace.push(TimestepTrace {
                    step_index,
                    mode: CacheMode::Full,
                    phase: Phase::WarmUp,
                    d_values,
                    stale: Vec::new(),
                    p_values: BTreeMap::new(),
                    d_full: None,
                    n_after: None,
                    cnt_after: 0,
                    block_forwards: 2 * l,
                });
                prev_eps = Some(out.eps.clone());
                Ok(out.eps)
            }
        }
    })?;
    let executed = trace.iter().map(|r| r.block_forwards).sum();
    Ok(GenerationResult {
        final_latent,
        trace,
        compute_ledger: ComputeLedger {
            executed,
            baseline: 2 * l * schedule.total_steps() as u64,
        },
    })
}
