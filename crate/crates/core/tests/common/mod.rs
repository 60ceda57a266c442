#![allow(dead_code)]

use mixcache::controller::{default_block_candidates, ProfileArtifact};
use mixcache::sampler::{build_schedule, phi_step, DiffusionSchedule, GuidanceConfig};
use mixcache::{ControllerConfig, IntervalMode, MixCache, ModelConfig, Tensor, ToyDiT};

pub fn toy_model() -> ToyDiT {
    ToyDiT::new(ModelConfig::toy_default()).unwrap()
}

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_blocks: 6,
        hidden_dim: 16,
        seq_len: 8,
        cond_dim: 8,
        latent_channels: 4,
        init_seed: seed,
    }
}

pub fn schedule(steps: usize) -> DiffusionSchedule {
    build_schedule(steps, 2e-3, 0.4).unwrap()
}

/// Impacts shaped like a real toy profile: cfg above step, block impacts
/// decaying over time.
pub fn synthetic_profile(candidates: &[usize], steps: usize) -> ProfileArtifact {
    let mut p = ProfileArtifact::uniform(candidates, steps, 1e-5, 3e-5, 0.0);
    for (k, series) in p.impact_block.iter_mut() {
        for (s, v) in series.iter_mut().enumerate() {
            *v = 2e-3 * (1.0 + *k as f64 * 0.05) / (1.0 + s as f64);
        }
    }
    p
}

pub fn controller(model: &ToyDiT, theta: f64, mode: IntervalMode, g: f64, steps: usize) -> MixCache {
    let candidates = default_block_candidates(model.num_blocks());
    let config = ControllerConfig::new(theta, 0.05, 0.1, mode, candidates.clone(), g);
    MixCache::new(config, synthetic_profile(&candidates, steps)).unwrap()
}

/// Advances the controller over `steps` reverse steps from `x`, returning
/// the latent that enters the next step.
pub fn advance(
    mc: &mut MixCache,
    model: &ToyDiT,
    sched: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    mut x: Tensor,
    steps: usize,
) -> Tensor {
    let start = mc.state().steps_taken();
    for s in start..start + steps {
        let (eps, _) = mc.step(model, sched, guidance, &x, s).unwrap();
        x = phi_step(sched, &x, sched.timestep(s).unwrap(), &eps).unwrap();
    }
    x
}
