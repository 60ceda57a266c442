#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mixcache::controller::ProfileArtifact;
use mixcache::profiler::RedundancyTrace;
use mixcache::IntervalMode;
use mixcache_cli::commands::{cmd_generate, cmd_profile, SeedRun};
use mixcache_cli::{toy_default, ProfileSource, RunConfig};
use serde::{Deserialize, Serialize};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/calibration.json")
}

/// PSNR floor for the toy-default Efficiency runs, pinned from a calibration
/// run and checked in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub efficiency_psnr_db: Vec<f64>,
    pub efficiency_skip_fraction: Vec<f64>,
    pub psnr_floor_db: f64,
    pub rule: String,
}

pub const FLOOR_RULE: &str = "minimum calibration PSNR rounded down to a whole dB, minus 1 dB";

pub fn floor_from(psnrs: &[f64]) -> f64 {
    psnrs.iter().copied().fold(f64::INFINITY, f64::min).floor() - 1.0
}

pub fn load_calibration() -> Calibration {
    let text = std::fs::read_to_string(fixture_path()).expect("calibration fixture");
    serde_json::from_str(&text).expect("calibration fixture parses")
}

/// Profiles the toy-default preset once, writing it under `dir`.
pub fn toy_profile(dir: &Path) -> (ProfileArtifact, RedundancyTrace, PathBuf) {
    let out = cmd_profile(&toy_default(), dir).expect("toy profile");
    (out.artifact, out.trace, out.artifact_path)
}

pub fn toy_config(profile: &Path, mode: IntervalMode) -> RunConfig {
    let mut cfg = toy_default();
    cfg.profile = ProfileSource::Path(profile.to_path_buf());
    cfg.seeds.noise = SEEDS.to_vec();
    cfg.baseline = true;
    cfg.set_interval_mode(mode).unwrap();
    cfg
}

pub fn paired_runs(profile: &Path, mode: IntervalMode, out: &Path) -> Vec<SeedRun> {
    cmd_generate(&toy_config(profile, mode), out).expect("generate")
}
