//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use mixcache::controller::{scale_interval, CacheMode, ModeKey, Phase, ProfileArtifact, TimestepTrace};
use mixcache::profiler::{
    collect_redundancy, estimate_noise_params, measure_impacts, ProfilingConfig, RedundancyRecord,
    RedundancyTrace,
};
use mixcache::sampler::{cfg_combine, generate, phi_step, GuidanceConfig};
use mixcache::tensor::gaussian_like;
use mixcache::{ControllerConfig, GenerationResult, IntervalMode, MixCache, ModelConfig, ToyDiT};
use mixcache_cli::commands::{arm_config, cmd_ablate, ablation_arms};
use mixcache_cli::toy_default;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)*));
        }
    };
}

struct Ctx {
    dir: tempfile::TempDir,
    profile: Option<(ProfileArtifact, PathBuf)>,
    /// Every end-to-end generation of the suite, for the ledger check.
    runs: Vec<(String, GenerationResult)>,
}

impl Ctx {
    fn profile(&mut self) -> (ProfileArtifact, PathBuf) {
        if self.profile.is_none() {
            let (p, _, path) = toy_profile(&self.dir.path().join("profile"));
            self.profile = Some((p, path));
        }
        self.profile.clone().unwrap()
    }

    fn record(&mut self, label: impl Into<String>, r: &GenerationResult) {
        self.runs.push((label.into(), r.clone()));
    }
}

// 1. Interval policy table.

fn criterion_1(_: &mut Ctx) -> Outcome {
    let (d1, d2) = (0.05, 0.1);
    let below = |x: f64| f64::from_bits(x.to_bits() - 1);
    let above = |x: f64| f64::from_bits(x.to_bits() + 1);
    let grid = [0.0, 0.02, below(d1), d1, 0.075, below(d2), d2, above(d2), 0.5];
    let expected = [
        (IntervalMode::Accuracy, [4, 4, 4, 3, 3, 3, 2, 2, 2]),
        (IntervalMode::Efficiency, [5, 5, 5, 4, 4, 4, 3, 3, 3]),
    ];
    for (mode, want) in expected {
        let cfg = ControllerConfig::new(0.1, d1, d2, mode, vec![3], 3.0);
        for (d, w) in grid.iter().zip(want) {
            let got = scale_interval(*d, &cfg);
            ensure!(got == w, "{mode:?} D_full={d}: got {got}, want {w}");
        }
    }
    Ok("18/18 grid points".into())
}

// 2. Dual-implementation oracle for the controller state machine.

/// Straight transcription of the runtime loop, driven by the distances the
/// real controller recorded. Checks the mode, interval, counter and the set
/// of freshly computed distances at every step.
fn reference_replay(
    trace: &[TimestepTrace],
    profile: &ProfileArtifact,
    theta: f64,
    delta1: f64,
    delta2: f64,
    accuracy: bool,
    candidates: &[usize],
) -> Result<(), String> {
    let total = trace.len();
    let interval_for = |d: f64| -> usize {
        let (hi, mid, lo) = if accuracy { (4, 3, 2) } else { (5, 4, 3) };
        if d < delta1 {
            hi
        } else if d < delta2 {
            mid
        } else {
            lo
        }
    };
    let mut warm = true;
    let mut cnt = 0usize;
    let mut n = if accuracy { 4 } else { 5 };
    let mut d: BTreeMap<String, f64> = BTreeMap::new();
    let mut next = String::new();

    for (s, rec) in trace.iter().enumerate() {
        let mode = if warm {
            "full".to_string()
        } else {
            cnt = (cnt + 1) % n;
            if cnt == 0 {
                "full".to_string()
            } else {
                next.clone()
            }
        };
        if rec.mode.to_string() != mode {
            return Err(format!("step {s}: mode {} vs reference {mode}", rec.mode));
        }

        let mut fresh: BTreeSet<String> = BTreeSet::new();
        let all_blocks = candidates.iter().map(|i| format!("block_{i}"));
        if mode == "full" {
            fresh.insert("cfg".into());
            if s > 0 {
                fresh.insert("step".into());
                fresh.extend(all_blocks);
            }
        } else if mode == "cfg" {
            fresh.insert("step".into());
            fresh.extend(all_blocks);
        } else if let Some(i) = mode.strip_prefix("block_") {
            let i: usize = i.parse().unwrap();
            fresh.insert("step".into());
            fresh.extend(candidates.iter().filter(|&&j| j > i).map(|j| format!("block_{j}")));
        }
        let recorded: BTreeSet<String> = rec.d_values.keys().cloned().collect();
        if recorded != fresh {
            return Err(format!("step {s}: fresh {recorded:?} vs reference {fresh:?}"));
        }
        for (k, v) in &rec.d_values {
            d.insert(k.clone(), *v);
        }

        if !warm && mode == "full" {
            let df = rec.d_full.ok_or(format!("step {s}: full step without D_full"))?;
            n = interval_for(df);
        }
        if warm {
            if let Some(&ds) = rec.d_values.get("step") {
                if ds < theta {
                    warm = false;
                    cnt = 0;
                    n = if accuracy { 4 } else { 5 };
                }
            }
        }
        if !warm {
            let mut keys = vec!["step".to_string(), "cfg".to_string()];
            keys.extend(candidates.iter().map(|i| format!("block_{i}")));
            let mut best: Option<(String, f64)> = None;
            for k in keys {
                let impact = match k.as_str() {
                    "step" => profile.impact_step,
                    "cfg" => profile.impact_cfg,
                    b => {
                        let i: usize = b[6..].parse().unwrap();
                        let series = &profile.impact_block[&i];
                        series[s * (series.len() - 1) / (total - 1)]
                    }
                };
                let mut p = d[&k] * impact;
                if k == mode {
                    p *= 5.0;
                }
                if rec.p_values.get(&k) != Some(&p) {
                    return Err(format!("step {s}: P[{k}] {:?} vs reference {p}", rec.p_values.get(&k)));
                }
                if best.as_ref().is_none_or(|(_, b)| p < *b) {
                    best = Some((k, p));
                }
            }
            next = best.unwrap().0;
        }

        let phase = if warm { Phase::WarmUp } else { Phase::CacheEnabled };
        if rec.phase != phase || rec.n_after != Some(n) || rec.cnt_after != cnt {
            return Err(format!(
                "step {s}: phase/N/cnt {:?}/{:?}/{} vs reference {phase:?}/{n}/{cnt}",
                rec.phase, rec.n_after, rec.cnt_after
            ));
        }
    }
    Ok(())
}

fn criterion_2(ctx: &mut Ctx) -> Outcome {
    let (profile, _) = ctx.profile();
    let schedule = toy_default().schedule.build().unwrap();
    let candidates = vec![3, 6, 9];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut enabled_steps = 0;
    for k in 0..25 {
        let model_seed: u64 = rng.gen_range(0..1000);
        let noise_seed: u64 = rng.gen();
        let theta = rng.gen_range(0.02..0.4);
        let delta1 = rng.gen_range(0.0005..0.05);
        let delta2 = delta1 + rng.gen_range(0.0005..0.2);
        let accuracy = rng.gen_bool(0.5);
        let mode = if accuracy { IntervalMode::Accuracy } else { IntervalMode::Efficiency };

        let model = ToyDiT::new(ModelConfig { init_seed: model_seed, ..ModelConfig::toy_default() }).unwrap();
        let g = GuidanceConfig::for_prompt(3.0, 32, noise_seed % 7).unwrap();
        let cfg = ControllerConfig::new(theta, delta1, delta2, mode, candidates.clone(), 3.0);
        let mut mc = MixCache::new(cfg, profile.clone()).unwrap();
        let res = generate(&model, &schedule, &g, Some(&mut mc), noise_seed).unwrap();
        reference_replay(&res.trace, &profile, theta, delta1, delta2, accuracy, &candidates)
            .map_err(|e| format!("config {k} (model {model_seed}, theta {theta:.3}): {e}"))?;
        enabled_steps += res.trace.iter().filter(|r| r.phase == Phase::CacheEnabled).count();
        ctx.record(format!("oracle config {k}"), &res);
    }
    Ok(format!("25 configs, {enabled_steps} cache-enabled steps matched"))
}

// 3. Cache application exactness.

fn forced_controller(
    model: &ToyDiT,
    profile: &ProfileArtifact,
    g: &GuidanceConfig,
    seed: u64,
    k: usize,
) -> (MixCache, mixcache::Tensor) {
    let schedule = toy_default().schedule.build().unwrap();
    let cfg = ControllerConfig::new(-1.0, 0.05, 0.1, IntervalMode::Efficiency, vec![3, 6, 9], g.scale());
    let mut mc = MixCache::new(cfg, profile.clone()).unwrap();
    let mut x = gaussian_like(&model.config().latent_shape(), 0.0, 1.0, seed).unwrap();
    for s in 0..k {
        let (eps, _) = mc.step(model, &schedule, g, &x, s).unwrap();
        x = phi_step(&schedule, &x, schedule.timestep(s).unwrap(), &eps).unwrap();
    }
    let st = mc.state_mut();
    st.phase = Phase::CacheEnabled;
    st.cnt = 0;
    st.interval = 5;
    (mc, x)
}

fn criterion_3(_: &mut Ctx) -> Outcome {
    let profile = ProfileArtifact::uniform(&[3, 6, 9], 50, 1e-5, 3e-5, 1e-4);
    let model = ToyDiT::new(ModelConfig::toy_default()).unwrap();
    let schedule = toy_default().schedule.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..10u64 {
        let k = rng.gen_range(1..50);
        let t = schedule.timestep(k).unwrap();

        let g = GuidanceConfig::for_prompt(3.0, 32, trial).unwrap();
        let (mut mc, x) = forced_controller(&model, &profile, &g, trial, k);
        mc.state_mut().next_mode = CacheMode::Step;
        let prev = mc.state().prev_step_output.clone().unwrap();
        let (eps, rec) = mc.step(&model, &schedule, &g, &x, k).unwrap();
        ensure!(rec.mode == CacheMode::Step && rec.block_forwards == 0, "(a) step {k}: {:?}", rec.mode);
        ensure!(eps.bitwise_eq(&prev), "(a) step {k}: output differs from previous");

        let g0 = GuidanceConfig::for_prompt(0.0, 32, trial).unwrap();
        let (mut mc, x) = forced_controller(&model, &profile, &g0, trial, k);
        mc.state_mut().next_mode = CacheMode::Cfg;
        let (eps, _) = mc.step(&model, &schedule, &g0, &x, k).unwrap();
        let cond = model.forward(&x, t, g0.cond(), 0, &[]).unwrap().eps;
        ensure!(eps.bitwise_eq(&cond), "(b) step {k}: differs from conditional output");

        let i = [3, 6, 9][trial as usize % 3];
        let (mut mc, x) = forced_controller(&model, &profile, &g, trial, k);
        let truth = model.forward(&x, t, g.cond(), 0, &[i]).unwrap();
        let delta = mc.state().delta_cfg.clone().unwrap();
        mc.state_mut().next_mode = CacheMode::Block(i);
        mc.state_mut().block_cache.insert(i, truth.captured[&i].clone());
        let (eps, _) = mc.step(&model, &schedule, &g, &x, k).unwrap();
        let want = cfg_combine(&truth.eps, &truth.eps.add(&delta).unwrap(), 3.0).unwrap();
        ensure!(eps.bitwise_eq(&want), "(c) step {k} block {i}: differs from full conditional");
    }
    Ok("10 steps each for step, cfg (g=0) and block caches".into())
}

// 4. Compute-ledger conservation.

fn independent_cost(mode: &CacheMode, l: u64) -> u64 {
    match mode {
        CacheMode::Full => l + l,
        CacheMode::Step => 0,
        CacheMode::Cfg => l,
        CacheMode::Block(i) => l - (*i as u64 + 1),
    }
}

fn criterion_4(ctx: &mut Ctx) -> Outcome {
    ensure!(!ctx.runs.is_empty(), "no end-to-end runs recorded");
    for (label, r) in &ctx.runs {
        let l = 12;
        let sum: u64 = r.trace.iter().map(|t| independent_cost(&t.mode, l)).sum();
        ensure!(r.compute_ledger.executed == sum, "{label}: ledger {} vs trace {sum}", r.compute_ledger.executed);
        ensure!(r.compute_ledger.baseline == 2 * l * r.trace.len() as u64, "{label}: baseline {}", r.compute_ledger.baseline);
    }
    Ok(format!("{} runs", ctx.runs.len()))
}

// 5. Desk-scale quality and efficiency.

fn criterion_5(ctx: &mut Ctx) -> Outcome {
    let (_, profile_path) = ctx.profile();
    let floor = load_calibration().psnr_floor_db;
    let eff = paired_runs(&profile_path, IntervalMode::Efficiency, &ctx.dir.path().join("c5/eff"));
    let acc = paired_runs(&profile_path, IntervalMode::Accuracy, &ctx.dir.path().join("c5/acc"));
    let mut good = 0;
    let mut lines = Vec::new();
    for (e, a) in eff.iter().zip(&acc) {
        let (ep, ap) = (e.report.psnr.unwrap(), a.report.psnr.unwrap());
        ensure!(e.report.skip_fraction >= 0.30, "seed {}: efficiency skip {:.4} < 0.30", e.seed, e.report.skip_fraction);
        ensure!(ep >= floor, "seed {}: efficiency PSNR {ep:.3} below floor {floor}", e.seed);
        ensure!(e.report.timeline[..2] == [CacheMode::Full, CacheMode::Full], "seed {}: no warm-up prefix", e.seed);
        if a.report.skip_fraction <= e.report.skip_fraction && ap >= ep {
            good += 1;
        }
        lines.push(format!(
            "s{} eff {:.3}/{:.1}dB acc {:.3}/{:.1}dB",
            e.seed, e.report.skip_fraction, ep, a.report.skip_fraction, ap
        ));
    }
    for r in eff.iter().chain(&acc) {
        ctx.record(format!("toy seed {}", r.seed), &r.result);
        ctx.record(format!("toy baseline {}", r.seed), r.baseline.as_ref().unwrap());
    }
    ensure!(good >= 4, "accuracy dominated efficiency on only {good}/5 seeds: {}", lines.join("; "));
    Ok(format!("floor {floor} dB, accuracy ordering {good}/5; {}", lines.join("; ")))
}

// 6. Ablation ordering.

fn criterion_6(ctx: &mut Ctx) -> Outcome {
    let (_, profile_path) = ctx.profile();
    let cfg = toy_config(&profile_path, IntervalMode::Efficiency);
    let runs = cmd_ablate(&cfg, &ctx.dir.path().join("c6")).map_err(|e| e.to_string())?;
    let base = cfg.controller.as_ref().unwrap();
    let mut by: BTreeMap<(&str, u64), f64> = BTreeMap::new();
    for r in &runs {
        let c = arm_config(base, &r.arm);
        for t in &r.result.trace {
            if let Some(k) = t.mode.key() {
                let allowed = match k {
                    ModeKey::Step => c.allowed_modes.step,
                    ModeKey::Cfg => c.allowed_modes.cfg,
                    ModeKey::Block(_) => c.allowed_modes.block,
                };
                ensure!(allowed, "{} seed {}: emitted {}", r.arm.name, r.seed, t.mode);
            }
            if r.arm.fixed_interval == Some(4) {
                ensure!(t.n_after == Some(4), "hybrid_n4 seed {}: N {:?}", r.seed, t.n_after);
            }
        }
        by.insert((r.arm.name, r.seed), r.report.skip_fraction);
        ctx.record(format!("ablation {} {}", r.arm.name, r.seed), &r.result);
    }
    for seed in SEEDS {
        let cfg_only = by[&("cfg_only", seed)];
        ensure!(by[&("mixcache", seed)] > cfg_only, "seed {seed}: mixcache skip not above cfg_only");
        ensure!(by[&("hybrid_n4", seed)] > cfg_only, "seed {seed}: hybrid_n4 skip not above cfg_only");
        ensure!(by[&("block_only", seed)] > cfg_only, "seed {seed}: block_only skip not above cfg_only");
    }
    let mean = |arm: &str| SEEDS.iter().map(|s| by[&(arm, *s)]).sum::<f64>() / 5.0;
    Ok(ablation_arms()
        .iter()
        .map(|a| format!("{} {:.3}", a.name, mean(a.name)))
        .collect::<Vec<_>>()
        .join(", "))
}

// 7. Profiling statistics.

fn record(step: usize, mu: f64, sigma: f64) -> RedundancyRecord {
    RedundancyRecord {
        prompt_id: 0,
        step,
        d_step: Some(0.1),
        d_cfg: 0.1,
        d_block: BTreeMap::new(),
        mu: Some(mu),
        sigma: Some(sigma),
        d_full: None,
    }
}

fn criterion_7(ctx: &mut Ctx) -> Outcome {
    let pc = ProfilingConfig::default();
    let constant = RedundancyTrace {
        total_steps: 50,
        records: (0..50).map(|s| record(s, 0.25, 0.5)).collect(),
    };
    let (mu, sigma) = estimate_noise_params(&constant, &pc).map_err(|e| e.to_string())?;
    ensure!(mu == 0.25 && sigma == 0.5, "constant fixture gave ({mu}, {sigma})");

    // sigma_s = s; the window covers steps 10..50, whose mean is 29.5.
    let arithmetic = RedundancyTrace {
        total_steps: 50,
        records: (0..50).map(|s| record(s, 0.0, s as f64)).collect(),
    };
    let (_, sigma) = estimate_noise_params(&arithmetic, &pc).map_err(|e| e.to_string())?;
    ensure!(sigma == 29.5, "arithmetic fixture gave sigma {sigma}");

    let model = ToyDiT::new(ModelConfig::toy_default()).unwrap();
    let schedule = toy_default().schedule.build().unwrap();
    let one = ProfilingConfig { num_prompts: 1, ..ProfilingConfig::default() };
    let zero = measure_impacts(&model, &schedule, 3.0, 0.0, 0.0, &one).map_err(|e| e.to_string())?;
    ensure!(zero.impact_step == 0.0 && zero.impact_cfg == 0.0, "nonzero impact at sigma = mu = 0");
    ensure!(zero.impact_block.values().flatten().all(|&v| v == 0.0), "nonzero block impact at sigma = mu = 0");
    let g0 = measure_impacts(&model, &schedule, 0.0, 0.0, 0.1, &one).map_err(|e| e.to_string())?;
    ensure!(g0.impact_cfg == 0.0, "impact_cfg {} at g = 0", g0.impact_cfg);
    ensure!(g0.impact_step > 0.0, "step impact vanished at g = 0");

    let (toy, _) = ctx.profile();
    ensure!(
        toy.impact_cfg > toy.impact_step,
        "toy profile impact_cfg {} not above impact_step {}",
        toy.impact_cfg,
        toy.impact_step
    );
    Ok("constant and arithmetic fixtures exact; zero-noise and g=0 impacts are 0; toy I_cfg > I_step".into())
}

// 8. Redundancy shape.

fn criterion_8(_: &mut Ctx) -> Outcome {
    let model = ToyDiT::new(ModelConfig::toy_default()).unwrap();
    let schedule = toy_default().schedule.build().unwrap();
    let pc = ProfilingConfig::default();
    ensure!(pc.seeds().len() == 5, "expected 5 prompt seeds");
    let trace = collect_redundancy(&model, &schedule, 3.0, &pc).map_err(|e| e.to_string())?;
    let series: Vec<(usize, f64)> = trace
        .mean_d_step_series()
        .into_iter()
        .enumerate()
        .filter_map(|(s, v)| v.map(|v| (s, v)))
        .collect();
    let t = trace.total_steps;
    let mean = |pred: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = series.iter().filter(|(s, _)| pred(*s)).map(|(_, v)| *v).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let lead = mean(&|s| s < t / 4);
    let trail = mean(&|s| s >= t / 2);
    ensure!(trail < lead, "trailing-half mean {trail:.4} not below leading-quarter mean {lead:.4}");
    Ok(format!("leading quarter {lead:.4}, trailing half {trail:.5}"))
}

// 9. Determinism of every command.

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mixcache")
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn run_fails(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() || out.status.code().is_none() {
        return Err(format!("{args:?} exited {:?}, expected failure", out.status.code()));
    }
    Ok(())
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(ctx: &mut Ctx) -> Outcome {
    let root = ctx.dir.path().join("c9");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    for side in ["a", "b"] {
        let d = root.join(side);
        run_ok(&["profile", "--output", &s(&d.join("profile"))])?;
        let mut cfg = toy_config(&d.join("profile/profile.json"), IntervalMode::Efficiency);
        cfg.seeds.noise = vec![0, 1];
        cfg.output_dir = d.join("unused");
        let cfg_path = d.join("config.json");
        std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();
        run_ok(&["generate", "--config", &s(&cfg_path), "--output", &s(&d.join("gen"))])?;
        run_ok(&["ablate", "--config", &s(&cfg_path), "--seed", "0", "--output", &s(&d.join("ablate"))])?;
        run_ok(&["report", &s(&d.join("gen/seed_0/trace.jsonl")), "--output", &s(&d.join("report"))])?;
    }
    let (fa, fb) = (files(&root.join("a")), files(&root.join("b")));
    ensure!(fa.len() > 20, "only {} artifacts written", fa.len());
    let keys_a: BTreeSet<_> = fa.keys().filter(|k| !k.ends_with("config.json")).collect();
    let keys_b: BTreeSet<_> = fb.keys().filter(|k| !k.ends_with("config.json")).collect();
    ensure!(keys_a == keys_b, "artifact sets differ");
    for k in keys_a {
        ensure!(fa[k] == fb[k], "{} differs between reruns", k.display());
    }

    // Documented error paths exit nonzero.
    let bad = root.join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    let mut zero = toy_default();
    zero.profiling.num_prompts = 0;
    std::fs::write(bad.join("zero.json"), serde_json::to_string(&zero).unwrap()).unwrap();
    let mut missing = toy_default();
    missing.profile = mixcache_cli::ProfileSource::Path(bad.join("nope.json"));
    std::fs::write(bad.join("missing.json"), serde_json::to_string(&missing).unwrap()).unwrap();
    std::fs::write(bad.join("trace.jsonl"), "{\"step_index\": 0}\n").unwrap();
    run_fails(&["profile", "--config", &s(&bad.join("absent.json"))])?;
    run_fails(&["profile", "--config", &s(&bad.join("zero.json")), "--output", &s(&bad)])?;
    run_fails(&["generate", "--config", &s(&bad.join("missing.json")), "--output", &s(&bad)])?;
    run_fails(&["report", &s(&bad.join("trace.jsonl")), "--output", &s(&bad)])?;
    run_fails(&["generate", "--preset", "paper-sora", "--output", &s(&bad)])?;
    Ok(format!("{} artifacts byte-identical across reruns; 5 error paths exit nonzero", fb.len() - 1))
}

// 10. Property suites.

fn criterion_10(_: &mut Ctx) -> Outcome {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let out = Command::new(cargo)
        .args(["test", "--offline", "-p", "mixcache", "-p", "mixcache-cli", "--lib", "--bins"])
        .args(["--test", "dit_composition", "--test", "controller_invariants", "--test", "profiler_invariants"])
        .args(["--test", "pipeline", "--test", "calibration", "--test", "cli"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let mut passed = 0;
    for line in text.lines().filter(|l| l.starts_with("test result:")) {
        if let Some(n) = line.split_whitespace().nth(3) {
            passed += n.parse::<usize>().unwrap_or(0);
        }
    }
    ensure!(out.status.success(), "property suites failed:\n{}{}", text, String::from_utf8_lossy(&out.stderr));
    Ok(format!("{passed} tests passed"))
}

fn main() {
    let mut ctx = Ctx {
        dir: tempfile::tempdir().expect("tempdir"),
        profile: None,
        runs: Vec::new(),
    };
    let start = Instant::now();
    ctx.profile();
    println!("setup: toy-default profile in {:.1?}", start.elapsed());
    type Criterion = fn(&mut Ctx) -> Outcome;
    // Ledger conservation runs last among the in-process checks so that it
    // sees every generation of the suite.
    let plan: [(u32, &str, Criterion, u64); 10] = [
        (1, "policy table exactness", criterion_1, 1),
        (7, "profiling statistics", criterion_7, 60),
        (3, "cache-application exactness", criterion_3, 30),
        (5, "desk-scale quality/efficiency", criterion_5, 300),
        (2, "controller oracle equivalence", criterion_2, 120),
        (6, "ablation ordering", criterion_6, 300),
        (8, "redundancy shape", criterion_8, 120),
        (4, "compute-ledger conservation", criterion_4, 60),
        (9, "determinism", criterion_9, 300),
        (10, "property suites", criterion_10, 600),
    ];
    let mut results = Vec::new();
    for (id, name, f, limit) in plan {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panic".into())));
        let elapsed = start.elapsed();
        let limit = Duration::from_secs(limit);
        let outcome = match outcome {
            Ok(d) if elapsed >= limit => Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
            o => o,
        };
        results.push((id, name, outcome, elapsed));
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, outcome, elapsed) in &results {
        match outcome {
            Ok(d) => println!("PASS criterion {id:>2} {name}: {d} [{elapsed:.1?}]"),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {e} [{elapsed:.1?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
