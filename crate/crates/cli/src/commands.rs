//! The four subcommands as library functions. Each writes its artifacts
//! under the given output directory and returns what it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixcache::controller::{write_trace_jsonl, read_trace_jsonl, AllowedModes, ProfileArtifact};
use mixcache::profiler::{run_profile, RedundancyTrace};
use mixcache::sampler::{generate, DiffusionSchedule, GuidanceConfig};
use mixcache::{CacheMode, ControllerConfig, GenerationResult, IntervalMode, MixCache, ToyDiT};
use serde::Serialize;

use crate::config::{ProfileSource, RunConfig};
use crate::report::{distribution_tsv, series_tsv, Report};

pub struct Setup {
    pub model: ToyDiT,
    pub schedule: DiffusionSchedule,
    pub guidance: GuidanceConfig,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let model = ToyDiT::new(cfg.model.clone())?;
    let schedule = cfg.schedule.build()?;
    let guidance = GuidanceConfig::for_prompt(cfg.guidance_scale, cfg.model.cond_dim, cfg.seeds.prompt)?;
    Ok(Setup {
        model,
        schedule,
        guidance,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn load_profile(cfg: &RunConfig, setup: &Setup) -> Result<ProfileArtifact> {
    match &cfg.profile {
        ProfileSource::Path(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading profile {}", p.display()))?;
            ProfileArtifact::from_json(&text).with_context(|| format!("parsing profile {}", p.display()))
        }
        ProfileSource::Builtin => {
            Ok(run_profile(&setup.model, &setup.schedule, cfg.guidance_scale, &cfg.profiling)?.0)
        }
    }
}

pub struct ProfileOutput {
    pub artifact: ProfileArtifact,
    pub trace: RedundancyTrace,
    pub artifact_path: PathBuf,
    pub trace_path: PathBuf,
}

pub fn cmd_profile(cfg: &RunConfig, out: &Path) -> Result<ProfileOutput> {
    let s = setup(cfg)?;
    let (artifact, trace) = run_profile(&s.model, &s.schedule, cfg.guidance_scale, &cfg.profiling)?;
    let artifact_path = out.join("profile.json");
    let trace_path = out.join("redundancy.jsonl");
    write(&artifact_path, artifact.to_json()? + "\n")?;
    write(&trace_path, trace.to_jsonl()?)?;
    Ok(ProfileOutput {
        artifact,
        trace,
        artifact_path,
        trace_path,
    })
}

pub fn profile_summary(p: &ProfileArtifact) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mu_hat {:.6e}  sigma_hat {:.6e}", p.mu_hat, p.sigma_hat);
    if let Some(t) = &p.suggested_thresholds {
        let _ = writeln!(
            s,
            "suggested theta {:.4}  delta1 {:.4}  delta2 {:.4}",
            t.theta, t.delta1, t.delta2
        );
    }
    let _ = writeln!(s, "impact step {:.4e}  cfg {:.4e}", p.impact_step, p.impact_cfg);
    for (i, series) in &p.impact_block {
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let _ = writeln!(
            s,
            "impact block_{i} mean {:.4e}  first {:.4e}  last {:.4e}",
            mean,
            series[0],
            series[series.len() - 1]
        );
    }
    s
}

pub struct SeedRun {
    pub seed: u64,
    pub result: GenerationResult,
    pub baseline: Option<GenerationResult>,
    pub report: Report,
}

fn run_seed(
    s: &Setup,
    controller: Option<(&ControllerConfig, &ProfileArtifact)>,
    seed: u64,
    baseline: Option<&GenerationResult>,
) -> Result<(GenerationResult, Report)> {
    let result = match controller {
        Some((c, p)) => {
            let mut mc = MixCache::new(c.clone(), p.clone())?;
            generate(&s.model, &s.schedule, &s.guidance, Some(&mut mc), seed)?
        }
        None => generate(&s.model, &s.schedule, &s.guidance, None, seed)?,
    };
    let mut report = Report::from_trace(&result.trace)?;
    if let Some(b) = baseline {
        report = report.with_quality(&result.final_latent, &b.final_latent)?;
    }
    Ok((result, report))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<SeedRun>> {
    let s = setup(cfg)?;
    let profile = match &cfg.controller {
        Some(_) => Some(load_profile(cfg, &s)?),
        None => None,
    };
    let ctl = cfg.controller.as_ref().zip(profile.as_ref());
    let mut runs = Vec::new();
    let mut table = String::from("seed\tskip_fraction\texecuted\tbaseline\tpsnr\tssim\tfull\tstep\tcfg\tblock\n");
    for &seed in &cfg.seeds.noise {
        let dir = out.join(format!("seed_{seed}"));
        let baseline = match (&ctl, cfg.baseline) {
            (Some(_), true) => Some(generate(&s.model, &s.schedule, &s.guidance, None, seed)?),
            _ => None,
        };
        let (result, report) = run_seed(&s, ctl, seed, baseline.as_ref())?;
        write(&dir.join("latent.mxt"), result.final_latent.to_bytes())?;
        write(&dir.join("trace.jsonl"), write_trace_jsonl(&result.trace)?)?;
        write(&dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        if let Some(b) = &baseline {
            write(&dir.join("baseline_latent.mxt"), b.final_latent.to_bytes())?;
            write(&dir.join("baseline_trace.jsonl"), write_trace_jsonl(&b.trace)?)?;
        }
        let _ = writeln!(table, "{seed}\t{}", report_row(&report));
        runs.push(SeedRun {
            seed,
            result,
            baseline,
            report,
        });
    }
    write(&out.join("reports.tsv"), table)?;
    Ok(runs)
}

fn report_row(r: &Report) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let block: usize = r
        .mode_counts
        .iter()
        .filter(|(k, _)| k.starts_with("block_"))
        .map(|(_, n)| n)
        .sum();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.skip_fraction,
        r.executed,
        r.baseline,
        opt(r.psnr),
        opt(r.ssim),
        r.count(CacheMode::Full),
        r.count(CacheMode::Step),
        r.count(CacheMode::Cfg),
        block
    )
}

/// One arm of the granularity ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Arm {
    pub name: &'static str,
    pub allowed: AllowedModes,
    pub interval_mode: IntervalMode,
    pub fixed_interval: Option<usize>,
}

pub fn ablation_arms() -> [Arm; 5] {
    let arm = |name, allowed, fixed_interval| Arm {
        name,
        allowed,
        interval_mode: IntervalMode::Efficiency,
        fixed_interval,
    };
    [
        arm("hybrid_n4", AllowedModes::default(), Some(4)),
        arm("step_only", AllowedModes::only_step(), None),
        arm("cfg_only", AllowedModes::only_cfg(), None),
        arm("block_only", AllowedModes::only_block(), None),
        arm("mixcache", AllowedModes::default(), None),
    ]
}

pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub result: GenerationResult,
    pub report: Report,
}

pub fn arm_config(base: &ControllerConfig, arm: &Arm) -> ControllerConfig {
    ControllerConfig {
        allowed_modes: arm.allowed,
        interval_mode: arm.interval_mode,
        fixed_interval: arm.fixed_interval,
        ..base.clone()
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<ArmRun>> {
    let base = cfg
        .controller
        .as_ref()
        .context("ablate needs a controller section")?;
    let s = setup(cfg)?;
    let profile = load_profile(cfg, &s)?;
    let arms = ablation_arms();
    let mut runs = Vec::new();
    let mut table = String::from("arm\tseed\tskip_fraction\texecuted\tbaseline\tpsnr\tssim\tfull\tstep\tcfg\tblock\n");
    for &seed in &cfg.seeds.noise {
        let baseline = generate(&s.model, &s.schedule, &s.guidance, None, seed)?;
        for arm in &arms {
            let c = arm_config(base, arm);
            let (result, report) = run_seed(&s, Some((&c, &profile)), seed, Some(&baseline))?;
            write(
                &out.join("ablation").join(arm.name).join(format!("seed_{seed}.jsonl")),
                write_trace_jsonl(&result.trace)?,
            )?;
            let _ = writeln!(table, "{}\t{seed}\t{}", arm.name, report_row(&report));
            runs.push(ArmRun {
                arm: *arm,
                seed,
                result,
                report,
            });
        }
    }
    let mut summary = String::from("arm\tmean_skip_fraction\tmean_psnr\tmean_ssim\n");
    for arm in &arms {
        let rs: Vec<&Report> = runs.iter().filter(|r| r.arm.name == arm.name).map(|r| &r.report).collect();
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&Report) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            summary,
            "{}\t{}\t{}\t{}",
            arm.name,
            mean(&|r| r.skip_fraction),
            mean(&|r| r.psnr.unwrap_or(f64::NAN)),
            mean(&|r| r.ssim.unwrap_or(f64::NAN))
        );
    }
    write(&out.join("ablation.tsv"), table)?;
    write(&out.join("ablation_summary.tsv"), summary)?;
    Ok(runs)
}

pub struct TraceReport {
    pub report: Report,
    pub series_path: PathBuf,
    pub distribution_path: PathBuf,
}

pub fn cmd_report(trace_path: &Path, out: &Path) -> Result<TraceReport> {
    let text = fs::read_to_string(trace_path)
        .with_context(|| format!("reading trace {}", trace_path.display()))?;
    let trace = read_trace_jsonl(&text).with_context(|| format!("parsing trace {}", trace_path.display()))?;
    let report = Report::from_trace(&trace)?;
    let series_path = out.join("series.tsv");
    let distribution_path = out.join("distribution.tsv");
    write(&series_path, series_tsv(&trace))?;
    write(&distribution_path, distribution_tsv(&report))?;
    write(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(TraceReport {
        report,
        series_path,
        distribution_path,
    })
}
