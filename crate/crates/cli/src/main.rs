use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mixcache_cli::commands::{cmd_ablate, cmd_generate, cmd_profile, cmd_report, profile_summary};
use mixcache_cli::config::{parse_interval_mode, preset, RunConfig};

#[derive(Parser)]
#[command(name = "mixcache", version, about = "Step / cfg / block caching for a toy diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Offline profiling: redundancy trace, noise parameters, impacts.
    Profile(RunArgs),
    /// Generate with the configured controller, optionally against a baseline.
    Generate(RunArgs),
    /// Run the five-arm granularity ablation.
    Ablate(RunArgs),
    /// Summarize a trace file and write plot-ready series.
    Report {
        trace: PathBuf,
        /// Defaults to `<trace stem>_report` next to the trace.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON). Defaults to the toy-default preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// toy-default, paper-wan, paper-hunyuan or paper-cogvideox.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run only this noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Pair each cached run with an uncached one.
    #[arg(long)]
    baseline: bool,
    /// accuracy or efficiency.
    #[arg(long)]
    mode: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), name) => {
                let mut cfg = RunConfig::load(path)?;
                if let Some(name) = name {
                    cfg.apply_preset(name)?;
                }
                cfg
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => preset("toy-default")?,
        };
        if let Some(seed) = self.seed {
            cfg.seeds.noise = vec![seed];
        }
        if self.baseline {
            cfg.baseline = true;
        }
        if let Some(m) = &self.mode {
            cfg.set_interval_mode(parse_interval_mode(m)?)?;
        }
        cfg.validate()?;
        let out = self.output.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::Profile(args) => {
            let (cfg, out) = args.resolve()?;
            let p = cmd_profile(&cfg, &out)?;
            print!("{}", profile_summary(&p.artifact));
            println!("wrote {} and {}", p.artifact_path.display(), p.trace_path.display());
        }
        Command::Generate(args) => {
            let (cfg, out) = args.resolve()?;
            for run in cmd_generate(&cfg, &out)? {
                println!("seed {}", run.seed);
                print!("{}", run.report.summary());
            }
            println!("wrote {}", out.display());
        }
        Command::Ablate(args) => {
            let (cfg, out) = args.resolve()?;
            let runs = cmd_ablate(&cfg, &out)?;
            println!("{:<11} {:>5} {:>8} {:>10} {:>9}", "arm", "seed", "skip", "psnr", "ssim");
            for r in &runs {
                println!(
                    "{:<11} {:>5} {:>8.4} {:>10.3} {:>9.6}",
                    r.arm.name,
                    r.seed,
                    r.report.skip_fraction,
                    r.report.psnr.unwrap_or(f64::NAN),
                    r.report.ssim.unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", out.join("ablation.tsv").display());
        }
        Command::Report { trace, output } => {
            let out = output.unwrap_or_else(|| {
                let stem = trace.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
                trace.with_file_name(format!("{stem}_report"))
            });
            let r = cmd_report(&trace, &out)?;
            print!("{}", r.report.summary());
            println!("wrote {} and {}", r.series_path.display(), r.distribution_path.display());
        }
    }
    println!("wall clock {:.2?}", start.elapsed());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
