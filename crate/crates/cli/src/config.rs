//! Run configuration: a single JSON document, plus the named presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mixcache::controller::default_block_candidates;
use mixcache::profiler::{preset_thresholds, ProfilingConfig};
use mixcache::sampler::ScheduleConfig;
use mixcache::{ControllerConfig, IntervalMode, ModelConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PRESETS: [&str; 4] = ["toy-default", "paper-wan", "paper-hunyuan", "paper-cogvideox"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub guidance_scale: f64,
    /// `"none"` runs every step uncached.
    #[serde(with = "controller_field")]
    pub controller: Option<ControllerConfig>,
    #[serde(default)]
    pub profile: ProfileSource,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub profiling: ProfilingConfig,
    /// Pair every cached run with an uncached one on the same seeds.
    #[serde(default)]
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// One generation per noise seed.
    pub noise: Vec<u64>,
    pub prompt: u64,
}

/// Where the runtime profile comes from: a file written by `profile`, or
/// `"builtin"` to profile in-process with the `profiling` section.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ProfileSource {
    #[default]
    Builtin,
    Path(PathBuf),
}

impl fmt::Display for ProfileSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileSource::Builtin => f.write_str("builtin"),
            ProfileSource::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for ProfileSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProfileSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "builtin" {
            ProfileSource::Builtin
        } else {
            ProfileSource::Path(PathBuf::from(s))
        })
    }
}

mod controller_field {
    use mixcache::ControllerConfig;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Tag(String),
        Config(ControllerConfig),
    }

    pub fn serialize<S: Serializer>(v: &Option<ControllerConfig>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => c.serialize(s),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ControllerConfig>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Tag(t) if t == "none" => Ok(None),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!(
                "controller must be an object or \"none\", got {t:?}"
            ))),
            Repr::Config(c) => Ok(Some(c)),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        if self.guidance_scale.is_nan() || self.guidance_scale < 0.0 {
            bail!("guidance_scale must be >= 0, got {}", self.guidance_scale);
        }
        if let Some(c) = &self.controller {
            c.validate(self.model.num_blocks)?;
            if c.guidance_scale != self.guidance_scale {
                bail!(
                    "controller guidance_scale {} differs from run guidance_scale {}",
                    c.guidance_scale,
                    self.guidance_scale
                );
            }
        }
        if self.seeds.noise.is_empty() {
            bail!("seeds.noise is empty");
        }
        self.profiling.validate()?;
        Ok(())
    }

    /// Pins the thresholds of a published preset, or replaces everything with
    /// the toy preset.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        if name == "toy-default" {
            *self = toy_default();
            return Ok(());
        }
        let th = preset_thresholds(name)
            .with_context(|| format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))?;
        let c = self
            .controller
            .as_mut()
            .context("preset thresholds need a controller section")?;
        c.theta = th.theta;
        c.delta1 = th.delta1;
        c.delta2 = th.delta2;
        Ok(())
    }

    pub fn set_interval_mode(&mut self, mode: IntervalMode) -> Result<()> {
        self.controller
            .as_mut()
            .context("--mode needs a controller section")?
            .interval_mode = mode;
        Ok(())
    }
}

/// Desk-scale model (12 blocks, hidden 64, 64 tokens), 50 steps, g = 3 and
/// candidates at blocks 3/6/9, with the Wan/Hunyuan thresholds.
pub fn toy_default() -> RunConfig {
    let model = ModelConfig::toy_default();
    let g = 3.0;
    let th = preset_thresholds("paper-wan").expect("known preset");
    let controller = ControllerConfig::new(
        th.theta,
        th.delta1,
        th.delta2,
        IntervalMode::Efficiency,
        default_block_candidates(model.num_blocks),
        g,
    );
    RunConfig {
        model,
        schedule: ScheduleConfig::default(),
        guidance_scale: g,
        controller: Some(controller),
        profile: ProfileSource::Builtin,
        seeds: Seeds {
            noise: vec![0, 1, 2, 3, 4],
            prompt: 0,
        },
        output_dir: PathBuf::from("out"),
        profiling: ProfilingConfig::default(),
        baseline: true,
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let mut cfg = toy_default();
    cfg.apply_preset(name)?;
    Ok(cfg)
}

/// `accuracy` / `efficiency` as accepted on the command line.
pub fn parse_interval_mode(s: &str) -> Result<IntervalMode> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| anyhow::anyhow!("unknown interval mode {s:?}"))
}

impl FromStr for RunConfig {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
