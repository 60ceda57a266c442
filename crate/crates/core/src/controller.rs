//! The MixCache controller.
//!
//! A generation starts in a warm-up phase of fully computed steps. Once the
//! step-level distance `D_step` between consecutive guided noise predictions
//! drops below `theta`, the controller switches to the cache-enabled phase:
//! a full step every `N` steps, cached steps in between. `N` is rescaled at
//! each full step from the distance between consecutive full outputs. The
//! granularity of every cached step (step, cfg or block `i`) is the argmin of
//! `P = D * I` over the candidates, where `I` is the profiled accuracy impact
//! and the mode used on the current step has its `P` multiplied by `penalty`.
//!
//! Distances that cannot be refreshed on a cached step (nothing was computed
//! for them) keep their last known value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dit::ToyDiT;
use crate::error::{Error, Result};
use crate::sampler::{cfg_combine, full_dual_forward, DiffusionSchedule, GuidanceConfig};
use crate::tensor::{relative_l1, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMode {
    Accuracy,
    Efficiency,
}

impl IntervalMode {
    /// Intervals for the low / middle / high `D_full` bands.
    pub fn bands(self) -> [usize; 3] {
        match self {
            IntervalMode::Accuracy => [4, 3, 2],
            IntervalMode::Efficiency => [5, 4, 3],
        }
    }

    pub fn initial_interval(self) -> usize {
        self.bands()[0]
    }
}

/// Granularity used for one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CacheMode {
    Full,
    Step,
    Cfg,
    Block(usize),
}

impl CacheMode {
    /// Block forwards executed by a step in this mode.
    pub fn cost(self, num_blocks: usize) -> u64 {
        let l = num_blocks as u64;
        match self {
            CacheMode::Full => 2 * l,
            CacheMode::Step => 0,
            CacheMode::Cfg => l,
            CacheMode::Block(i) => l - i as u64 - 1,
        }
    }

    pub fn key(self) -> Option<ModeKey> {
        match self {
            CacheMode::Full => None,
            CacheMode::Step => Some(ModeKey::Step),
            CacheMode::Cfg => Some(ModeKey::Cfg),
            CacheMode::Block(i) => Some(ModeKey::Block(i)),
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheMode::Full => f.write_str("full"),
            CacheMode::Step => f.write_str("step"),
            CacheMode::Cfg => f.write_str("cfg"),
            CacheMode::Block(i) => write!(f, "block_{i}"),
        }
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CacheMode::Full),
            other => ModeKey::from_str(other).map(ModeKey::mode),
        }
    }
}

impl Serialize for CacheMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CacheMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A cached granularity; indexes `D` and `P` values. Ordering is the
/// tie-break order of [`select_mode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModeKey {
    Step,
    Cfg,
    Block(usize),
}

impl ModeKey {
    pub fn mode(self) -> CacheMode {
        match self {
            ModeKey::Step => CacheMode::Step,
            ModeKey::Cfg => CacheMode::Cfg,
            ModeKey::Block(i) => CacheMode::Block(i),
        }
    }
}

impl fmt::Display for ModeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.mode().fmt(f)
    }
}

impl FromStr for ModeKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(ModeKey::Step),
            "cfg" => Ok(ModeKey::Cfg),
            other => other
                .strip_prefix("block_")
                .and_then(|i| i.parse().ok())
                .map(ModeKey::Block)
                .ok_or_else(|| Error::Format(format!("unknown cache mode {other:?}"))),
        }
    }
}

/// Which granularities `select_mode` may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllowedModes {
    pub step: bool,
    pub cfg: bool,
    pub block: bool,
}

impl Default for AllowedModes {
    fn default() -> Self {
        Self {
            step: true,
            cfg: true,
            block: true,
        }
    }
}

impl AllowedModes {
    pub fn only_step() -> Self {
        Self { step: true, cfg: false, block: false }
    }

    pub fn only_cfg() -> Self {
        Self { step: false, cfg: true, block: false }
    }

    pub fn only_block() -> Self {
        Self { step: false, cfg: false, block: true }
    }

    fn any(&self) -> bool {
        self.step || self.cfg || self.block
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub theta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub interval_mode: IntervalMode,
    #[serde(default = "default_penalty")]
    pub penalty: f64,
    pub block_candidates: Vec<usize>,
    pub guidance_scale: f64,
    #[serde(default)]
    pub allowed_modes: AllowedModes,
    /// Pins `N` instead of rescaling it from `D_full`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_interval: Option<usize>,
}

fn default_penalty() -> f64 {
    5.0
}

/// Candidates at 25%, 50% and 75% depth.
pub fn default_block_candidates(num_blocks: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [1, 2, 3]
        .iter()
        .map(|q| q * num_blocks / 4)
        .filter(|&i| i + 1 < num_blocks)
        .collect();
    v.dedup();
    v
}

impl ControllerConfig {
    pub fn new(
        theta: f64,
        delta1: f64,
        delta2: f64,
        interval_mode: IntervalMode,
        block_candidates: Vec<usize>,
        guidance_scale: f64,
    ) -> Self {
        Self {
            theta,
            delta1,
            delta2,
            interval_mode,
            penalty: default_penalty(),
            block_candidates,
            guidance_scale,
            allowed_modes: AllowedModes::default(),
            fixed_interval: None,
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.theta.is_nan() {
            return Err(Error::InvalidConfig("theta is NaN".into()));
        }
        if !(self.delta1 > 0.0 && self.delta1 < self.delta2) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < delta1 < delta2, got {} and {}",
                self.delta1, self.delta2
            )));
        }
        if !(self.penalty >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "penalty must be >= 1, got {}",
                self.penalty
            )));
        }
        if self.block_candidates.is_empty() {
            return Err(Error::InvalidConfig("block_candidates is empty".into()));
        }
        if self.block_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "block_candidates must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = self.block_candidates.iter().find(|&&i| i + 1 >= num_blocks) {
            return Err(Error::InvalidConfig(format!(
                "block candidate {bad} leaves no suffix to execute in a {num_blocks}-block model"
            )));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidConfig("guidance_scale must be >= 0".into()));
        }
        if !self.allowed_modes.any() {
            return Err(Error::InvalidConfig("no cache mode allowed".into()));
        }
        if self.fixed_interval == Some(0) {
            return Err(Error::InvalidConfig("fixed_interval must be positive".into()));
        }
        Ok(())
    }

    fn initial_interval(&self) -> usize {
        self.fixed_interval
            .unwrap_or_else(|| self.interval_mode.initial_interval())
    }

    /// Candidate keys in tie-break order.
    pub fn candidate_keys(&self) -> Vec<ModeKey> {
        let mut keys = Vec::new();
        if self.allowed_modes.step {
            keys.push(ModeKey::Step);
        }
        if self.allowed_modes.cfg {
            keys.push(ModeKey::Cfg);
        }
        if self.allowed_modes.block {
            keys.extend(self.block_candidates.iter().map(|&i| ModeKey::Block(i)));
        }
        keys
    }
}

/// Offline-profiled perturbation statistics and accuracy impacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileArtifact {
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub impact_step: f64,
    pub impact_cfg: f64,
    /// Per candidate block, one impact per sampling index.
    pub impact_block: BTreeMap<usize, Vec<f64>>,
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_thresholds: Option<Thresholds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub theta: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl ProfileArtifact {
    /// A profile with time-constant impacts, for tests and hand-built setups.
    pub fn uniform(
        candidates: &[usize],
        steps: usize,
        impact_step: f64,
        impact_cfg: f64,
        impact_block: f64,
    ) -> Self {
        Self {
            mu_hat: 0.0,
            sigma_hat: 0.0,
            impact_step,
            impact_cfg,
            impact_block: candidates
                .iter()
                .map(|&i| (i, vec![impact_block; steps]))
                .collect(),
            provenance: "uniform".into(),
            suggested_thresholds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.mu_hat.is_finite() || !finite_nonneg(self.sigma_hat) {
            return Err(Error::Format("profile noise parameters invalid".into()));
        }
        if !finite_nonneg(self.impact_step) || !finite_nonneg(self.impact_cfg) {
            return Err(Error::Format("profile impacts must be finite and >= 0".into()));
        }
        let mut len = None;
        for (i, series) in &self.impact_block {
            if series.is_empty() || !series.iter().all(|&v| finite_nonneg(v)) {
                return Err(Error::Format(format!("impact series for block {i} invalid")));
            }
            if *len.get_or_insert(series.len()) != series.len() {
                return Err(Error::Format("impact series lengths differ".into()));
            }
        }
        Ok(())
    }

    pub fn covers(&self, candidates: &[usize]) -> Result<()> {
        for i in candidates {
            if !self.impact_block.contains_key(i) {
                return Err(Error::Missing(format!("profile impact for block {i}")));
            }
        }
        Ok(())
    }

    /// `I_block_i` at `step_index` of a `total_steps` run. Profiles built for
    /// another step count are looked up at the nearest rescaled index.
    pub fn block_impact(&self, block: usize, step_index: usize, total_steps: usize) -> Result<f64> {
        let series = self
            .impact_block
            .get(&block)
            .ok_or_else(|| Error::Missing(format!("profile impact for block {block}")))?;
        let n = series.len();
        let idx = if n == total_steps || total_steps <= 1 {
            step_index.min(n - 1)
        } else {
            let pos = step_index as f64 * (n - 1) as f64 / (total_steps - 1) as f64;
            (pos.round() as usize).min(n - 1)
        };
        Ok(series[idx])
    }

    pub fn impact(&self, key: ModeKey, step_index: usize, total_steps: usize) -> Result<f64> {
        match key {
            ModeKey::Step => Ok(self.impact_step),
            ModeKey::Cfg => Ok(self.impact_cfg),
            ModeKey::Block(i) => self.block_impact(i, step_index, total_steps),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmUp,
    CacheEnabled,
}

/// Per-timestep record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepTrace {
    pub step_index: usize,
    pub mode: CacheMode,
    /// Phase after this step.
    pub phase: Phase,
    /// Distances refreshed on this step.
    pub d_values: BTreeMap<String, f64>,
    /// Keys whose distance was carried over unchanged.
    #[serde(default)]
    pub stale: Vec<String>,
    /// Selection scores computed after this step (cache-enabled phase only).
    #[serde(default)]
    pub p_values: BTreeMap<String, f64>,
    #[serde(default)]
    pub d_full: Option<f64>,
    /// Cache interval after this step; `None` without a controller.
    #[serde(default)]
    pub n_after: Option<usize>,
    #[serde(default)]
    pub cnt_after: usize,
    pub block_forwards: u64,
}

#[derive(Debug, Clone)]
pub struct CacheState {
    pub phase: Phase,
    pub cnt: usize,
    pub interval: usize,
    pub last_full_output: Option<Tensor>,
    pub prev_step_output: Option<Tensor>,
    pub delta_cfg: Option<Tensor>,
    pub block_cache: BTreeMap<usize, Tensor>,
    pub last_d: BTreeMap<ModeKey, f64>,
    pub last_mode: CacheMode,
    pub next_mode: CacheMode,
    steps_taken: usize,
}

impl CacheState {
    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }
}

pub fn init_state(config: &ControllerConfig, profile: &ProfileArtifact) -> Result<CacheState> {
    profile.validate()?;
    profile.covers(&config.block_candidates)?;
    if config.block_candidates.is_empty() {
        return Err(Error::InvalidConfig("block_candidates is empty".into()));
    }
    Ok(CacheState {
        phase: Phase::WarmUp,
        cnt: 0,
        interval: config.initial_interval(),
        last_full_output: None,
        prev_step_output: None,
        delta_cfg: None,
        block_cache: BTreeMap::new(),
        last_d: BTreeMap::new(),
        last_mode: CacheMode::Full,
        next_mode: CacheMode::Full,
        steps_taken: 0,
    })
}

/// Interval from the distance between consecutive full outputs.
pub fn scale_interval(d_full: f64, config: &ControllerConfig) -> usize {
    let [low, mid, high] = config.interval_mode.bands();
    if d_full < config.delta1 {
        low
    } else if d_full < config.delta2 {
        mid
    } else {
        high
    }
}

#[allow(non_snake_case)]
pub fn compute_P(d: f64, impact: f64, penalized: bool, penalty: f64) -> f64 {
    let p = d * impact;
    if penalized {
        p * penalty
    } else {
        p
    }
}

/// Selection scores for every allowed candidate; the entry matching
/// `last_mode` carries the penalty.
pub fn score_modes(
    last_d: &BTreeMap<ModeKey, f64>,
    profile: &ProfileArtifact,
    step_index: usize,
    total_steps: usize,
    last_mode: CacheMode,
    config: &ControllerConfig,
) -> Result<BTreeMap<ModeKey, f64>> {
    let mut scores = BTreeMap::new();
    for key in config.candidate_keys() {
        let d = *last_d
            .get(&key)
            .ok_or_else(|| Error::Missing(format!("distance for {key}")))?;
        let impact = profile.impact(key, step_index, total_steps)?;
        let penalized = last_mode.key() == Some(key);
        scores.insert(key, compute_P(d, impact, penalized, config.penalty));
    }
    Ok(scores)
}

fn argmin(scores: &BTreeMap<ModeKey, f64>) -> Result<CacheMode> {
    let mut best: Option<(ModeKey, f64)> = None;
    for (&k, &p) in scores {
        if best.is_none_or(|(_, b)| p < b) {
            best = Some((k, p));
        }
    }
    best.map(|(k, _)| k.mode())
        .ok_or_else(|| Error::InvalidConfig("no candidate modes".into()))
}

/// Greedy choice of the next cached granularity: smallest `P`, ties going to
/// step, then cfg, then the shallowest block.
pub fn select_mode(
    last_d: &BTreeMap<ModeKey, f64>,
    profile: &ProfileArtifact,
    step_index: usize,
    total_steps: usize,
    last_mode: CacheMode,
    config: &ControllerConfig,
) -> Result<CacheMode> {
    argmin(&score_modes(last_d, profile, step_index, total_steps, last_mode, config)?)
}

/// Outcome of one step's computation before bookkeeping.
struct Computed {
    eps: Tensor,
    fresh: BTreeMap<ModeKey, f64>,
    d_full: Option<f64>,
}

fn distance_to_prev(state: &CacheState, eps: &Tensor) -> Result<Option<f64>> {
    state
        .prev_step_output
        .as_ref()
        .map(|p| relative_l1(eps, p))
        .transpose()
}

/// Block distances for freshly captured activations; refreshes the cache.
fn refresh_blocks(
    state: &mut CacheState,
    captured: BTreeMap<usize, Tensor>,
    fresh: &mut BTreeMap<ModeKey, f64>,
) -> Result<()> {
    for (i, act) in captured {
        if let Some(prev) = state.block_cache.get(&i) {
            fresh.insert(ModeKey::Block(i), relative_l1(&act, prev)?);
        }
        state.block_cache.insert(i, act);
    }
    Ok(())
}

fn run_full(
    state: &mut CacheState,
    model: &ToyDiT,
    guidance: &GuidanceConfig,
    x_t: &Tensor,
    t: usize,
    config: &ControllerConfig,
) -> Result<Computed> {
    let out = full_dual_forward(model, x_t, t, guidance, &config.block_candidates)?;
    let mut fresh = BTreeMap::new();
    if let Some(d) = distance_to_prev(state, &out.eps)? {
        fresh.insert(ModeKey::Step, d);
    }
    fresh.insert(ModeKey::Cfg, relative_l1(&out.uncond, &out.cond)?);
    refresh_blocks(state, out.captured, &mut fresh)?;
    state.delta_cfg = Some(out.uncond.sub(&out.cond)?);
    let d_full = state
        .last_full_output
        .as_ref()
        .map(|p| relative_l1(&out.eps, p))
        .transpose()?;
    state.last_full_output = Some(out.eps.clone());
    Ok(Computed {
        eps: out.eps,
        fresh,
        d_full,
    })
}

fn run_cached(
    state: &mut CacheState,
    mode: CacheMode,
    model: &ToyDiT,
    guidance: &GuidanceConfig,
    x_t: &Tensor,
    t: usize,
    config: &ControllerConfig,
) -> Result<Computed> {
    let mut fresh = BTreeMap::new();
    let eps = match mode {
        CacheMode::Step => state
            .prev_step_output
            .clone()
            .ok_or_else(|| Error::Missing("previous output for step cache".into()))?,
        CacheMode::Cfg | CacheMode::Block(_) => {
            let delta = state
                .delta_cfg
                .clone()
                .ok_or_else(|| Error::Missing("cfg residual".into()))?;
            let cond = match mode {
                CacheMode::Block(i) => {
                    let input = state
                        .block_cache
                        .get(&i)
                        .ok_or_else(|| Error::Missing(format!("cached activation of block {i}")))?;
                    let capture: Vec<usize> = config
                        .block_candidates
                        .iter()
                        .copied()
                        .filter(|&j| j > i)
                        .collect();
                    model.forward(input, t, guidance.cond(), i + 1, &capture)?
                }
                _ => model.forward(x_t, t, guidance.cond(), 0, &config.block_candidates)?,
            };
            refresh_blocks(state, cond.captured, &mut fresh)?;
            let uncond = cond.eps.add(&delta)?;
            cfg_combine(&cond.eps, &uncond, guidance.scale())?
        }
        CacheMode::Full => unreachable!("full steps go through run_full"),
    };
    if mode != CacheMode::Step {
        if let Some(d) = distance_to_prev(state, &eps)? {
            fresh.insert(ModeKey::Step, d);
        }
    }
    Ok(Computed {
        eps,
        fresh,
        d_full: None,
    })
}

/// One timestep of the controller.
#[allow(clippy::too_many_arguments)]
pub fn step(
    state: &mut CacheState,
    model: &ToyDiT,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    x_t: &Tensor,
    step_index: usize,
    profile: &ProfileArtifact,
    config: &ControllerConfig,
) -> Result<(Tensor, TimestepTrace)> {
    let total = schedule.total_steps();
    let t = schedule.timestep(step_index)?;
    if step_index != state.steps_taken {
        return Err(Error::InvalidArgument(format!(
            "expected step index {}, got {step_index}",
            state.steps_taken
        )));
    }
    let l = model.num_blocks();

    let mode = match state.phase {
        Phase::WarmUp => CacheMode::Full,
        Phase::CacheEnabled => {
            state.cnt = (state.cnt + 1) % state.interval;
            if state.cnt == 0 {
                CacheMode::Full
            } else {
                state.next_mode
            }
        }
    };

    let computed = if mode == CacheMode::Full {
        run_full(state, model, guidance, x_t, t, config)?
    } else {
        run_cached(state, mode, model, guidance, x_t, t, config)?
    };

    let was_enabled = state.phase == Phase::CacheEnabled;
    if mode == CacheMode::Full && was_enabled {
        if let Some(d_full) = computed.d_full {
            state.interval = config
                .fixed_interval
                .unwrap_or_else(|| scale_interval(d_full, config));
        }
    }
    for (&k, &d) in &computed.fresh {
        state.last_d.insert(k, d);
    }
    let stale: Vec<String> = state
        .last_d
        .keys()
        .filter(|k| !computed.fresh.contains_key(k))
        .map(|k| k.to_string())
        .collect();

    if !was_enabled {
        if let Some(&d_step) = computed.fresh.get(&ModeKey::Step) {
            if d_step < config.theta {
                state.phase = Phase::CacheEnabled;
                state.cnt = 0;
                state.interval = config.initial_interval();
            }
        }
    }

    state.last_mode = mode;
    let mut p_values = BTreeMap::new();
    if state.phase == Phase::CacheEnabled {
        let scores = score_modes(&state.last_d, profile, step_index, total, mode, config)?;
        state.next_mode = argmin(&scores)?;
        p_values = scores.into_iter().map(|(k, p)| (k.to_string(), p)).collect();
    }

    state.prev_step_output = Some(computed.eps.clone());
    state.steps_taken += 1;

    let rec = TimestepTrace {
        step_index,
        mode,
        phase: state.phase,
        d_values: computed
            .fresh
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        stale,
        p_values,
        d_full: if was_enabled { computed.d_full } else { None },
        n_after: Some(state.interval),
        cnt_after: state.cnt,
        block_forwards: mode.cost(l),
    };
    Ok((computed.eps, rec))
}

/// Controller bound to its configuration and profile for one generation.
#[derive(Debug, Clone)]
pub struct MixCache {
    config: ControllerConfig,
    profile: ProfileArtifact,
    state: CacheState,
}

impl MixCache {
    pub fn new(config: ControllerConfig, profile: ProfileArtifact) -> Result<Self> {
        let state = init_state(&config, &profile)?;
        Ok(Self {
            config,
            profile,
            state,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn profile(&self) -> &ProfileArtifact {
        &self.profile
    }

    pub fn state(&self) -> &CacheState {
        &self.state
    }

    /// Mutable access for constructing specific cache contents in tests.
    pub fn state_mut(&mut self) -> &mut CacheState {
        &mut self.state
    }

    pub fn reset(&mut self) -> Result<()> {
        self.state = init_state(&self.config, &self.profile)?;
        Ok(())
    }

    pub fn step(
        &mut self,
        model: &ToyDiT,
        schedule: &DiffusionSchedule,
        guidance: &GuidanceConfig,
        x_t: &Tensor,
        step_index: usize,
    ) -> Result<(Tensor, TimestepTrace)> {
        step(
            &mut self.state,
            model,
            schedule,
            guidance,
            x_t,
            step_index,
            &self.profile,
            &self.config,
        )
    }
}

/// Line-delimited JSON, one record per timestep.
pub fn write_trace_jsonl(trace: &[TimestepTrace]) -> Result<String> {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<TimestepTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("trace line {}: {e}", n + 1)))
        })
        .collect()
}
