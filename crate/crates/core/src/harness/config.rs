//! Experiment configuration: a TOML file with flat sections.
//!
//! ```toml
//! [experiment]
//! name = "grid15"
//! map = "grid15"          # bundled map name, or a path relative to this file
//! true_goal = 2
//! agents = ["honest", "am", "naive", "demp"]
//! episodes = 100
//! n_seeds = 10
//!
//! [meta]
//! m = 2
//! ```
//!
//! Every key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{AmConfig, CloneConfig, LearnerConfig};
use crate::demp::MetaConfig;
use crate::gridworld::{bundled, GridMap};
use crate::metrics::LdpRule;
use crate::observers::{Optimizer, PrefixRule, PretrainSpec, PretrainTarget, UpdateTarget};
use crate::protocol::{AgentKind, ObserverKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {message}")]
    Parse { file: String, message: String },
    #[error("{file}{}: `{key}` {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        file: String,
        line: Option<usize>,
        key: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub map: String,
    pub true_goal: usize,
    pub agents: Vec<AgentKind>,
    pub observer: ObserverKind,
    pub episodes: usize,
    pub n_seeds: usize,
    pub seed: u64,
    pub prefix_low: f64,
    pub prefix_high: f64,
    pub n_waypoints: usize,
    pub ldp_rule: LdpRule,
    /// Extra checkpoint period in episodes; 0 keeps only pirate snapshots
    /// and the final episode.
    pub checkpoint_every: usize,
    /// Output root; the `--out` flag and `RDPP_OUT` take precedence.
    pub out: Option<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "rdpp".into(),
            map: "grid15".into(),
            true_goal: 0,
            agents: AgentKind::ALL.to_vec(),
            observer: ObserverKind::Learnable,
            episodes: 400,
            n_seeds: 1,
            seed: 0,
            prefix_low: 0.4,
            prefix_high: 0.6,
            n_waypoints: 8,
            ldp_rule: LdpRule::Argmax,
            checkpoint_every: 0,
            out: None,
        }
    }
}

/// Where the learning agents' policy starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyInit {
    /// Behaviour cloning of AM demonstrations.
    Am,
    /// Behaviour cloning of the shortest path.
    Honest,
    /// Random initialization, no cloning.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub hidden: usize,
    pub init: PolicyInit,
    pub demos: usize,
    pub clone_epochs: usize,
    pub clone_batch: usize,
    pub clone_lr: f64,
    /// AM detour allowance as a fraction of the optimal length.
    pub detour: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let c = CloneConfig::default();
        Self {
            hidden: 64,
            init: PolicyInit::Am,
            demos: 32,
            clone_epochs: c.epochs,
            clone_batch: c.batch,
            clone_lr: c.lr,
            detour: AmConfig::default().detour,
        }
    }
}

impl PolicySection {
    pub fn clone_config(&self) -> CloneConfig {
        CloneConfig {
            epochs: self.clone_epochs,
            batch: self.clone_batch,
            lr: self.clone_lr,
        }
    }

    pub fn am_config(&self) -> AmConfig {
        AmConfig { detour: self.detour }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateTargetName {
    AllPrefixes,
    FullTrajectory,
}

impl From<UpdateTargetName> for UpdateTarget {
    fn from(v: UpdateTargetName) -> Self {
        match v {
            UpdateTargetName::AllPrefixes => UpdateTarget::AllPrefixes,
            UpdateTargetName::FullTrajectory => UpdateTarget::FullTrajectory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverSection {
    pub hidden: usize,
    pub eta: f64,
    pub update: UpdateTargetName,
    /// Pretrained checkpoint; defaults to the output of `rdpp pretrain`.
    pub checkpoint: Option<String>,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self {
            hidden: 64,
            eta: 0.01,
            update: UpdateTargetName::AllPrefixes,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub n_trajectories: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub target: PretrainTarget,
    pub prefix_low: f64,
    pub prefix_high: f64,
    pub holdout_fraction: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let s = PretrainSpec::default();
        Self {
            n_trajectories: s.n_trajectories,
            epochs: s.epochs,
            batch: s.batch,
            lr: s.lr,
            optimizer: s.optimizer,
            target: s.target,
            prefix_low: s.prefix.low(),
            prefix_high: s.prefix.high(),
            holdout_fraction: s.holdout_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PirateSection {
    pub trials: usize,
    pub snapshots: Vec<usize>,
}

impl Default for PirateSection {
    fn default() -> Self {
        Self {
            trials: 100,
            snapshots: vec![50, 200, 400],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub policy: PolicySection,
    pub learner: LearnerConfig,
    pub meta: MetaConfig,
    pub observer: ObserverSection,
    pub pretrain: PretrainSection,
    pub pirate: PirateSection,
}

/// A parsed, validated configuration and where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    /// Hex SHA-256 of the file bytes.
    pub hash: String,
    pub map: GridMap,
}

impl LoadedConfig {
    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Line of the first `key =` assignment in `text`, 1-based.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(text: &str, file: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| format!(" (line {})", line_of(text, s.start)))
            .unwrap_or_default();
        ConfigError::Parse {
            file: file.to_string(),
            message: format!("{}{line}", e.message()),
        }
    })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let file = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
        file: file.clone(),
        source,
    })?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| ConfigError::Parse {
        file: file.clone(),
        message: "not valid UTF-8".into(),
    })?;
    let config = parse_config(&text, &file)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let map = validate(&config, &base, &text, &file)?;
    Ok(LoadedConfig {
        config,
        path: path.to_path_buf(),
        hash: sha256_hex(&bytes),
        map,
    })
}

/// Resolves a map reference: a bundled name, else a file relative to `base`.
pub fn resolve_map(reference: &str, base: &Path) -> Result<String, std::io::Error> {
    if let Some(text) = bundled::by_name(reference) {
        return Ok(text.to_string());
    }
    std::fs::read_to_string(base.join(reference))
}

/// Checks every numeric and structural invariant before any work starts.
/// Returns the map with its true goal applied.
pub fn validate(cfg: &ExperimentConfig, base: &Path, text: &str, file: &str) -> Result<GridMap, ConfigError> {
    let bad = |key: &str, message: String| ConfigError::Invalid {
        file: file.to_string(),
        line: key_line(text, key.rsplit('.').next().unwrap()),
        key: key.to_string(),
        message,
    };
    let e = &cfg.experiment;
    if e.name.is_empty() || e.name.contains(['/', '\\']) {
        return Err(bad("experiment.name", "must be a non-empty file name".into()));
    }
    let map_text = resolve_map(&e.map, base).map_err(|err| bad("experiment.map", format!("cannot be read: {err}")))?;
    let map = GridMap::parse(&map_text).map_err(|err| bad("experiment.map", format!("is invalid: {err}")))?;
    let map = map
        .with_true_goal(e.true_goal)
        .map_err(|err| bad("experiment.true_goal", err.to_string()))?;
    if e.agents.is_empty() {
        return Err(bad("experiment.agents", "must list at least one agent".into()));
    }
    let mut seen = e.agents.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != e.agents.len() {
        return Err(bad("experiment.agents", "lists an agent twice".into()));
    }
    if e.episodes == 0 {
        return Err(bad("experiment.episodes", "must be at least 1".into()));
    }
    if e.n_seeds == 0 {
        return Err(bad("experiment.n_seeds", "must be at least 1".into()));
    }
    PrefixRule::new(e.prefix_low, e.prefix_high).map_err(|_| {
        bad(
            "experiment.prefix_low",
            "and prefix_high need 0 < low <= high <= 1".into(),
        )
    })?;
    if e.n_waypoints < 2 {
        return Err(bad("experiment.n_waypoints", "must be at least 2".into()));
    }

    let p = &cfg.policy;
    if p.hidden == 0 {
        return Err(bad("policy.hidden", "must be positive".into()));
    }
    if p.init != PolicyInit::Random && p.demos == 0 {
        return Err(bad("policy.demos", "must be positive when cloning".into()));
    }
    if p.clone_batch == 0 {
        return Err(bad("policy.clone_batch", "must be positive".into()));
    }
    if !(p.clone_lr > 0.0 && p.clone_lr.is_finite()) {
        return Err(bad("policy.clone_lr", "must be positive".into()));
    }
    if !(p.detour >= 0.0 && p.detour.is_finite()) {
        return Err(bad("policy.detour", "must be non-negative".into()));
    }

    let l = &cfg.learner;
    if !(l.gamma > 0.0 && l.gamma <= 1.0) {
        return Err(bad("learner.gamma", "must be in (0, 1]".into()));
    }
    for (key, v) in [
        ("learner.alpha_lr", l.alpha_lr),
        ("learner.reward_scale", l.reward_scale),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(bad(key, "must be positive".into()));
        }
    }
    for (key, v) in [
        ("learner.critic_lr", l.critic_lr),
        ("learner.entropy_temp", l.entropy_temp),
        ("learner.lambda", l.lambda),
        ("learner.grad_clip", l.grad_clip),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(bad(key, "must be non-negative".into()));
        }
    }
    cfg.meta.validate().map_err(|err| bad("meta.m", err.to_string()))?;
    if !(cfg.meta.beta_lr > 0.0 && cfg.meta.beta_lr.is_finite()) {
        return Err(bad("meta.beta_lr", "must be positive".into()));
    }

    let o = &cfg.observer;
    if o.hidden == 0 {
        return Err(bad("observer.hidden", "must be positive".into()));
    }
    if !(o.eta >= 0.0 && o.eta.is_finite()) {
        return Err(bad("observer.eta", "must be non-negative".into()));
    }
    if let Some(c) = &o.checkpoint {
        if !base.join(c).is_file() {
            return Err(bad("observer.checkpoint", format!("{c} does not exist")));
        }
    }

    let t = &cfg.pretrain;
    if t.n_trajectories < 2 {
        return Err(bad("pretrain.n_trajectories", "must be at least 2".into()));
    }
    if t.batch == 0 {
        return Err(bad("pretrain.batch", "must be positive".into()));
    }
    if !(t.lr > 0.0 && t.lr.is_finite()) {
        return Err(bad("pretrain.lr", "must be positive".into()));
    }
    if !(t.holdout_fraction > 0.0 && t.holdout_fraction < 1.0) {
        return Err(bad("pretrain.holdout_fraction", "must be in (0, 1)".into()));
    }
    PrefixRule::new(t.prefix_low, t.prefix_high).map_err(|_| {
        bad(
            "pretrain.prefix_low",
            "and prefix_high need 0 < low <= high <= 1".into(),
        )
    })?;

    if let Some(s) = cfg.pirate.snapshots.iter().find(|s| **s == 0 || **s > e.episodes) {
        return Err(bad(
            "pirate.snapshots",
            format!("episode {s} is outside 1..={}", e.episodes),
        ));
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn prefix_rule(&self) -> PrefixRule {
        PrefixRule::new(self.experiment.prefix_low, self.experiment.prefix_high).expect("validated")
    }

    pub fn pretrain_spec(&self) -> PretrainSpec {
        let t = &self.pretrain;
        PretrainSpec {
            n_trajectories: t.n_trajectories,
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            optimizer: t.optimizer,
            target: t.target,
            prefix: PrefixRule::new(t.prefix_low, t.prefix_high).expect("validated"),
            holdout_fraction: t.holdout_fraction,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        let e = &self.experiment;
        (0..e.n_seeds as u64).map(|i| e.seed + i).collect()
    }

    /// Episodes after which checkpoints are written.
    pub fn checkpoint_episodes(&self) -> Vec<usize> {
        let k = self.experiment.episodes;
        let mut out: Vec<usize> = self.pirate.snapshots.clone();
        out.push(k);
        if self.experiment.checkpoint_every > 0 {
            out.extend((1..=k).filter(|e| e % self.experiment.checkpoint_every == 0));
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}
