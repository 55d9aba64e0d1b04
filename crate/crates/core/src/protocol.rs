//! The repeated interaction loop and the pirate pursuit scenario.
//!
//! Each episode: the agent plays a trajectory, the observer predicts the
//! goal from a sampled prefix, the agent is shown that posterior, and the
//! observer is shown the full trajectory with the true goal. Neither side
//! sees the other's parameters; the [`Agent`] and [`Observer`] traits only
//! carry trajectories and posteriors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    am_rollout, deceptive_reward, env_rewards, honest_rollout, naive_update, policy_rollout, AgentError, AgentParams,
    AmConfig, EpisodeBatch, EpisodeRecord, LearnerConfig, PolicySpec,
};
use crate::autodiff::ParamVector;
use crate::demp::{DempError, DempLearner};
use crate::gridworld::{Cell, GridMap, QTables, Trajectory};
use crate::observers::{sample_prefix, GoalPosterior, Observer, ObserverError, PrefixRule};
use crate::rng::{self, streams, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Honest,
    Am,
    Naive,
    Demp,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [Self::Honest, Self::Am, Self::Naive, Self::Demp];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Honest => "honest",
            Self::Am => "am",
            Self::Naive => "naive",
            Self::Demp => "demp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn learns(&self) -> bool {
        matches!(self, Self::Naive | Self::Demp)
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObserverKind {
    Boltzmann,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeFailure {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Demp(#[from] DempError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: EpisodeFailure,
    },
    #[error("pirate cannot reach every goal from {0:?}")]
    Unreachable(Cell),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// The agent side of the loop.
pub trait Agent {
    fn kind(&self) -> AgentKind;

    /// Plays one episode.
    fn act(&mut self, map: &GridMap, rng: &mut StreamRng) -> Result<Trajectory, EpisodeFailure>;

    /// Post-episode feedback: the posterior the observer assigned to the
    /// sampled prefix of `traj`. Returns the agent's loss when it learns.
    fn learn(
        &mut self,
        map: &GridMap,
        traj: &Trajectory,
        posterior: &GoalPosterior,
    ) -> Result<Option<f64>, EpisodeFailure>;

    /// Parameters of the policy the next episode will be played with.
    fn policy(&self) -> Option<ParamVector> {
        None
    }
}

#[derive(Debug, Clone, Default)]
pub struct HonestAgent;

impl Agent for HonestAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Honest
    }

    fn act(&mut self, map: &GridMap, _rng: &mut StreamRng) -> Result<Trajectory, EpisodeFailure> {
        Ok(honest_rollout(map)?)
    }

    fn learn(&mut self, _: &GridMap, _: &Trajectory, _: &GoalPosterior) -> Result<Option<f64>, EpisodeFailure> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct AmAgent {
    q: QTables,
    cfg: AmConfig,
}

impl AmAgent {
    pub fn new(q: QTables, cfg: AmConfig) -> Self {
        Self { q, cfg }
    }
}

impl Agent for AmAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Am
    }

    fn act(&mut self, map: &GridMap, rng: &mut StreamRng) -> Result<Trajectory, EpisodeFailure> {
        Ok(am_rollout(map, &self.q, &self.cfg, rng)?)
    }

    fn learn(&mut self, _: &GridMap, _: &Trajectory, _: &GoalPosterior) -> Result<Option<f64>, EpisodeFailure> {
        Ok(None)
    }
}

/// Episode-level policy gradient only.
#[derive(Debug, Clone)]
pub struct NaiveAgent {
    spec: PolicySpec,
    params: AgentParams,
    cfg: LearnerConfig,
}

impl NaiveAgent {
    pub fn new(spec: PolicySpec, params: AgentParams, cfg: LearnerConfig) -> Self {
        Self { spec, params, cfg }
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }
}

impl Agent for NaiveAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Naive
    }

    fn act(&mut self, map: &GridMap, rng: &mut StreamRng) -> Result<Trajectory, EpisodeFailure> {
        Ok(policy_rollout(&self.spec, &self.params.theta, map, rng, true))
    }

    fn learn(
        &mut self,
        map: &GridMap,
        traj: &Trajectory,
        posterior: &GoalPosterior,
    ) -> Result<Option<f64>, EpisodeFailure> {
        let batch = EpisodeBatch::new(map, traj, posterior, &self.cfg)?;
        let (params, loss) = naive_update(&self.spec, &self.params, &batch, &self.cfg)?;
        self.params = params;
        Ok(Some(loss))
    }

    fn policy(&self) -> Option<ParamVector> {
        Some(self.params.theta.clone())
    }
}

/// Episode-level adaptation inside blocks plus meta-updates of the block
/// initialization.
#[derive(Debug)]
pub struct DempAgent {
    learner: DempLearner,
}

impl DempAgent {
    pub fn new(learner: DempLearner) -> Self {
        Self { learner }
    }

    pub fn learner(&self) -> &DempLearner {
        &self.learner
    }
}

impl Agent for DempAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Demp
    }

    fn act(&mut self, map: &GridMap, rng: &mut StreamRng) -> Result<Trajectory, EpisodeFailure> {
        let theta = self.learner.current_theta();
        Ok(policy_rollout(self.learner.spec(), &theta, map, rng, true))
    }

    fn learn(
        &mut self,
        map: &GridMap,
        traj: &Trajectory,
        posterior: &GoalPosterior,
    ) -> Result<Option<f64>, EpisodeFailure> {
        Ok(Some(self.learner.learn(map, traj, posterior)?.loss()))
    }

    fn policy(&self) -> Option<ParamVector> {
        Some(self.learner.current_theta())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdppConfig {
    pub episodes: usize,
    pub prefix: PrefixRule,
    pub seed: u64,
}

impl RdppConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.episodes == 0 {
            return Err(ProtocolError::InvalidConfig("episodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs `cfg.episodes` interactions. `after` is called with each finished
/// record (episode indices start at 1) and sees both sides only through
/// their public snapshots, e.g. for checkpointing.
pub fn run_rdpp<A, O, F>(
    map: &GridMap,
    cfg: &RdppConfig,
    agent: &mut A,
    observer: &mut O,
    mut after: F,
) -> Result<Vec<EpisodeRecord>, ProtocolError>
where
    A: Agent + ?Sized,
    O: Observer + ?Sized,
    F: FnMut(&EpisodeRecord, &A, &O) -> Result<(), ProtocolError>,
{
    cfg.validate()?;
    if observer.goal_count() != map.goal_count() {
        return Err(ProtocolError::InvalidConfig(format!(
            "observer predicts {} goals, map has {}",
            observer.goal_count(),
            map.goal_count()
        )));
    }
    let mut play_rng = rng::stream(cfg.seed, streams::ROLLOUT);
    let mut prefix_rng = rng::stream(cfg.seed, streams::PREFIX);
    let goal = map.true_goal_index();
    let mut records = Vec::with_capacity(cfg.episodes);
    for episode in 1..=cfg.episodes {
        let fail = |source: EpisodeFailure| ProtocolError::Episode { episode, source };
        let mut traj = agent.act(map, &mut play_rng).map_err(fail)?;
        traj.episode = episode;
        let prefix = sample_prefix(&traj, &cfg.prefix, &mut prefix_rng);
        let posterior = observer.predict(&prefix).map_err(|e| fail(e.into()))?;
        let beliefs = observer.beliefs_along(&traj).map_err(|e| fail(e.into()))?;
        let loss = agent.learn(map, &traj, &posterior).map_err(fail)?;
        observer.observe(&traj, goal).map_err(|e| fail(e.into()))?;
        let record = EpisodeRecord {
            episode,
            env_return: env_rewards(map, &traj).iter().sum(),
            deceptive_reward: deceptive_reward(posterior.p(goal), map.rewards().goal_reward, traj.reached_goal),
            kl: posterior.kl_to_uniform(),
            episode_loss: loss,
            trajectory: traj,
            prefix,
            posterior,
            beliefs,
        };
        after(&record, agent, observer)?;
        records.push(record);
    }
    Ok(records)
}

/// How an agent plays during pirate trials. Policies act greedily.
#[derive(Debug, Clone)]
pub enum AgentSnapshot {
    Honest,
    Am(QTables, AmConfig),
    Policy(PolicySpec, ParamVector),
}

impl AgentSnapshot {
    pub fn path(&self, map: &GridMap, rng: &mut StreamRng) -> Result<Trajectory, AgentError> {
        match self {
            Self::Honest => honest_rollout(map),
            Self::Am(q, cfg) => am_rollout(map, q, cfg, rng),
            Self::Policy(spec, theta) => Ok(policy_rollout(spec, theta, map, rng, false)),
        }
    }

    /// Whether every trial sees the same agent path.
    fn is_deterministic(&self) -> bool {
        !matches!(self, Self::Am(..))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChaseOutcome {
    pub captured: bool,
    /// Tick at which the trial ended.
    pub steps: usize,
}

/// Shortest-path distances from every goal, used by the pirate.
#[derive(Debug, Clone)]
pub struct PirateField {
    dist: Vec<Vec<Option<usize>>>,
}

impl PirateField {
    pub fn new(map: &GridMap) -> Self {
        Self {
            dist: map.goals().iter().map(|g| map.distances_from(*g)).collect(),
        }
    }

    pub fn reaches_all(&self, map: &GridMap, cell: Cell) -> bool {
        map.is_free(cell) && self.dist.iter().all(|d| d[map.index(cell)].is_some())
    }

    /// One move toward `goal`; ties go to the lowest action index.
    pub fn step_toward(&self, map: &GridMap, cell: Cell, goal: usize) -> Cell {
        let d = &self.dist[goal];
        let here = d[map.index(cell)].unwrap_or(usize::MAX);
        if here == 0 {
            return cell;
        }
        crate::gridworld::Action::ALL
            .iter()
            .map(|a| map.next_cell(cell, *a))
            .find(|n| d[map.index(*n)].is_some_and(|v| v + 1 == here))
            .unwrap_or(cell)
    }
}

/// Pursuit of a fixed agent path by one pirate starting at `pirate`.
///
/// Each tick the agent advances one step, the observer's posterior over the
/// path so far picks the pirate's target goal, and the pirate moves one
/// shortest-path step toward it. Capture is sharing a cell after a tick or
/// swapping cells during one. Reaching the goal first is an escape.
pub fn pirate_chase(
    map: &GridMap,
    field: &PirateField,
    path: &Trajectory,
    beliefs: &[GoalPosterior],
    pirate: Cell,
) -> Result<ChaseOutcome, ProtocolError> {
    if !field.reaches_all(map, pirate) {
        return Err(ProtocolError::Unreachable(pirate));
    }
    assert_eq!(beliefs.len(), path.len());
    let cells = path.cells();
    if pirate == cells[0] {
        return Ok(ChaseOutcome {
            captured: true,
            steps: 0,
        });
    }
    let mut p = pirate;
    for t in 1..cells.len() {
        let (prev, next) = (cells[t - 1], cells[t]);
        let np = field.step_toward(map, p, beliefs[t - 1].argmax());
        if np == next || (np == prev && p == next) {
            return Ok(ChaseOutcome {
                captured: true,
                steps: t,
            });
        }
        p = np;
        if next == map.true_goal() {
            return Ok(ChaseOutcome {
                captured: false,
                steps: t,
            });
        }
    }
    Ok(ChaseOutcome {
        captured: false,
        steps: cells.len() - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CaptureCount {
    pub trials: usize,
    pub captures: usize,
    /// Spawns redrawn because the pirate could not reach every goal.
    pub resamples: usize,
}

impl CaptureCount {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.captures as f64 / self.trials as f64
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            trials: self.trials + other.trials,
            captures: self.captures + other.captures,
            resamples: self.resamples + other.resamples,
        }
    }
}

/// Independent stream for trial `trial` of a pirate evaluation.
pub fn trial_rng(seed: u64, trial: u64) -> StreamRng {
    // splitmix64 of (seed, trial) keeps trial streams unrelated
    let mut z = seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    rng::stream(z ^ (z >> 31), streams::PIRATE)
}

/// Spawn a pirate uniformly on free cells, redrawing unreachable spawns.
/// Returns the spawn and the number of redraws.
pub fn spawn_pirate(map: &GridMap, field: &PirateField, rng: &mut StreamRng) -> (Cell, usize) {
    use rand::seq::SliceRandom;
    let free = map.free_cells();
    let mut redraws = 0;
    loop {
        let c = *free.choose(rng).expect("map has free cells");
        if field.reaches_all(map, c) {
            return (c, redraws);
        }
        redraws += 1;
    }
}

/// `n_trials` pursuit trials against a frozen agent and observer.
/// Trials run in parallel and are reduced in trial order.
pub fn capture_rate<O>(
    map: &GridMap,
    agent: &AgentSnapshot,
    observer: &O,
    n_trials: usize,
    seed: u64,
) -> Result<CaptureCount, ProtocolError>
where
    O: Observer + Sync + ?Sized,
{
    let field = PirateField::new(map);
    let fixed = if agent.is_deterministic() && n_trials > 0 {
        let path = agent.path(map, &mut trial_rng(seed, 0))?;
        let beliefs = observer.beliefs_along(&path)?;
        Some((path, beliefs))
    } else {
        None
    };
    let results: Vec<Result<(ChaseOutcome, usize), ProtocolError>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut r = trial_rng(seed, trial as u64);
            let owned;
            let (path, beliefs) = match &fixed {
                Some((p, b)) => (p, b),
                None => {
                    let p = agent.path(map, &mut r)?;
                    let b = observer.beliefs_along(&p)?;
                    owned = (p, b);
                    (&owned.0, &owned.1)
                }
            };
            let (spawn, redraws) = spawn_pirate(map, &field, &mut r);
            Ok((pirate_chase(map, &field, path, beliefs, spawn)?, redraws))
        })
        .collect();
    let mut count = CaptureCount::default();
    for r in results {
        let (out, redraws) = r?;
        count.trials += 1;
        count.captures += out.captured as usize;
        count.resamples += redraws;
    }
    Ok(count)
}
