//! Baseline and learning agents.
//!
//! Honest and AM are fixed planners. The learning agents share one policy
//! network (5 features -> 64 -> 64 -> 4 actions, tanh hidden layers) and a
//! critic with the same trunk and a scalar head. Learning is a discrete
//! entropy-regularized actor-critic step after every episode.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{softmax, AdError, Adam, LayerSpec, Mlp, ParamVector, Tape, Var};
use crate::gridworld::{Action, Cell, GridError, GridMap, QTables, Step, Trajectory};
use crate::observers::{boltzmann_posterior, GoalPosterior};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("agent cannot reach the true goal within the horizon")]
    HorizonExceeded,
    #[error("not enough demonstration data")]
    InsufficientData,
    #[error("posterior has {found} entries, expected {expected}")]
    PosteriorMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Width of the policy input: agent position, true-goal position, time.
pub const POLICY_FEATURES: usize = 5;

pub fn policy_features(map: &GridMap, cell: Cell, t: usize) -> [f64; POLICY_FEATURES] {
    let (w, h) = (map.width() as f64, map.height() as f64);
    let g = map.true_goal();
    [
        cell.x as f64 / w,
        cell.y as f64 / h,
        g.x as f64 / w,
        g.y as f64 / h,
        t as f64 / map.horizon() as f64,
    ]
}

/// Policy and critic layouts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySpec {
    pub actor: LayerSpec,
    pub critic: LayerSpec,
}

impl PolicySpec {
    pub fn new(hidden: usize) -> Self {
        Self {
            actor: LayerSpec::two_hidden(POLICY_FEATURES, hidden, 4),
            critic: LayerSpec::two_hidden(POLICY_FEATURES, hidden, 1),
        }
    }

    pub fn action_probs(&self, theta: &ParamVector, features: &[f64]) -> Vec<f64> {
        softmax(&self.actor.eval(theta.values(), features))
    }

    pub fn value(&self, psi: &ParamVector, features: &[f64]) -> f64 {
        self.critic.eval(psi.values(), features)[0]
    }
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self::new(64)
    }
}

/// How the KL-to-uniform term reaches the policy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `-lambda * KL` is added to the terminal reward.
    RewardShaping,
    /// `lambda * KL * sum_t log pi(a_t | s_t)` is added to the loss.
    ScoreFunction,
}

/// Hyperparameters shared by the Naive and DeMP learners.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub alpha_lr: f64,
    pub critic_lr: f64,
    pub entropy_temp: f64,
    pub lambda: f64,
    pub kl_mode: KlMode,
    /// Multiplies every reward before returns are formed.
    pub reward_scale: f64,
    /// Rescales the policy gradient to at most this norm (0 disables).
    pub grad_clip: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha_lr: 0.001,
            critic_lr: 0.001,
            entropy_temp: 0.05,
            lambda: 0.5,
            kl_mode: KlMode::RewardShaping,
            reward_scale: 0.01,
            grad_clip: 0.0,
        }
    }
}

/// Policy and critic parameters of one learning agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub theta: ParamVector,
    pub psi: ParamVector,
}

impl AgentParams {
    pub fn init<R: Rng + ?Sized>(spec: &PolicySpec, rng: &mut R) -> Self {
        Self {
            theta: spec.actor.init(rng),
            psi: spec.critic.init(rng),
        }
    }
}

/// Everything about one finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub trajectory: Trajectory,
    pub prefix: Trajectory,
    pub posterior: GoalPosterior,
    pub env_return: f64,
    pub deceptive_reward: f64,
    pub kl: f64,
    /// Pre-update loss for learning agents.
    pub episode_loss: Option<f64>,
    /// Posterior after each step of the full trajectory, from the same
    /// observer state that produced `posterior`.
    pub beliefs: Vec<GoalPosterior>,
}

impl EpisodeRecord {
    pub fn p_true(&self, true_goal: usize) -> f64 {
        self.posterior.p(true_goal)
    }

    pub fn predicted_goal(&self) -> usize {
        self.posterior.argmax()
    }
}

/// `(1 - p) * r(G*)`, paid only when the goal was reached.
pub fn deceptive_reward(p_true: f64, goal_reward: f64, reached_goal: bool) -> f64 {
    if reached_goal {
        (1.0 - p_true.clamp(0.0, 1.0)) * goal_reward
    } else {
        0.0
    }
}

/// Environment rewards of each step of `traj`.
pub fn env_rewards(map: &GridMap, traj: &Trajectory) -> Vec<f64> {
    let r = map.rewards();
    let n = traj.len();
    (0..n)
        .map(|t| {
            if t + 1 == n && traj.reached_goal {
                r.step_cost + r.goal_reward
            } else {
                r.step_cost
            }
        })
        .collect()
}

/// Per-episode quantities the loss needs, with the posterior folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub features: Vec<[f64; POLICY_FEATURES]>,
    /// Feature of the cell reached after the last step.
    pub terminal_features: [f64; POLICY_FEATURES],
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub reached_goal: bool,
    pub env_return: f64,
    pub deceptive_reward: f64,
    pub kl: f64,
}

impl EpisodeBatch {
    pub fn new(
        map: &GridMap,
        traj: &Trajectory,
        posterior: &GoalPosterior,
        cfg: &LearnerConfig,
    ) -> Result<Self, AgentError> {
        if posterior.len() != map.goal_count() {
            return Err(AgentError::PosteriorMismatch {
                expected: map.goal_count(),
                found: posterior.len(),
            });
        }
        let env = env_rewards(map, traj);
        let env_return = env.iter().sum();
        let dec = deceptive_reward(
            posterior.p(map.true_goal_index()),
            map.rewards().goal_reward,
            traj.reached_goal,
        );
        let kl = posterior.kl_to_uniform();
        let mut rewards = env;
        if let Some(last) = rewards.last_mut() {
            *last += dec;
            if cfg.kl_mode == KlMode::RewardShaping {
                *last -= cfg.lambda * kl;
            }
        }
        for r in rewards.iter_mut() {
            *r *= cfg.reward_scale;
        }
        Ok(Self {
            features: traj
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| policy_features(map, s.cell, t))
                .collect(),
            terminal_features: policy_features(map, traj.terminal, traj.len()),
            actions: traj.steps.iter().map(|s| s.action.index()).collect(),
            rewards,
            reached_goal: traj.reached_goal,
            env_return,
            deceptive_reward: dec,
            kl,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Discounted return-to-go at every step.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut acc = 0.0;
        for t in (0..self.len()).rev() {
            acc = self.rewards[t] + gamma * acc;
            out[t] = acc;
        }
        out
    }

    /// `G_t - V(s_t)` under the critic `psi`.
    pub fn advantages(&self, spec: &PolicySpec, psi: &ParamVector, gamma: f64) -> Vec<f64> {
        self.returns(gamma)
            .into_iter()
            .zip(&self.features)
            .map(|(g, f)| g - spec.value(psi, f))
            .collect()
    }
}

/// Builds the episode loss on `tape` as a function of the policy node `theta`.
///
/// `-sum_t A_t log pi(a_t|s_t) - temp * sum_t H(pi(.|s_t)) + lambda * KL`,
/// with the advantages held constant.
pub fn policy_loss(
    tape: &mut Tape,
    theta: Var,
    spec: &PolicySpec,
    batch: &EpisodeBatch,
    advantages: &[f64],
    cfg: &LearnerConfig,
) -> Result<Var, AgentError> {
    let net = Mlp::bind(tape, theta, &spec.actor)?;
    let mut total = tape.constant_scalar(cfg.lambda * batch.kl);
    let score_weight = match cfg.kl_mode {
        KlMode::RewardShaping => 0.0,
        KlMode::ScoreFunction => cfg.lambda * batch.kl,
    };
    for t in 0..batch.len() {
        let z = net.forward_values(tape, &batch.features[t])?;
        let ls = tape.log_softmax(z);
        let p = tape.softmax(z);
        let logp = tape.slice(ls, batch.actions[t], 1);
        let pg = tape.scale(logp, score_weight - advantages[t]);
        let plogp = tape.dot(p, ls);
        // -temp * H = temp * sum p log p
        let ent = tape.scale(plogp, cfg.entropy_temp);
        let term = tape.add(pg, ent);
        total = tape.add(total, term);
    }
    Ok(total)
}

/// Value of [`policy_loss`] at `theta`.
pub fn episode_loss(
    spec: &PolicySpec,
    params: &AgentParams,
    batch: &EpisodeBatch,
    cfg: &LearnerConfig,
) -> Result<f64, AgentError> {
    let mut tape = Tape::new();
    let th = tape.watch(&params.theta);
    let adv = batch.advantages(spec, &params.psi, cfg.gamma);
    let loss = policy_loss(&mut tape, th, spec, batch, &adv, cfg)?;
    Ok(tape.scalar(loss))
}

/// Scales `grad` down to norm `clip` when `clip > 0`.
pub fn clip_grad(grad: ParamVector, clip: f64) -> ParamVector {
    let n = grad.norm();
    if clip > 0.0 && n > clip {
        let s = clip / n;
        ParamVector::new(grad.values().iter().map(|g| g * s).collect()).expect("finite")
    } else {
        grad
    }
}

/// Policy loss and its gradient at `theta`.
pub fn policy_gradient(
    spec: &PolicySpec,
    params: &AgentParams,
    batch: &EpisodeBatch,
    cfg: &LearnerConfig,
) -> Result<(f64, ParamVector), AgentError> {
    let mut tape = Tape::new();
    let th = tape.watch(&params.theta);
    let adv = batch.advantages(spec, &params.psi, cfg.gamma);
    let loss = policy_loss(&mut tape, th, spec, batch, &adv, cfg)?;
    let grad = tape.grad(loss, th)?;
    Ok((tape.scalar(loss), grad))
}

/// One TD(0) regression step on `0.5 * mean_t (V(s_t) - y_t)^2`.
pub fn critic_step(
    spec: &PolicySpec,
    psi: &ParamVector,
    batch: &EpisodeBatch,
    cfg: &LearnerConfig,
) -> Result<ParamVector, AgentError> {
    if batch.is_empty() || cfg.critic_lr == 0.0 {
        return Ok(psi.clone());
    }
    let n = batch.len();
    let targets: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n {
                spec.value(psi, &batch.features[t + 1])
            } else if batch.reached_goal {
                0.0
            } else {
                spec.value(psi, &batch.terminal_features)
            };
            batch.rewards[t] + cfg.gamma * next
        })
        .collect();
    let mut tape = Tape::new();
    let p = tape.watch(psi);
    let net = Mlp::bind(&mut tape, p, &spec.critic)?;
    let mut total = tape.constant_scalar(0.0);
    for t in 0..n {
        let v = net.forward_values(&mut tape, &batch.features[t])?;
        let d = tape.affine(v, 1.0, -targets[t]);
        let sq = tape.mul(d, d);
        total = tape.add(total, sq);
    }
    let loss = tape.scale(total, 0.5 / n as f64);
    let grad = tape.grad(loss, p)?;
    Ok(psi.step(&grad, cfg.critic_lr)?)
}

/// One episode-level step of the Naive learner: a policy-gradient step on
/// the episode loss and a TD step for the critic. Returns the new
/// parameters and the pre-update loss.
pub fn naive_update(
    spec: &PolicySpec,
    params: &AgentParams,
    batch: &EpisodeBatch,
    cfg: &LearnerConfig,
) -> Result<(AgentParams, f64), AgentError> {
    let (loss, grad) = policy_gradient(spec, params, batch, cfg)?;
    let grad = clip_grad(grad, cfg.grad_clip);
    let theta = params.theta.step(&grad, cfg.alpha_lr)?;
    let psi = critic_step(spec, &params.psi, batch, cfg)?;
    Ok((AgentParams { theta, psi }, loss))
}

/// Shortest path from the start to the true goal.
pub fn honest_rollout(map: &GridMap) -> Result<Trajectory, AgentError> {
    let cells = map.shortest_path(map.start(), map.true_goal())?;
    Ok(Trajectory::from_cells(&cells, true))
}

/// Settings of the ambiguity-seeking planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmConfig {
    /// Extra path length allowed, as a fraction of the optimal length.
    pub detour: f64,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self { detour: 0.5 }
    }
}

/// Entropy-greedy ambiguity rollout.
///
/// At each step the planner considers moves that are optimal for at least
/// one candidate goal, do not revisit a cell, and still allow arrival at the
/// true goal within `(1 + detour) * d(start, G*)` steps (capped at `H`). It takes the move whose resulting cost-based
/// posterior has the highest entropy; ties prefer progress toward the true
/// goal, and remaining ties are broken by `rng`.
pub fn am_rollout<R: Rng + ?Sized>(
    map: &GridMap,
    q: &QTables,
    cfg: &AmConfig,
    rng: &mut R,
) -> Result<Trajectory, AgentError> {
    let h = map.horizon();
    let dist = map.distances_from(map.true_goal());
    let d = |c: Cell| dist[map.index(c)].unwrap_or(usize::MAX);
    let optimal = d(map.start());
    if optimal > h {
        return Err(AgentError::HorizonExceeded);
    }
    let budget = (optimal + (cfg.detour.max(0.0) * optimal as f64).floor() as usize).min(h);
    let n = map.goal_count();
    let priors = vec![1.0; n];
    let mut deltas = vec![0.0; n];
    let mut cell = map.start();
    let mut steps = Vec::new();
    let mut visited = vec![false; map.cell_count()];
    visited[map.index(cell)] = true;
    while cell != map.true_goal() {
        let t = steps.len();
        let mut best: Vec<(Action, Vec<f64>)> = Vec::new();
        let mut best_score = (f64::NEG_INFINITY, false);
        for a in Action::ALL {
            let next = map.next_cell(cell, a);
            if visited[map.index(next)] || d(next) == usize::MAX || t + 1 + d(next) > budget {
                continue;
            }
            if !(0..n).any(|g| q.q(g, cell, a) == q.max_q(g, cell)) {
                continue;
            }
            let nd: Vec<f64> = (0..n).map(|g| deltas[g] + q.q(g, cell, a) - q.max_q(g, cell)).collect();
            let ent = boltzmann_posterior(&nd, &priors).expect("uniform priors").entropy();
            let score = (ent, d(next) < d(cell));
            let better =
                score.0 > best_score.0 + 1e-12 || ((score.0 - best_score.0).abs() <= 1e-12 && score.1 && !best_score.1);
            let tie = (score.0 - best_score.0).abs() <= 1e-12 && score.1 == best_score.1;
            if better {
                best_score = score;
                best = vec![(a, nd)];
            } else if tie {
                best.push((a, nd));
            }
        }
        let (a, nd) = if best.is_empty() {
            // only the direct route remains admissible
            let a = Action::ALL
                .into_iter()
                .find(|a| d(map.next_cell(cell, *a)) + 1 == d(cell))
                .ok_or(AgentError::HorizonExceeded)?;
            let nd = (0..n).map(|g| deltas[g] + q.q(g, cell, a) - q.max_q(g, cell)).collect();
            (a, nd)
        } else {
            let i = if best.len() > 1 {
                rng.gen_range(0..best.len())
            } else {
                0
            };
            best.swap_remove(i)
        };
        steps.push(Step { cell, action: a });
        deltas = nd;
        cell = map.next_cell(cell, a);
        visited[map.index(cell)] = true;
        if steps.len() > h {
            return Err(AgentError::HorizonExceeded);
        }
    }
    Ok(Trajectory {
        steps,
        terminal: cell,
        episode: 0,
        reached_goal: true,
    })
}

/// Runs the policy until the true goal or the horizon.
///
/// `explore` samples actions; otherwise the most probable action is taken
/// (ties to the lowest index).
pub fn policy_rollout<R: Rng + ?Sized>(
    spec: &PolicySpec,
    theta: &ParamVector,
    map: &GridMap,
    rng: &mut R,
    explore: bool,
) -> Trajectory {
    let goal = map.true_goal();
    let mut cell = map.start();
    let mut steps = Vec::new();
    while cell != goal && steps.len() < map.horizon() {
        let probs = spec.action_probs(theta, &policy_features(map, cell, steps.len()));
        let a = if explore {
            sample_index(&probs, rng.gen::<f64>())
        } else {
            argmax(&probs)
        };
        let action = Action::from_index(a);
        steps.push(Step { cell, action });
        cell = map.next_cell(cell, action);
    }
    Trajectory {
        steps,
        terminal: cell,
        episode: 0,
        reached_goal: cell == goal,
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Settings for behaviour cloning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for CloneConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch: 32,
            lr: 0.01,
        }
    }
}

/// Mean per-step NLL of the demonstrated actions.
pub fn demo_nll(spec: &PolicySpec, theta: &ParamVector, map: &GridMap, demos: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for d in demos {
        for (t, s) in d.steps.iter().enumerate() {
            let p = spec.action_probs(theta, &policy_features(map, s.cell, t));
            total -= p[s.action.index()].max(1e-300).ln();
            n += 1;
        }
    }
    total / n.max(1) as f64
}

/// Cross-entropy behaviour cloning of `(state, action)` pairs from `demos`.
pub fn clone_policy<R: Rng + ?Sized>(
    spec: &PolicySpec,
    theta: &ParamVector,
    map: &GridMap,
    demos: &[Trajectory],
    cfg: &CloneConfig,
    rng: &mut R,
) -> Result<ParamVector, AgentError> {
    use rand::seq::SliceRandom;
    let pairs: Vec<([f64; POLICY_FEATURES], usize)> = demos
        .iter()
        .flat_map(|d| {
            d.steps
                .iter()
                .enumerate()
                .map(|(t, s)| (policy_features(map, s.cell, t), s.action.index()))
        })
        .collect();
    if pairs.is_empty() {
        return Err(AgentError::InsufficientData);
    }
    let mut theta = theta.clone();
    let mut adam = Adam::new(theta.len(), cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let th = tape.watch(&theta);
            let net = Mlp::bind(&mut tape, th, &spec.actor)?;
            let mut total = tape.constant_scalar(0.0);
            for &i in chunk {
                let z = net.forward_values(&mut tape, &pairs[i].0)?;
                let ls = tape.log_softmax(z);
                let pick = tape.slice(ls, pairs[i].1, 1);
                total = tape.sub(total, pick);
            }
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let grad = tape.grad(loss, th)?;
            theta = adam.step(&theta, &grad)?;
        }
    }
    Ok(theta)
}
