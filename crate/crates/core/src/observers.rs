//! Goal-recognition observers.
//!
//! [`BoltzmannObserver`] is the cost-based recognizer: it scores each
//! candidate goal by the accumulated Q-difference of the observed actions
//! and turns the scores into a posterior with a Boltzmann distribution.
//! [`LearnableObserver`] is a two-layer LSTM classifier that is pretrained
//! on shortest paths and then fine-tuned online with one gradient step per
//! observed episode.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{softmax, AdError, Adam, Lstm, ParamVector, RecurrentSpec, Tape};
use crate::gridworld::{GridMap, QTables, Step, Trajectory};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObserverError {
    #[error("all priors are zero")]
    DegeneratePrior,
    #[error("observer needs at least one observed step")]
    EmptyPrefix,
    #[error("pretraining needs at least {needed} trajectories, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid prefix rule [{0}, {1}]")]
    BadPrefixRule(f64, f64),
    #[error("posterior has {found} entries, expected {expected}")]
    PosteriorMismatch { expected: usize, found: usize },
    #[error("checkpoint layout {0:?} does not match this observer")]
    LayoutMismatch(Vec<u32>),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Normalized distribution over candidate goals.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalPosterior {
    probs: Vec<f64>,
}

impl GoalPosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self, ObserverError> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(ObserverError::DegeneratePrior);
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Softmax of logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: softmax(logits) }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn p(&self, goal: usize) -> f64 {
        self.probs[goal]
    }

    /// Most probable goal; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// `KL(self || Uniform)`, with probabilities floored at 1e-12.
    pub fn kl_to_uniform(&self) -> f64 {
        let n = self.probs.len() as f64;
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * (p.max(1e-12) * n).ln())
            .sum::<f64>()
            .max(0.0)
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Accumulated sub-optimality of `steps` under goal `goal`'s reward:
/// `sum_t Q(s_t, a_t) - max_a Q(s_t, a)`. Zero iff every action is optimal.
pub fn q_difference(steps: &[Step], q: &QTables, goal: usize) -> f64 {
    steps
        .iter()
        .map(|s| q.q(goal, s.cell, s.action) - q.max_q(goal, s.cell))
        .sum()
}

/// `P(g_i) ∝ exp(delta_i) * prior_i`, renormalized.
pub fn boltzmann_posterior(deltas: &[f64], priors: &[f64]) -> Result<GoalPosterior, ObserverError> {
    assert_eq!(deltas.len(), priors.len());
    if priors.iter().any(|p| *p < 0.0) || priors.iter().sum::<f64>() <= 0.0 {
        return Err(ObserverError::DegeneratePrior);
    }
    let m = deltas
        .iter()
        .zip(priors)
        .filter(|(_, p)| **p > 0.0)
        .map(|(d, _)| *d)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = deltas
        .iter()
        .zip(priors)
        .map(|(d, p)| if *p > 0.0 { (d - m).exp() * p } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    Ok(GoalPosterior {
        probs: w.into_iter().map(|x| x / total).collect(),
    })
}

/// Fraction range for the observed prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixRule {
    low: f64,
    high: f64,
}

impl PrefixRule {
    pub fn new(low: f64, high: f64) -> Result<Self, ObserverError> {
        if !(low > 0.0 && low <= high && high <= 1.0) {
            return Err(ObserverError::BadPrefixRule(low, high));
        }
        Ok(Self { low, high })
    }

    pub fn full() -> Self {
        Self { low: 1.0, high: 1.0 }
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn sample_ratio<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.gen_range(self.low..=self.high)
        }
    }
}

/// Number of steps kept for a trajectory of `len` steps at ratio `ratio`.
pub fn prefix_len(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).floor() as usize).clamp(1, len.max(1))
}

/// `traj[0 .. max(1, floor(ratio * T))]` with `ratio ~ U[low, high]`.
pub fn sample_prefix<R: Rng + ?Sized>(traj: &Trajectory, rule: &PrefixRule, rng: &mut R) -> Trajectory {
    let ratio = rule.sample_ratio(rng);
    traj.prefix(prefix_len(traj.len(), ratio))
}

/// Common interface used by the interaction loop.
///
/// Observers only ever see trajectories and the revealed true goal.
pub trait Observer {
    fn goal_count(&self) -> usize;

    fn predict(&self, prefix: &Trajectory) -> Result<GoalPosterior, ObserverError>;

    /// Posterior after each of the first `t = 1..=T` steps.
    fn beliefs_along(&self, traj: &Trajectory) -> Result<Vec<GoalPosterior>, ObserverError>;

    /// Post-episode feedback. Returns the training loss when the observer learns.
    fn observe(&mut self, traj: &Trajectory, true_goal: usize) -> Result<Option<f64>, ObserverError>;
}

/// Cost-based recognizer over optimal Q tables.
#[derive(Debug, Clone)]
pub struct BoltzmannObserver {
    q: QTables,
    priors: Vec<f64>,
}

impl BoltzmannObserver {
    pub fn new(q: QTables) -> Self {
        let n = q.goal_count();
        Self {
            q,
            priors: vec![1.0 / n as f64; n],
        }
    }

    pub fn with_priors(q: QTables, priors: Vec<f64>) -> Result<Self, ObserverError> {
        if priors.len() != q.goal_count() {
            return Err(ObserverError::PosteriorMismatch {
                expected: q.goal_count(),
                found: priors.len(),
            });
        }
        if priors.iter().any(|p| *p < 0.0) || priors.iter().sum::<f64>() <= 0.0 {
            return Err(ObserverError::DegeneratePrior);
        }
        Ok(Self { q, priors })
    }

    pub fn q_tables(&self) -> &QTables {
        &self.q
    }

    pub fn posterior_of(&self, steps: &[Step]) -> GoalPosterior {
        let deltas: Vec<f64> = (0..self.q.goal_count())
            .map(|g| q_difference(steps, &self.q, g))
            .collect();
        boltzmann_posterior(&deltas, &self.priors).expect("priors validated")
    }
}

impl Observer for BoltzmannObserver {
    fn goal_count(&self) -> usize {
        self.q.goal_count()
    }

    fn predict(&self, prefix: &Trajectory) -> Result<GoalPosterior, ObserverError> {
        Ok(self.posterior_of(&prefix.steps))
    }

    fn beliefs_along(&self, traj: &Trajectory) -> Result<Vec<GoalPosterior>, ObserverError> {
        let n = self.q.goal_count();
        let mut deltas = vec![0.0; n];
        let mut out = Vec::with_capacity(traj.len());
        for s in &traj.steps {
            for (g, d) in deltas.iter_mut().enumerate() {
                *d += self.q.q(g, s.cell, s.action) - self.q.max_q(g, s.cell);
            }
            out.push(boltzmann_posterior(&deltas, &self.priors)?);
        }
        Ok(out)
    }

    fn observe(&mut self, _traj: &Trajectory, _true_goal: usize) -> Result<Option<f64>, ObserverError> {
        Ok(None)
    }
}

/// What the online update trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateTarget {
    /// `-log P(G* | tau)` on the complete trajectory only.
    FullTrajectory,
    /// Mean of `-log P(G* | tau[0..t])` over every prefix length `t`.
    AllPrefixes,
}

/// Per-step features: `(x / width, y / height, one-hot action)`.
pub const OBSERVER_FEATURES: usize = 6;

pub fn encode_steps(steps: &[Step], width: usize, height: usize) -> Vec<Vec<f64>> {
    steps
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(OBSERVER_FEATURES);
            v.push(s.cell.x as f64 / width as f64);
            v.push(s.cell.y as f64 / height as f64);
            v.extend_from_slice(&s.action.one_hot());
            v
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LearnableObserver {
    spec: RecurrentSpec,
    phi: ParamVector,
    eta: f64,
    target: UpdateTarget,
    width: usize,
    height: usize,
    pretrained: bool,
}

impl LearnableObserver {
    /// Fresh observer with seeded uniform initialization.
    pub fn new(map: &GridMap, hidden: usize, eta: f64, seed: u64) -> Self {
        let spec = RecurrentSpec {
            input: OBSERVER_FEATURES,
            hidden,
            layers: 2,
            output: map.goal_count(),
        };
        let phi = spec.init(&mut rng::stream(seed, streams::OBSERVER_INIT));
        Self::from_params(map, spec, phi, eta)
    }

    /// All-zero parameters (uniform predictions).
    pub fn zeroed(map: &GridMap, hidden: usize, eta: f64) -> Self {
        let spec = RecurrentSpec {
            input: OBSERVER_FEATURES,
            hidden,
            layers: 2,
            output: map.goal_count(),
        };
        let phi = ParamVector::zeros(spec.param_count());
        Self::from_params(map, spec, phi, eta)
    }

    pub fn from_params(map: &GridMap, spec: RecurrentSpec, phi: ParamVector, eta: f64) -> Self {
        assert_eq!(phi.len(), spec.param_count());
        Self {
            spec,
            phi,
            eta,
            target: UpdateTarget::AllPrefixes,
            width: map.width(),
            height: map.height(),
            pretrained: false,
        }
    }

    /// Restores an observer from checkpoint contents.
    pub fn from_checkpoint(map: &GridMap, header: &[u32], phi: ParamVector, eta: f64) -> Result<Self, ObserverError> {
        let spec = RecurrentSpec::from_header(header)
            .filter(|s| s.input == OBSERVER_FEATURES && s.output == map.goal_count() && s.param_count() == phi.len())
            .ok_or_else(|| ObserverError::LayoutMismatch(header.to_vec()))?;
        let mut o = Self::from_params(map, spec, phi, eta);
        o.pretrained = true;
        Ok(o)
    }

    pub fn with_target(mut self, target: UpdateTarget) -> Self {
        self.target = target;
        self
    }

    pub fn spec(&self) -> &RecurrentSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.phi
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn header(&self) -> Vec<u32> {
        self.spec.header()
    }

    fn encode(&self, steps: &[Step]) -> Vec<Vec<f64>> {
        encode_steps(steps, self.width, self.height)
    }

    fn logits_all(&self, steps: &[Step]) -> Result<Vec<Vec<f64>>, ObserverError> {
        if steps.is_empty() {
            return Err(ObserverError::EmptyPrefix);
        }
        let mut tape = Tape::new();
        let p = tape.watch(&self.phi);
        let net = Lstm::bind(&mut tape, p, &self.spec)?;
        let out = net.forward_all(&mut tape, &self.encode(steps))?;
        Ok(out.iter().map(|v| tape.value(*v).to_vec()).collect())
    }

    /// Loss and gradient for one labelled sequence.
    fn loss_and_grad(
        &self,
        steps: &[Step],
        goal: usize,
        target: UpdateTarget,
    ) -> Result<(f64, ParamVector), ObserverError> {
        if steps.is_empty() {
            return Err(ObserverError::EmptyPrefix);
        }
        let mut tape = Tape::new();
        let p = tape.watch(&self.phi);
        let net = Lstm::bind(&mut tape, p, &self.spec)?;
        let seq = self.encode(steps);
        let outs = match target {
            UpdateTarget::FullTrajectory => vec![net.forward(&mut tape, &seq)?],
            UpdateTarget::AllPrefixes => net.forward_all(&mut tape, &seq)?,
        };
        let mut total = None;
        for z in &outs {
            let ls = tape.log_softmax(*z);
            let pick = tape.slice(ls, goal, 1);
            total = Some(match total {
                Some(t) => tape.add(t, pick),
                None => pick,
            });
        }
        let loss = tape.scale(total.unwrap(), -1.0 / outs.len() as f64);
        let value = tape.scalar(loss);
        let grad = tape.grad(loss, p)?;
        Ok((value, grad))
    }

    /// One gradient step on the negative log-likelihood of `true_goal`.
    /// Returns the loss before the step.
    pub fn online_update(&mut self, traj: &Trajectory, true_goal: usize) -> Result<f64, ObserverError> {
        let (loss, grad) = self.loss_and_grad(&traj.steps, true_goal, self.target)?;
        if self.eta != 0.0 {
            self.phi = self.phi.step(&grad, self.eta)?;
        }
        Ok(loss)
    }

    /// The quantity [`online_update`](Self::online_update) descends.
    pub fn update_loss(&self, traj: &Trajectory, true_goal: usize) -> Result<f64, ObserverError> {
        Ok(self.loss_and_grad(&traj.steps, true_goal, self.target)?.0)
    }

    pub fn pretrain(&mut self, map: &GridMap, spec: &PretrainSpec, seed: u64) -> Result<PretrainReport, ObserverError> {
        pretrain(self, map, spec, seed)
    }
}

impl Observer for LearnableObserver {
    fn goal_count(&self) -> usize {
        self.spec.output
    }

    fn predict(&self, prefix: &Trajectory) -> Result<GoalPosterior, ObserverError> {
        let all = self.logits_all(&prefix.steps)?;
        Ok(GoalPosterior::from_logits(all.last().unwrap()))
    }

    fn beliefs_along(&self, traj: &Trajectory) -> Result<Vec<GoalPosterior>, ObserverError> {
        Ok(self
            .logits_all(&traj.steps)?
            .iter()
            .map(|z| GoalPosterior::from_logits(z))
            .collect())
    }

    fn observe(&mut self, traj: &Trajectory, true_goal: usize) -> Result<Option<f64>, ObserverError> {
        self.online_update(traj, true_goal).map(Some)
    }
}

/// Update rule for offline training loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step.
    Sgd,
    Adam,
}

/// What each pretraining sample contributes to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTarget {
    /// Final-step NLL of the path truncated by the prefix rule.
    SampledPrefix,
    /// Mean NLL over every prefix of the full path.
    AllPrefixes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub n_trajectories: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub target: PretrainTarget,
    pub prefix: PrefixRule,
    pub holdout_fraction: f64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            n_trajectories: 600,
            epochs: 30,
            batch: 16,
            lr: 0.003,
            optimizer: Optimizer::Adam,
            target: PretrainTarget::AllPrefixes,
            prefix: PrefixRule { low: 0.4, high: 0.6 },
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BucketAccuracy {
    pub ratio: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PretrainReport {
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub final_loss: f64,
    pub heldout_accuracy: f64,
    /// Held-out accuracy when the full path is cut at a fixed ratio.
    pub by_ratio: Vec<BucketAccuracy>,
}

/// Labelled non-deceptive path used for pretraining.
#[derive(Debug, Clone)]
pub struct LabelledPath {
    pub path: Trajectory,
    pub goal: usize,
    pub ratio: f64,
}

impl LabelledPath {
    pub fn prefix(&self) -> Trajectory {
        self.path.prefix(prefix_len(self.path.len(), self.ratio))
    }
}

/// Shortest paths from uniformly drawn free cells to uniformly drawn goals.
pub fn optimal_corpus<R: Rng + ?Sized>(map: &GridMap, n: usize, rule: &PrefixRule, rng: &mut R) -> Vec<LabelledPath> {
    let goal_dists: Vec<_> = map.goals().iter().map(|g| map.distances_from(*g)).collect();
    let starts: Vec<_> = map
        .free_cells()
        .into_iter()
        .filter(|c| !map.goals().contains(c))
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let goal = rng.gen_range(0..map.goal_count());
        let start = starts[rng.gen_range(0..starts.len())];
        if goal_dists[goal][map.index(start)].is_none() {
            continue;
        }
        let cells = map
            .shortest_path(start, map.goals()[goal])
            .expect("reachable by construction");
        out.push(LabelledPath {
            path: Trajectory::from_cells(&cells, true),
            goal,
            ratio: rule.sample_ratio(rng),
        });
    }
    out
}

fn accuracy(observer: &LearnableObserver, samples: &[(Trajectory, usize)]) -> Result<f64, ObserverError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|(t, g)| observer.predict(t).map(|p| p.argmax() == *g))
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / samples.len() as f64)
}

/// Top-1 accuracy of `observer` on labelled prefixes.
pub fn evaluate(observer: &LearnableObserver, samples: &[(Trajectory, usize)]) -> Result<f64, ObserverError> {
    accuracy(observer, samples)
}

/// The `(held_out, train)` split used by [`pretrain`] for `seed`.
pub fn pretrain_corpus(map: &GridMap, spec: &PretrainSpec, seed: u64) -> (Vec<LabelledPath>, Vec<LabelledPath>) {
    let mut data_rng = rng::stream(seed, streams::PRETRAIN_DATA);
    let mut corpus = optimal_corpus(map, spec.n_trajectories, &spec.prefix, &mut data_rng);
    let n_hold = ((spec.n_trajectories as f64 * spec.holdout_fraction).round() as usize)
        .min(spec.n_trajectories.saturating_sub(1));
    let train = corpus.split_off(n_hold);
    (corpus, train)
}

/// Offline NLL training on prefixes of optimal paths.
///
/// Mini-batch gradient descent with a fixed step; the data and shuffling
/// come from dedicated streams of `seed`.
pub fn pretrain(
    observer: &mut LearnableObserver,
    map: &GridMap,
    spec: &PretrainSpec,
    seed: u64,
) -> Result<PretrainReport, ObserverError> {
    let needed = map.goal_count() * 10;
    if spec.n_trajectories < needed {
        return Err(ObserverError::InsufficientData {
            needed,
            got: spec.n_trajectories,
        });
    }
    let (held, train) = pretrain_corpus(map, spec, seed);
    let held = &held[..];
    let (train, loss_target): (Vec<(Trajectory, usize)>, _) = match spec.target {
        PretrainTarget::SampledPrefix => (
            train.iter().map(|s| (s.prefix(), s.goal)).collect(),
            UpdateTarget::FullTrajectory,
        ),
        PretrainTarget::AllPrefixes => (
            train.iter().map(|s| (s.path.clone(), s.goal)).collect(),
            UpdateTarget::AllPrefixes,
        ),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(seed, streams::PRETRAIN_SHUFFLE);
    let batch = spec.batch.max(1);
    let mut final_loss = f64::NAN;
    let mut adam = Adam::new(observer.phi.len(), spec.lr);
    for _ in 0..spec.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let parts: Vec<(f64, ParamVector)> = chunk
                .par_iter()
                .map(|&i| observer.loss_and_grad(&train[i].0.steps, train[i].1, loss_target))
                .collect::<Result<_, _>>()?;
            let mut sum = vec![0.0; observer.phi.len()];
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                for (s, v) in sum.iter_mut().zip(g.values()) {
                    *s += v;
                }
            }
            let k = parts.len() as f64;
            let grad = ParamVector::new(sum.into_iter().map(|v| v / k).collect())?;
            observer.phi = match spec.optimizer {
                Optimizer::Sgd => observer.phi.step(&grad, spec.lr)?,
                Optimizer::Adam => adam.step(&observer.phi, &grad)?,
            };
            epoch_loss += loss;
        }
        final_loss = epoch_loss / train.len().max(1) as f64;
    }
    observer.pretrained = true;
    let held_prefixes: Vec<(Trajectory, usize)> = held.iter().map(|s| (s.prefix(), s.goal)).collect();
    let heldout_accuracy = accuracy(observer, &held_prefixes)?;
    let mut by_ratio = Vec::new();
    for ratio in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let samples: Vec<(Trajectory, usize)> = held
            .iter()
            .map(|s| (s.path.prefix(prefix_len(s.path.len(), ratio)), s.goal))
            .collect();
        by_ratio.push(BucketAccuracy {
            ratio,
            accuracy: accuracy(observer, &samples)?,
        });
    }
    Ok(PretrainReport {
        train_samples: train.len(),
        heldout_samples: held.len(),
        final_loss,
        heldout_accuracy,
        by_ratio,
    })
}

#[cfg(test)]
mod tests;
