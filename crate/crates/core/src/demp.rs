//! Deceptive meta-planning: a MAML-style outer loop around the
//! episode-level policy-gradient learner.
//!
//! A block starts from the meta-initialization `theta0`, takes `m` inner
//! steps `theta_{k+1} = theta_k - alpha * grad L_k(theta_k)` on consecutive
//! real episodes, then runs one more episode under `theta_m` whose loss is
//! the meta objective. The inner steps are recorded on a higher-order tape so
//! the meta-gradient with respect to `theta0` flows through every inner
//! gradient. In first-order mode the inner gradients are recorded as
//! constants instead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{critic_step, policy_loss, AgentError, AgentParams, EpisodeBatch, LearnerConfig, PolicySpec};
use crate::autodiff::{AdError, ParamVector, Tape, Var};
use crate::gridworld::{GridMap, Trajectory};
use crate::observers::GoalPosterior;

pub const MAX_INNER_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DempError {
    #[error("inner step count {0} outside 1..={MAX_INNER_STEPS}")]
    BadInnerSteps(usize),
    #[error("exact meta-gradient requested from a first-order trace")]
    HigherOrderUnavailable,
    #[error("inner trace is not complete: {done} of {needed} steps")]
    IncompleteTrace { done: usize, needed: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner adaptation steps per block.
    pub m: usize,
    pub beta_lr: f64,
    pub first_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            m: 2,
            beta_lr: 0.0001,
            first_order: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), DempError> {
        if self.m == 0 || self.m > MAX_INNER_STEPS {
            return Err(DempError::BadInnerSteps(self.m));
        }
        Ok(())
    }
}

/// The recorded inner loop of one block.
#[derive(Debug)]
pub struct InnerTrace {
    tape: Tape,
    theta0: Var,
    thetas: Vec<Var>,
    losses: Vec<f64>,
    alpha: f64,
    first_order: bool,
}

impl InnerTrace {
    pub fn begin(theta0: &ParamVector, alpha: f64, first_order: bool) -> Self {
        let mut tape = if first_order { Tape::new() } else { Tape::higher_order() };
        let th = tape.watch(theta0);
        Self {
            tape,
            theta0: th,
            thetas: vec![th],
            losses: Vec::new(),
            alpha,
            first_order,
        }
    }

    /// Number of inner steps taken so far.
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// `theta_0 ..= theta_k`.
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn is_first_order(&self) -> bool {
        self.first_order
    }

    pub fn theta(&self, k: usize) -> ParamVector {
        ParamVector::new(self.tape.value(self.thetas[k]).to_vec()).expect("finite parameters")
    }

    pub fn last_theta(&self) -> ParamVector {
        self.theta(self.thetas.len() - 1)
    }

    /// Pre-update inner losses `L_0 .. L_{k-1}`.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// One inner step. `loss` builds `L_k` on the tape as a function of the
    /// current parameter node; the gradient is scaled by `scale` (used for
    /// clipping) before the step. Returns the pre-update loss.
    pub fn adapt_scaled<F>(&mut self, scale: impl FnOnce(&ParamVector) -> f64, loss: F) -> Result<f64, DempError>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var, DempError>,
    {
        let th = *self.thetas.last().unwrap();
        let l = loss(&mut self.tape, th)?;
        let value = self.tape.scalar(l);
        let numeric = self.tape.grad(l, th)?;
        let s = scale(&numeric);
        let g = if self.first_order {
            self.tape.constant(numeric.into_vec())
        } else {
            self.tape.grad_graph(l, th)?
        };
        let step = self.tape.scale(g, -self.alpha * s);
        let next = self.tape.add(th, step);
        self.thetas.push(next);
        self.losses.push(value);
        Ok(value)
    }

    pub fn adapt<F>(&mut self, loss: F) -> Result<f64, DempError>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var, DempError>,
    {
        self.adapt_scaled(|_| 1.0, loss)
    }

    /// Records the meta objective as a function of the final parameters.
    pub fn meta_loss<F>(&mut self, outer: F) -> Result<MetaLoss, DempError>
    where
        F: FnOnce(&mut Tape, Var) -> Result<Var, DempError>,
    {
        let th = *self.thetas.last().unwrap();
        let var = outer(&mut self.tape, th)?;
        Ok(MetaLoss {
            var,
            value: self.tape.scalar(var),
        })
    }

    /// Gradient of `loss` with respect to `theta0`.
    ///
    /// Exact mode differentiates through every inner step and needs a trace
    /// recorded with `first_order = false`. First-order mode ignores the
    /// inner Jacobians and returns the gradient at the final parameters.
    pub fn meta_gradient(&self, loss: &MetaLoss, first_order: bool) -> Result<ParamVector, DempError> {
        if first_order {
            let last = *self.thetas.last().unwrap();
            return Ok(self.tape.grad(loss.var, last)?);
        }
        if self.first_order && self.steps() > 0 {
            return Err(DempError::HigherOrderUnavailable);
        }
        Ok(self.tape.grad(loss.var, self.theta0)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetaLoss {
    var: Var,
    pub value: f64,
}

/// Runs `m` inner steps from `theta0`. `inner(tape, k, theta_k)` builds `L_k`.
pub fn unroll<F>(theta0: &ParamVector, alpha: f64, meta: &MetaConfig, mut inner: F) -> Result<InnerTrace, DempError>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var, DempError>,
{
    meta.validate()?;
    let mut trace = InnerTrace::begin(theta0, alpha, meta.first_order);
    for k in 0..meta.m {
        trace.adapt(|tape, th| inner(tape, k, th))?;
    }
    Ok(trace)
}

/// `theta0 - beta * grad`.
pub fn meta_update(theta0: &ParamVector, grad: &ParamVector, beta: f64) -> Result<ParamVector, DempError> {
    Ok(theta0.step(grad, beta)?)
}

/// What happened on one call to [`DempLearner::learn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DempStep {
    /// Inner step `k` (0-based) with its pre-update loss.
    Inner { k: usize, loss: f64 },
    /// Block-closing episode: meta loss and meta-gradient norm.
    Meta { loss: f64, grad_norm: f64 },
}

impl DempStep {
    pub fn loss(&self) -> f64 {
        match self {
            Self::Inner { loss, .. } | Self::Meta { loss, .. } => *loss,
        }
    }
}

/// DeMP agent driven one episode at a time.
///
/// Blocks span `m + 1` episodes: `m` inner steps, then the evaluation
/// episode under `theta_m` that closes the block with a meta-update. The
/// critic takes a TD step on every episode and is not meta-learned.
#[derive(Debug)]
pub struct DempLearner {
    spec: PolicySpec,
    cfg: LearnerConfig,
    meta: MetaConfig,
    theta0: ParamVector,
    psi: ParamVector,
    trace: InnerTrace,
}

impl DempLearner {
    pub fn new(spec: PolicySpec, params: AgentParams, cfg: LearnerConfig, meta: MetaConfig) -> Result<Self, DempError> {
        meta.validate()?;
        let trace = InnerTrace::begin(&params.theta, cfg.alpha_lr, meta.first_order);
        Ok(Self {
            spec,
            cfg,
            meta,
            theta0: params.theta,
            psi: params.psi,
            trace,
        })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn meta_config(&self) -> &MetaConfig {
        &self.meta
    }

    pub fn theta0(&self) -> &ParamVector {
        &self.theta0
    }

    pub fn psi(&self) -> &ParamVector {
        &self.psi
    }

    /// Parameters the next episode is played with.
    pub fn current_theta(&self) -> ParamVector {
        self.trace.last_theta()
    }

    pub fn current_params(&self) -> AgentParams {
        AgentParams {
            theta: self.current_theta(),
            psi: self.psi.clone(),
        }
    }

    /// Inner steps already taken in the open block.
    pub fn phase(&self) -> usize {
        self.trace.steps()
    }

    /// Consumes the posterior the observer assigned to `traj`.
    pub fn learn(
        &mut self,
        map: &GridMap,
        traj: &Trajectory,
        posterior: &GoalPosterior,
    ) -> Result<DempStep, DempError> {
        let batch = EpisodeBatch::new(map, traj, posterior, &self.cfg)?;
        let adv = batch.advantages(&self.spec, &self.psi, self.cfg.gamma);
        let (spec, cfg) = (&self.spec, &self.cfg);
        let build = |tape: &mut Tape, th: Var| -> Result<Var, DempError> {
            Ok(policy_loss(tape, th, spec, &batch, &adv, cfg)?)
        };
        let out = if self.trace.steps() < self.meta.m {
            let k = self.trace.steps();
            let clip = cfg.grad_clip;
            let loss = self.trace.adapt_scaled(
                |g| {
                    let n = g.norm();
                    if clip > 0.0 && n > clip {
                        clip / n
                    } else {
                        1.0
                    }
                },
                build,
            )?;
            DempStep::Inner { k, loss }
        } else {
            let ml = self.trace.meta_loss(build)?;
            let g = self.trace.meta_gradient(&ml, self.meta.first_order)?;
            let g = crate::agents::clip_grad(g, self.cfg.grad_clip);
            self.theta0 = meta_update(&self.theta0, &g, self.meta.beta_lr)?;
            self.trace = InnerTrace::begin(&self.theta0, self.cfg.alpha_lr, self.meta.first_order);
            DempStep::Meta {
                loss: ml.value,
                grad_norm: g.norm(),
            }
        };
        self.psi = critic_step(&self.spec, &self.psi, &batch, &self.cfg)?;
        Ok(out)
    }
}
