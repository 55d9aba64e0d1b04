//! Repeated deceptive path planning laboratory.

pub mod agents;
pub mod autodiff;
pub mod checkpoint;
pub mod demp;
pub mod gridworld;
pub mod harness;
pub mod metrics;
pub mod observers;
pub mod protocol;
pub mod rng;
pub mod svg;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/gridworld.md")]
    pub mod gridworld {}
    #[doc = include_str!("../../../book/src/observers.md")]
    pub mod observers {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/deceptive-reward.md")]
    pub mod deceptive_reward {}
    #[doc = include_str!("../../../book/src/meta-gradient.md")]
    pub mod meta_gradient {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
