//! Deconfounded actor-critic learning of ventilator-setting policies from
//! logged ICU trajectories.

pub mod action;
pub mod adaptation;
pub mod bins;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rewards;
pub mod risk;
pub mod split;
pub mod stats;
pub mod synthetic;
pub mod trainer;
pub mod trajectory;
pub mod workspace;

pub use error::{DacError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/state-encoding.md")]
    mod state_encoding {}
    #[doc = include_str!("../../../book/src/deconfounding.md")]
    mod deconfounding {}
    #[doc = include_str!("../../../book/src/risk-matching.md")]
    mod risk_matching {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
