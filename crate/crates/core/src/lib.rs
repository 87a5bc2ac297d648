//! Parameter inference for ODE systems from invariant measures.
//!
//! The pipeline discretises the continuity equation with an upwind
//! finite-volume operator ([`fvm`]), solves for its teleport-regularised
//! stationary density ([`stationary`]), compares it with a reference density
//! under an optimal-transport cost ([`ot`]) and differentiates the result with
//! respect to the parameters ([`gradient`]) for descent ([`optimize`]).
//! Reference densities come from simulated trajectories ([`simulate`]).

pub mod dynamics;
pub mod error;
pub mod fvm;
pub mod gradient;
pub mod io;
pub mod optimize;
pub mod ot;
pub mod simulate;
pub mod stationary;

pub use error::{Error, Result, Stage};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/transfer-operator.md")]
    pub mod transfer_operator {}
    #[doc = include_str!("../../../book/src/stationary.md")]
    pub mod stationary {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
    #[doc = include_str!("../../../book/src/transport.md")]
    pub mod transport {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub mod gradients {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
