//! Desk-scale neural-network sparsification toolkit.
//!
//! Four ways to make a network sparse, one training loop, and the harness to
//! compare them honestly:
//!
//! * [`magnitude`] — gradual magnitude pruning on a cubic schedule.
//! * [`random_prune`] — the uniform-random control every method must beat.
//! * [`vd`] — sparse variational dropout with the local reparameterization
//!   trick; weights whose posterior is mostly noise get pruned.
//! * [`l0`] — hard-concrete gates trained against an expected-L0 penalty.
//!
//! Everything runs on a small tape-based autodiff engine ([`tape`]) that is
//! generic over the scalar type: training uses `f32`, gradient checking
//! re-runs the identical graph code in `f64` ([`gradcheck`]). Random numbers
//! come from counter-based streams ([`rng`]) so every run replays bit-exactly
//! from its seed.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod l0;
pub mod magnitude;
pub mod mask;
pub mod models;
pub mod optim;
pub mod random_prune;
pub mod report;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vd;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
