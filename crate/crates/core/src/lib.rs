//! Non-Markovian diffusion sampling: noise schedules, Gaussian kernels of the
//! generalized forward process, denoisers, the generalized sampler, the
//! deterministic ODE view, objective equivalence checks and a categorical
//! analogue.

pub mod denoiser;
pub mod discrete;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod objective;
pub mod ode;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod state;

pub use error::{Error, Result};
pub use schedule::{select_subsequence, NoiseSchedule, SubsequenceMode, Trajectory};
pub use state::StateBatch;
