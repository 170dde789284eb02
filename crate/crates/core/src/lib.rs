//! Small-gain certification and simulation for infinite networks of ODE
//! subsystems.
//!
//! * [`seqspace`]: truncated `l^p` sequences, block norms, distances to product sets.
//! * [`gainop`]: the gain operator, its spectral bracket and the composite certificate.
//! * [`netsim`]: subsystem dynamics, zero-boundary truncation, RK4 integration.
//! * [`certify`]: dissipation and envelope checks along trajectories.
//! * [`apps`]: clock augmentation, weighted average consensus, distributed observers.

pub mod apps;
pub mod certify;
pub mod error;
pub mod gainop;
pub mod netsim;
pub mod seqspace;

pub use error::{Error, Result};
pub use gainop::{analyze, Analysis, Certificate, GainOperator, GainSpec, SpectralBracket, Status};
pub use seqspace::{Exponent, SetDesc, SetSpec, TruncSeq};
pub use netsim::{InputSignal, NetworkSpec, OdeSystem, SubsystemSpec, Trajectory};
pub use certify::{DecayFit, EnvelopeReport, MarginSeries};
