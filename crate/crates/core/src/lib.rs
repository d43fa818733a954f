//! Energy-based Glauber-dynamics discrete diffusion: the forward chain,
//! energy models, exact oracles on enumerable spaces, and the scalar terms of
//! the score-entropy objective.

pub mod chain;
pub mod energy;
pub mod error;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod seq;
pub mod tabular;

pub use chain::{heat_bath_step, metropolis_step, run_forward, run_forward_batch, StepRecord, Trajectory};
pub use energy::{causal_ppl, CausalEnergy, PottsEnergy};
pub use error::{CoreError, Result};
pub use loss::{bregman_term, k_term, path_ratio_targets, step_loss, StepLossInput, TargetMode};
pub use model::{BigramModel, CausalModel, ConditionalModel, EnergyModel, Model, UniformModel};
pub use rng::{stream, StreamRng};
pub use schedule::UpdateSchedule;
pub use seq::{Token, TokenSeq, Vocabulary};
pub use tabular::TabularDistribution;
