//! Dual-mode transformer, score-entropy training and reverse Glauber sampling.

pub mod checkpoint;
pub mod error;
pub mod exact;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{NetError, Result};
pub use model::{backprop, causal_next_logits, forward, infill_logits, probabilities, Gradients, Mode, NetModel, Query};
pub use params::{ModelParams, NetConfig, TimeConfig};
pub use tape::{AttnSpec, ScoreSpec, Tape, Var};
pub use tensor::Real;
pub use objective::{combined_loss, loss_and_grads, CeRows, path_ratio_snapshots, prev_value_ce, snapshot_batch_loss, Snapshot, SnapshotTarget};
pub use optim::{ema_decay, AdamConfig, AdamW, LrSchedule};
pub use exact::ExactReverse;
pub use sampler::{
    causal_fill, exact_reverse_generate, generate, generate_batch, generate_with_prefix, refine_windowed, window_positions, GenerationReport,
    GenerationSpec, Invocations, NetBackend, OracleBackend, ReverseBackend,
};
pub use trainer::{
    ema_refresh, load_trained, make_frozen, pretrain_base, train, train_state, Corpus, Example, FrozenKernel, KernelSource, PretrainConfig,
    PretrainOutput, TrainConfig, TrainOptions, TrainState,
};
