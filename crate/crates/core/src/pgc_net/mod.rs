//! Perspective-guided density network: blocks, network, trainer and
//! gradient checking.

pub mod block;
pub mod gradcheck;
pub mod network;
pub mod trainer;

pub use block::{pgc_block_backward, pgc_block_forward, PgcBlockGrads, PgcBlockParams};
pub use gradcheck::{gradcheck, GradReport};
pub use network::{build_toy_net, Network, NetworkConfig, FEATURE_STRIDE};
pub use trainer::{evaluate, prepare, train, train_samples, EvalReport, Sgd, TrainSample, TrainerConfig};
