//! Mirror segmentation with contextual-contrast features, built from
//! first principles for CPU training.

pub mod attention;
pub mod ccfe;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;

pub use config::{Checkpoint, RunConfig};
pub use crf::CrfParams;
pub use dataset::{SampleRecord, SynthConfig};
pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use loss::LossKind;
pub use metrics::{ConfusionCounts, MetricsReport};
pub use network::{build_network, Ablation, MirrorMap, Network, NetworkConfig};
pub use optim::OptimConfig;
pub use params::{ParamKind, ParamStore};
pub use real::Real;
pub use tensor::{Shape, Tensor};
pub use train::{train, EpochLog, TrainReport};
