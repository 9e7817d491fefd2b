//! Blockwise knowledge distillation with teacher-routed inputs and
//! progressive block recomposition.

pub mod data;
pub mod error;
pub mod instrument;
pub mod losses;
pub mod network;
pub mod oracle;
pub mod partition;
pub mod presets;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use losses::{HeadObjective, LossBreakdown};
pub use network::{build_network, ArchDescription, LayerSpec, Network};
pub use partition::{make_partition, Decomposition, Partition};
pub use tensor::{Float, Tensor};
pub use train::{MetricRecord, OptimConfig, RunOutput, StageSchedule, TrainConfig};
