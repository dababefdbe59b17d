//! Synthetic task generation: GP and BNN priors, missingness mechanisms,
//! per-sequence normalization and discrete oracle worlds.

pub mod bnn;
pub mod dataset;
pub mod discrete;
pub mod gp;
pub mod missing;

pub use bnn::{sample_bnn_task, BnnPriorConfig};
pub use dataset::{normalize_per_sequence, Dataset, Labels, NormStats, TaskKind, TaskMeta};
pub use discrete::{sample_discrete_world, CopyWorldPrior, DiscreteWorld, WorldMechanism, WorldSpec};
pub use gp::{sample_gp_task, GpKernel, GpPriorConfig, KernelKind};
pub use missing::{apply_missingness, MarModel, Mechanism, MissingnessConfig};
