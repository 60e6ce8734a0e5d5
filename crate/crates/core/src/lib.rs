//! Nested encoder-decoder codec graphs for point-cloud semantic segmentation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the `*32`/`*64` aliases name the two instances.

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod point;
pub mod rng;
pub mod scalar;
pub mod supervision;
pub mod tape;
pub mod tensor;

pub use analysis::{analyze, AnalysisReport, AnalysisSettings};
pub use blocks::{BlockConfig, BlockKind, CodingBlockSpec, DimSchedule};
pub use error::{Error, Result};
pub use graph::{build_topology, validate_graph, EdgeTransform, GraphSpec, NodeId, TopologyKind};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{Model, ModelInput};
pub use params::{ParamStore, Session};
pub use point::{build_hierarchy, PointCloud, SamplingHierarchy};
pub use scalar::Scalar;
pub use supervision::{LossReport, SupervisionMode};
pub use tape::{Gradients, NormStats, ReduceOp, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
