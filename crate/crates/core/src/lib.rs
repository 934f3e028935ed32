//! Surface-current prediction on PEC meshes.
//!
//! [`em`] is an integral-equation reference solver that labels data and
//! defines the physics residual; [`model`] is the hierarchical graph network
//! trained against that residual by [`train`]. [`nn`] is the small
//! reverse-mode autodiff engine underneath.

pub mod em;
pub mod geometry;
pub mod graph;
pub mod hierarchy;
pub mod model;
pub mod nn;
pub mod train;

pub use em::{IncidentWave, RcsProfile, SurfaceCurrentField, C64};
pub use geometry::{generate_shape, PointCloud, ShapeSpec, TriangleMesh, Vec3};
pub use graph::PhysicsGraph;
pub use hierarchy::LevelHierarchy;
pub use model::{GeometryContext, KvSource, Model, ModelConfig};
pub use train::{Dataset, LossMode, MetricsReport, TrainConfig};
