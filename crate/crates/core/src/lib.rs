//! Keypoint-guided retrieval and deformation of 3D shapes.
//!
//! The pipeline encodes shapes into keypoints and region tokens, retrieves the
//! closest database shapes by token distance, and deforms each candidate toward
//! the target through a keypoint-driven cage.

pub mod autodiff;
pub mod cage;
pub mod data;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod nets;
pub mod retrieval;
pub mod storage;

pub use cage::{Cage, CageTemplate, InfluenceField, MvcWeights};
pub use data::{Family, Split};
pub use deform::{DeformResult, LossHistory, LossKind, SourceGeometry, TargetShape, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{Point, PointCloud, TriMesh};
pub use nets::{ArchConfig, Keypoints, NetBundle};
pub use retrieval::{EvalOptions, EvalReport, ShapeRecord, TokenDatabase};
