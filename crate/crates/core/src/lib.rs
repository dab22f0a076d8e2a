//! Desk-scale volumetric grasp synthesis.
//!
//! The pipeline turns depth images of tabletop clutter into 6-DOF
//! parallel-jaw grasps. Depth images are fused into a truncated signed
//! distance field, a fully-convolutional network maps the fused volume to
//! dense per-voxel grasp quality, orientation and opening width, and a
//! detection pass extracts executable grasps. Training data comes from a
//! procedural scene generator paired with an analytic grasp oracle, and a
//! simulated clutter-removal benchmark closes the loop.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod neural;
pub mod oracle;
pub mod scene;
pub mod volume;

pub use bench::{run_benchmark, BenchParams, BenchmarkReport, RoundResult, Scenario, SelectPolicy};
pub use config::Config;
pub use dataset::{Dataset, DatasetManifest, DatasetParams, GraspRecord, VolumeGrid};
pub use detect::{plan, post_process, Detection, DetectionConfig, PlanTiming};
pub use error::{Error, Result};
pub use geometry::{Aabb, GripperModel, Pose, Quaternion, TriMesh, Vec3};
pub use neural::{GraspMap, TrainConfig, Trainer, VgnModel};
pub use oracle::{GraspLabel, GraspOutcome, OracleParams};
pub use scene::{ObjectPool, PoolKinds, PrimitiveKind, SceneDescription, SceneGenParams};
pub use volume::{CameraIntrinsics, DepthImage, TsdfVolume};
