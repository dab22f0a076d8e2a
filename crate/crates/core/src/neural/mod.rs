//! Hand-rolled 3D convolutional network: tensors, layers, loss, optimizer,
//! checkpointing, and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod upsample;

pub use adam::{AdamParams, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use conv::Conv3d;
pub use loss::{batch_loss, record_loss, LossTerms, RecordTarget};
pub use model::{GraspMap, TrunkCache, VgnModel};
pub use train::{run_chunk, write_loss_csv, EpochStats, TrainConfig, Trainer};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use upsample::{upsample2x, upsample2x_backward};
