//! Layers, analytic backpropagation and the autoencoder configurations.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layer;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::{ConvLayer, TransposedConvLayer};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use layer::{DenseLayer, Layer};
pub use model::{ArchSpec, AutoencoderModel, ConfigId, Sequential};
