//! Preprocessing, augmentation and the synthetic phantom dataset.

mod augment;
mod clahe;
pub mod dataset;
mod phantom;
mod preprocess;

pub use augment::{elastic_field, gaussian_blur, AugmentConfig, SpatialTransform};
pub use clahe::{clahe, quantize, tile_mapping, ClaheParams};
pub use phantom::{generate_phantom, Phantom, PhantomParams, MIN_CONTRACTION, SPACING_RANGE};
pub use preprocess::{preprocess, zscore, CineSequence};
