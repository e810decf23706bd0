//! Left-ventricle quantification from cine MR sequences: a dilated residual
//! U-Net segments cavity and myocardium, a spatio-temporal multi-task network
//! regresses 11 indices and the cardiac phase per frame, and a geometric
//! oracle computes the same quantities directly from masks.

pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod numfmt;
pub mod networks;
pub mod train;

pub use error::{CqError, Result};
