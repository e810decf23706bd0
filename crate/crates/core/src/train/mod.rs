mod adam;
mod eval;
mod kfold;
mod model;
mod pipeline;

pub use adam::Adam;
pub use eval::{cross_validate, curves_csv, evaluate, quantify_subject, CrossValidation, FoldResult, IdentitySegmenter, Segmenter};
pub use kfold::{kfold_split, FoldSplit};
pub use model::{f32_exact, mask_volume, Model, Prediction};
pub use pipeline::{
    end_to_end_gradients, init_model, log_csv, prepare_samples, train, train_end_to_end, train_multistage, train_multitask,
    train_segmentation, LogRow, Sample, Strategy, TrainConfig, TrainOutcome,
};
