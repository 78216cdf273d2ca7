//! Backpropagation-free attention localization over cascaded PCA feature
//! units, plus the attention-assisted two-stage classifier built on it.
//!
//! The pipeline has three localization steps: a preliminary square attention
//! window picked from pixel-level soft decisions ([`sal_step1`]), a
//! weakly-supervised per-pixel refinement of that window ([`sal_step2`]),
//! and binarization / bounding-box regularization / crop-resize
//! ([`sal_step3`]). Feature extraction everywhere is the cascaded filter
//! bank of [`saab`] and [`context`]. [`classify`] wires the localizer into
//! a two-stage classifier whose second stage resolves the top-2 confusion
//! pairs with full-frame and cropped-attention branches.

pub mod classify;
pub mod context;
pub mod data_io;
pub mod error;
pub mod gbdt;
pub mod logistic;
pub mod pipeline;
pub mod saab;
pub mod sal_step1;
pub mod sal_step2;
pub mod sal_step3;
pub mod synth;
pub mod tensor;
pub mod util;

pub use data_io::{LabeledDataset, TrainedPipeline};
pub use error::{Result, SalError};
pub use tensor::ImageTensor;
