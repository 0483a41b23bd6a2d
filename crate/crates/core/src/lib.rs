//! Synthetic contrast enhancement for cardiac CT.
//!
//! A deconvolutional encoder/decoder maps a non-contrast CT slice to a
//! contrast-enhanced one. It is trained with a heart-masked RMSE plus a
//! cross-entropy on a steep-sigmoid binarisation of the prediction, and
//! evaluated with NMI, PSNR, Dice, Pearson correlation, Bland-Altman
//! agreement and volume percentage error. Paired training data comes from
//! a synthetic phantom generator; CECT/CT pairs can be aligned with a
//! mutual-information rigid registration.

pub mod cli;
pub mod error;
pub mod histogram;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod registration;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
