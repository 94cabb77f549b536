//! Polynomial bias-field nonuniformity correction for infrared imagery.
//!
//! The crate covers the whole desk-scale loop:
//!
//! - [`biasfield`]: the bivariate polynomial field model and coefficient sampling.
//! - [`synthesis`]: procedural clear scenes, small-target injection, `Y = C + k B`
//!   degradation and reproducible corpora on disk.
//! - [`estimation`]: a paired least-squares oracle and a blind robust estimator,
//!   plus the correction `R = Y - B`.
//! - [`metrics`]: PSNR, SSIM, SCR/SCRG and the coefficient loss.
//! - [`losses`]: mask construction and the feature-space TEBS/BR/union losses.
//! - [`detection`]: a top-hat small-target detector, IoU matching and P-R curves.
//! - [`pipeline`]: direct / blind-correct / paired-correct evaluation over a corpus.

pub mod biasfield;
pub mod corpus;
pub mod detection;
pub mod error;
pub mod estimation;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod synthesis;

pub use biasfield::{coeff_count, eval_bias_field, monomial_basis, AmplitudeSpec, CoeffVector, CoordNorm};
pub use error::{Error, IoError, Result};
pub use image::{downsample2, gaussian_blur, GrayImage};
pub use io::{load_image, save_image, BitDepth};
pub use corpus::{generate_corpus, Corpus, CorpusConfig, Sidecar};
pub use detection::{detect, iou, match_and_score, DetectParams, Detection, PrReport};
pub use estimation::{correct, fit_blind, fit_paired, BlindParams, Brightness, FitMethod, FitResult};
pub use losses::{BinaryMask, FeatureMap, FeatureStack};
pub use metrics::{psnr, scr, scrg, ssim, ScrSpec};
pub use pipeline::{EvalReport, PipelineConfig, Strategy};
pub use synthesis::{generate_scene, BBox, SceneConfig, SceneRecord};
