//! Source-free domain adaptation for segmentation: a model trained on a
//! labeled source domain is adapted to an unlabeled target domain by entropy
//! guided pseudo-label refinement (Stage I) followed by mean-teacher
//! self-training with latent consistency (Stage II).
//!
//! Numerical code is generic over [`scalar::Scalar`]; the aliases below fix
//! it to `f32`, which is what the pipeline and the CLI use.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nifti;
pub mod nn;
pub mod pipeline;
pub mod pseudolabel;
pub mod report;
pub mod scalar;
pub mod selftrain;
pub mod tensor;
pub mod train;

pub use config::AdaptConfig;
pub use error::{Error, Result};
pub use pipeline::Mode;

pub type Real = f32;
pub type Model = models::ModelState<Real>;
pub type Image = tensor::Tensor<Real>;
pub type Probs = models::ProbMap<Real>;
pub type Entropy = losses::EntropyMap<Real>;
pub type Latent = models::LatentFeatures<Real>;
pub type SegDataset = data::Dataset<Real>;
pub type Bundle = pseudolabel::PseudoLabelBundle<Real>;
pub type Pair = selftrain::TeacherStudentPair<Real>;
