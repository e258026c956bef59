//! No-reference point cloud quality assessment through vision-language
//! alignment.
//!
//! The pipeline: parse a colored point cloud, render multi-view color and
//! depth maps, encode them with two miniature vision transformers, compare
//! the fused visual feature against textual features of five quality
//! adjectives wrapped in learnable prompts, and read the resulting softmax
//! over quality levels as an opinion score distribution. Training supervises
//! that distribution with an EMD loss over CDFs, a quantile loss, and a
//! cross-modal contrastive loss.

pub mod alignment;
pub mod diffcore;
pub mod encoders;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pointcloud;
pub mod projection;
pub mod training;
pub(crate) mod seeding;
pub mod tensorio;

pub use diffcore::{DiffError, NdArray, Param, Tape, Var};
