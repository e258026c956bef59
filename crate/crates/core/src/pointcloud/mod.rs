//! Colored point clouds: PLY parsing and writing, geometric normalization,
//! a four-kind synthetic distortion generator, and an oracle rater that turns
//! (distortion kind, level) into a ground-truth score and opinion score
//! distribution for closed-loop experiments.

mod corpus;
mod distort;
mod ply;

pub use corpus::{
    read_corpus, synthesize_corpus, synthesize_reference, write_corpus, CorpusConfig,
    CorpusSample,
};
pub use distort::{apply_distortion, oracle_osd, DistortionKind, ScoreScale};
pub use ply::{parse_ply, write_ply, PlyFormat};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("declared {expected} records, found {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("bad property: {0}")]
    BadProperty(String),
    #[error("point cloud must have at least one point")]
    Empty,
    #[error("coordinates must be finite")]
    NonFinite,
    #[error("positions and colors differ in length: {positions} vs {colors}")]
    LengthMismatch { positions: usize, colors: usize },
    #[error("distortion level {0} outside 1..=6")]
    InvalidLevel(u8),
    #[error("downsampling would leave {0} points (minimum 8)")]
    EmptyResult(usize),
    #[error("unknown distortion kind `{0}`")]
    UnknownKind(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A colored 3-D point set. Positions are arbitrary source units until
/// [`normalize_to_unit_cube`] maps them into `[0, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[u8; 3]>) -> Result<Self, PointCloudError> {
        if positions.is_empty() {
            return Err(PointCloudError::Empty);
        }
        if positions.len() != colors.len() {
            return Err(PointCloudError::LengthMismatch {
                positions: positions.len(),
                colors: colors.len(),
            });
        }
        if positions
            .iter()
            .any(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(PointCloudError::NonFinite);
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    /// Axis-aligned bounding box as `(min, max)` corners.
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Maps the bounding box into `[0, 1]^3` by one uniform scale (longest side
/// becomes 1) and a translation; aspect ratios are preserved. Axes with zero
/// extent are centered at 0.5, so a fully degenerate cloud collapses to the
/// cube center.
pub fn normalize_to_unit_cube(cloud: &PointCloud) -> PointCloud {
    let (lo, hi) = cloud.bounding_box();
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let longest = extent[0].max(extent[1]).max(extent[2]);
    let positions = cloud
        .positions
        .iter()
        .map(|p| {
            let mut out = [0.5f64; 3];
            for a in 0..3 {
                if extent[a] > 0.0 {
                    out[a] = (p[a] - lo[a]) / longest;
                }
            }
            out
        })
        .collect();
    PointCloud {
        positions,
        colors: cloud.colors.clone(),
    }
}
