//! Synthetic distortions with level-monotone severity, plus the oracle rater
//! that assigns each (kind, level) a ground-truth score and a discretized
//! Gaussian opinion score distribution.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::OpinionScoreDistribution;

use super::{PointCloud, PointCloudError};

pub const MAX_LEVEL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    GeomNoise,
    ColorNoise,
    Downsample,
    Quantize,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::GeomNoise,
        DistortionKind::ColorNoise,
        DistortionKind::Downsample,
        DistortionKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GeomNoise => "geom_noise",
            Self::ColorNoise => "color_noise",
            Self::Downsample => "downsample",
            Self::Quantize => "quantize",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, PointCloudError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| PointCloudError::UnknownKind(name.to_string()))
    }

    /// Constant shift of the oracle score for this kind, decoupling the four
    /// severity ramps so kinds are not perfectly confounded with levels.
    pub fn score_offset(self) -> f64 {
        match self {
            Self::GeomNoise => -0.3,
            Self::ColorNoise => 0.0,
            Self::Downsample => 0.3,
            Self::Quantize => -0.15,
        }
    }
}

fn check_level(level: u8) -> Result<(), PointCloudError> {
    if (1..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(PointCloudError::InvalidLevel(level))
    }
}

/// Applies one distortion at the given level. Deterministic in
/// `(kind, level, seed)`; severity grows monotonically with level.
pub fn apply_distortion(
    cloud: &PointCloud,
    kind: DistortionKind,
    level: u8,
    seed: u64,
) -> Result<PointCloud, PointCloudError> {
    check_level(level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lv = level as f64;
    match kind {
        DistortionKind::GeomNoise => {
            let sigma = 0.002 * lv;
            let positions = cloud
                .positions()
                .iter()
                .map(|p| {
                    let mut q = *p;
                    for c in &mut q {
                        let z: f64 = rng.sample(StandardNormal);
                        *c += sigma * z;
                    }
                    q
                })
                .collect();
            PointCloud::new(positions, cloud.colors().to_vec())
        }
        DistortionKind::ColorNoise => {
            let sigma = 8.0 * lv;
            let colors = cloud
                .colors()
                .iter()
                .map(|c| {
                    let mut out = [0u8; 3];
                    for (o, &ch) in out.iter_mut().zip(c) {
                        let z: f64 = rng.sample(StandardNormal);
                        *o = (ch as f64 + sigma * z).round().clamp(0.0, 255.0) as u8;
                    }
                    out
                })
                .collect();
            PointCloud::new(cloud.positions().to_vec(), colors)
        }
        DistortionKind::Downsample => {
            let keep = ((cloud.len() as f64) * (1.0 - 0.13 * lv)).floor() as usize;
            if keep < 8 {
                return Err(PointCloudError::EmptyResult(keep));
            }
            let mut indices: Vec<usize> = (0..cloud.len()).collect();
            indices.shuffle(&mut rng);
            indices.truncate(keep);
            indices.sort_unstable(); // original order preserved
            let positions = indices.iter().map(|&i| cloud.positions()[i]).collect();
            let colors = indices.iter().map(|&i| cloud.colors()[i]).collect();
            PointCloud::new(positions, colors)
        }
        DistortionKind::Quantize => {
            let step = 0.004 * lv;
            let positions = cloud
                .positions()
                .iter()
                .map(|p| {
                    let mut q = *p;
                    for c in &mut q {
                        *c = (*c / step).round() * step;
                    }
                    q
                })
                .collect();
            PointCloud::new(positions, cloud.colors().to_vec())
        }
    }
}

/// The score axis used by the oracle: `options` equally spaced score values
/// from `q_min` to `q_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreScale {
    pub q_min: f64,
    pub q_max: f64,
    pub options: usize,
}

impl ScoreScale {
    pub fn new(q_min: f64, q_max: f64, options: usize) -> Self {
        assert!(q_max > q_min && options >= 2);
        Self {
            q_min,
            q_max,
            options,
        }
    }

    /// Score options, ascending.
    pub fn options_vec(&self) -> Vec<f64> {
        (0..self.options)
            .map(|i| {
                self.q_min + (self.q_max - self.q_min) * i as f64 / (self.options - 1) as f64
            })
            .collect()
    }
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self::new(1.0, 5.0, 5)
    }
}

const ORACLE_SIGMA: f64 = 0.7;

/// Ground-truth supervision for a distorted sample: a score that falls
/// linearly with the level (shifted per kind) and a Gaussian probability
/// mass function discretized over the score options and renormalized.
pub fn oracle_osd(
    kind: DistortionKind,
    level: u8,
    scale: ScoreScale,
) -> Result<(f64, OpinionScoreDistribution), PointCloudError> {
    check_level(level)?;
    let span = scale.q_max - scale.q_min;
    let true_score = scale.q_max - span * (level as f64 - 1.0) / 5.0 + kind.score_offset();
    let options = scale.options_vec();
    let weights: Vec<f64> = options
        .iter()
        .map(|&opt| (-(opt - true_score) * (opt - true_score) / (2.0 * ORACLE_SIGMA * ORACLE_SIGMA)).exp())
        .collect();
    let osd = OpinionScoreDistribution::from_weights(weights, options)
        .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
    Ok((true_score, osd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unit_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let colors = (0..n)
            .map(|_| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
            .collect();
        PointCloud::new(positions, colors).unwrap()
    }

    #[test]
    fn same_seed_is_deterministic() {
        let cloud = unit_cloud(500, 1);
        for kind in DistortionKind::ALL {
            let a = apply_distortion(&cloud, kind, 3, 99).unwrap();
            let b = apply_distortion(&cloud, kind, 3, 99).unwrap();
            assert_eq!(a, b, "{}", kind.name());
        }
    }

    #[test]
    fn downsample_count_follows_floor_formula() {
        let cloud = unit_cloud(1000, 2);
        let out = apply_distortion(&cloud, DistortionKind::Downsample, 3, 7).unwrap();
        assert_eq!(out.len(), 610); // floor(1000 * (1 - 0.39))
    }

    #[test]
    fn downsample_below_minimum_errors() {
        let cloud = unit_cloud(10, 3);
        assert!(matches!(
            apply_distortion(&cloud, DistortionKind::Downsample, 6, 7),
            Err(PointCloudError::EmptyResult(_))
        ));
    }

    #[test]
    fn geom_noise_mean_squared_displacement() {
        // each coordinate gains independent N(0, sigma^2), so the expected
        // squared displacement per point is 3 sigma^2
        let n = 100_000;
        let cloud = unit_cloud(n, 4);
        let level = 4u8;
        let sigma = 0.002 * level as f64;
        let out = apply_distortion(&cloud, DistortionKind::GeomNoise, level, 5).unwrap();
        let msd: f64 = cloud
            .positions()
            .iter()
            .zip(out.positions())
            .map(|(a, b)| {
                (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        let expected = 3.0 * sigma * sigma;
        assert!(
            (msd - expected).abs() / expected < 0.05,
            "msd {msd} vs {expected}"
        );
    }

    #[test]
    fn quantize_snaps_to_grid() {
        let cloud = unit_cloud(200, 5);
        let level = 2u8;
        let step = 0.004 * level as f64;
        let out = apply_distortion(&cloud, DistortionKind::Quantize, level, 0).unwrap();
        for p in out.positions() {
            for &c in p {
                let k = (c / step).round();
                assert!((c - k * step).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn color_noise_grows_with_level() {
        let cloud = unit_cloud(5000, 6);
        let dev = |level: u8| -> f64 {
            let out = apply_distortion(&cloud, DistortionKind::ColorNoise, level, 8).unwrap();
            cloud
                .colors()
                .iter()
                .zip(out.colors())
                .map(|(a, b)| {
                    (0..3)
                        .map(|i| (a[i] as f64 - b[i] as f64).abs())
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        assert!(dev(1) < dev(3) && dev(3) < dev(6));
    }

    #[test]
    fn oracle_level_one_is_top_score() {
        let (score, osd) = oracle_osd(DistortionKind::ColorNoise, 1, ScoreScale::default()).unwrap();
        assert_eq!(score, 5.0); // offset 0 for color noise
        assert_eq!(osd.argmax(), 4); // ascending options, mass at 5
        assert!(osd.probs()[4] > 0.5);
    }

    #[test]
    fn oracle_distribution_sums_to_one() {
        for kind in DistortionKind::ALL {
            for level in 1..=MAX_LEVEL {
                let (_, osd) = oracle_osd(kind, level, ScoreScale::default()).unwrap();
                let sum: f64 = osd.probs().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_level_four_matches_direct_evaluation() {
        let (score, osd) = oracle_osd(DistortionKind::GeomNoise, 4, ScoreScale::default()).unwrap();
        // 5 - 4*(4-1)/5 - 0.3
        assert!((score - 2.3).abs() < 1e-12);
        let opts = [1.0, 2.0, 3.0, 4.0, 5.0];
        let raw: Vec<f64> = opts
            .iter()
            .map(|o| (-(o - score) * (o - score) / (2.0 * 0.49)).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        for (p, r) in osd.probs().iter().zip(&raw) {
            assert!((p - r / z).abs() < 1e-12);
        }
        assert_eq!(osd.probs().len(), 5);
    }

    #[test]
    fn oracle_score_strictly_decreasing_in_level() {
        for kind in DistortionKind::ALL {
            let mut prev = f64::INFINITY;
            for level in 1..=MAX_LEVEL {
                let (score, _) = oracle_osd(kind, level, ScoreScale::default()).unwrap();
                assert!(score < prev, "{} level {level}", kind.name());
                prev = score;
            }
        }
    }

    #[test]
    fn wider_scale_spreads_scores() {
        let wide = ScoreScale::new(2.0, 10.0, 5);
        let (top, _) = oracle_osd(DistortionKind::ColorNoise, 1, wide).unwrap();
        let (bottom, _) = oracle_osd(DistortionKind::ColorNoise, 6, wide).unwrap();
        assert_eq!(top, 10.0);
        assert_eq!(bottom, 2.0);
        assert_eq!(wide.options_vec(), vec![2.0, 4.0, 6.0, 8.0, 10.0]);
    }
}
