//! Synthetic labeled corpus: procedural reference shapes, distorted variants
//! at six levels per kind, oracle supervision, and a CSV manifest alongside
//! one binary PLY per sample.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::OpinionScoreDistribution;
use crate::seeding::derive_seed;

use super::{
    apply_distortion, normalize_to_unit_cube, oracle_osd, parse_ply, write_ply, DistortionKind,
    PlyFormat, PointCloud, PointCloudError, ScoreScale,
};

/// One labeled training sample.
#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub cloud: PointCloud,
    pub sample_id: usize,
    pub reference_id: usize,
    pub kind: DistortionKind,
    pub level: u8,
    pub osd_label: OpinionScoreDistribution,
    pub true_score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusConfig {
    pub references: usize,
    pub points_per_reference: usize,
    pub seed: u64,
    pub scale: ScoreScale,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            references: 8,
            points_per_reference: 4096,
            seed: 7,
            scale: ScoreScale::default(),
        }
    }
}

fn unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Uniform direction on the unit sphere.
fn sphere_dir<R: Rng>(rng: &mut R) -> [f64; 3] {
    let z: f64 = rng.random::<f64>() * 2.0 - 1.0;
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// A procedural reference shape, normalized into the unit cube.
///
/// All families are solid bodies whose silhouette covers the image center
/// from every axis view (random or center crops land on content), and the
/// colors are broad, low-frequency gradients so that the synthetic
/// distortions (channel noise, grid snapping, thinning, jitter) stay visible
/// against them in renders.
pub fn synthesize_reference(reference_id: usize, points: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (1 << 32) | reference_id as u64));
    let mut positions = Vec::with_capacity(points);
    let mut colors = Vec::with_capacity(points);
    let family = reference_id % 8;
    let tau = std::f64::consts::TAU;
    for _ in 0..points {
        let (p, c): ([f64; 3], [u8; 3]) = match family {
            0 => {
                // ellipsoid, two-tone vertical gradient
                let d = sphere_dir(&mut rng);
                let p = [d[0], 0.8 * d[1], 0.65 * d[2]];
                let t = 0.5 + 0.5 * d[2];
                let c = [unit(0.85 - 0.6 * t), unit(0.25 + 0.55 * t), unit(0.35)];
                (p, c)
            }
            1 => {
                // rounded box (4-norm ball surface), warm flat faces
                let d = sphere_dir(&mut rng);
                let n4 = (d[0].abs().powi(4) + d[1].abs().powi(4) + d[2].abs().powi(4))
                    .powf(0.25);
                let p = [d[0] / n4, d[1] / n4, d[2] / n4];
                let c = [
                    unit(0.75 + 0.2 * d[0]),
                    unit(0.45 + 0.3 * d[1]),
                    unit(0.2 + 0.2 * d[2]),
                ];
                (p, c)
            }
            2 => {
                // capsule along z, three soft bands
                let h: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let d = sphere_dir(&mut rng);
                let p = if h.abs() < 0.5 {
                    let a = rng.random::<f64>() * tau;
                    [a.cos() * 0.55, a.sin() * 0.55, h]
                } else {
                    let cap = if h > 0.0 { 0.5 } else { -0.5 };
                    [0.55 * d[0], 0.55 * d[1], cap + 0.5 * d[2].abs() * h.signum()]
                };
                let t = (p[2] + 1.0) / 2.0;
                let c = [unit(0.2 + 0.6 * t), unit(0.7 - 0.4 * t), unit(0.75)];
                (p, c)
            }
            3 => {
                // cone with base disc, radial gradient
                let pick: f64 = rng.random();
                let a = rng.random::<f64>() * tau;
                let p = if pick < 0.7 {
                    let h = rng.random::<f64>();
                    let r = 1.0 - h;
                    [r * a.cos(), r * a.sin(), 1.4 * h - 0.7]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    [r * a.cos(), r * a.sin(), -0.7]
                };
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let c = [unit(0.9 - 0.5 * r), unit(0.35 + 0.45 * r), unit(0.55 - 0.3 * r)];
                (p, c)
            }
            4 => {
                // bumpy sphere, latitude gradient
                let d = sphere_dir(&mut rng);
                let theta = d[2].asin();
                let phi = d[1].atan2(d[0]);
                let r = 1.0 + 0.16 * (3.0 * theta).sin() * (3.0 * phi).sin();
                let p = [r * d[0], r * d[1], r * d[2]];
                let t = 0.5 + 0.5 * d[2];
                let c = [unit(0.3 + 0.15 * t), unit(0.4 + 0.5 * t), unit(0.9 - 0.6 * t)];
                (p, c)
            }
            5 => {
                // peanut: union of two offset spheres, one tint per lobe
                let lobe = rng.random_range(0..2u8);
                let d = sphere_dir(&mut rng);
                let off = if lobe == 0 { -0.55 } else { 0.55 };
                let p = [0.75 * d[0] + off, 0.75 * d[1], 0.75 * d[2]];
                let c = if lobe == 0 {
                    [unit(0.8), unit(0.5 + 0.2 * d[2]), unit(0.25)]
                } else {
                    [unit(0.3), unit(0.55 + 0.2 * d[2]), unit(0.8)]
                };
                (p, c)
            }
            6 => {
                // octahedron (1-norm ball surface), per-face shading
                let d = sphere_dir(&mut rng);
                let n1 = d[0].abs() + d[1].abs() + d[2].abs();
                let p = [d[0] / n1, d[1] / n1, d[2] / n1];
                let t = 0.5 + 0.5 * (p[0] + p[1] + p[2]) / 1.0;
                let c = [unit(0.5 + 0.35 * p[0]), unit(0.5 + 0.35 * p[1]), unit(t)];
                (p, c)
            }
            _ => {
                // solid lens: flattened ball volume, radial color sweep
                let d = sphere_dir(&mut rng);
                let r: f64 = rng.random::<f64>().cbrt();
                let p = [r * d[0], r * d[1], 0.45 * r * d[2]];
                let c = [unit(0.25 + 0.6 * r), unit(0.8 - 0.5 * r), unit(0.5 + 0.3 * d[2])];
                (p, c)
            }
        };
        positions.push(p);
        colors.push(c);
    }
    let cloud = PointCloud::new(positions, colors).expect("generator output is valid");
    normalize_to_unit_cube(&cloud)
}

/// Builds the full corpus: `references x 4 kinds x 6 levels` samples, each a
/// distorted copy of its normalized reference with oracle supervision.
/// Per-sample randomness comes from `seed XOR sample_id`.
pub fn synthesize_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusSample>, PointCloudError> {
    let mut samples = Vec::new();
    let mut sample_id = 0usize;
    for reference_id in 0..cfg.references {
        let reference =
            synthesize_reference(reference_id, cfg.points_per_reference, cfg.seed);
        for kind in DistortionKind::ALL {
            for level in 1..=super::distort::MAX_LEVEL {
                let cloud =
                    apply_distortion(&reference, kind, level, cfg.seed ^ sample_id as u64)?;
                let (true_score, osd_label) = oracle_osd(kind, level, cfg.scale)?;
                samples.push(CorpusSample {
                    cloud,
                    sample_id,
                    reference_id,
                    kind,
                    level,
                    osd_label,
                    true_score,
                });
                sample_id += 1;
            }
        }
    }
    Ok(samples)
}

/// Writes one binary PLY per sample plus `manifest.csv` under `dir`.
pub fn write_corpus(dir: &Path, samples: &[CorpusSample]) -> Result<(), PointCloudError> {
    let ply_dir = dir.join("plys");
    fs::create_dir_all(&ply_dir)?;
    let mut writer = csv::Writer::from_path(dir.join("manifest.csv"))
        .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
    let l = samples
        .first()
        .map(|s| s.osd_label.probs().len())
        .unwrap_or(0);
    let mut header = vec![
        "sample_id".to_string(),
        "reference_id".to_string(),
        "kind".to_string(),
        "level".to_string(),
        "true_score".to_string(),
    ];
    header.extend((1..=l).map(|i| format!("p{i}")));
    header.push("ply_path".to_string());
    writer
        .write_record(&header)
        .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
    for sample in samples {
        let rel = format!("plys/sample_{:04}.ply", sample.sample_id);
        fs::write(dir.join(&rel), write_ply(&sample.cloud, PlyFormat::BinaryLe))?;
        let mut record = vec![
            sample.sample_id.to_string(),
            sample.reference_id.to_string(),
            sample.kind.name().to_string(),
            sample.level.to_string(),
            format!("{}", sample.true_score),
        ];
        record.extend(sample.osd_label.probs().iter().map(|p| format!("{p}")));
        record.push(rel);
        writer
            .write_record(&record)
            .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
    Ok(())
}

/// Reads a corpus directory written by [`write_corpus`]. The score scale must
/// match the one the manifest was generated with (it fixes the option axis).
pub fn read_corpus(dir: &Path, scale: ScoreScale) -> Result<Vec<CorpusSample>, PointCloudError> {
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))
        .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| PointCloudError::Manifest(e.to_string()))?
        .clone();
    let l = headers.iter().filter(|h| h.starts_with('p') && h[1..].parse::<usize>().is_ok()).count();
    if l != scale.options {
        return Err(PointCloudError::Manifest(format!(
            "manifest has {l} probability columns, scale expects {}",
            scale.options
        )));
    }
    let anchors = scale.options_vec();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| PointCloudError::Manifest(e.to_string()))?;
        let field = |i: usize| -> Result<&str, PointCloudError> {
            record
                .get(i)
                .ok_or_else(|| PointCloudError::Manifest(format!("row too short at column {i}")))
        };
        let parse_f = |s: &str| -> Result<f64, PointCloudError> {
            s.parse()
                .map_err(|_| PointCloudError::Manifest(format!("bad number `{s}`")))
        };
        let sample_id: usize = field(0)?
            .parse()
            .map_err(|_| PointCloudError::Manifest("bad sample_id".into()))?;
        let reference_id: usize = field(1)?
            .parse()
            .map_err(|_| PointCloudError::Manifest("bad reference_id".into()))?;
        let kind = DistortionKind::from_name(field(2)?)?;
        let level: u8 = field(3)?
            .parse()
            .map_err(|_| PointCloudError::Manifest("bad level".into()))?;
        let true_score = parse_f(field(4)?)?;
        let mut probs = Vec::with_capacity(l);
        for i in 0..l {
            probs.push(parse_f(field(5 + i)?)?);
        }
        let osd_label = OpinionScoreDistribution::new(probs, anchors.clone())
            .map_err(|e| PointCloudError::Manifest(e.to_string()))?;
        let rel = field(5 + l)?;
        let bytes = fs::read(dir.join(rel))?;
        let cloud = parse_ply(&bytes)?;
        samples.push(CorpusSample {
            cloud,
            sample_id,
            reference_id,
            kind,
            level,
            osd_label,
            true_score,
        });
    }
    Ok(samples)
}
