//! Training losses: the RMS difference of two CDFs at the anchor grid, a
//! quantile matching loss over the linearly interpolated inverse CDFs, a
//! symmetric cross-modal contrastive loss over flattened view features, and
//! their weighted combination.

use thiserror::Error;

use crate::alignment::OpinionScoreDistribution;
use crate::diffcore::{interp_leftmost, DiffError, NdArray, Tape, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("contrastive batch needs at least two anchors, got {0}")]
    DegenerateBatch(usize),
    #[error("score axes do not overlap: {0}")]
    AxisMismatch(String),
    #[error("curve is not a valid CDF: {0}")]
    InvalidCurve(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Weights of the combined objective: `emd + alpha * quantile + beta * contrastive`.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, tau1: f64) -> Self {
        assert!(alpha >= 0.0 && beta >= 0.0 && tau1 >= 0.0);
        Self { alpha, beta, tau1 }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        // alpha = 1/K for the five-grade scale
        Self {
            alpha: 0.2,
            beta: 0.08,
            tau1: 0.07,
        }
    }
}

/// Piecewise-linear CDF over ascending score knots.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfCurve {
    knots: Vec<(f64, f64)>,
}

impl CdfCurve {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, LossError> {
        if knots.is_empty() {
            return Err(LossError::InvalidCurve("no knots".into()));
        }
        if !knots.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(LossError::InvalidCurve("scores must strictly increase".into()));
        }
        if !knots.windows(2).all(|w| w[0].1 <= w[1].1) || knots[0].1 < 0.0 {
            return Err(LossError::InvalidCurve("cumulative must be nondecreasing".into()));
        }
        let last = knots.last().unwrap().1;
        if (last - 1.0).abs() > 1e-12 {
            return Err(LossError::InvalidCurve(format!("final cumulative {last}")));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Leftmost score at which the interpolated CDF reaches `theta`, using a
    /// synthetic left anchor one mean knot spacing before the first knot.
    /// Plateaus at exactly `theta` resolve to their left edge.
    pub fn quantile(&self, theta: f64) -> Result<f64, LossError> {
        if !(0.0 < theta && theta < 1.0) {
            return Err(LossError::Diff(DiffError::ThetaOutOfRange { theta }));
        }
        let k = self.knots.len();
        let spacing = if k >= 2 {
            (self.knots[k - 1].0 - self.knots[0].0) / (k - 1) as f64
        } else {
            1.0
        };
        let mut xs = Vec::with_capacity(k + 1);
        let mut cs = Vec::with_capacity(k + 1);
        xs.push(self.knots[0].0 - spacing);
        cs.push(0.0);
        for &(x, c) in &self.knots {
            xs.push(x);
            cs.push(c);
        }
        Ok(interp_leftmost(&xs, &cs, theta).4)
    }
}

/// Running sums of the distribution at each anchor, in ascending score order.
pub fn cdf_from_osd(osd: &OpinionScoreDistribution) -> CdfCurve {
    let (anchors, probs) = osd.ascending();
    let mut acc = 0.0;
    let knots = anchors
        .into_iter()
        .zip(probs)
        .map(|(a, p)| {
            acc += p;
            (a, acc)
        })
        .collect();
    // renormalize the final knot against accumulated rounding
    let mut curve = CdfCurve { knots };
    if let Some(last) = curve.knots.last_mut() {
        last.1 = 1.0;
    }
    curve
}

/// Total mass of `osd` at options less than or equal to each of `points`
/// (which must ascend).
fn cdf_at_points(osd: &OpinionScoreDistribution, points: &[f64]) -> Vec<f64> {
    let (anchors, probs) = osd.ascending();
    points
        .iter()
        .map(|&q| {
            let mut acc = 0.0;
            for (&a, &p) in anchors.iter().zip(&probs) {
                if a <= q {
                    acc += p;
                } else {
                    break;
                }
            }
            acc
        })
        .collect()
}

fn check_axes(
    pred: &OpinionScoreDistribution,
    truth: &OpinionScoreDistribution,
) -> Result<(), LossError> {
    let (pa, _) = pred.ascending();
    let (ta, _) = truth.ascending();
    let (p_lo, p_hi) = (pa[0], pa[pa.len() - 1]);
    let (t_lo, t_hi) = (ta[0], ta[ta.len() - 1]);
    if p_hi < t_lo || t_hi < p_lo {
        return Err(LossError::AxisMismatch(format!(
            "prediction spans [{p_lo}, {p_hi}], truth spans [{t_lo}, {t_hi}]"
        )));
    }
    Ok(())
}

/// RMS difference of the two CDFs evaluated at the prediction's anchors.
pub fn emd_loss(
    pred: &OpinionScoreDistribution,
    truth: &OpinionScoreDistribution,
) -> Result<f64, LossError> {
    check_axes(pred, truth)?;
    let (anchors, probs) = pred.ascending();
    let t = Tape::new();
    let p = t.constant(NdArray::from_vec(vec![probs.len()], probs)?);
    let loss = emd_loss_t(&t, p, &anchors, truth)?;
    Ok(t.item_of(loss))
}

/// Tape form of [`emd_loss`]: `pred_probs` are the predicted probabilities
/// ordered by ascending anchor.
pub fn emd_loss_t(
    t: &Tape,
    pred_probs: Var,
    anchors_asc: &[f64],
    truth: &OpinionScoreDistribution,
) -> Result<Var, LossError> {
    let truth_cdf = cdf_at_points(truth, anchors_asc);
    let tc = t.constant(NdArray::from_vec(vec![truth_cdf.len()], truth_cdf)?);
    let pred_cdf = t.prefix_sum_lastdim(pred_probs)?;
    let diff = t.sub(pred_cdf, tc)?;
    let sq = t.mul(diff, diff)?;
    let mean = t.mean_all(sq)?;
    Ok(t.sqrt_elem(mean)?)
}

/// Mean absolute difference between predicted and true quantiles at `thetas`.
pub fn quantile_loss(
    pred: &OpinionScoreDistribution,
    truth: &OpinionScoreDistribution,
    thetas: &[f64],
) -> Result<f64, LossError> {
    let (anchors, probs) = pred.ascending();
    let t = Tape::new();
    let p = t.constant(NdArray::from_vec(vec![probs.len()], probs)?);
    let loss = quantile_loss_t(&t, p, &anchors, truth, thetas)?;
    Ok(t.item_of(loss))
}

/// Tape form of [`quantile_loss`].
pub fn quantile_loss_t(
    t: &Tape,
    pred_probs: Var,
    anchors_asc: &[f64],
    truth: &OpinionScoreDistribution,
    thetas: &[f64],
) -> Result<Var, LossError> {
    let truth_curve = cdf_from_osd(truth);
    let mut total: Option<Var> = None;
    for &theta in thetas {
        let s_truth = truth_curve.quantile(theta)?;
        let s_pred = t.quantile_from_probs(pred_probs, anchors_asc, theta)?;
        let diff = t.add_scalar(s_pred, -s_truth)?;
        let term = t.abs_elem(diff)?;
        total = Some(match total {
            Some(acc) => t.add(acc, term)?,
            None => term,
        });
    }
    let total = total.ok_or(DiffError::ThetaOutOfRange { theta: f64::NAN })?;
    Ok(t.scale(total, 1.0 / thetas.len() as f64)?)
}

/// Symmetric InfoNCE over view-level color/depth pairs.
///
/// `color` and `depth` are `(B, M, D)` flattened token maps; the positive for
/// anchor `(b, m)` in one modality is the same `(b, m)` in the other, and the
/// denominator runs over all `B * M` opposite-modality candidates. With
/// `exclude_positive` the matching candidate is left out of the denominator.
pub fn contrastive_loss(
    color: &NdArray,
    depth: &NdArray,
    tau1: f64,
    exclude_positive: bool,
) -> Result<f64, LossError> {
    if color.rank() != 3 || color.shape() != depth.shape() {
        return Err(LossError::Diff(DiffError::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("{:?} vs {:?}", color.shape(), depth.shape()),
        }));
    }
    let bm = color.shape()[0] * color.shape()[1];
    let d = color.shape()[2];
    let t = Tape::new();
    let c = t.constant(color.reshaped(vec![bm, d])?);
    let z = t.constant(depth.reshaped(vec![bm, d])?);
    let loss = contrastive_loss_t(&t, c, z, tau1, exclude_positive)?;
    Ok(t.item_of(loss))
}

/// Tape form of [`contrastive_loss`]; operands are `(B*M, D)`.
pub fn contrastive_loss_t(
    t: &Tape,
    color_flat: Var,
    depth_flat: Var,
    tau1: f64,
    exclude_positive: bool,
) -> Result<Var, LossError> {
    let shape = t.shape_of(color_flat);
    let bm = shape[0];
    if bm < 2 {
        return Err(LossError::DegenerateBatch(bm));
    }
    let cn = t.l2_normalize_rows(color_flat)?;
    let dn = t.l2_normalize_rows(depth_flat)?;
    let direction = |a: Var, b: Var| -> Result<Var, DiffError> {
        let sims = t.matmul_nt(a, b)?;
        let scaled = t.scale(sims, 1.0 / tau1)?;
        let pos = t.diag_part(scaled)?;
        let den = if exclude_positive {
            t.mask_diag(scaled)?
        } else {
            scaled
        };
        let lse = t.logsumexp_lastdim(den)?;
        let per_anchor = t.sub(lse, pos)?;
        t.mean_all(per_anchor)
    };
    let cd = direction(cn, dn)?;
    let dc = direction(dn, cn)?;
    let sum = t.add(cd, dc)?;
    Ok(t.scale(sum, 0.5)?)
}

/// `emd + alpha * quantile + beta * contrastive`.
pub fn total_loss(emd: f64, quantile: f64, contrastive: f64, weights: &LossWeights) -> f64 {
    emd + weights.alpha * quantile + weights.beta * contrastive
}

/// Tape form of [`total_loss`].
pub fn total_loss_t(
    t: &Tape,
    emd: Var,
    quantile: Var,
    contrastive: Option<Var>,
    weights: &LossWeights,
) -> Result<Var, DiffError> {
    let q = t.scale(quantile, weights.alpha)?;
    let mut sum = t.add(emd, q)?;
    if let Some(con) = contrastive {
        let c = t.scale(con, weights.beta)?;
        sum = t.add(sum, c)?;
    }
    Ok(sum)
}
