//! Retrieval-based quality head: cosine similarities between the fused
//! visual feature and the per-level textual features, a softmax over those
//! similarities as the predicted opinion score distribution, and the weighted
//! score readout. A small MLP regression head covers the no-text ablation.

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, NdArray, Param, Tape, Var};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("score anchors must be strictly monotone")]
    NonMonotoneAnchors,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// The five-grade quality scale adjectives, best first.
pub const FIVE_GRADE_ADJECTIVES: [&str; 5] = ["excellent", "good", "fair", "poor", "bad"];

/// Named quality levels with their numeric score anchors.
#[derive(Debug, Clone)]
pub struct QualityLevels {
    pub descriptions: Vec<String>,
    pub q: Vec<f64>,
}

impl QualityLevels {
    pub fn new(descriptions: Vec<String>, q: Vec<f64>) -> Result<Self, AlignError> {
        if descriptions.len() != q.len() || q.is_empty() {
            return Err(AlignError::LengthMismatch {
                expected: descriptions.len(),
                got: q.len(),
            });
        }
        if !strictly_monotone(&q) {
            return Err(AlignError::NonMonotoneAnchors);
        }
        Ok(Self { descriptions, q })
    }

    /// The five-grade adjective scale over the given anchors (best first).
    pub fn five_grade(q: Vec<f64>) -> Result<Self, AlignError> {
        Self::new(
            FIVE_GRADE_ADJECTIVES.iter().map(|s| s.to_string()).collect(),
            q,
        )
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }
}

impl Default for QualityLevels {
    fn default() -> Self {
        Self::five_grade(vec![5.0, 4.0, 3.0, 2.0, 1.0]).expect("static table")
    }
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.len() >= 1
        && (v.windows(2).all(|w| w[0] < w[1]) || v.windows(2).all(|w| w[0] > w[1]))
}

/// A probability vector over discrete score options.
#[derive(Debug, Clone, PartialEq)]
pub struct OpinionScoreDistribution {
    probs: Vec<f64>,
    anchors: Vec<f64>,
}

impl OpinionScoreDistribution {
    pub fn new(probs: Vec<f64>, anchors: Vec<f64>) -> Result<Self, AlignError> {
        if probs.len() != anchors.len() || probs.is_empty() {
            return Err(AlignError::LengthMismatch {
                expected: anchors.len(),
                got: probs.len(),
            });
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(AlignError::InvalidDistribution(
                "negative or non-finite probability".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(AlignError::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        if !strictly_monotone(&anchors) {
            return Err(AlignError::NonMonotoneAnchors);
        }
        Ok(Self { probs, anchors })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>, anchors: Vec<f64>) -> Result<Self, AlignError> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(AlignError::InvalidDistribution(format!(
                "weights sum to {sum}"
            )));
        }
        let probs = weights.iter().map(|w| w / sum).collect();
        Self::new(probs, anchors)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Probabilities and anchors reordered so the anchors ascend.
    pub fn ascending(&self) -> (Vec<f64>, Vec<f64>) {
        if self.anchors.windows(2).all(|w| w[0] < w[1]) {
            (self.anchors.clone(), self.probs.clone())
        } else {
            let mut a: Vec<f64> = self.anchors.iter().rev().cloned().collect();
            let mut p: Vec<f64> = self.probs.iter().rev().cloned().collect();
            // anchors are strictly monotone, so reversal is enough
            debug_assert!(a.windows(2).all(|w| w[0] < w[1]));
            if a.is_empty() {
                a.push(0.0);
                p.push(1.0);
            }
            (a, p)
        }
    }

    /// Index of the most probable level.
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .expect("non-empty")
    }
}

/// Cosine similarity between a visual feature and each textual feature row.
pub fn similarities(f_i: &NdArray, f_t: &NdArray) -> Result<Vec<f64>, AlignError> {
    if f_t.rank() != 2 || f_i.rank() != 1 || f_t.shape()[1] != f_i.shape()[0] {
        return Err(AlignError::LengthMismatch {
            expected: f_i.shape()[0],
            got: if f_t.rank() == 2 { f_t.shape()[1] } else { 0 },
        });
    }
    let t = Tape::new();
    let fi = t.constant(f_i.clone());
    let ft = t.constant(f_t.clone());
    let pi = similarities_t(&t, fi, ft)?;
    Ok(t.value_cloned(pi).into_data())
}

/// Tape form of [`similarities`]: `f_i` is `(B, C)`, `f_t` is `(K, C)`;
/// result is `(B, K)` of cosines.
pub fn similarities_t(t: &Tape, f_i: Var, f_t: Var) -> Result<Var, DiffError> {
    let fi2 = if t.shape_of(f_i).len() == 1 {
        let c = t.shape_of(f_i)[0];
        t.reshape(f_i, vec![1, c])?
    } else {
        f_i
    };
    let ni = t.l2_normalize_rows(fi2)?;
    let nt = t.l2_normalize_rows(f_t)?;
    let sims = t.matmul_nt(ni, nt)?;
    if t.shape_of(f_i).len() == 1 {
        let k = t.shape_of(sims)[1];
        t.reshape(sims, vec![k])
    } else {
        Ok(sims)
    }
}

/// Softmax over (optionally rescaled) similarities; `scale = 1` applies the
/// softmax to the raw cosines.
pub fn osd_from_similarities(
    pi: &[f64],
    scale: f64,
    levels: &QualityLevels,
) -> Result<OpinionScoreDistribution, AlignError> {
    if pi.len() != levels.k() {
        return Err(AlignError::LengthMismatch {
            expected: levels.k(),
            got: pi.len(),
        });
    }
    let t = Tape::new();
    let x = t.constant(NdArray::from_vec(vec![pi.len()], pi.to_vec())?);
    let scaled = t.scale(x, scale)?;
    let probs = t.softmax_lastdim(scaled)?;
    OpinionScoreDistribution::new(t.value_cloned(probs).into_data(), levels.q.clone())
}

/// Expected score under the distribution: the probability-weighted sum of
/// the level anchors.
pub fn score_from_osd(
    osd: &OpinionScoreDistribution,
    levels: &QualityLevels,
) -> Result<f64, AlignError> {
    if osd.k() != levels.k() {
        return Err(AlignError::LengthMismatch {
            expected: levels.k(),
            got: osd.k(),
        });
    }
    Ok(osd
        .probs
        .iter()
        .zip(levels.q.iter())
        .map(|(p, q)| p * q)
        .sum())
}

/// Two-layer MLP used instead of the text branch in the ablation that
/// regresses the fused visual feature straight to a score.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl RegressionHead {
    pub fn init<R: Rng>(rng: &mut R, c: usize) -> Self {
        let hidden = (c / 2).max(1);
        let s1 = 1.0 / (c as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Param::trainable(NdArray::randn(rng, &[c, hidden], s1)),
            b1: Param::trainable(NdArray::zeros(&[hidden])),
            w2: Param::trainable(NdArray::randn(rng, &[hidden, 1], s2)),
            b2: Param::trainable(NdArray::zeros(&[1])),
        }
    }

    /// Forward on the tape: `(B, C) -> (B, 1)` scores. `bind` registers each
    /// parameter on the tape (leaf when trainable, constant when frozen).
    pub fn forward_t(
        &self,
        t: &Tape,
        f_i: Var,
        bind: &mut dyn FnMut(&'static str, &Param) -> Var,
    ) -> Result<Var, DiffError> {
        let w1 = bind("w1", &self.w1);
        let b1 = bind("b1", &self.b1);
        let w2 = bind("w2", &self.w2);
        let b2 = bind("b2", &self.b2);
        let h = t.matmul(f_i, w1)?;
        let h = t.add_broadcast(h, b1)?;
        let h = t.gelu(h)?;
        let y = t.matmul(h, w2)?;
        t.add_broadcast(y, b2)
    }

    /// Score for a single feature vector.
    pub fn predict(&self, f_i: &NdArray) -> Result<f64, AlignError> {
        let t = Tape::new();
        let c = f_i.shape()[0];
        let x = t.constant(f_i.reshaped(vec![1, c])?);
        let y = self.forward_t(&t, x, &mut |_, p| t.constant(p.value.clone()))?;
        Ok(t.item_of(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn similarity_of_matching_row_is_one() {
        let f = NdArray::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut rows = vec![0.0; 12];
        rows[4..8].copy_from_slice(f.data());
        let ft = NdArray::from_vec(vec![3, 4], rows).unwrap();
        // other rows are zero vectors: replace them to keep norms positive
        let mut data = ft.data().to_vec();
        data[0..4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        data[8..12].copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        let ft = NdArray::from_vec(vec![3, 4], data).unwrap();
        let pi = similarities(&f, &ft).unwrap();
        assert!((pi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_of_orthogonal_rows_is_zero() {
        let f = NdArray::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let ft = NdArray::from_vec(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let pi = similarities(&f, &ft).unwrap();
        assert!(pi.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn similarities_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let f = NdArray::randn(&mut rng, &[8], 1.0);
        let ft = NdArray::randn(&mut rng, &[5, 8], 1.0);
        let pi = similarities(&f, &ft).unwrap();
        for (k, &got) in pi.iter().enumerate() {
            let row = &ft.data()[k * 8..(k + 1) * 8];
            let dot: f64 = f.data().iter().zip(row).map(|(a, b)| a * b).sum();
            let na: f64 = f.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let want = dot / (na * nb);
            assert!((got - want).abs() < 1e-12, "row {k}: {got} vs {want}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn softmax_of_unit_spike() {
        let levels = QualityLevels::default();
        let osd = osd_from_similarities(&[1.0, 0.0, 0.0, 0.0, 0.0], 1.0, &levels).unwrap();
        let e = std::f64::consts::E;
        assert!((osd.probs()[0] - e / (e + 4.0)).abs() < 1e-12);
        for &p in &osd.probs()[1..] {
            assert!((p - 1.0 / (e + 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_similarities_give_uniform_distribution() {
        let levels = QualityLevels::default();
        let osd = osd_from_similarities(&[0.3; 5], 1.0, &levels).unwrap();
        for &p in osd.probs() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let levels = QualityLevels::default();
        let pi = [0.9, -0.3, 0.1, 0.5, -0.7];
        let shifted: Vec<f64> = pi.iter().map(|v| v + 0.37).collect();
        let a = osd_from_similarities(&pi, 1.0, &levels).unwrap();
        let b = osd_from_similarities(&shifted, 1.0, &levels).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn score_readout_cases() {
        let levels = QualityLevels::default();
        let spike =
            OpinionScoreDistribution::new(vec![1.0, 0.0, 0.0, 0.0, 0.0], levels.q.clone()).unwrap();
        assert_eq!(score_from_osd(&spike, &levels).unwrap(), 5.0);

        let uniform = OpinionScoreDistribution::new(vec![0.2; 5], levels.q.clone()).unwrap();
        assert!((score_from_osd(&uniform, &levels).unwrap() - 3.0).abs() < 1e-12);

        let wide = QualityLevels::five_grade(vec![10.0, 8.0, 6.0, 4.0, 2.0]).unwrap();
        let osd =
            OpinionScoreDistribution::new(vec![0.1, 0.2, 0.4, 0.2, 0.1], wide.q.clone()).unwrap();
        assert!((score_from_osd(&osd, &wide).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn osd_rejects_bad_inputs() {
        assert!(OpinionScoreDistribution::new(vec![0.5, 0.6], vec![1.0, 2.0]).is_err());
        assert!(OpinionScoreDistribution::new(vec![1.2, -0.2], vec![1.0, 2.0]).is_err());
        assert!(OpinionScoreDistribution::new(vec![0.5, 0.5], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn ordering_is_preserved_by_softmax() {
        let levels = QualityLevels::default();
        let pi = [0.4, -0.2, 0.9, 0.1, -0.8];
        let osd = osd_from_similarities(&pi, 2.5, &levels).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if pi[i] > pi[j] {
                    assert!(osd.probs()[i] > osd.probs()[j]);
                }
            }
        }
        // argmax invariant to positive rescaling
        let osd2 = osd_from_similarities(&pi, 7.0, &levels).unwrap();
        assert_eq!(osd.argmax(), osd2.argmax());
    }

    #[test]
    fn regression_head_zero_weights_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = RegressionHead::init(&mut rng, 8);
        head.w1.value.data_mut().fill(0.0);
        head.w2.value.data_mut().fill(0.0);
        head.b2.value.data_mut()[0] = 2.5;
        let f = NdArray::randn(&mut rng, &[8], 1.0);
        assert!((head.predict(&f).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn regression_head_last_layer_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = RegressionHead::init(&mut rng, 8);
        let f = NdArray::randn(&mut rng, &[8], 1.0);
        let bias = head.b2.value.item();
        let y1 = head.predict(&f).unwrap();
        let mut doubled = head.clone();
        for v in doubled.w2.value.data_mut() {
            *v *= 2.0;
        }
        let y2 = doubled.predict(&f).unwrap();
        assert!((y2 - bias - 2.0 * (y1 - bias)).abs() < 1e-10);
    }
}
