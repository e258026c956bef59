//! Agreement metrics between predicted scores and ground truth: Pearson and
//! Spearman correlations, RMSE after a monotone four-parameter logistic range
//! alignment, and a 2-D PCA of visual features for analysis plots.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::NdArray;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} points")]
    TooFew(usize),
    #[error("constant input has no correlation")]
    ConstantInput,
    #[error("features must be (S, C) with S >= 3")]
    BadFeatureShape,
}

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<(), EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < min {
        return Err(EvalError::TooFew(min));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Textbook Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_pair(x, y, 3)?;
    if is_constant(x) || is_constant(y) {
        return Err(EvalError::ConstantInput);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Ranks with ties averaged (1-based).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite scores"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average-tie ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_pair(x, y, 3)?;
    if is_constant(x) || is_constant(y) {
        return Err(EvalError::ConstantInput);
    }
    plcc(&average_ranks(x), &average_ranks(y))
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_pair(x, y, 1)?;
    let n = x.len() as f64;
    Ok((x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Monotone four-parameter logistic `f(x) = b2 + (b1 - b2) / (1 + exp(-(x - b3)/|b4|))`.
#[derive(Debug, Clone, Copy)]
pub struct Logistic4 {
    pub beta: [f64; 4],
    pub converged: bool,
}

impl Logistic4 {
    pub fn map(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.beta;
        let scale = b4.abs().max(1e-12);
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / scale).exp())
    }
}

fn sse_of(beta: &[f64; 4], pred: &[f64], mos: &[f64]) -> f64 {
    let f = Logistic4 {
        beta: *beta,
        converged: true,
    };
    pred.iter()
        .zip(mos)
        .map(|(&x, &y)| {
            let r = f.map(x) - y;
            r * r
        })
        .sum()
}

/// Least-squares fit by Gauss-Newton with Levenberg damping and monotone
/// step acceptance. Initialized from the data range, the median prediction,
/// and the prediction spread; stops when the relative SSE improvement drops
/// below 1e-10 or after 500 iterations (returning the best iterate seen,
/// flagged unconverged).
pub fn fit_logistic4(pred: &[f64], mos: &[f64]) -> Result<Logistic4, EvalError> {
    check_pair(pred, mos, 5)?;
    if is_constant(pred) || is_constant(mos) {
        return Err(EvalError::ConstantInput);
    }
    let n = pred.len();
    let mut sorted = pred.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean = pred.iter().sum::<f64>() / n as f64;
    let std = (pred.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let mut beta = [
        mos.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mos.iter().cloned().fold(f64::INFINITY, f64::min),
        median,
        std.max(1e-6),
    ];
    let mut sse = sse_of(&beta, pred, mos);
    let mut lambda = 1e-3;
    let mut converged = false;

    for _ in 0..500 {
        // jacobian of residuals r_i = f(x_i) - y_i
        let [b1, b2, b3, b4] = beta;
        let scale = b4.abs().max(1e-12);
        let sign4 = if b4 < 0.0 { -1.0 } else { 1.0 };
        let mut jtj = [[0.0f64; 4]; 4];
        let mut jtr = [0.0f64; 4];
        for (&x, &y) in pred.iter().zip(mos) {
            let t = (x - b3) / scale;
            let s = 1.0 / (1.0 + (-t).exp());
            let f = b2 + (b1 - b2) * s;
            let r = f - y;
            let ds = s * (1.0 - s);
            let j = [
                s,
                1.0 - s,
                (b1 - b2) * ds * (-1.0 / scale),
                (b1 - b2) * ds * (-t / scale) * sign4,
            ];
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }

        let mut accepted = false;
        for _ in 0..20 {
            // damped normal equations
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            let rhs = [-jtr[0], -jtr[1], -jtr[2], -jtr[3]];
            let Some(delta) = solve4(m, rhs) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = [
                beta[0] + delta[0],
                beta[1] + delta[1],
                beta[2] + delta[2],
                beta[3] + delta[3],
            ];
            let candidate_sse = sse_of(&candidate, pred, mos);
            if candidate_sse.is_finite() && candidate_sse < sse {
                let improvement = (sse - candidate_sse) / sse.max(1e-300);
                beta = candidate;
                sse = candidate_sse;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if improvement < 1e-10 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            converged = converged || !accepted && sse.is_finite();
            break;
        }
    }
    Ok(Logistic4 { beta, converged })
}

fn solve4(mut m: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| {
            m[i][col].abs().partial_cmp(&m[j][col].abs()).expect("finite")
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let k = m[row][col] / m[col][col];
            for c in col..4 {
                m[row][c] -= k * m[col][c];
            }
            b[row] -= k * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for c in row + 1..4 {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Full agreement report: Spearman on raw predictions; the logistic map is
/// fitted to align ranges, and Pearson and RMSE are computed on the mapped
/// predictions. When the fitted map would increase RMSE over the raw
/// predictions (possible when they are already on the target scale, since
/// the identity is only a limit of the logistic family), the identity
/// mapping is used instead and `used_logistic` is false.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
    pub logistic: Logistic4,
    pub used_logistic: bool,
    /// Per-sample `(predicted, mapped, mos)`.
    pub rows: Vec<(f64, f64, f64)>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "plcc={:.6},srcc={:.6},rmse={:.6}",
            self.plcc, self.srcc, self.rmse
        )
        .expect("string write");
        s
    }
}

pub fn evaluate(pred: &[f64], mos: &[f64]) -> Result<EvalReport, EvalError> {
    let logistic = fit_logistic4(pred, mos)?;
    let fitted: Vec<f64> = pred.iter().map(|&x| logistic.map(x)).collect();
    let used_logistic = rmse(&fitted, mos)? <= rmse(pred, mos)?;
    let mapped: Vec<f64> = if used_logistic {
        fitted
    } else {
        pred.to_vec()
    };
    let rows = pred
        .iter()
        .zip(&mapped)
        .zip(mos)
        .map(|((&p, &m), &y)| (p, m, y))
        .collect();
    Ok(EvalReport {
        plcc: plcc(&mapped, mos)?,
        srcc: srcc(pred, mos)?,
        rmse: rmse(&mapped, mos)?,
        logistic,
        used_logistic,
        rows,
    })
}

const PCA_SEED: u64 = 0x5043_4131;

/// Projects `(S, C)` features onto their top two principal axes via power
/// iteration with deflation (tolerance 1e-10, at most 10^4 iterations). A
/// rank-deficient covariance yields a zero second component. Component signs
/// follow the largest-magnitude loading.
pub fn pca2d(features: &NdArray) -> Result<NdArray, EvalError> {
    if features.rank() != 2 || features.shape()[0] < 3 {
        return Err(EvalError::BadFeatureShape);
    }
    let (s, c) = (features.shape()[0], features.shape()[1]);
    let mut centered = features.clone();
    for col in 0..c {
        let mean = (0..s).map(|r| features.data()[r * c + col]).sum::<f64>() / s as f64;
        for r in 0..s {
            centered.data_mut()[r * c + col] -= mean;
        }
    }
    // covariance (C x C)
    let mut cov = vec![0.0f64; c * c];
    for r in 0..s {
        let row = &centered.data()[r * c..(r + 1) * c];
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] += row[i] * row[j];
            }
        }
    }
    for v in &mut cov {
        *v /= s as f64;
    }

    let (v1, l1) = power_iteration(&cov, c);
    // deflate and find the second axis
    let mut deflated = cov.clone();
    for i in 0..c {
        for j in 0..c {
            deflated[i * c + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = power_iteration(&deflated, c);
    let keep_second = l2 > l1.max(1e-300) * 1e-12;

    let mut out = NdArray::zeros(&[s, 2]);
    for r in 0..s {
        let row = &centered.data()[r * c..(r + 1) * c];
        let mut x = 0.0;
        let mut y = 0.0;
        for i in 0..c {
            x += row[i] * v1[i];
            if keep_second {
                y += row[i] * v2[i];
            }
        }
        out.data_mut()[r * 2] = x;
        out.data_mut()[r * 2 + 1] = y;
    }
    Ok(out)
}

fn power_iteration(matrix: &[f64], c: usize) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(PCA_SEED);
    let start = NdArray::randn(&mut rng, &[c], 1.0);
    let mut v = start.into_data();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let mut next = vec![0.0f64; c];
        for i in 0..c {
            let row = &matrix[i * c..(i + 1) * c];
            next[i] = row.iter().zip(&v).map(|(&m, &x)| m * x).sum();
        }
        let new_lambda: f64 = next.iter().zip(&v).map(|(&a, &b)| a * b).sum();
        let norm = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return (v, 0.0);
        }
        for x in &mut next {
            *x /= norm;
        }
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        lambda = new_lambda;
        if delta < 1e-10 {
            break;
        }
    }
    // deterministic sign: largest-magnitude loading is positive
    let dominant = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[dominant] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    (v, lambda.abs())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}
