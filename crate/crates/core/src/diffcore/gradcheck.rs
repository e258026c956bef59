//! Central-difference validation of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, NdArray};

/// Worst observed relative error and where it occurred.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares the analytic gradients produced by `loss_fn` against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`.
///
/// `loss_fn` receives the current parameter values and returns the scalar
/// loss together with one gradient array per parameter. When a parameter has
/// more than `max_coords` entries, a deterministic sample of `max_coords`
/// coordinates (from `seed`) is probed instead of all of them.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[NdArray],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&[NdArray]) -> Result<(f64, Vec<NdArray>), DiffError>,
{
    let mut work: Vec<NdArray> = params.to_vec();
    let (loss0, analytic) = loss_fn(&work)?;
    if !loss0.is_finite() {
        return Err(DiffError::NonFinite { op: "grad_check" });
    }
    if analytic.len() != params.len() {
        return Err(DiffError::ShapeMismatch {
            op: "grad_check",
            detail: format!(
                "{} gradients for {} parameters",
                analytic.len(),
                params.len()
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        coords_checked: 0,
    };

    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(DiffError::ShapeMismatch {
                op: "grad_check",
                detail: format!(
                    "gradient {:?} vs parameter {:?}",
                    grad.shape(),
                    params[pi].shape()
                ),
            });
        }
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(max_coords);
            all.sort_unstable();
            all
        };
        for &ci in &coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let (f_plus, _) = loss_fn(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let (f_minus, _) = loss_fn(&work)?;
            work[pi].data_mut()[ci] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(DiffError::NonFinite { op: "grad_check" });
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    #[test]
    fn quadratic_loss_checks_to_machine_precision() {
        // loss = 0.5 * ||x||^2: central differences are exact for quadratics
        let x0 = NdArray::from_vec(vec![6], vec![0.3, -1.1, 2.0, 0.0, 4.5, -0.7]).unwrap();
        let report = grad_check(
            |ps| {
                let t = Tape::new();
                let x = t.leaf(ps[0].clone());
                let sq = t.mul(x, x)?;
                let m = t.mean_all(sq)?;
                let loss = t.scale(m, 3.0)?; // 0.5 * sum over 6 entries
                let grads = t.backward(loss)?;
                Ok((t.item_of(loss), vec![grads.get(x).unwrap().clone()]))
            },
            &[x0],
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-9,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn frozen_input_reports_zero_gradient() {
        let x0 = NdArray::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let c0 = NdArray::from_vec(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        // gradient slot for a constant stays identically zero
        let t = Tape::new();
        let x = t.leaf(x0.clone());
        let c = t.constant(c0);
        let p = t.mul(x, c).unwrap();
        let loss = t.mean_all(p).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
