//! Dense row-major f64 arrays and the matrix kernels used by the tape ops.
//!
//! All kernels are deterministic: every output element is reduced in a fixed
//! sequential order over the inner dimension, so results are bit-identical
//! regardless of thread count. The workhorse is a single i-k-j loop whose
//! inner axis runs contiguously over the output row; transposed operand
//! forms are materialized into scratch first, which keeps the inner loop
//! vectorizable even when a matrix dimension is small.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::DiffError;

/// Flat row-major array of 64-bit reals. The buffer is shared on clone and
/// copied only when mutated, so reshapes and parameter binding are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl NdArray {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// Normal(0, std) samples in row-major order from the given stream.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Single element of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same buffer under a new shape; no copy.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != self.data.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshaped",
                detail: format!("shape {:?} does not hold {} elements", shape, self.data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Self {
        let mut out = Self::zeros(&self.shape);
        par_zip(out.data_mut(), &self.data, |o, &v| *o = f(v));
        out
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<(), DiffError> {
        // a non-finite value anywhere propagates into the running sums
        let mut acc = [0.0f64; 4];
        let mut chunks = self.data.chunks_exact(4);
        for c in &mut chunks {
            acc[0] += c[0];
            acc[1] += c[1];
            acc[2] += c[2];
            acc[3] += c[3];
        }
        for &v in chunks.remainder() {
            acc[0] += v;
        }
        if (acc[0] + acc[1] + acc[2] + acc[3]).is_finite() {
            Ok(())
        } else {
            Err(DiffError::NonFinite { op })
        }
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &NdArray) {
        debug_assert_eq!(self.shape, other.shape);
        par_zip(self.data_mut(), other.data(), |a, &b| *a += b);
    }
}

/// Work threshold (in multiply-adds or elements) below which loops stay
/// single-threaded.
pub(crate) const PAR_MACS: usize = 1 << 17;
const PAR_ELEMS: usize = 1 << 16;

/// Parallel elementwise combine; chunks never share elements, so the result
/// is identical to the serial loop.
pub(crate) fn par_zip(out: &mut [f64], src: &[f64], f: impl Fn(&mut f64, &f64) + Sync + Send) {
    debug_assert_eq!(out.len(), src.len());
    if out.len() >= PAR_ELEMS {
        let chunk = out.len().div_ceil(rayon::current_num_threads().max(1) * 4);
        out.par_chunks_mut(chunk)
            .zip(src.par_chunks(chunk))
            .for_each(|(oc, sc)| oc.iter_mut().zip(sc).for_each(|(o, s)| f(o, s)));
    } else {
        out.iter_mut().zip(src).for_each(|(o, s)| f(o, s));
    }
}

/// Parallel map over rows of width `w`.
pub(crate) fn par_rows(data: &mut [f64], w: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    let rows = data.len() / w;
    if data.len() >= PAR_ELEMS && rows > 1 {
        let block = rows.div_ceil(rayon::current_num_threads().max(1) * 4);
        data.par_chunks_mut(block * w).enumerate().for_each(|(bi, chunk)| {
            for (di, row) in chunk.chunks_mut(w).enumerate() {
                f(bi * block + di, row);
            }
        });
    } else {
        for (r, row) in data.chunks_mut(w).enumerate() {
            f(r, row);
        }
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut Vec<f64>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `out += A(m x k) * B(k x n)` in i-k-j order: the inner loop runs over the
/// contiguous output row, which vectorizes without reassociating any single
/// element's sum (lanes map to distinct outputs). Rows are processed four at
/// a time so each loaded B row feeds four accumulator rows.
fn ikj_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let body = |i0: usize, rows: &mut [f64]| {
        for (qi, quad) in rows.chunks_mut(4 * n).enumerate() {
            let base = i0 + qi * 4;
            if quad.len() == 4 * n {
                let (h0, h1) = quad.split_at_mut(2 * n);
                let (r0, r1) = h0.split_at_mut(n);
                let (r2, r3) = h1.split_at_mut(n);
                for p in 0..k {
                    let a0 = a[base * k + p];
                    let a1 = a[(base + 1) * k + p];
                    let a2 = a[(base + 2) * k + p];
                    let a3 = a[(base + 3) * k + p];
                    let brow = &b[p * n..p * n + n];
                    for (j, &bv) in brow.iter().enumerate() {
                        r0[j] += a0 * bv;
                        r1[j] += a1 * bv;
                        r2[j] += a2 * bv;
                        r3[j] += a3 * bv;
                    }
                }
            } else {
                for (di, orow) in quad.chunks_mut(n).enumerate() {
                    let arow = &a[(base + di) * k..(base + di) * k + k];
                    for (p, &av) in arow.iter().enumerate() {
                        let brow = &b[p * n..p * n + n];
                        for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        let threads = rayon::current_num_threads().max(1);
        // blocks stay quad-aligned so the same code path runs per row
        let blk = m.div_ceil(threads * 4).next_multiple_of(4);
        out.par_chunks_mut(blk * n)
            .enumerate()
            .for_each(|(bi, rows)| body(bi * blk, rows));
    } else {
        body(0, out);
    }
}

/// C(m x n) = A(m x k) * B(k x n), all row-major.
pub(crate) fn matmul_nn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    ikj_into(a, b, m, k, n, out);
}

/// C(m x n) = A(m x k) * B(n x k)^T. B is transposed into scratch first so
/// the inner loop stays contiguous.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut bt = Vec::new();
    transpose_into(b, n, k, &mut bt); // (k x n)
    ikj_into(a, &bt, m, k, n, out);
}

/// C(k x n) = A(m x k)^T * B(m x n). A is transposed into scratch first.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut at = Vec::new();
    transpose_into(a, m, k, &mut at); // (k x m)
    ikj_into(&at, b, k, m, n, out);
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_nn_into(a, b, m, k, n, &mut out);
    out
}

pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_nt_into(a, b, m, k, n, &mut out);
    out
}

pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    matmul_tn_into(a, b, m, k, n, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (13, 9, 11);
        let a = NdArray::randn(&mut rng, &[m, k], 1.0);
        let b = NdArray::randn(&mut rng, &[k, n], 1.0);
        let want = naive_nn(a.data(), b.data(), m, k, n);

        let got = matmul_nn(a.data(), b.data(), m, k, n);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // nt: A * (B^T)^T via transposing b
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.data()[p * n + j];
            }
        }
        let got = matmul_nt(a.data(), &bt, m, k, n);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // tn: (A^T)^T * B via transposing a
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a.data()[i * k + p];
            }
        }
        let got = matmul_tn(&at, b.data(), k, m, n);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn from_vec_rejects_bad_shape() {
        assert!(NdArray::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn parallel_path_matches_serial() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (256, 64, 48); // large enough to trigger the parallel path
        let a = NdArray::randn(&mut rng, &[m, k], 1.0);
        let b = NdArray::randn(&mut rng, &[k, n], 1.0);
        let par = matmul_nn(a.data(), b.data(), m, k, n);
        let naive = naive_nn(a.data(), b.data(), m, k, n);
        assert_eq!(par, naive); // bit-identical: same per-element reduction order
    }

    #[test]
    fn finite_check_catches_nan_and_inf() {
        let mut a = NdArray::zeros(&[100]);
        assert!(a.ensure_finite("t").is_ok());
        a.data_mut()[57] = f64::NAN;
        assert!(a.ensure_finite("t").is_err());
        a.data_mut()[57] = f64::INFINITY;
        assert!(a.ensure_finite("t").is_err());
        a.data_mut()[57] = 0.0;
        a.data_mut()[3] = f64::NEG_INFINITY;
        assert!(a.ensure_finite("t").is_err());
    }
}
