//! Branch-free exp and tanh used by the hot elementwise ops.
//!
//! Rational approximations in the Cephes style, accurate to a couple of ulp,
//! written without early returns so the compiler can vectorize the loops.
//! They are ordinary arithmetic, so results are bit-reproducible.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

const EXP_P: [f64; 3] = [
    1.261_771_930_748_105_9e-4,
    3.029_944_077_074_419_6e-2,
    9.999_999_999_999_999e-1,
];
const EXP_Q: [f64; 4] = [
    3.001_985_051_386_644_6e-6,
    2.524_483_403_496_841e-3,
    2.272_655_482_081_550_3e-1,
    2.0,
];

#[inline(always)]
pub(crate) fn fast_exp(x: f64) -> f64 {
    // clamp keeps the bit tricks in range; the ends saturate like exp does
    let x = x.clamp(-745.0, 709.0);
    let n = (x * LOG2E).round();
    let r = x - n * LN2_HI - n * LN2_LO;
    let r2 = r * r;
    let p = r * (EXP_P[2] + r2 * (EXP_P[1] + r2 * EXP_P[0]));
    let q = EXP_Q[3] + r2 * (EXP_Q[2] + r2 * (EXP_Q[1] + r2 * EXP_Q[0]));
    let e = 1.0 + 2.0 * p / (q - p);
    // branch-free 2^n in two halves so subnormal results stay representable
    let n1 = (n * 0.5).floor();
    let n2 = n - n1;
    let p1 = f64::from_bits(((n1 as i64 + 1023) as u64) << 52);
    let p2 = f64::from_bits(((n2 as i64 + 1023) as u64) << 52);
    e * p1 * p2
}

#[inline(always)]
pub(crate) fn fast_tanh(x: f64) -> f64 {
    // tanh(x) = sign(x) * (1 - 2 / (exp(2|x|) + 1)); saturated past |x| = 20
    let a = x.abs().min(20.0);
    let e = fast_exp(2.0 * a);
    let t = 1.0 - 2.0 / (e + 1.0);
    t.copysign(x)
}
