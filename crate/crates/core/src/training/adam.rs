//! Adam with decoupled weight decay over the model's trainable groups.

use crate::diffcore::NdArray;
use crate::model::QualityModel;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for every trainable parameter, in the model's
/// visitation order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<(String, NdArray, NdArray)>,
}

impl AdamState {
    pub fn init(model: &QualityModel) -> Self {
        let mut moments = Vec::new();
        model.visit_params(&mut |name, p| {
            if p.trainable {
                moments.push((
                    name,
                    NdArray::zeros(p.value.shape()),
                    NdArray::zeros(p.value.shape()),
                ));
            }
        });
        Self { step: 0, moments }
    }
}

/// One Adam update for a single tensor with bias correction at step `t`
/// (1-based) and decoupled weight decay.
pub fn adam_update(
    value: &mut NdArray,
    grad: &NdArray,
    m: &mut NdArray,
    v: &mut NdArray,
    t: u64,
    hyper: &AdamHyper,
) {
    debug_assert_eq!(value.shape(), grad.shape());
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let md = m.data_mut();
    let vd = v.data_mut();
    let pd = value.data_mut();
    for (((p, &g), mi), vi) in pd.iter_mut().zip(grad.data()).zip(md).zip(vd) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p -= hyper.lr * hyper.weight_decay * *p;
        *p -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
}

/// Applies one optimizer step to every trainable parameter from its
/// accumulated gradient. Frozen parameters are untouched.
pub fn adam_step(model: &mut QualityModel, state: &mut AdamState, hyper: &AdamHyper) {
    state.step += 1;
    let t = state.step;
    let mut cursor = 0usize;
    model.visit_params_mut(&mut |name, p| {
        if !p.trainable {
            return;
        }
        let (slot_name, m, v) = &mut state.moments[cursor];
        debug_assert_eq!(*slot_name, name);
        adam_update(&mut p.value, &p.grad, m, v, t, hyper);
        cursor += 1;
    });
    debug_assert_eq!(cursor, state.moments.len());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut value = NdArray::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = value.clone();
        let grad = NdArray::zeros(&[3]);
        let mut m = NdArray::zeros(&[3]);
        let mut v = NdArray::zeros(&[3]);
        adam_update(&mut value, &grad, &mut m, &mut v, 1, &AdamHyper::new(0.1, 0.0));
        assert_eq!(value, before);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // from zero moments with gradient g: m = (1-b1)g, v = (1-b2)g^2,
        // corrected mhat = g, vhat = g^2, so the step is -lr*g/(|g|+eps)
        for &g in &[0.37f64, -1.4, 2e-3] {
            let hyper = AdamHyper::new(0.01, 0.0);
            let mut value = NdArray::scalar(1.0);
            let mut m = NdArray::scalar(0.0);
            let mut v = NdArray::scalar(0.0);
            adam_update(
                &mut value,
                &NdArray::scalar(g),
                &mut m,
                &mut v,
                1,
                &hyper,
            );
            let want = 1.0 - hyper.lr * g / (g.abs() + hyper.eps);
            assert!((value.item() - want).abs() < 1e-15, "g={g}");
            // matches the explicit recurrence too
            let m1 = (1.0 - hyper.beta1) * g;
            let v1 = (1.0 - hyper.beta2) * g * g;
            let mhat = m1 / (1.0 - hyper.beta1);
            let vhat = v1 / (1.0 - hyper.beta2);
            let want2 = 1.0 - hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            assert!((value.item() - want2).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let hyper = AdamHyper::new(0.1, 0.5);
        let mut value = NdArray::scalar(2.0);
        let mut m = NdArray::scalar(0.0);
        let mut v = NdArray::scalar(0.0);
        adam_update(&mut value, &NdArray::scalar(0.0), &mut m, &mut v, 1, &hyper);
        // zero gradient: only the decay term acts
        assert!((value.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn multi_step_recurrence_oracle() {
        // three steps with constant gradient, tracked by hand
        let hyper = AdamHyper::new(0.05, 0.0);
        let g = 0.8;
        let mut value = NdArray::scalar(0.3);
        let mut m = NdArray::scalar(0.0);
        let mut v = NdArray::scalar(0.0);
        let (mut hm, mut hv, mut hp) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=3u64 {
            adam_update(&mut value, &NdArray::scalar(g), &mut m, &mut v, t, &hyper);
            hm = hyper.beta1 * hm + (1.0 - hyper.beta1) * g;
            hv = hyper.beta2 * hv + (1.0 - hyper.beta2) * g * g;
            let mhat = hm / (1.0 - hyper.beta1.powi(t as i32));
            let vhat = hv / (1.0 - hyper.beta2.powi(t as i32));
            hp -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
            assert!((value.item() - hp).abs() < 1e-15, "step {t}");
        }
    }
}
