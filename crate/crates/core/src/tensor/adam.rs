use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// Optimizer state for [`adam_step`]. Moments are created lazily on the
/// first update of each parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(TensorError::Invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let step_size = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = state.epsilon as f32;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, data: Vec<f32>) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([(name.to_string(), Tensor::from_vec(data))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = AdamState::default();
        adam_step(&mut p, &one("w", vec![0.0; 3]), &mut st, 1e-2).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = one("w", vec![1.0, 1.0]);
        let mut st = AdamState::default();
        adam_step(&mut p, &one("w", vec![0.5, -3.0]), &mut st, 1e-3).unwrap();
        let d = p["w"].data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let run = || {
            let mut p = one("w", vec![0.3, -0.7, 1.1]);
            let mut st = AdamState::default();
            for i in 0..5 {
                let g = one("w", vec![0.1 * i as f32, -0.2, 0.05]);
                adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a["w"].data(), b["w"].data());
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = one("w", vec![1.0, 2.0]);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &one("w", vec![1.0]), &mut st, 1e-3).is_err());
        assert_eq!(st.step, 0);
    }
}
