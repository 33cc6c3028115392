use super::{Params, Scalar, Tensor};
use crate::error::{Error, Result};

/// Moment accumulators for [`adam_step`], keyed like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Params<T>,
    second: Params<T>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            beta1,
            beta2,
            epsilon,
            first: Params::new(),
            second: Params::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// All gradients are validated before any parameter is touched, so a
/// rejected step leaves both `params` and `state` unchanged.
pub fn adam_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("adam: learning rate must be positive, got {lr}")));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("adam: no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let bc1 = T::of(1.0 - state.beta1.powi(t));
    let bc2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.epsilon));
    let one = T::one();

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("validated above");
        if !state.first.contains(name) {
            state.first.insert(name, Tensor::zeros(p.shape()));
            state.second.insert(name, Tensor::zeros(p.shape()));
        }
        let m = state.first.get_mut(name).unwrap().data_mut();
        for (mv, &gv) in m.iter_mut().zip(g.data()) {
            *mv = b1 * *mv + (one - b1) * gv;
        }
        let v = state.second.get_mut(name).unwrap().data_mut();
        for (vv, &gv) in v.iter_mut().zip(g.data()) {
            *vv = b2 * *vv + (one - b2) * gv * gv;
        }
        let m = state.first.get(name).unwrap().data();
        let v = state.second.get(name).unwrap().data();
        for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.insert(name, Tensor::full(&[1], v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single("w", 0.7);
        let g = single("w", 0.0);
        let mut s = AdamState::default();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        for &g0 in &[0.3, -2.0, 1e-3] {
            let mut p = single("w", 1.0);
            let mut s = AdamState::default();
            adam_step(&mut p, &single("w", g0), &mut s, 1e-3).unwrap();
            let delta = p.get("w").unwrap().data()[0] - 1.0;
            let expect = -1e-3 * g0 / (g0.abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-15, "{delta} vs {expect}");
        }
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // scalar simulation of the Adam recurrences
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 1e-3, 0.5);
        let (mut m, mut v, mut x) = (0.0, 0.0, 2.0);
        let mut xs = vec![];
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            xs.push(x);
        }
        let mut p = single("w", 2.0);
        let mut s = AdamState::default();
        let mut got = vec![];
        for _ in 0..2 {
            adam_step(&mut p, &single("w", g), &mut s, lr).unwrap();
            got.push(p.get("w").unwrap().data()[0]);
        }
        assert!(got[0] < 2.0 && got[1] < got[0]);
        for (a, b) in got.iter().zip(&xs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single("encoder.w", 1.0);
        let mut s = AdamState::default();
        let err = adam_step(&mut p, &single("encoder.w", f64::NAN), &mut s, 1e-3).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
        assert_eq!(s.step, 0);
        assert!(adam_step(&mut p, &single("encoder.w", 1.0), &mut s, 0.0).is_err());
    }
}
