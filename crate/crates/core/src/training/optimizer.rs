use crate::error::{Error, Result};
use crate::model::{Gradients, ParamStore};
use crate::scalar::Scalar;

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|p| vec![S::zero(); p.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`, with `lr`
    /// multiplied by `group_scales[group]` when scales are given.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &Gradients<S>,
        lr: f64,
        weight_decay: f64,
        group_scales: Option<&[f64]>,
    ) -> Result<()> {
        if grads.data.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract("gradient/optimizer state does not match parameters".into()));
        }
        if let Some(i) = grads.first_non_finite() {
            let name = &store.iter().nth(i).expect("index in range").name;
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::c(self.beta1), S::c(self.beta2));
        let (one_b1, one_b2) = (S::c(1.0 - self.beta1), S::c(1.0 - self.beta2));
        let c1 = S::c(1.0 - self.beta1.powi(t));
        let c2 = S::c(1.0 - self.beta2.powi(t));
        let eps = S::c(self.eps);
        for (i, p) in store.iter_mut().enumerate() {
            let scale = group_scales.map_or(1.0, |s| s.get(p.group).copied().unwrap_or(1.0));
            let lr_p = lr * scale;
            let lr_s = S::c(lr_p);
            let shrink = S::c(1.0 - lr_p * weight_decay);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.data[i]);
            for (((theta, m), v), &g) in p.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *theta = *theta * shrink - lr_s * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", vec![1], vec![theta], 0);
        s
    }

    #[test]
    fn one_step_oracle() {
        let oracle = |theta: f64, g: f64, lr: f64, wd: f64| {
            let m = 0.1 * g;
            let v = 0.05 * g * g;
            let m_hat = m / (1.0 - 0.9);
            let v_hat = v / (1.0 - 0.95);
            theta - lr * wd * theta - lr * m_hat / (v_hat.sqrt() + 1e-8)
        };
        for wd in [0.0, 0.05] {
            let mut s = single(1.0);
            let mut g = s.zeros_grad();
            g.data[0][0] = 1.0;
            let mut opt = AdamW::new(&s);
            opt.step(&mut s, &g, 0.1, wd, None).unwrap();
            let got = s.iter().next().unwrap().data[0];
            assert!((got - oracle(1.0, 1.0, 0.1, wd)).abs() < 1e-12);
        }
        let mut s = single(1.0);
        let mut g = s.zeros_grad();
        g.data[0][0] = 1.0;
        AdamW::new(&s).step(&mut s, &g, 0.1, 0.0, None).unwrap();
        assert!((s.iter().next().unwrap().data[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_no_op_without_decay() {
        let mut s = single(0.7);
        let g = s.zeros_grad();
        AdamW::new(&s).step(&mut s, &g, 0.1, 0.0, None).unwrap();
        assert_eq!(s.iter().next().unwrap().data[0], 0.7);
    }

    #[test]
    fn decay_is_geometric() {
        let mut s = single(0.7);
        let g = s.zeros_grad();
        let mut opt = AdamW::new(&s);
        let mut expect = 0.7f64;
        for _ in 0..25 {
            opt.step(&mut s, &g, 0.01, 0.05, None).unwrap();
            expect *= 1.0 - 0.01 * 0.05;
        }
        assert_eq!(s.iter().next().unwrap().data[0], expect);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(1.0);
        let mut g = s.zeros_grad();
        g.data[0][0] = f64::NAN;
        let err = AdamW::new(&s).step(&mut s, &g, 0.1, 0.0, None).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn group_scales_apply() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", vec![1], vec![1.0], 0);
        s.add("b", vec![1], vec![1.0], 1);
        let mut g = s.zeros_grad();
        g.data[0][0] = 1.0;
        g.data[1][0] = 1.0;
        AdamW::new(&s).step(&mut s, &g, 0.1, 0.0, Some(&[0.5, 1.0])).unwrap();
        let v: Vec<f64> = s.iter().map(|p| p.data[0]).collect();
        assert!((v[0] - 0.95).abs() < 1e-7 && (v[1] - 0.9).abs() < 1e-7);
    }
}
