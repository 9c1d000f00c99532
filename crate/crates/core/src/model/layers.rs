use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

pub(crate) const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

/// Normal(0, std²) truncated to ±2 std by rejection.
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("std > 0");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Affine map `y = x Wᵀ + b` with `W` stored `(out, in)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub(crate) fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = (0..fan_in * fan_out)
            .map(|_| S::c(trunc_normal(rng, INIT_STD)))
            .collect();
        let weight = store.add(format!("{name}.weight"), vec![fan_out, fan_in], w, group);
        let bias = store.add(format!("{name}.bias"), vec![fan_out], vec![S::zero(); fan_out], group);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&store.view2(self.weight).t());
        y += &store.view1(self.bias);
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: ArrayView2<S>,
        dy: ArrayView2<S>,
        grads: &mut Gradients<S>,
    ) -> Array2<S> {
        {
            let mut gw = grads.view2_mut(self.weight, (self.fan_out, self.fan_in));
            general_mat_mul(S::one(), &dy.t(), &x, S::one(), &mut gw);
        }
        {
            let mut gb = grads.view1_mut(self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&store.view2(self.weight))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

impl LayerNorm {
    pub(crate) fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, group: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), vec![dim], vec![S::one(); dim], group);
        let bias = store.add(format!("{name}.bias"), vec![dim], vec![S::zero(); dim], group);
        Self { gain, bias, dim }
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: ArrayView2<S>) -> (Array2<S>, LayerNormCache<S>) {
        let n = S::c(x.ncols() as f64);
        let eps = S::c(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::<S>::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<S>() / n;
            *inv = S::one() / (var + eps).sqrt();
            let s = *inv;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &xhat * &store.view1(self.gain);
        y += &store.view1(self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &LayerNormCache<S>,
        dy: ArrayView2<S>,
        grads: &mut Gradients<S>,
    ) -> Array2<S> {
        {
            let mut gg = grads.view1_mut(self.gain);
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        {
            let mut gb = grads.view1_mut(self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        let n = S::c(dy.ncols() as f64);
        let dxhat = &dy * &store.view1(self.gain);
        let mut dx = Array2::<S>::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / n;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>() / n;
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = inv * (gi - mean_g - xi * mean_gx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let u = S::c(GELU_C) * (x + S::c(GELU_A) * x * x * x);
    S::c(0.5) * x * (S::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::c(GELU_C);
    let a = S::c(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = S::c(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::c(3.0) * a * x * x)
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Inverted dropout. Inactive when the rate is zero or no RNG is attached.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    /// Scaled keep-mask for an activation of `shape`, or `None` when inactive.
    pub(crate) fn mask<S: Scalar>(&mut self, shape: (usize, usize)) -> Option<Array2<S>> {
        if !self.is_active() {
            return None;
        }
        let rate = self.rate;
        let keep = S::c(1.0 / (1.0 - rate));
        let rng = self.rng.as_mut().unwrap();
        Some(Array2::from_shape_fn(shape, |_| {
            if rng.random::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8, "x = {x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn layer_norm_of_zero_is_bias() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 4, 0);
        let (y, _) = ln.forward(&store, Array2::zeros((3, 4)).view());
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_is_affine() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 5, 3, 0, &mut seed::rng(1));
        let zero = Array2::<f64>::zeros((1, 5));
        assert!(lin.forward(&store, zero.view()).iter().all(|&v| v == 0.0));
        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        let x2 = &x * 2.0;
        let y = lin.forward(&store, x.view());
        let y2 = lin.forward(&store, x2.view());
        assert!((&y2 - &(&y * 2.0)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = seed::rng(0);
        for _ in 0..10_000 {
            assert!(trunc_normal(&mut rng, 0.02).abs() <= 0.04);
        }
    }
}
