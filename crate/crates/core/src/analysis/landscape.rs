use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::VolumeGrid;
use crate::error::{Error, Result};
use crate::model::{Classifier, ParamStore};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeSpec {
    /// Points per axis over `[-range, range]`.
    pub steps: usize,
    pub range: f64,
    /// Seeds of the two direction bundles.
    pub seeds: [u64; 2],
    /// L2 coefficient, as in `loss + wd/2 * ||theta||^2`.
    pub weight_decay: f64,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        Self {
            steps: 41,
            range: 1.0,
            seeds: [0, 1],
            weight_decay: 0.05,
        }
    }
}

impl LandscapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config(format!("landscape needs at least 2 steps per axis, got {}", self.steps)));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::Config(format!("landscape range must be positive, got {}", self.range)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Axis coordinates `-range + 2 * range * i / (steps - 1)`.
    pub fn coords(&self) -> Vec<f64> {
        let last = (self.steps - 1) as f64;
        (0..self.steps)
            .map(|i| -self.range + 2.0 * self.range * i as f64 / last)
            .collect()
    }
}

/// Loss values on an `(alpha, beta)` grid; `values[[i, j]]` is at `(alphas[i], betas[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSurface {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub values: Array2<f64>,
    pub seeds: [u64; 2],
}

/// One perturbation direction, shaped like the parameter store.
pub type Direction = Vec<Vec<f64>>;

/// Gaussian direction with each row of every 2D tensor rescaled to the parameter row norm.
///
/// Directions for tensors of any other rank are zero.
pub fn filter_normalized_direction<S: Scalar>(params: &ParamStore<S>, seed: u64) -> Direction {
    let mut rng = seed::rng(seed);
    params
        .iter()
        .map(|p| {
            if p.shape.len() != 2 {
                return vec![0.0; p.len()];
            }
            let cols = p.shape[1];
            let mut d: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (drow, prow) in d.chunks_mut(cols).zip(p.data.chunks(cols)) {
                let target = prow.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                let norm = drow.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = if norm > 0.0 { target / norm } else { 0.0 };
                drow.iter_mut().for_each(|v| *v *= scale);
            }
            d
        })
        .collect()
}

/// `theta + a * d1 + b * d2`, element by element in `f64`.
pub fn perturb<S: Scalar>(params: &ParamStore<S>, dirs: [&Direction; 2], coef: [f64; 2]) -> ParamStore<S> {
    let mut out = params.clone();
    for ((p, d1), d2) in out.iter_mut().zip(dirs[0]).zip(dirs[1]) {
        for ((v, a), b) in p.data.iter_mut().zip(d1).zip(d2) {
            *v = S::c(v.to_f64_lossy() + coef[0] * a + coef[1] * b);
        }
    }
    out
}

/// Mean NLL over a tokenized dataset plus `wd/2 * ||theta||^2`; non-finite values become `+inf`.
pub fn regularized_nll<S: Scalar>(model: &Classifier<S>, tokens: &[Array2<S>], labels: &[usize], wd: f64) -> Result<f64> {
    let mut nll = 0.0;
    for (x, &y) in tokens.iter().zip(labels) {
        let logits = match model.logits(x.view()) {
            Ok(l) => l,
            Err(Error::Numeric(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let l: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - l[y];
    }
    let sq: f64 = model
        .params
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum();
    let total = nll / tokens.len() as f64 + 0.5 * wd * sq;
    Ok(if total.is_finite() { total } else { f64::INFINITY })
}

/// Tokenizes a labeled split once for repeated loss evaluations.
pub fn tokenize_split<S: Scalar>(model: &Classifier<S>, volumes: &[VolumeGrid], labels: &[usize]) -> Result<Vec<Array2<S>>> {
    if volumes.is_empty() || volumes.len() != labels.len() {
        return Err(Error::Contract(format!("{} volumes against {} labels", volumes.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.cfg.num_classes) {
        return Err(Error::Config(format!("label {bad} outside {} classes", model.cfg.num_classes)));
    }
    volumes.par_iter().map(|v| Ok(model.tokens(v)?.data)).collect()
}

/// Filter-normalized 2D loss surface around the classifier's parameters.
pub fn loss_landscape<S: Scalar>(
    model: &Classifier<S>,
    volumes: &[VolumeGrid],
    labels: &[usize],
    spec: &LandscapeSpec,
) -> Result<LossSurface> {
    spec.validate()?;
    let tokens = tokenize_split(model, volumes, labels)?;
    let d1 = filter_normalized_direction(&model.params, spec.seeds[0]);
    let d2 = filter_normalized_direction(&model.params, spec.seeds[1]);
    let coords = spec.coords();
    let n = coords.len();
    let values: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (coords[k / n], coords[k % n]);
            let mut m = model.clone();
            m.params = perturb(&model.params, [&d1, &d2], [a, b]);
            regularized_nll(&m, &tokens, labels, spec.weight_decay)
        })
        .collect::<Result<_>>()?;
    Ok(LossSurface {
        alphas: coords.clone(),
        betas: coords,
        values: Array2::from_shape_vec((n, n), values).expect("n x n values"),
        seeds: spec.seeds,
    })
}

impl LossSurface {
    /// Grid point with the smallest loss.
    pub fn argmin(&self) -> (f64, f64, f64) {
        let (mut best, mut at) = (f64::INFINITY, (0, 0));
        for ((i, j), &v) in self.values.indexed_iter() {
            if v < best {
                best = v;
                at = (i, j);
            }
        }
        (self.alphas[at.0], self.betas[at.1], best)
    }

    /// Values along `beta = betas[j]`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.index_axis(Axis(1), j).to_vec()
    }
}
