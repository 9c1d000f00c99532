//! Pretraining and fine-tuning losses, each paired with its analytic gradient.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

/// Which network is being pretrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Dual projectors, Gram regularization and branch differencing.
    Cscrl,
    /// Single projector, pixel loss only.
    Mae,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Cscrl => "cscrl",
            Mode::Mae => "mae",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.005,
        }
    }
}

impl LossWeights {
    /// `beta2 = (1 - beta1) / 2`, evaluated on the shortest decimal form of
    /// `beta1` so that 0.99 yields exactly the double nearest 0.005.
    pub fn from_beta1(beta1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta1) {
            return Err(Error::Config(format!("beta1 must lie in [0, 1], got {beta1}")));
        }
        Ok(Self {
            beta1,
            beta2: half_complement(beta1),
        })
    }
}

fn half_complement(x: f64) -> f64 {
    let repr = format!("{x}");
    if let Some((_, frac)) = repr.split_once('.') {
        let digits = frac.len();
        if digits <= 15 && !repr.contains('e') {
            let scale = 10u64.pow(digits as u32);
            let v = (x * scale as f64).round() as u64;
            if v <= scale {
                return (scale - v) as f64 / (2 * scale) as f64;
            }
        }
    }
    (1.0 - x) / 2.0
}

/// Which Gram entries the semantic losses average over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GramReduction {
    /// All `N1^2` entries.
    Full,
    /// The `N1 (N1 - 1)` off-diagonal entries.
    #[default]
    OffDiagonal,
}

impl GramReduction {
    fn includes(self, i: usize, j: usize) -> bool {
        match self {
            GramReduction::Full => true,
            GramReduction::OffDiagonal => i != j,
        }
    }

    fn count(self, n: usize) -> Result<usize> {
        let c = match self {
            GramReduction::Full => n * n,
            GramReduction::OffDiagonal => n * n.saturating_sub(1),
        };
        if c == 0 {
            return Err(Error::Contract(format!(
                "{self:?} Gram reduction has no entries for {n} visible tokens"
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel: f64,
    pub connectome: f64,
    pub nonconnectome: f64,
    pub total: f64,
    pub mean_sigma_g1: f64,
    pub mean_sigma_g2: f64,
}

impl LossReport {
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.pixel += r.pixel / n;
            m.connectome += r.connectome / n;
            m.nonconnectome += r.nonconnectome / n;
            m.total += r.total / n;
            m.mean_sigma_g1 += r.mean_sigma_g1 / n;
            m.mean_sigma_g2 += r.mean_sigma_g2 / n;
        }
        m
    }
}

fn check_same_shape<S>(a: &ArrayView2<S>, b: &ArrayView2<S>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error over every entry of the masked rows.
pub fn pixel_loss<S: Scalar>(y_mask: ArrayView2<S>, v_mask: ArrayView2<S>) -> Result<S> {
    check_same_shape(&y_mask, &v_mask, "pixel loss")?;
    if y_mask.is_empty() {
        return Err(Error::DegenerateMask {
            n: 0,
            ratio: 0.0,
            visible: 0,
            masked: 0,
        });
    }
    let n = S::c(y_mask.len() as f64);
    Ok(y_mask
        .iter()
        .zip(v_mask.iter())
        .map(|(&y, &v)| (y - v) * (y - v))
        .sum::<S>()
        / n)
}

pub fn pixel_loss_grad<S: Scalar>(y_mask: ArrayView2<S>, v_mask: ArrayView2<S>) -> Array2<S> {
    let scale = S::c(2.0 / y_mask.len() as f64);
    (&y_mask - &v_mask).mapv(|d| d * scale)
}

/// `(L_c, L_nc)`: mean of `softplus(-G1)` and of `softplus(G2)` over the reduced entries.
pub fn semantic_losses<S: Scalar>(
    g1: ArrayView2<S>,
    g2: ArrayView2<S>,
    reduction: GramReduction,
) -> Result<(S, S)> {
    Ok((
        reduce(g1, reduction, |x| softplus(-x))?,
        reduce(g2, reduction, softplus)?,
    ))
}

/// Mean of `sigmoid` over the reduced Gram entries.
pub fn mean_sigmoid<S: Scalar>(g: ArrayView2<S>, reduction: GramReduction) -> Result<S> {
    reduce(g, reduction, sigmoid)
}

fn reduce<S: Scalar>(g: ArrayView2<S>, reduction: GramReduction, f: impl Fn(S) -> S) -> Result<S> {
    if g.nrows() != g.ncols() {
        return Err(Error::Contract(format!("Gram matrix must be square, got {:?}", g.dim())));
    }
    let count = reduction.count(g.nrows())?;
    let mut acc = S::zero();
    for ((i, j), &v) in g.indexed_iter() {
        if reduction.includes(i, j) {
            acc += f(v);
        }
    }
    Ok(acc / S::c(count as f64))
}

/// `dL_c/dG1` (`connectome = true`) or `dL_nc/dG2`.
pub fn semantic_grad<S: Scalar>(g: ArrayView2<S>, reduction: GramReduction, connectome: bool) -> Result<Array2<S>> {
    let inv = S::one() / S::c(reduction.count(g.nrows())? as f64);
    Ok(Array2::from_shape_fn(g.dim(), |(i, j)| {
        if !reduction.includes(i, j) {
            return S::zero();
        }
        let x = g[[i, j]];
        if connectome {
            -sigmoid(-x) * inv
        } else {
            sigmoid(x) * inv
        }
    }))
}

pub fn total_loss<S: Scalar>(pixel: S, connectome: S, nonconnectome: S, weights: LossWeights, mode: Mode) -> S {
    match mode {
        Mode::Mae => pixel,
        Mode::Cscrl => S::c(weights.beta1) * pixel + S::c(weights.beta2) * (connectome + nonconnectome),
    }
}

/// One-hot targets with label smoothing: `1 - eps + eps/K` on the label, `eps/K` elsewhere.
pub fn smooth_labels<S: Scalar>(labels: &[usize], num_classes: usize, eps: f64) -> Result<Array2<S>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    let off = eps / num_classes as f64;
    let mut t = Array2::from_elem((labels.len(), num_classes), S::c(off));
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Config(format!("label {y} out of range for {num_classes} classes")));
        }
        t[[i, y]] = S::c(1.0 - eps + off);
    }
    Ok(t)
}

fn log_softmax_rows<S: Scalar>(logits: ArrayView2<S>) -> Array2<S> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax<S: Scalar>(logits: ArrayView2<S>) -> Array2<S> {
    log_softmax_rows(logits).mapv(|v| v.exp())
}

/// Mean cross-entropy of `logits` (B x K) against soft `targets` (B x K).
pub fn classification_loss<S: Scalar>(logits: ArrayView2<S>, targets: ArrayView2<S>) -> Result<S> {
    check_same_shape(&logits, &targets, "classification loss")?;
    for (i, row) in targets.rows().into_iter().enumerate() {
        let sum = row.sum().to_f64_lossy();
        if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < S::zero()) {
            return Err(Error::Contract(format!("targets of sample {i} are not a distribution (sum {sum})")));
        }
    }
    let logp = log_softmax_rows(logits);
    let b = S::c(logits.nrows() as f64);
    Ok(-(&logp * &targets).sum() / b)
}

pub fn classification_loss_grad<S: Scalar>(logits: ArrayView2<S>, targets: ArrayView2<S>) -> Array2<S> {
    let inv_b = S::one() / S::c(logits.nrows() as f64);
    (softmax(logits) - targets).mapv(|v| v * inv_b)
}

/// One mixup draw for a batch: weight `lambda ~ Beta(alpha, alpha)` and a partner permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub perm: Vec<usize>,
    pub alpha: f64,
}

impl MixupDraw {
    pub fn sample<R: Rng>(batch: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("mixup alpha must be positive, got {alpha}")));
        }
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(e.to_string()))?;
        let lambda = beta.sample(rng);
        let mut perm: Vec<usize> = (0..batch).collect();
        perm.shuffle(rng);
        Ok(Self { lambda, perm, alpha })
    }

    pub fn identity(batch: usize) -> Self {
        Self {
            lambda: 1.0,
            perm: (0..batch).collect(),
            alpha: 0.0,
        }
    }
}

/// `x_i <- lambda x_i + (1 - lambda) x_perm(i)` on inputs and targets alike.
/// Batches of one are returned unchanged.
pub fn mixup<S: Scalar>(inputs: &[Array2<S>], targets: ArrayView2<S>, draw: &MixupDraw) -> Result<(Vec<Array2<S>>, Array2<S>)> {
    let b = inputs.len();
    if b != targets.nrows() || draw.perm.len() != b {
        return Err(Error::Contract(format!(
            "mixup: {b} inputs, {} targets, permutation of {}",
            targets.nrows(),
            draw.perm.len()
        )));
    }
    let mut seen = vec![false; b];
    for &p in &draw.perm {
        if p >= b || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract("mixup permutation is not a bijection".into()));
        }
    }
    if b < 2 {
        return Ok((inputs.to_vec(), targets.to_owned()));
    }
    let lam = S::c(draw.lambda);
    let rest = S::one() - lam;
    let mixed = (0..b)
        .map(|i| &inputs[i] * lam + &inputs[draw.perm[i]] * rest)
        .collect();
    let partner = targets.select(Axis(0), &draw.perm);
    let mixed_targets = &targets * lam + &partner * rest;
    Ok((mixed, mixed_targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pixel_loss_examples() {
        let y = array![[0.3, 0.7]];
        assert_eq!(pixel_loss(y.view(), y.view()).unwrap(), 0.0);
        let ones = array![[1.0, 1.0]];
        let zeros = array![[0.0, 0.0]];
        assert_eq!(pixel_loss(ones.view(), zeros.view()).unwrap(), 1.0);
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(matches!(pixel_loss(empty.view(), empty.view()), Err(Error::DegenerateMask { .. })));
    }

    #[test]
    fn pixel_loss_matches_scalar_loop() {
        let mut rng = crate::seed::rng(1);
        let y = Array2::from_shape_fn((7, 13), |_| rng.random::<f64>());
        let v = Array2::from_shape_fn((7, 13), |_| rng.random::<f64>());
        let mut acc = 0.0;
        for i in 0..7 {
            for j in 0..13 {
                acc += (y[[i, j]] - v[[i, j]]).powi(2);
            }
        }
        let oracle = acc / 91.0;
        assert!((pixel_loss(y.view(), v.view()).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_examples() {
        let z = Array2::<f64>::zeros((3, 3));
        for red in [GramReduction::Full, GramReduction::OffDiagonal] {
            let (lc, lnc) = semantic_losses(z.view(), z.view(), red).unwrap();
            assert!((lc - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((lnc - std::f64::consts::LN_2).abs() < 1e-15);
        }
        // Entrywise hand oracle: (2 * -ln sigma(0.5) + 2 * ln 2) / 4.
        let g = array![[0.5, 0.0], [0.0, 0.5]];
        let oracle = (2.0 * -(1.0 / (1.0 + (-0.5f64).exp())).ln() + 2.0 * 2f64.ln()) / 4.0;
        let (lc, _) = semantic_losses(g.view(), g.view(), GramReduction::Full).unwrap();
        assert!((lc - oracle).abs() < 1e-12);
        assert!((lc - 0.5836).abs() < 1e-4);
        let (lc_off, _) = semantic_losses(g.view(), g.view(), GramReduction::OffDiagonal).unwrap();
        assert!((lc_off - 2f64.ln()).abs() < 1e-15);

        let big = Array2::from_elem((2, 2), 50.0f64);
        let (_, lnc) = semantic_losses(big.view(), big.view(), GramReduction::Full).unwrap();
        assert!(lnc.is_finite() && (lnc - 50.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_finite_far_out() {
        for x in [1e4f64, -1e4] {
            assert!(softplus(x).is_finite() && softplus(-x).is_finite());
        }
        assert_eq!(softplus(1e4f64), 1e4);
    }

    #[test]
    fn off_diagonal_needs_two_tokens() {
        let g = Array2::<f64>::zeros((1, 1));
        assert!(semantic_losses(g.view(), g.view(), GramReduction::OffDiagonal).is_err());
        assert!(semantic_losses(g.view(), g.view(), GramReduction::Full).is_ok());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let ln2 = std::f64::consts::LN_2;
        let t = total_loss(1.0, ln2, ln2, w, Mode::Cscrl);
        assert!((t - 0.996_931_471_805_599_5).abs() < 1e-12);
        assert_eq!(total_loss(0.25, 3.0, 7.0, w, Mode::Mae), 0.25);
        assert_eq!(LossWeights::from_beta1(0.9).unwrap().beta2, 0.05);
        assert_eq!(LossWeights::from_beta1(0.99).unwrap().beta2, 0.005);
        assert_eq!(LossWeights::from_beta1(0.999).unwrap().beta2, 0.0005);
        assert!(LossWeights::from_beta1(1.5).is_err());
    }

    #[test]
    fn label_smoothing_and_cross_entropy() {
        let t = smooth_labels::<f64>(&[1], 2, 0.1).unwrap();
        assert!((t[[0, 0]] - 0.05).abs() < 1e-15 && (t[[0, 1]] - 0.95).abs() < 1e-15);
        // logits = log targets -> loss = entropy of targets.
        let logits = t.mapv(f64::ln);
        let entropy = -(0.05f64 * 0.05f64.ln() + 0.95 * 0.95f64.ln());
        assert!((classification_loss(logits.view(), t.view()).unwrap() - entropy).abs() < 1e-12);
        let uniform = Array2::<f64>::zeros((3, 2));
        let targets = array![[1.0, 0.0], [0.3, 0.7], [0.5, 0.5]];
        let l = classification_loss(uniform.view(), targets.view()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let bad = array![[0.5, 0.6]];
        assert!(classification_loss(Array2::<f64>::zeros((1, 2)).view(), bad.view()).is_err());
    }

    #[test]
    fn mixup_examples() {
        let x0 = Array2::<f64>::zeros((2, 3));
        let x1 = Array2::<f64>::ones((2, 3));
        let targets = array![[1.0, 0.0], [0.0, 1.0]];
        let swap = MixupDraw {
            lambda: 0.5,
            perm: vec![1, 0],
            alpha: 0.8,
        };
        let (m, t) = mixup(&[x0.clone(), x1.clone()], targets.view(), &swap).unwrap();
        assert!(m.iter().all(|a| a.iter().all(|&v| v == 0.5)));
        assert!(t.iter().all(|&v| v == 0.5));
        let id = MixupDraw {
            lambda: 1.0,
            perm: vec![1, 0],
            alpha: 0.8,
        };
        let (m, t) = mixup(&[x0.clone(), x1.clone()], targets.view(), &id).unwrap();
        assert_eq!(m, vec![x0.clone(), x1]);
        assert_eq!(t, targets);
        let single = mixup(&[x0.clone()], targets.slice(ndarray::s![..1, ..]), &MixupDraw::identity(1)).unwrap();
        assert_eq!(single.0, vec![x0]);
    }

    #[test]
    fn mixup_draw_is_beta_and_bijective() {
        let mut rng = crate::seed::rng(9);
        let mut mean = 0.0;
        for _ in 0..2000 {
            let d = MixupDraw::sample(6, 0.8, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&d.lambda));
            let mut p = d.perm.clone();
            p.sort_unstable();
            assert_eq!(p, (0..6).collect::<Vec<_>>());
            mean += d.lambda / 2000.0;
        }
        assert!((mean - 0.5).abs() < 0.03);
    }

    proptest! {
        #[test]
        fn decomposition_identity(p in 0.0f64..10.0, c in 0.0f64..10.0, n in 0.0f64..10.0, b1 in 0.0f64..1.0) {
            let w = LossWeights::from_beta1(b1).unwrap();
            let t = total_loss(p, c, n, w, Mode::Cscrl);
            prop_assert!((t - (w.beta1 * p + w.beta2 * (c + n))).abs() < 1e-12);
        }

        #[test]
        fn monotone_pressure(i in 0usize..3, j in 0usize..3, bump in 1e-3f64..2.0, seed in any::<u64>()) {
            let mut rng = crate::seed::rng(seed);
            let g = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
            let mut up = g.clone();
            up[[i, j]] += bump;
            let (lc0, lnc0) = semantic_losses(g.view(), g.view(), GramReduction::Full).unwrap();
            let (lc1, lnc1) = semantic_losses(up.view(), up.view(), GramReduction::Full).unwrap();
            prop_assert!(lc1 < lc0);
            prop_assert!(lnc1 > lnc0);
        }

        #[test]
        fn softplus_matches_log_sigmoid(x in -30.0f64..30.0) {
            let direct = -(1.0 / (1.0 + (-x).exp())).ln();
            prop_assert!((softplus(-x) - direct).abs() < 1e-9);
        }

        #[test]
        fn mixed_targets_stay_normalized(lambda in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = crate::seed::rng(seed);
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let t = smooth_labels::<f64>(&labels, 3, 0.1).unwrap();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let inputs = vec![Array2::<f64>::zeros((1, 1)); 5];
            let (_, mt) = mixup(&inputs, t.view(), &MixupDraw { lambda, perm, alpha: 0.8 }).unwrap();
            for row in mt.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semantic_gradients_match_finite_differences() {
        let mut rng = crate::seed::rng(2);
        let g = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() * 6.0 - 3.0);
        for red in [GramReduction::Full, GramReduction::OffDiagonal] {
            let d1 = semantic_grad(g.view(), red, true).unwrap();
            let d2 = semantic_grad(g.view(), red, false).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let h = 1e-6;
                    let mut gp = g.clone();
                    let mut gm = g.clone();
                    gp[[i, j]] += h;
                    gm[[i, j]] -= h;
                    let (cp, np) = semantic_losses(gp.view(), gp.view(), red).unwrap();
                    let (cm, nm) = semantic_losses(gm.view(), gm.view(), red).unwrap();
                    assert!(((cp - cm) / (2.0 * h) - d1[[i, j]]).abs() < 1e-8);
                    assert!(((np - nm) / (2.0 * h) - d2[[i, j]]).abs() < 1e-8);
                }
            }
        }
    }
}
