use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{gelu, gelu_grad, softmax_rows, Dropout, LayerNorm, LayerNormCache, Linear};
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pre-norm transformer block: `x' = x + MSA(LN(x))`, `y = x' + MLP(LN(x'))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache<S> {
    pub input: Array2<S>,
    ln1: LayerNormCache<S>,
    h1: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    /// Per-head attention probabilities, each `T x T`.
    pub attention: Vec<Array2<S>>,
    ctx: Array2<S>,
    drop_attn: Option<Array2<S>>,
    ln2: LayerNormCache<S>,
    h2: Array2<S>,
    pre_act: Array2<S>,
    act: Array2<S>,
    drop_mlp: Option<Array2<S>>,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        group: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, group),
            q: Linear::new(store, &format!("{name}.attn.q"), dim, dim, group, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), dim, dim, group, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), dim, dim, group, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim, group, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, group),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, group, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, group, rng),
            dim,
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: ArrayView2<S>,
        dropout: &mut Dropout<'_>,
    ) -> (Array2<S>, BlockCache<S>) {
        let t = x.nrows();
        let dk = self.head_dim();
        let scale = S::one() / S::c(dk as f64).sqrt();

        let (h1, ln1) = self.ln1.forward(store, x);
        let q = self.q.forward(store, h1.view());
        let k = self.k.forward(store, h1.view());
        let v = self.v.forward(store, h1.view());
        let mut ctx = Array2::<S>::zeros((t, self.dim));
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|s| s * scale);
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attention.push(scores);
        }
        let mut attn_out = self.proj.forward(store, ctx.view());
        let drop_attn = dropout.mask::<S>(attn_out.dim());
        if let Some(m) = &drop_attn {
            attn_out *= m;
        }
        let mid = &x + &attn_out;

        let (h2, ln2) = self.ln2.forward(store, mid.view());
        let pre_act = self.fc1.forward(store, h2.view());
        let act = pre_act.mapv(gelu);
        let mut mlp_out = self.fc2.forward(store, act.view());
        let drop_mlp = dropout.mask::<S>(mlp_out.dim());
        if let Some(m) = &drop_mlp {
            mlp_out *= m;
        }
        let out = &mid + &mlp_out;
        let cache = BlockCache {
            input: x.to_owned(),
            ln1,
            h1,
            q,
            k,
            v,
            attention,
            ctx,
            drop_attn,
            ln2,
            h2,
            pre_act,
            act,
            drop_mlp,
        };
        (out, cache)
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &BlockCache<S>,
        dout: ArrayView2<S>,
        grads: &mut Gradients<S>,
    ) -> Array2<S> {
        let dk = self.head_dim();
        let scale = S::one() / S::c(dk as f64).sqrt();

        // MLP branch.
        let mut dmlp = dout.to_owned();
        if let Some(m) = &cache.drop_mlp {
            dmlp *= m;
        }
        let dact = self.fc2.backward(store, cache.act.view(), dmlp.view(), grads);
        let dpre = &dact * &cache.pre_act.mapv(gelu_grad);
        let dh2 = self.fc1.backward(store, cache.h2.view(), dpre.view(), grads);
        let mut dmid = dout.to_owned();
        dmid += &self.ln2.backward(store, &cache.ln2, dh2.view(), grads);

        // Attention branch.
        let mut dattn = dmid.clone();
        if let Some(m) = &cache.drop_attn {
            dattn *= m;
        }
        let dctx = self.proj.backward(store, cache.ctx.view(), dattn.view(), grads);
        let mut dq = Array2::<S>::zeros(cache.q.raw_dim());
        let mut dk_all = Array2::<S>::zeros(cache.k.raw_dim());
        let mut dv = Array2::<S>::zeros(cache.v.raw_dim());
        for (h, a) in cache.attention.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let dctx_h = dctx.slice(cols);
            let da = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = (&da - &row_dot) * a;
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk_all.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dh1 = self.q.backward(store, cache.h1.view(), dq.view(), grads);
        dh1 += &self.k.backward(store, cache.h1.view(), dk_all.view(), grads);
        dh1 += &self.v.backward(store, cache.h1.view(), dv.view(), grads);
        let mut dx = dmid;
        dx += &self.ln1.backward(store, &cache.ln1, dh1.view(), grads);
        dx
    }
}

/// Runs a stack of blocks, failing on the first non-finite activation.
pub(crate) fn run_blocks<S: Scalar>(
    blocks: &[TransformerBlock],
    store: &ParamStore<S>,
    x: Array2<S>,
    dropout: &mut Dropout<'_>,
    label: &str,
) -> Result<(Array2<S>, Vec<BlockCache<S>>)> {
    let mut h = x;
    let mut caches = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let (out, cache) = block.forward(store, h.view(), dropout);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite activation in {label} block {i}")));
        }
        caches.push(cache);
        h = out;
    }
    Ok((h, caches))
}

pub(crate) fn backward_blocks<S: Scalar>(
    blocks: &[TransformerBlock],
    store: &ParamStore<S>,
    caches: &[BlockCache<S>],
    dout: Array2<S>,
    grads: &mut Gradients<S>,
) -> Array2<S> {
    blocks
        .iter()
        .zip(caches)
        .rev()
        .fold(dout, |d, (block, cache)| block.backward(store, cache, d.view(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn block<S: Scalar>(seed: u64) -> (ParamStore<S>, TransformerBlock) {
        let mut store = ParamStore::new();
        let b = TransformerBlock::new(&mut store, "b", 12, 3, 4, 1, &mut seed::rng(seed));
        (store, b)
    }

    #[test]
    fn zero_input_zero_output() {
        let (store, b) = block::<f64>(0);
        let (y, _) = b.forward(&store, Array2::zeros((5, 12)).view(), &mut Dropout::off());
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let (mut store, b) = block::<f64>(1);
        store.get_mut(b.q.weight).data.fill(0.0);
        let mut rng = seed::rng(3);
        let x = Array2::from_shape_fn((7, 12), |_| rng.random::<f64>());
        let (_, cache) = b.forward(&store, x.view(), &mut Dropout::off());
        for a in &cache.attention {
            assert!(a.iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, b) = block::<f32>(2);
        let mut rng = seed::rng(4);
        let x = Array2::from_shape_fn((9, 12), |_| rng.random::<f32>() * 4.0 - 2.0);
        let (_, cache) = b.forward(&store, x.view(), &mut Dropout::off());
        for a in &cache.attention {
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn permutation_equivariant_f32() {
        let (store, b) = block::<f32>(5);
        let mut rng = seed::rng(6);
        let t = 10;
        let x = Array2::from_shape_fn((t, 12), |_| rng.random::<f32>() * 2.0 - 1.0);
        let mut perm: Vec<usize> = (0..t).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let px = x.select(Axis(0), &perm);
        let (y, _) = b.forward(&store, x.view(), &mut Dropout::off());
        let (py, _) = b.forward(&store, px.view(), &mut Dropout::off());
        let expected = y.select(Axis(0), &perm);
        let err = (&py - &expected).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(err < 1e-4, "max err {err}");
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let (store, b) = block::<f64>(7);
        let x = Array2::from_shape_fn((4, 12), |(i, j)| ((i * 12 + j) as f64).sin());
        let run = |s| {
            let mut rng = seed::rng(s);
            b.forward(&store, x.view(), &mut Dropout::train(0.1, &mut rng)).0
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
