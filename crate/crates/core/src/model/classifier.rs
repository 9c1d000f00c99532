use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::config::ModelConfig;
use super::encoder::{Encoder, EncoderCache};
use super::layers::{Dropout, Linear};
use super::network::check_volume;
use super::params::{Gradients, ParamStore};
use super::position::position_encoding;
use crate::data::{patchify, TokenSequence, VolumeGrid};
use crate::error::{Error, Result};
use crate::objective::{classification_loss, classification_loss_grad, softmax};
use crate::scalar::Scalar;
use crate::seed;

/// Encoder over all tokens, global average pooling and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub encoder: Encoder,
    pub head: Linear,
    pos: Array2<S>,
}

impl<S: Scalar> Classifier<S> {
    /// Fresh encoder and head; head weights are multiplied by `init_scale`.
    pub fn build(cfg: &ModelConfig, seed: u64, init_scale: f64) -> Result<Self> {
        cfg.validate()?;
        if !(init_scale >= 0.0) {
            return Err(Error::Config(format!("init scale must be non-negative, got {init_scale}")));
        }
        let mut rng = seed::rng(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, cfg, &mut rng);
        let head = Linear::new(&mut params, "head", cfg.encoder_dim, cfg.num_classes, cfg.top_group(), &mut rng);
        let s = S::c(init_scale);
        for w in params.get_mut(head.weight).data.iter_mut() {
            *w *= s;
        }
        Ok(Self {
            pos: position_encoding(cfg.grid(), cfg.encoder_dim),
            cfg: cfg.clone(),
            params,
            encoder,
            head,
        })
    }

    /// Encoder weights from `pretrained`, freshly initialized head.
    pub fn from_pretrained(cfg: &ModelConfig, pretrained: &ParamStore<S>, seed: u64, init_scale: f64) -> Result<Self> {
        let mut model = Self::build(cfg, seed, init_scale)?;
        super::copy_matching(&mut model.params, pretrained, |name| name.starts_with("encoder."))?;
        Ok(model)
    }

    /// Same architecture with every parameter taken from `params`.
    pub fn with_params(cfg: &ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::build(cfg, 0, 1.0)?;
        super::copy_matching(&mut model.params, &params, |_| true)?;
        Ok(model)
    }

    pub fn positions(&self) -> &Array2<S> {
        &self.pos
    }

    pub fn tokens(&self, volume: &VolumeGrid) -> Result<TokenSequence<S>> {
        check_volume(&self.cfg, volume)?;
        patchify(volume, self.cfg.patch_size)
    }

    pub fn encode_full(&self, tokens: &TokenSequence<S>) -> Result<EncoderCache<S>> {
        self.encoder
            .forward(&self.params, &self.pos, tokens.data.view(), &tokens.indices, &mut Dropout::off())
    }

    fn forward_cached(&self, tokens: ArrayView2<S>, dropout: &mut Dropout<'_>) -> Result<(Array2<S>, EncoderCache<S>, Array2<S>)> {
        let n = self.cfg.num_tokens();
        if tokens.nrows() != n {
            return Err(Error::Contract(format!(
                "classification uses all {n} tokens, got {}",
                tokens.nrows()
            )));
        }
        let indices: Vec<usize> = (0..n).collect();
        let cache = self.encoder.forward(&self.params, &self.pos, tokens, &indices, dropout)?;
        let pooled = cache.output.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let logits = self.head.forward(&self.params, pooled.view());
        Ok((logits, cache, pooled))
    }

    /// Logits for one full token matrix.
    pub fn logits(&self, tokens: ArrayView2<S>) -> Result<Array1<S>> {
        Ok(self.forward_cached(tokens, &mut Dropout::off())?.0.row(0).to_owned())
    }

    pub fn classify_forward(&self, volume: &VolumeGrid) -> Result<Array1<S>> {
        self.logits(self.tokens(volume)?.data.view())
    }

    /// `B x K` logits for a batch of volumes.
    pub fn batch_logits(&self, volumes: &[VolumeGrid]) -> Result<Array2<S>> {
        let rows: Vec<Array1<S>> = volumes
            .par_iter()
            .map(|v| self.classify_forward(v))
            .collect::<Result<_>>()?;
        let mut out = Array2::<S>::zeros((rows.len(), self.cfg.num_classes));
        for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&r);
        }
        Ok(out)
    }

    /// Class probabilities for a batch of volumes.
    pub fn predict_proba(&self, volumes: &[VolumeGrid]) -> Result<Array2<S>> {
        Ok(softmax(self.batch_logits(volumes)?.view()))
    }

    fn sample_pass(
        &self,
        tokens: &Array2<S>,
        target: ArrayView2<S>,
        dropout_seed: Option<u64>,
        grads: Option<(&mut Gradients<S>, S)>,
    ) -> Result<S> {
        let mut rng = dropout_seed.map(seed::rng);
        let mut dropout = match rng.as_mut() {
            Some(r) if self.cfg.dropout > 0.0 => Dropout::train(self.cfg.dropout, r),
            _ => Dropout::off(),
        };
        let (logits, cache, pooled) = self.forward_cached(tokens.view(), &mut dropout)?;
        let loss = classification_loss(logits.view(), target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite classification loss {loss}")));
        }
        if let Some((grads, scale)) = grads {
            let dlogits = classification_loss_grad(logits.view(), target).mapv(|v| v * scale);
            let dpooled = self.head.backward(&self.params, pooled.view(), dlogits.view(), grads);
            let inv_n = S::one() / S::c(cache.output.nrows() as f64);
            let dout = Array2::from_shape_fn(cache.output.raw_dim(), |(_, j)| dpooled[[0, j]] * inv_n);
            self.encoder.backward(&self.params, &cache, dout.view(), grads);
        }
        Ok(loss)
    }

    fn check_batch(&self, inputs: &[Array2<S>], targets: ArrayView2<S>) -> Result<()> {
        if inputs.is_empty() || inputs.len() != targets.nrows() || targets.ncols() != self.cfg.num_classes {
            return Err(Error::Contract(format!(
                "{} inputs against targets {:?} for {} classes",
                inputs.len(),
                targets.dim(),
                self.cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Mean soft-target cross-entropy over a batch of full token matrices.
    pub fn batch_loss(&self, inputs: &[Array2<S>], targets: ArrayView2<S>, dropout_seed: Option<u64>) -> Result<S> {
        self.check_batch(inputs, targets)?;
        let losses: Vec<S> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let t = targets.slice(ndarray::s![i..i + 1, ..]);
                self.sample_pass(x, t, dropout_seed.map(|s| seed::derive(s, &[i as u64])), None)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().copied().sum::<S>() / S::c(inputs.len() as f64))
    }

    pub fn batch_loss_and_grad(
        &self,
        inputs: &[Array2<S>],
        targets: ArrayView2<S>,
        dropout_seed: Option<u64>,
    ) -> Result<(S, Gradients<S>)> {
        self.check_batch(inputs, targets)?;
        let scale = S::one() / S::c(inputs.len() as f64);
        let results: Vec<(S, Gradients<S>)> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let t = targets.slice(ndarray::s![i..i + 1, ..]);
                let mut g = self.params.zeros_grad();
                let l = self.sample_pass(x, t, dropout_seed.map(|s| seed::derive(s, &[i as u64])), Some((&mut g, scale)))?;
                Ok((l, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = self.params.zeros_grad();
        let mut total = S::zero();
        for (l, g) in results {
            total += l;
            grads.add_assign(&g);
        }
        Ok((total * scale, grads))
    }
}
