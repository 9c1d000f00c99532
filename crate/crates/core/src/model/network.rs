use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::config::ModelConfig;
use super::decoder::{Decoder, DecoderCache};
use super::encoder::{Encoder, EncoderCache};
use super::layers::{Dropout, Linear};
use super::params::{Gradients, ParamStore};
use super::position::position_encoding;
use crate::data::{patchify, MaskPartition, TokenSequence, VolumeGrid};
use crate::error::{Error, Result};
use crate::objective::{
    mean_sigmoid, pixel_loss, pixel_loss_grad, semantic_grad, semantic_losses, total_loss, GramReduction, LossReport,
    LossWeights, Mode,
};
use crate::scalar::Scalar;
use crate::seed;

/// Projected visible latents of the two branches; `z2` is absent in MAE mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair<S> {
    pub z1: Array2<S>,
    pub z2: Option<Array2<S>>,
}

/// Token-similarity matrix `z zᵀ / d`.
pub type GramMatrix<S> = Array2<S>;

pub fn gram<S: Scalar>(z: ArrayView2<S>) -> GramMatrix<S> {
    let inv = S::one() / S::c(z.ncols() as f64);
    z.dot(&z.t()).mapv(|v| v * inv)
}

/// `dL/dz` given `dL/dG` for `G = z zᵀ / d`.
fn gram_backward<S: Scalar>(z: ArrayView2<S>, dg: ArrayView2<S>) -> Array2<S> {
    let inv = S::one() / S::c(z.ncols() as f64);
    let sym = &dg + &dg.t();
    sym.dot(&z).mapv(|v| v * inv)
}

/// Per-head attention probabilities of one layer, each `T x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<S> {
    pub layer: usize,
    pub heads: Vec<Array2<S>>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn head_average(&self) -> Array2<S> {
        let mut acc = Array2::<S>::zeros(self.heads[0].raw_dim());
        for h in &self.heads {
            acc += h;
        }
        acc.mapv(|v| v / S::c(self.heads.len() as f64))
    }
}

/// Branch differencing: `y1 - y2` in CS-CRL mode, `y1` unchanged in MAE mode.
pub fn reconstruct<S: Scalar>(y1: &Array2<S>, y2: Option<&Array2<S>>, mode: Mode) -> Result<Array2<S>> {
    match (mode, y2) {
        (Mode::Mae, _) => Ok(y1.clone()),
        (Mode::Cscrl, Some(y2)) if y2.dim() == y1.dim() => Ok(y1 - y2),
        (Mode::Cscrl, Some(y2)) => Err(Error::Contract(format!(
            "branch outputs differ in shape: {:?} vs {:?}",
            y1.dim(),
            y2.dim()
        ))),
        (Mode::Cscrl, None) => Err(Error::Contract("CS-CRL reconstruction needs both branches".into())),
    }
}

/// Loss settings for one pretraining evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub reduction: GramReduction,
}

/// Everything produced by a pretraining forward pass on one sample.
#[derive(Debug, Clone)]
pub struct PretrainOutput<S> {
    pub latents: LatentPair<S>,
    pub g1: GramMatrix<S>,
    pub g2: Option<GramMatrix<S>>,
    pub y1: Array2<S>,
    pub y2: Option<Array2<S>>,
    pub y_all: Array2<S>,
}

struct PretrainCache<S> {
    encoder: EncoderCache<S>,
    decoder1: DecoderCache<S>,
    decoder2: Option<DecoderCache<S>>,
}

/// Encoder, two projectors and the shared decoder over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct CsCrl<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub encoder: Encoder,
    pub projector1: Linear,
    pub projector2: Linear,
    pub decoder: Decoder,
    enc_pos: Array2<S>,
    dec_pos: Array2<S>,
}

impl<S: Scalar> CsCrl<S> {
    /// Fresh parameters, deterministic per seed. The second projector is built in
    /// every mode so checkpoints share one schema.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, cfg, &mut rng);
        let top = cfg.top_group();
        let projector1 = Linear::new(&mut params, "projector1", cfg.encoder_dim, cfg.decoder_dim, top, &mut rng);
        let projector2 = Linear::new(&mut params, "projector2", cfg.encoder_dim, cfg.decoder_dim, top, &mut rng);
        let decoder = Decoder::new(&mut params, cfg, &mut rng);
        Ok(Self {
            enc_pos: position_encoding(cfg.grid(), cfg.encoder_dim),
            dec_pos: position_encoding(cfg.grid(), cfg.decoder_dim),
            cfg: cfg.clone(),
            params,
            encoder,
            projector1,
            projector2,
            decoder,
        })
    }

    /// Same architecture with parameters replaced by `params`, checked by name and shape.
    pub fn with_params(cfg: &ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::build(cfg, 0)?;
        super::copy_matching(&mut model.params, &params, |_| true)?;
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn encoder_positions(&self) -> &Array2<S> {
        &self.enc_pos
    }

    pub fn decoder_positions(&self) -> &Array2<S> {
        &self.dec_pos
    }

    pub fn patch_embed(&self, visible: &TokenSequence<S>) -> Result<Array2<S>> {
        self.encoder.embed(&self.params, visible.data.view())
    }

    /// Latent of the visible tokens; `visible.indices` must equal `part.visible_idx`.
    pub fn encode(&self, visible: &TokenSequence<S>, part: &MaskPartition) -> Result<Array2<S>> {
        if visible.indices != part.visible_idx {
            return Err(Error::Contract("visible tokens do not match the partition".into()));
        }
        Ok(self
            .encoder
            .forward(&self.params, &self.enc_pos, visible.data.view(), &visible.indices, &mut Dropout::off())?
            .output)
    }

    /// Encoder pass over every token of a full sequence.
    pub fn encode_full(&self, tokens: &TokenSequence<S>) -> Result<EncoderCache<S>> {
        self.encoder
            .forward(&self.params, &self.enc_pos, tokens.data.view(), &tokens.indices, &mut Dropout::off())
    }

    pub fn project(&self, latent: ArrayView2<S>) -> Result<LatentPair<S>> {
        if latent.ncols() != self.cfg.encoder_dim {
            return Err(Error::Contract(format!(
                "latent width {} does not match encoder width {}",
                latent.ncols(),
                self.cfg.encoder_dim
            )));
        }
        Ok(LatentPair {
            z1: self.projector1.forward(&self.params, latent),
            z2: (self.mode() == Mode::Cscrl).then(|| self.projector2.forward(&self.params, latent)),
        })
    }

    pub fn decode(&self, z: ArrayView2<S>, part: &MaskPartition) -> Result<Array2<S>> {
        Ok(self
            .decoder
            .forward(&self.params, &self.dec_pos, z, part, &mut Dropout::off())?
            .0)
    }

    fn forward_cached(
        &self,
        tokens: &TokenSequence<S>,
        part: &MaskPartition,
        dropout: &mut Dropout<'_>,
    ) -> Result<(PretrainOutput<S>, PretrainCache<S>)> {
        if !tokens.is_full() || tokens.count() != self.cfg.num_tokens() {
            return Err(Error::Contract(format!(
                "pretraining needs the full {}-token sequence, got {} tokens",
                self.cfg.num_tokens(),
                tokens.count()
            )));
        }
        if part.token_count() != tokens.count() {
            return Err(Error::Contract(format!(
                "partition covers {} tokens, sequence has {}",
                part.token_count(),
                tokens.count()
            )));
        }
        let visible = tokens.data.select(Axis(0), &part.visible_idx);
        let enc = self
            .encoder
            .forward(&self.params, &self.enc_pos, visible.view(), &part.visible_idx, dropout)?;
        let latents = self.project(enc.output.view())?;
        let g1 = gram(latents.z1.view());
        let g2 = latents.z2.as_ref().map(|z| gram(z.view()));
        let (y1, dec1) = self
            .decoder
            .forward(&self.params, &self.dec_pos, latents.z1.view(), part, dropout)?;
        let (y2, dec2) = match &latents.z2 {
            Some(z2) => {
                let (y, c) = self.decoder.forward(&self.params, &self.dec_pos, z2.view(), part, dropout)?;
                (Some(y), Some(c))
            }
            None => (None, None),
        };
        let y_all = reconstruct(&y1, y2.as_ref(), self.mode())?;
        let out = PretrainOutput {
            latents,
            g1,
            g2,
            y1,
            y2,
            y_all,
        };
        let cache = PretrainCache {
            encoder: enc,
            decoder1: dec1,
            decoder2: dec2,
        };
        Ok((out, cache))
    }

    /// Full pretraining forward pass on one sample, without dropout.
    pub fn forward(&self, tokens: &TokenSequence<S>, part: &MaskPartition) -> Result<PretrainOutput<S>> {
        Ok(self.forward_cached(tokens, part, &mut Dropout::off())?.0)
    }

    fn report(&self, out: &PretrainOutput<S>, tokens: &TokenSequence<S>, part: &MaskPartition, obj: &ObjectiveSpec) -> Result<(LossReport, S)> {
        let targets = tokens.data.select(Axis(0), &part.masked_idx);
        let preds = out.y_all.select(Axis(0), &part.masked_idx);
        let pixel = pixel_loss(preds.view(), targets.view())?;
        let sigma1 = mean_sigmoid(out.g1.view(), obj.reduction)?;
        let (lc, lnc, sigma2) = match &out.g2 {
            Some(g2) => {
                let (lc, lnc) = semantic_losses(out.g1.view(), g2.view(), obj.reduction)?;
                (lc, lnc, mean_sigmoid(g2.view(), obj.reduction)?.to_f64_lossy())
            }
            None => (S::zero(), S::zero(), f64::NAN),
        };
        let total = total_loss(pixel, lc, lnc, obj.weights, self.mode());
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {total}")));
        }
        let report = LossReport {
            pixel: pixel.to_f64_lossy(),
            connectome: lc.to_f64_lossy(),
            nonconnectome: lnc.to_f64_lossy(),
            total: total.to_f64_lossy(),
            mean_sigma_g1: sigma1.to_f64_lossy(),
            mean_sigma_g2: sigma2,
        };
        Ok((report, total))
    }

    /// Loss of one sample and, when `grads` is given, its gradient accumulated scaled by `scale`.
    fn sample_pass(
        &self,
        tokens: &TokenSequence<S>,
        part: &MaskPartition,
        obj: &ObjectiveSpec,
        dropout_seed: Option<u64>,
        grads: Option<(&mut Gradients<S>, S)>,
    ) -> Result<(LossReport, S)> {
        let mut rng = dropout_seed.map(seed::rng);
        let mut dropout = match rng.as_mut() {
            Some(r) if self.cfg.dropout > 0.0 => Dropout::train(self.cfg.dropout, r),
            _ => Dropout::off(),
        };
        let (out, cache) = self.forward_cached(tokens, part, &mut dropout)?;
        let (report, total) = self.report(&out, tokens, part, obj)?;
        let Some((grads, scale)) = grads else {
            return Ok((report, total));
        };

        let store = &self.params;
        let targets = tokens.data.select(Axis(0), &part.masked_idx);
        let preds = out.y_all.select(Axis(0), &part.masked_idx);
        let w_pixel = match self.mode() {
            Mode::Mae => S::one(),
            Mode::Cscrl => S::c(obj.weights.beta1),
        } * scale;
        let dmasked = pixel_loss_grad(preds.view(), targets.view()).mapv(|v| v * w_pixel);
        let mut dy = Array2::<S>::zeros(out.y_all.raw_dim());
        for (row, &i) in dmasked.rows().into_iter().zip(&part.masked_idx) {
            dy.row_mut(i).assign(&row);
        }

        let mut dz1 = self.decoder.backward(store, &cache.decoder1, dy.view(), part, grads);
        let mut dlatent = Array2::<S>::zeros(cache.encoder.output.raw_dim());
        if let (Some(z2), Some(g2), Some(dec2)) = (&out.latents.z2, &out.g2, &cache.decoder2) {
            let neg = dy.mapv(|v| -v);
            let mut dz2 = self.decoder.backward(store, dec2, neg.view(), part, grads);
            let w_sem = S::c(obj.weights.beta2) * scale;
            let dg1 = semantic_grad(out.g1.view(), obj.reduction, true)?.mapv(|v| v * w_sem);
            let dg2 = semantic_grad(g2.view(), obj.reduction, false)?.mapv(|v| v * w_sem);
            dz1 += &gram_backward(out.latents.z1.view(), dg1.view());
            dz2 += &gram_backward(z2.view(), dg2.view());
            dlatent += &self
                .projector2
                .backward(store, cache.encoder.output.view(), dz2.view(), grads);
        }
        dlatent += &self
            .projector1
            .backward(store, cache.encoder.output.view(), dz1.view(), grads);
        self.encoder.backward(store, &cache.encoder, dlatent.view(), grads);
        Ok((report, total))
    }

    /// Mean loss over a batch of `(full tokens, partition)` samples.
    pub fn batch_loss(&self, batch: &[(TokenSequence<S>, MaskPartition)], obj: &ObjectiveSpec, dropout_seed: Option<u64>) -> Result<(LossReport, S)> {
        let results: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (t, p))| self.sample_pass(t, p, obj, dropout_seed.map(|s| seed::derive(s, &[i as u64])), None))
            .collect::<Result<_>>()?;
        Ok(Self::combine(results))
    }

    /// Mean loss over a batch and its gradient. Samples run in parallel; the
    /// per-sample gradients are summed in batch order.
    pub fn batch_loss_and_grad(
        &self,
        batch: &[(TokenSequence<S>, MaskPartition)],
        obj: &ObjectiveSpec,
        dropout_seed: Option<u64>,
    ) -> Result<(LossReport, S, Gradients<S>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = S::one() / S::c(batch.len() as f64);
        let results: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (t, p))| {
                let mut g = self.params.zeros_grad();
                let r = self.sample_pass(t, p, obj, dropout_seed.map(|s| seed::derive(s, &[i as u64])), Some((&mut g, scale)))?;
                Ok((r, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = self.params.zeros_grad();
        let mut losses = Vec::with_capacity(results.len());
        for (r, g) in results {
            grads.add_assign(&g);
            losses.push(r);
        }
        let (report, total) = Self::combine(losses);
        Ok((report, total, grads))
    }

    fn combine(results: Vec<(LossReport, S)>) -> (LossReport, S) {
        let n = S::c(results.len().max(1) as f64);
        let total = results.iter().fold(S::zero(), |a, (_, t)| a + *t) / n;
        let reports: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
        let mut report = LossReport::mean(&reports);
        report.total = total.to_f64_lossy();
        (report, total)
    }

    /// Full-token sequence of a volume at this model's patch size.
    pub fn tokens(&self, volume: &VolumeGrid) -> Result<TokenSequence<S>> {
        check_volume(&self.cfg, volume)?;
        patchify(volume, self.cfg.patch_size)
    }
}

pub(crate) fn check_volume(cfg: &ModelConfig, volume: &VolumeGrid) -> Result<()> {
    if volume.dims() != cfg.volume_dims || volume.channels() != cfg.channels {
        return Err(Error::Geometry(format!(
            "volume {:?}x{} does not match model input {:?}x{}",
            volume.dims(),
            volume.channels(),
            cfg.volume_dims,
            cfg.channels
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_mask;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tokens(cfg: &ModelConfig, seed: u64) -> TokenSequence<f64> {
        let mut rng = seed::rng(seed);
        let n = cfg.num_tokens();
        TokenSequence {
            data: Array2::from_shape_fn((n, cfg.token_len()), |_| rng.random::<f64>()),
            indices: (0..n).collect(),
            grid: cfg.grid(),
            patch_size: cfg.patch_size,
            channels: cfg.channels,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let a = CsCrl::<f32>::build(&cfg, 7).unwrap();
        let b = CsCrl::<f32>::build(&cfg, 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = CsCrl::<f32>::build(&cfg, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameter_count_matches_declared_shapes() {
        let cfg = ModelConfig::paper();
        let model = CsCrl::<f32>::build(&cfg, 0).unwrap();
        let (e, d, l, r) = (cfg.encoder_dim, cfg.decoder_dim, cfg.token_len(), cfg.mlp_ratio);
        let block = |w: usize| 4 * w + 4 * (w * w + w) + (w * w * r + w * r) + (w * r * w + w);
        let expected = (l * e + e)
            + cfg.encoder_depth * block(e)
            + 2 * e
            + 2 * (e * d + d)
            + d
            + cfg.decoder_depth * block(d)
            + 2 * d
            + (d * l + l);
        assert_eq!(model.params.num_scalars(), expected);
        assert_eq!(CsCrl::<f32>::build(&cfg, 1).unwrap().params.num_scalars(), expected);
    }

    #[test]
    fn init_follows_rules() {
        let model = CsCrl::<f64>::build(&ModelConfig::tiny(), 3).unwrap();
        for p in model.params.iter() {
            if p.name.ends_with(".bias") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{}", p.name);
            } else if p.name.ends_with(".gain") {
                assert!(p.data.iter().all(|&v| v == 1.0), "{}", p.name);
            } else if p.name.ends_with(".weight") {
                assert!(p.data.iter().all(|&v| v.abs() <= 0.04), "{}", p.name);
            }
        }
    }

    #[test]
    fn paper_geometry_shapes() {
        let cfg = ModelConfig::paper();
        let model = CsCrl::<f32>::build(&cfg, 0).unwrap();
        let part = sample_mask(125, 0.76, 1).unwrap();
        let tokens = random_tokens(&cfg, 2).cast::<f32>();
        let (visible, _) = crate::data::split_tokens(&tokens, &part).unwrap();
        assert_eq!(visible.count(), 30);
        assert_eq!(model.patch_embed(&visible).unwrap().dim(), (30, 1000));
        let latent = model.encode(&visible, &part).unwrap();
        assert_eq!(latent.dim(), (30, 1000));
        let pair = model.project(latent.view()).unwrap();
        assert_eq!(pair.z1.dim(), (30, 600));
        assert_eq!(pair.z2.as_ref().unwrap().dim(), (30, 600));
        assert_eq!(model.decode(pair.z1.view(), &part).unwrap().dim(), (125, 1000));
    }

    #[test]
    fn patch_embed_is_affine() {
        let cfg = ModelConfig::tiny();
        let model = CsCrl::<f64>::build(&cfg, 0).unwrap();
        let t = random_tokens(&cfg, 4);
        let mut t2 = t.clone();
        t2.data.mapv_inplace(|v| 2.0 * v);
        let mut zero = t.clone();
        zero.data.fill(0.0);
        let e0 = model.patch_embed(&zero).unwrap();
        assert!(e0.iter().all(|&v| v == 0.0));
        let e1 = model.patch_embed(&t).unwrap();
        let e2 = model.patch_embed(&t2).unwrap();
        let diff = (&e2 - &e0) - (&e1 - &e0) * 2.0;
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
        let mut wrong = t.clone();
        wrong.data = Array2::zeros((8, 7));
        assert!(model.patch_embed(&wrong).is_err());
    }

    #[test]
    fn encoder_ignores_masked_tokens() {
        let cfg = ModelConfig::tiny();
        let model = CsCrl::<f64>::build(&cfg, 0).unwrap();
        let part = sample_mask(8, 0.76, 3).unwrap();
        let tokens = random_tokens(&cfg, 5);
        let mut other = tokens.clone();
        for &i in &part.masked_idx {
            other.data.row_mut(i).fill(0.123);
        }
        let a = crate::data::split_tokens(&tokens, &part).unwrap().0;
        let b = crate::data::split_tokens(&other, &part).unwrap().0;
        assert_eq!(model.encode(&a, &part).unwrap(), model.encode(&b, &part).unwrap());
        assert_eq!(model.encode(&a, &part).unwrap(), model.encode(&a, &part).unwrap());
    }

    #[test]
    fn projector_examples() {
        let cfg = ModelConfig::tiny();
        let model = CsCrl::<f64>::build(&cfg, 0).unwrap();
        let zero = Array2::<f64>::zeros((3, cfg.encoder_dim));
        let pair = model.project(zero.view()).unwrap();
        let b1 = model.params.view1(model.projector1.bias);
        assert!(pair.z1.rows().into_iter().all(|r| r == b1));
        let mut rng = seed::rng(1);
        let x = Array2::from_shape_fn((3, cfg.encoder_dim), |_| rng.random::<f64>());
        let pair = model.project(x.view()).unwrap();
        assert_ne!(pair.z1, pair.z2.unwrap());
        let mae = CsCrl::<f64>::build(&cfg.clone().with_mode(Mode::Mae), 0).unwrap();
        assert!(mae.project(x.view()).unwrap().z2.is_none());
    }

    #[test]
    fn gram_examples() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(gram(z.view()), array![[0.5, 0.0], [0.0, 0.5]]);
        assert!(gram(Array2::<f64>::zeros((3, 4)).view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_assembly_and_mask_token() {
        let cfg = ModelConfig::tiny();
        let model = CsCrl::<f64>::build(&cfg, 0).unwrap();
        let part = sample_mask(8, 0.76, 9).unwrap();
        let mut rng = seed::rng(2);
        let z = Array2::from_shape_fn((part.visible_idx.len(), cfg.decoder_dim), |_| rng.random::<f64>());
        let full = model.decoder.assemble(&model.params, z.view(), &part).unwrap();
        for (r, &i) in part.visible_idx.iter().enumerate() {
            assert_eq!(full.row(i), z.row(r));
        }
        let base = model.decode(z.view(), &part).unwrap();
        let mut bumped = model.clone();
        bumped.params.get_mut(bumped.decoder.mask_token).data[0] += 0.5;
        let moved = bumped.decode(z.view(), &part).unwrap();
        for &i in &part.masked_idx {
            assert_ne!(base.row(i), moved.row(i));
        }
    }

    #[test]
    fn reconstruct_examples() {
        let a = array![[1.0, 2.0]];
        let b = array![[0.5, -1.0]];
        assert!(reconstruct(&a, Some(&a), Mode::Cscrl).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(
            reconstruct(&a, Some(&b), Mode::Cscrl).unwrap(),
            -reconstruct(&b, Some(&a), Mode::Cscrl).unwrap()
        );
        assert_eq!(reconstruct(&a, Some(&b), Mode::Mae).unwrap(), a);
        assert!(reconstruct(&a, Some(&array![[1.0]]), Mode::Cscrl).is_err());
    }

    #[test]
    fn batch_loss_matches_grad_pass() {
        let cfg = ModelConfig::tiny();
        let model = CsCrl::<f64>::build(&cfg, 0).unwrap();
        let batch: Vec<_> = (0..3)
            .map(|i| (random_tokens(&cfg, i), sample_mask(8, 0.76, i).unwrap()))
            .collect();
        let obj = ObjectiveSpec::default();
        let (r1, t1) = model.batch_loss(&batch, &obj, None).unwrap();
        let (r2, t2, g) = model.batch_loss_and_grad(&batch, &obj, None).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(r1, r2);
        assert!(g.first_non_finite().is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn forward_is_finite_at_init(seed in any::<u64>()) {
            let cfg = ModelConfig::tiny();
            let model = CsCrl::<f32>::build(&cfg, seed).unwrap();
            let tokens = random_tokens(&cfg, seed ^ 1).cast::<f32>();
            let part = sample_mask(8, 0.76, seed).unwrap();
            let out = model.forward(&tokens, &part).unwrap();
            prop_assert!(out.y_all.iter().all(|v| v.is_finite()));
            let g = &out.g1;
            for i in 0..g.nrows() {
                prop_assert!(g[[i, i]] >= 0.0);
                for j in 0..g.ncols() {
                    prop_assert!((g[[i, j]] - g[[j, i]]).abs() < 1e-6);
                }
            }
        }
    }
}
