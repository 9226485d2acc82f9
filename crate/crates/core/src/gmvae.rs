//! Two-encoder Gaussian-mixture VAE.
//!
//! A pitch encoder and a timbre encoder each map a `T×F` log-mel
//! spectrogram (treated as `F` channels over `T` frames) to a diagonal
//! Gaussian over an `L`-dimensional code. The codes are concatenated as
//! `[z_t, z_p]` and decoded by a shared decoder. Each latent space has a
//! mixture prior with one learnable-mean component per class and a fixed
//! standard deviation.

use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::graph::{softmax_in_place, Graph, Var};
use crate::nn::{
    apply_running_updates, xavier_init, Adam, BatchNormLayer, ConvLayer, Ctx, DenseLayer, Mode, ParamId, ParamStore,
    Rng, RunningStats,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Mixture prior over the timbre space.
    Gmvae,
    /// Standard-normal timbre prior plus an auxiliary instrument classifier.
    VaeBaseline,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Gmvae => "gmvae",
            ModelMode::VaeBaseline => "vae",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Pitch,
    Timbre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub bands: usize,
    pub latent_dim: usize,
    pub conv_channels: usize,
    pub hidden_units: usize,
    pub kernel: usize,
    pub pitch_classes: usize,
    pub instrument_classes: usize,
    pub pitch_std: f64,
    pub timbre_std: f64,
    /// Weight of the instrument cross-entropy on labeled examples.
    pub supervision_weight: f64,
    /// Encoder log-variances are clamped to `±logvar_limit`.
    pub logvar_limit: f64,
    pub aux_hidden: usize,
    pub mode: ModelMode,
}

impl ModelConfig {
    /// 512-filter convolutions, 512-unit dense layers, `L = 16`,
    /// `σ_p = e⁻²`, `σ_t = 1`.
    pub fn reference(pitch_classes: usize, instrument_classes: usize, mode: ModelMode) -> Self {
        Self {
            frames: 43,
            bands: 256,
            latent_dim: 16,
            conv_channels: 512,
            hidden_units: 512,
            kernel: 3,
            pitch_classes,
            instrument_classes,
            pitch_std: libm::exp(-2.0),
            timbre_std: 1.0,
            supervision_weight: 10.0,
            logvar_limit: 10.0,
            aux_hidden: 128,
            mode,
        }
    }

    /// Same topology with narrower layers, sized for a single CPU core.
    pub fn desk(pitch_classes: usize, instrument_classes: usize, mode: ModelMode) -> Self {
        Self { conv_channels: 64, hidden_units: 128, ..Self::reference(pitch_classes, instrument_classes, mode) }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.frames > 0
            && self.bands > 0
            && self.latent_dim > 0
            && self.conv_channels > 0
            && self.hidden_units > 0
            && self.kernel % 2 == 1
            && self.pitch_classes >= 2
            && self.instrument_classes >= 2
            && self.pitch_std > 0.0
            && self.timbre_std > 0.0
            && self.supervision_weight >= 0.0
            && self.logvar_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid model configuration {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 128, learning_rate: 1e-4, seed: 0 }
    }
}

/// Convolutional trunk shared by the encoders and the CNN classifier:
/// two same-padded convolutions and a dense layer, each followed by batch
/// norm and relu.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTrunk {
    pub conv1: ConvLayer,
    pub bn1: BatchNormLayer,
    pub conv2: ConvLayer,
    pub bn2: BatchNormLayer,
    pub dense: DenseLayer,
    pub bn3: BatchNormLayer,
    pub flat: usize,
}

impl ConvTrunk {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        running: &mut Vec<RunningStats<F>>,
        name: &str,
        frames: usize,
        bands: usize,
        channels: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = ConvLayer::new(store, &alloc::format!("{name}.conv1"), bands, channels, kernel, rng);
        let bn1 = BatchNormLayer::new(store, running, &alloc::format!("{name}.bn1"), channels);
        let conv2 = ConvLayer::new(store, &alloc::format!("{name}.conv2"), channels, channels, kernel, rng);
        let bn2 = BatchNormLayer::new(store, running, &alloc::format!("{name}.bn2"), channels);
        let flat = frames * channels;
        let dense = DenseLayer::new(store, &alloc::format!("{name}.dense"), flat, hidden, rng);
        let bn3 = BatchNormLayer::new(store, running, &alloc::format!("{name}.bn3"), hidden);
        Self { conv1, bn1, conv2, bn2, dense, bn3, flat }
    }

    /// `x [b, frames, bands]` to `[b, hidden]`.
    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let b = ctx.g.shape(h)[0];
        let h = ctx.g.reshape(h, &[b, self.flat])?;
        let h = self.dense.forward(ctx, h)?;
        let h = self.bn3.forward(ctx, h)?;
        Ok(ctx.g.relu(h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub trunk: ConvTrunk,
    pub mean: DenseLayer,
    pub logvar: DenseLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub dense1: DenseLayer,
    pub bn1: BatchNormLayer,
    pub dense2: DenseLayer,
    pub bn2: BatchNormLayer,
    pub conv1: ConvLayer,
    pub bn3: BatchNormLayer,
    pub conv2: ConvLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxClassifier {
    pub hidden1: DenseLayer,
    pub hidden2: DenseLayer,
    pub out: DenseLayer,
}

impl AuxClassifier {
    fn logits<F: Float>(&self, ctx: &mut Ctx<'_, F>, z: Var) -> Result<Var> {
        let h = self.hidden1.forward(ctx, z)?;
        let h = ctx.g.relu(h);
        let h = self.hidden2.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        self.out.forward(ctx, h)
    }
}

/// Gaussian mixture with equal weights, per-class means and one shared
/// isotropic standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    /// `[components × L]`, row-major.
    pub means: Vec<f64>,
    pub components: usize,
    pub dim: usize,
    pub std: f64,
}

impl MixturePrior {
    pub fn new(means: Vec<f64>, components: usize, std: f64) -> Result<Self> {
        if components == 0 || !means.len().is_multiple_of(components) || !(std > 0.0) {
            return Err(Error::Config("mixture prior needs components and a positive std".into()));
        }
        let dim = means.len() / components;
        Ok(Self { means, components, dim, std })
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    /// `p(y = k | z)` under a uniform class prior.
    pub fn posterior(&self, z: &[f64]) -> Vec<f64> {
        let inv = 1.0 / (2.0 * self.std * self.std);
        let mut logits: Vec<f64> = (0..self.components)
            .map(|k| -inv * self.mean(k).iter().zip(z).map(|(m, x)| (x - m) * (x - m)).sum::<f64>())
            .collect();
        softmax_in_place(&mut logits);
        logits
    }
}

/// `KL(N(mean_q, diag exp(logvar_q)) ‖ N(mean_p, std_p² I))`.
pub fn kl_diag_gaussian(mean_q: &[f64], logvar_q: &[f64], mean_p: &[f64], std_p: f64) -> f64 {
    let ls = libm::log(std_p);
    let inv = 1.0 / (2.0 * std_p * std_p);
    mean_q
        .iter()
        .zip(logvar_q)
        .zip(mean_p)
        .map(|((&m, &lv), &mp)| ls - 0.5 * lv + (libm::exp(lv) + (m - mp) * (m - mp)) * inv - 0.5)
        .sum()
}

/// `z = mean + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(mean: &[f64], logvar: &[f64], eps: &[f64]) -> Vec<f64> {
    mean.iter().zip(logvar).zip(eps).map(|((&m, &lv), &e)| m + libm::exp(lv / 2.0) * e).collect()
}

/// Mean negative ELBO terms per example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_pitch: f64,
    pub expected_kl_timbre: f64,
    pub kl_categorical: f64,
    pub supervised_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 6] =
        ["reconstruction", "kl_pitch", "expected_kl_timbre", "kl_categorical", "supervised_ce", "total"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.reconstruction,
            self.kl_pitch,
            self.expected_kl_timbre,
            self.kl_categorical,
            self.supervised_ce,
            self.total,
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    fn scaled_add(&mut self, other: &LossBreakdown, w: f64) {
        self.reconstruction += w * other.reconstruction;
        self.kl_pitch += w * other.kl_pitch;
        self.expected_kl_timbre += w * other.expected_kl_timbre;
        self.kl_categorical += w * other.kl_categorical;
        self.supervised_ce += w * other.supervised_ce;
        self.total += w * other.total;
    }
}

/// Mini-batch in model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    /// `[b, frames, bands]`.
    pub x: Tensor<F>,
    pub pitch: Vec<usize>,
    pub instrument: Vec<Option<usize>>,
}

impl<F: Float> Batch<F> {
    pub fn from_corpus(corpus: &Corpus, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let first = &corpus.examples[idx[0]].spectrogram;
        let (t, f) = (first.frames, first.bands);
        let mut data = Vec::with_capacity(idx.len() * t * f);
        for &i in idx {
            data.extend(corpus.examples[i].spectrogram.values.iter().map(|&v| F::from_f64(v as f64)));
        }
        Ok(Self {
            x: Tensor::new(&[idx.len(), t, f], data)?,
            pitch: idx.iter().map(|&i| corpus.examples[i].pitch).collect(),
            instrument: idx.iter().map(|&i| corpus.examples[i].instrument_label()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }
}

/// Standard-normal draws for the reparameterization of both codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<F> {
    pub pitch: Tensor<F>,
    pub timbre: Tensor<F>,
}

impl<F: Float> Noise<F> {
    pub fn draw(batch: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut draw = || Tensor::from_fn(&[batch, dim], |_| F::from_f64(StandardNormal.sample(rng)));
        let pitch = draw();
        let timbre = draw();
        Self { pitch, timbre }
    }

    pub fn zeros(batch: usize, dim: usize) -> Self {
        Self { pitch: Tensor::zeros(&[batch, dim]), timbre: Tensor::zeros(&[batch, dim]) }
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub kl_pitch: Var,
    pub expected_kl_timbre: Var,
    pub kl_categorical: Var,
    pub supervised_ce: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<F: Float>(&self, g: &Graph<F>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().to_f64();
        LossBreakdown {
            reconstruction: v(self.reconstruction),
            kl_pitch: v(self.kl_pitch),
            expected_kl_timbre: v(self.expected_kl_timbre),
            kl_categorical: v(self.kl_categorical),
            supervised_ce: v(self.supervised_ce),
            total: v(self.total),
        }
    }
}

/// Full model state: configuration, parameters, batch-norm running
/// statistics and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmvae<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub running: Vec<RunningStats<F>>,
    pub optimizer: Adam<F>,
    layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    pitch_encoder: Encoder,
    timbre_encoder: Encoder,
    decoder: Decoder,
    pitch_means: ParamId,
    timbre_means: Option<ParamId>,
    aux: Option<AuxClassifier>,
}

impl<F: Float> Gmvae<F> {
    /// Xavier-initialized weights and prior means, zero biases, unit
    /// batch-norm scales.
    pub fn new(config: ModelConfig, learning_rate: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let mut running = Vec::new();
        let encoder = |store: &mut ParamStore<F>, running: &mut Vec<RunningStats<F>>, name: &str, rng: &mut Rng| {
            let trunk =
                ConvTrunk::new(store, running, name, c.frames, c.bands, c.conv_channels, c.hidden_units, c.kernel, rng);
            let mean = DenseLayer::new(store, &alloc::format!("{name}.mean"), c.hidden_units, c.latent_dim, rng);
            let logvar = DenseLayer::new(store, &alloc::format!("{name}.logvar"), c.hidden_units, c.latent_dim, rng);
            Encoder { trunk, mean, logvar }
        };
        let pitch_encoder = encoder(&mut store, &mut running, "pitch_encoder", rng);
        let timbre_encoder = encoder(&mut store, &mut running, "timbre_encoder", rng);
        let flat = c.frames * c.conv_channels;
        let decoder = Decoder {
            dense1: DenseLayer::new(&mut store, "decoder.dense1", 2 * c.latent_dim, c.hidden_units, rng),
            bn1: BatchNormLayer::new(&mut store, &mut running, "decoder.bn1", c.hidden_units),
            dense2: DenseLayer::new(&mut store, "decoder.dense2", c.hidden_units, flat, rng),
            bn2: BatchNormLayer::new(&mut store, &mut running, "decoder.bn2", flat),
            conv1: ConvLayer::new(&mut store, "decoder.conv1", c.conv_channels, c.conv_channels, c.kernel, rng),
            bn3: BatchNormLayer::new(&mut store, &mut running, "decoder.bn3", c.conv_channels),
            conv2: ConvLayer::new(&mut store, "decoder.conv2", c.conv_channels, c.bands, c.kernel, rng),
        };
        let pitch_means = store.add("pitch_prior.means", xavier_init(&[c.pitch_classes, c.latent_dim], rng));
        let (timbre_means, aux) = match c.mode {
            ModelMode::Gmvae => {
                (Some(store.add("timbre_prior.means", xavier_init(&[c.instrument_classes, c.latent_dim], rng))), None)
            }
            ModelMode::VaeBaseline => {
                let aux = AuxClassifier {
                    hidden1: DenseLayer::new(&mut store, "aux.hidden1", c.latent_dim, c.aux_hidden, rng),
                    hidden2: DenseLayer::new(&mut store, "aux.hidden2", c.aux_hidden, c.aux_hidden, rng),
                    out: DenseLayer::new(&mut store, "aux.out", c.aux_hidden, c.instrument_classes, rng),
                };
                (None, Some(aux))
            }
        };
        let layout = Layout { pitch_encoder, timbre_encoder, decoder, pitch_means, timbre_means, aux };
        Ok(Self { config, params: store, running, optimizer: Adam::new(learning_rate), layout })
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn has_aux_classifier(&self) -> bool {
        self.layout.aux.is_some()
    }

    pub fn cast<G: Float>(&self) -> Gmvae<G> {
        Gmvae {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self.running.iter().map(|r| r.cast()).collect(),
            optimizer: Adam {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
                step: self.optimizer.step,
                first: self.optimizer.first.iter().map(|t| t.cast()).collect(),
                second: self.optimizer.second.iter().map(|t| t.cast()).collect(),
            },
            layout: self.layout.clone(),
        }
    }

    pub fn pitch_means_id(&self) -> ParamId {
        self.layout.pitch_means
    }

    pub fn timbre_means_id(&self) -> Option<ParamId> {
        self.layout.timbre_means
    }

    pub fn pitch_prior(&self) -> MixturePrior {
        let t = self.params.get(self.layout.pitch_means);
        MixturePrior::new(t.data().iter().map(|&x| Float::to_f64(x)).collect(), self.config.pitch_classes, self.config.pitch_std)
            .unwrap()
    }

    /// The instrument mixture; unavailable for the baseline, whose timbre
    /// prior is a single standard normal.
    pub fn timbre_prior(&self) -> Result<MixturePrior> {
        let id = self.layout.timbre_means.ok_or_else(|| Error::Mode {
            expected: ModelMode::Gmvae.name().into(),
            found: self.config.mode.name().into(),
        })?;
        let t = self.params.get(id);
        MixturePrior::new(
            t.data().iter().map(|&x| Float::to_f64(x)).collect(),
            self.config.instrument_classes,
            self.config.timbre_std,
        )
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.frames || s[2] != self.config.bands {
            return Err(shape_err(
                "encode",
                alloc::format!("expected [b, {}, {}], got {s:?}", self.config.frames, self.config.bands),
            ));
        }
        Ok(())
    }

    fn encoder(&self, which: Which) -> &Encoder {
        match which {
            Which::Pitch => &self.layout.pitch_encoder,
            Which::Timbre => &self.layout.timbre_encoder,
        }
    }

    fn encode_vars(&self, ctx: &mut Ctx<'_, F>, x: Var, which: Which) -> Result<(Var, Var)> {
        let enc = self.encoder(which);
        let h = enc.trunk.forward(ctx, x)?;
        let mean = enc.mean.forward(ctx, h)?;
        let lv = enc.logvar.forward(ctx, h)?;
        let lim = F::from_f64(self.config.logvar_limit);
        let lv = ctx.g.clamp(lv, -lim, lim);
        Ok((mean, lv))
    }

    fn decode_vars(&self, ctx: &mut Ctx<'_, F>, z_p: Var, z_t: Var) -> Result<Var> {
        let d = &self.layout.decoder;
        let z = ctx.g.concat_last(z_t, z_p)?;
        let h = d.dense1.forward(ctx, z)?;
        let h = d.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let h = d.dense2.forward(ctx, h)?;
        let h = d.bn2.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let b = ctx.g.shape(h)[0];
        let h = ctx.g.reshape(h, &[b, self.config.frames, self.config.conv_channels])?;
        let h = d.conv1.forward(ctx, h)?;
        let h = d.bn3.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let h = d.conv2.forward(ctx, h)?;
        Ok(ctx.g.tanh(h))
    }

    fn reparam_var(g: &mut Graph<F>, mean: Var, lv: Var, eps: &Tensor<F>) -> Result<Var> {
        let half = g.scale(lv, F::from_f64(0.5));
        let std = g.exp(half);
        let e = g.constant(eps.clone());
        let noise = g.mul(std, e)?;
        g.add(mean, noise)
    }

    /// Posterior means and clamped log-variances (inference-mode batch
    /// norm) for `x [b, frames, bands]`.
    pub fn encode(&self, x: &Tensor<F>, which: Which) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut ctx = Ctx::new(&mut g, &p, &self.running, Mode::Infer);
        let xv = ctx.g.constant(x.clone());
        let (m, lv) = self.encode_vars(&mut ctx, xv, which)?;
        Ok((g.value(m).clone(), g.value(lv).clone()))
    }

    /// Decodes `[b, L]` pitch and timbre codes to `[b, frames, bands]`.
    pub fn decode(&self, z_p: &Tensor<F>, z_t: &Tensor<F>) -> Result<Tensor<F>> {
        let l = self.config.latent_dim;
        if z_p.shape().len() != 2 || z_p.shape() != z_t.shape() || z_p.shape()[1] != l {
            return Err(shape_err("decode", alloc::format!("codes {:?} and {:?}", z_p.shape(), z_t.shape())));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut ctx = Ctx::new(&mut g, &p, &self.running, Mode::Infer);
        let zp = ctx.g.constant(z_p.clone());
        let zt = ctx.g.constant(z_t.clone());
        let out = self.decode_vars(&mut ctx, zp, zt)?;
        Ok(g.value(out).clone())
    }

    /// Decodes the posterior means of `x`.
    pub fn reconstruct(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (zp, _) = self.encode(x, Which::Pitch)?;
        let (zt, _) = self.encode(x, Which::Timbre)?;
        self.decode(&zp, &zt)
    }

    /// Records the negative ELBO of `batch` on `ctx`'s tape.
    pub fn loss_vars(&self, ctx: &mut Ctx<'_, F>, batch: &Batch<F>, noise: &Noise<F>) -> Result<LossVars> {
        self.check_input(&batch.x)?;
        let c = &self.config;
        let b = batch.len();
        let k = c.instrument_classes;
        if let Some(bad) = batch.pitch.iter().find(|&&y| y >= c.pitch_classes) {
            return Err(Error::Request(alloc::format!("pitch label {bad} out of range")));
        }
        if let Some(bad) = batch.instrument.iter().flatten().find(|&&y| y >= k) {
            return Err(Error::Request(alloc::format!("instrument label {bad} out of range")));
        }
        let inv_b = F::from_f64(1.0 / b as f64);
        let x = ctx.g.constant(batch.x.clone());
        let (mp, lvp) = self.encode_vars(ctx, x, Which::Pitch)?;
        let (mt, lvt) = self.encode_vars(ctx, x, Which::Timbre)?;
        let zp = Self::reparam_var(ctx.g, mp, lvp, &noise.pitch)?;
        let zt = Self::reparam_var(ctx.g, mt, lvt, &noise.timbre)?;
        let xhat = self.decode_vars(ctx, zp, zt)?;

        let g = &mut *ctx.g;
        let diff = g.sub(xhat, x)?;
        let sq = g.square(diff);
        let sse = g.sum(sq);
        let reconstruction = g.scale(sse, F::from_f64(0.5) * inv_b);

        let pitch_means = g.gather_rows(ctx.params.var(self.layout.pitch_means), &batch.pitch)?;
        let klp = kl_terms(g, mp, lvp, PriorMean::Class(pitch_means), c.pitch_std)?;
        let klp = g.sum(klp);
        let kl_pitch = g.scale(klp, inv_b);

        let labeled: Vec<Option<usize>> = batch.instrument.clone();
        let onehot = Tensor::from_fn(&[b, k], |i| {
            F::from_f64(if labeled[i / k] == Some(i % k) { 1.0 } else { 0.0 })
        });
        let n_unlabeled = labeled.iter().filter(|l| l.is_none()).count();
        let gamma = F::from_f64(c.supervision_weight);

        let (expected_kl_timbre, kl_categorical, supervised_ce) = match self.layout.timbre_means {
            Some(means_id) => {
                let mu = ctx.params.var(means_id);
                let inv2s2 = F::from_f64(1.0 / (2.0 * c.timbre_std * c.timbre_std));
                // KL to component k = shared part (variance terms) + squared mean distance.
                let shared = kl_terms(g, mt, lvt, PriorMean::Omit, c.timbre_std)?;
                let shared = g.sum_last(shared);
                let d = g.sq_dist(mt, mu)?;
                let d = g.scale(d, inv2s2);
                let kl_bk = g.add_last(d, shared)?;
                let logits = g.sq_dist(zt, mu)?;
                let logits = g.scale(logits, -inv2s2);
                let logq = g.log_softmax(logits);
                let q = g.exp(logq);
                let unl_mask = Tensor::from_fn(&[b, k], |i| {
                    F::from_f64(if labeled[i / k].is_none() { 1.0 } else { 0.0 })
                });
                let unl = g.constant(unl_mask);
                let oh = g.constant(onehot);
                let qu = g.mul(q, unl)?;
                let weights = g.add(qu, oh)?;
                let wkl = g.mul(weights, kl_bk)?;
                let ekl = g.sum(wkl);
                let ekl = g.scale(ekl, inv_b);
                let qlogq = g.mul(q, logq)?;
                let qlogq = g.mul(qlogq, unl)?;
                let neg_h = g.sum(qlogq);
                let kl_cat = g.offset(neg_h, F::from_f64(n_unlabeled as f64 * libm::log(k as f64)));
                let kl_cat = g.scale(kl_cat, inv_b);
                let picked = g.mul(logq, oh)?;
                let ll = g.sum(picked);
                let ce = g.scale(ll, -gamma * inv_b);
                (ekl, kl_cat, ce)
            }
            None => {
                let klt = kl_terms(g, mt, lvt, PriorMean::Zero, 1.0)?;
                let klt = g.sum(klt);
                let klt = g.scale(klt, inv_b);
                let aux = self.layout.aux.as_ref().expect("baseline carries an auxiliary classifier");
                let logits = aux.logits(ctx, zt)?;
                let g = &mut *ctx.g;
                let logq = g.log_softmax(logits);
                let oh = g.constant(onehot);
                let picked = g.mul(logq, oh)?;
                let ll = g.sum(picked);
                let ce = g.scale(ll, -gamma * inv_b);
                let zero = g.constant(Tensor::scalar(F::zero()));
                (klt, zero, ce)
            }
        };
        let g = &mut *ctx.g;
        let t = g.add(reconstruction, kl_pitch)?;
        let t = g.add(t, expected_kl_timbre)?;
        let t = g.add(t, kl_categorical)?;
        let total = g.add(t, supervised_ce)?;
        Ok(LossVars { reconstruction, kl_pitch, expected_kl_timbre, kl_categorical, supervised_ce, total })
    }

    /// Loss of `batch` without updating anything. `mode` selects batch or
    /// running statistics for batch norm.
    pub fn loss(&self, batch: &Batch<F>, noise: &Noise<F>, mode: Mode) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut ctx = Ctx::new(&mut g, &p, &self.running, mode);
        let vars = self.loss_vars(&mut ctx, batch, noise)?;
        Ok(vars.breakdown(&g))
    }

    /// Loss and gradient for every parameter, without updating.
    pub fn loss_and_gradients(&self, batch: &Batch<F>, noise: &Noise<F>) -> Result<(LossBreakdown, Vec<Tensor<F>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut ctx = Ctx::new(&mut g, &p, &self.running, Mode::Train);
        let vars = self.loss_vars(&mut ctx, batch, noise)?;
        let grads = g.backward(vars.total)?;
        let out = p
            .0
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((vars.breakdown(&g), out))
    }

    /// One Adam step on `batch`.
    pub fn train_step(&mut self, batch: &Batch<F>, noise: &Noise<F>) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut ctx = Ctx::new(&mut g, &p, &self.running, Mode::Train);
        let vars = self.loss_vars(&mut ctx, batch, noise)?;
        let updates = core::mem::take(&mut ctx.updates);
        let breakdown = vars.breakdown(&g);
        if let Some(term) = breakdown.first_non_finite() {
            return Err(Error::NonFinite(String::from(term)));
        }
        let grads = g.backward(vars.total)?;
        let refs: Vec<Option<&Tensor<F>>> = p.0.iter().map(|&v| grads.get(v)).collect();
        self.optimizer.step(self.params.tensors_mut(), &refs)?;
        apply_running_updates(&mut self.running, updates);
        Ok(breakdown)
    }

    /// Trains on the train split for `epochs` epochs and returns the mean
    /// loss breakdown per epoch. `on_epoch` runs after every epoch.
    /// Batches of a single example are skipped (batch norm needs two).
    pub fn fit(
        &mut self,
        corpus: &Corpus,
        epochs: usize,
        batch_size: usize,
        rng: &mut Rng,
        mut on_epoch: impl FnMut(usize, &Self, &LossBreakdown) -> Result<()>,
    ) -> Result<Vec<LossBreakdown>> {
        if corpus.pitch_classes() != self.config.pitch_classes
            || corpus.instrument_classes() != self.config.instrument_classes
        {
            return Err(Error::Config("corpus and model disagree on class counts".into()));
        }
        let mut log = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut sum = LossBreakdown::default();
            let mut seen = 0usize;
            for idx in corpus.batches(Split::Train, batch_size, rng)? {
                if idx.len() < 2 {
                    continue;
                }
                let batch = Batch::from_corpus(corpus, &idx)?;
                let noise = Noise::draw(batch.len(), self.config.latent_dim, rng);
                let step = self.train_step(&batch, &noise)?;
                sum.scaled_add(&step, batch.len() as f64);
                seen += batch.len();
            }
            let mut mean = LossBreakdown::default();
            mean.scaled_add(&sum, 1.0 / seen.max(1) as f64);
            on_epoch(epoch, self, &mean)?;
            log.push(mean);
        }
        Ok(log)
    }

    /// Posterior means of both codes for the given corpus examples,
    /// computed in chunks. Returns `(z_p, z_t)` as `[n × L]` rows.
    pub fn latent_means(&self, corpus: &Corpus, idx: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut zp = Vec::with_capacity(idx.len());
        let mut zt = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(128) {
            let batch = Batch::<F>::from_corpus(corpus, chunk)?;
            for (which, out) in [(Which::Pitch, &mut zp), (Which::Timbre, &mut zt)] {
                let (m, _) = self.encode(&batch.x, which)?;
                out.extend(m.rows().map(|r| r.iter().map(|&v| Float::to_f64(v)).collect::<Vec<_>>()));
            }
        }
        Ok((zp, zt))
    }

    /// `q(y_t | X)` for a timbre code.
    pub fn instrument_posterior(&self, z_t: &[f64]) -> Result<Vec<f64>> {
        Ok(self.timbre_prior()?.posterior(z_t))
    }
}

enum PriorMean {
    Class(Var),
    Zero,
    /// Leave out the squared mean difference.
    Omit,
}

/// Per-dimension `KL(N(m, e^lv) ‖ N(mu, std²))`.
fn kl_terms<F: Float>(g: &mut Graph<F>, m: Var, lv: Var, mu: PriorMean, std: f64) -> Result<Var> {
    let inv2s2 = F::from_f64(1.0 / (2.0 * std * std));
    let var = g.exp(lv);
    let quad = match mu {
        PriorMean::Class(mu) => {
            let d = g.sub(m, mu)?;
            let d2 = g.square(d);
            g.add(var, d2)?
        }
        PriorMean::Zero => {
            let m2 = g.square(m);
            g.add(var, m2)?
        }
        PriorMean::Omit => var,
    };
    let quad = g.scale(quad, inv2s2);
    let half_lv = g.scale(lv, F::from_f64(-0.5));
    let t = g.add(quad, half_lv)?;
    Ok(g.offset(t, F::from_f64(libm::log(std) - 0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    fn tiny(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            frames: 5,
            bands: 6,
            latent_dim: 3,
            conv_channels: 4,
            hidden_units: 5,
            pitch_classes: 3,
            instrument_classes: 2,
            aux_hidden: 4,
            ..ModelConfig::reference(3, 2, mode)
        }
    }

    #[test]
    fn kl_closed_form_cases() {
        assert!(kl_diag_gaussian(&[0.3, -1.0], &[0.0, 0.0], &[0.3, -1.0], 1.0).abs() < 1e-12);
        assert!((kl_diag_gaussian(&[0.0], &[0.0], &[1.0], 1.0) - 0.5).abs() < 1e-12);
        let s = libm::exp(-2.0);
        let lv = 2.0 * libm::log(s);
        assert!(kl_diag_gaussian(&[0.1; 4], &[lv; 4], &[0.1; 4], s).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_cases() {
        assert_eq!(reparameterize(&[1.0, 2.0], &[0.3, -4.0], &[0.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&[1.0, 2.0], &[0.0, 0.0], &[0.5, -1.5]), vec![1.5, 0.5]);
    }

    #[test]
    fn posterior_symmetry_and_dominance() {
        let p = MixturePrior::new(vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0], 4, 1.0).unwrap();
        for q in p.posterior(&[0.0, 0.0]) {
            assert!((q - 0.25).abs() < 1e-12);
        }
        let far = MixturePrior::new(vec![0.0, 0.0, 50.0, 50.0, -50.0, 50.0], 3, 1.0).unwrap();
        assert!(far.posterior(&[0.0, 0.0])[0] > 1.0 - 1e-12);
    }

    #[test]
    fn encode_shapes_and_clamp() {
        let mut rng = seeded(1);
        let mut m = Gmvae::<f64>::new(tiny(ModelMode::Gmvae), 1e-3, &mut rng).unwrap();
        // Blow up the log-variance head to hit the clamp.
        let lv_id = crate::nn::ParamId(m.params.names().iter().position(|n| n == "timbre_encoder.logvar.bias").unwrap());
        m.params.get_mut(lv_id).data_mut().copy_from_slice(&[50.0, -50.0, 0.0]);
        let row: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::new(&[2, 5, 6], [row.clone(), row].concat()).unwrap();
        let (mean, lv) = m.encode(&x, Which::Timbre).unwrap();
        assert_eq!(mean.shape(), &[2, 3]);
        assert_eq!(&mean.data()[..3], &mean.data()[3..]);
        assert!(lv.data().iter().all(|v| (-10.0..=10.0).contains(v)));
        assert!(m.encode(&Tensor::zeros(&[1, 4, 6]), Which::Pitch).is_err());
    }

    #[test]
    fn decode_is_bounded_and_deterministic() {
        let mut rng = seeded(2);
        let m = Gmvae::<f64>::new(tiny(ModelMode::Gmvae), 1e-3, &mut rng).unwrap();
        let z = Tensor::from_fn(&[1, 3], |i| i as f64 - 1.0);
        let a = m.decode(&z, &z).unwrap();
        assert_eq!(a.shape(), &[1, 5, 6]);
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(a, m.decode(&z, &z).unwrap());
        assert!(m.decode(&z, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn baseline_has_no_timbre_mixture() {
        let mut rng = seeded(3);
        let m = Gmvae::<f32>::new(tiny(ModelMode::VaeBaseline), 1e-3, &mut rng).unwrap();
        assert!(m.has_aux_classifier());
        assert!(matches!(m.timbre_prior(), Err(Error::Mode { .. })));
    }
}
