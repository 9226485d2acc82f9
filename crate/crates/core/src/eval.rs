//! Evaluation: classifier probes, macro-F1, controllability, posterior
//! shift under timbre transfer and the centroid t-test.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::gmvae::{ConvTrunk, Gmvae, ModelConfig, ModelMode};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::latent::{
    centroids, stack, synthesize, transfer_timbre, traverse_dimension, SynthesisRequest, TransferRequest, CHUNK,
};
use crate::nn::{apply_running_updates, seeded, Adam, Ctx, DenseLayer, Mode, ParamStore, Rng, RunningStats};
use crate::tensor::Tensor;

/// Unweighted mean of per-class F1 over the classes present in `truth`.
/// Classes with `P + R = 0` score 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty("macro_f1 input"));
    }
    if pred.len() != truth.len() {
        return Err(Error::Request(alloc::format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::Request(alloc::format!("class {bad} outside [0, {n_classes})")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut pc = vec![0usize; n_classes];
    let mut tc = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pc[p] += 1;
        tc[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| tc[c] > 0).collect();
    let total: f64 = present
        .iter()
        .map(|&c| {
            let p = if pc[c] > 0 { tp[c] as f64 / pc[c] as f64 } else { 0.0 };
            let r = tp[c] as f64 / tc[c] as f64;
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// Welch's unequal-variance t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Request("Welch test needs two samples of at least 2".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Welch test sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let diff = ma - mb;
    let (t, df, p) = if se2 == 0.0 {
        // Both samples constant.
        if diff == 0.0 {
            (0.0, f64::INFINITY, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, f64::INFINITY, 0.0)
        }
    } else {
        let t = diff / libm::sqrt(se2);
        let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
        (t, df, student_t_two_tailed(t, df))
    };
    Ok(WelchTest { t, df, p_value: p, mean_a: ma, mean_b: mb, std_a: libm::sqrt(va), std_b: libm::sqrt(vb) })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log(1.0 - x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [even, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassifierKind {
    /// One dense layer on latent means.
    Linear,
    /// Encoder-shaped convolutional trunk on spectrograms.
    Cnn { channels: usize, hidden: usize, kernel: usize },
}

impl ClassifierKind {
    pub fn cnn_like(model: &ModelConfig) -> Self {
        ClassifierKind::Cnn { channels: model.conv_channels, hidden: model.hidden_units, kernel: model.kernel }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ClassifierTraining {
    pub fn linear() -> Self {
        Self { epochs: 100, learning_rate: 1e-3, batch_size: 128, seed: 0 }
    }

    pub fn cnn() -> Self {
        Self { epochs: 50, learning_rate: 1e-4, batch_size: 128, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Features<'a> {
    Latent(&'a [Vec<f64>]),
    Spectra(&'a [&'a Spectrogram]),
}

impl Features<'_> {
    pub fn len(&self) -> usize {
        match self {
            Features::Latent(x) => x.len(),
            Features::Spectra(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tensor<F: Float>(&self, idx: &[usize]) -> Result<Tensor<F>> {
        match self {
            Features::Latent(x) => {
                let l = x[idx[0]].len();
                Tensor::new(&[idx.len(), l], idx.iter().flat_map(|&i| x[i].iter().map(|&v| F::from_f64(v))).collect())
            }
            Features::Spectra(x) => stack(&idx.iter().map(|&i| x[i]).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Head {
    Linear { out: DenseLayer },
    Cnn { trunk: ConvTrunk, out: DenseLayer },
}

/// A trained probe or CNN with its class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<F> {
    pub kind: ClassifierKind,
    pub classes: usize,
    pub params: ParamStore<F>,
    pub running: Vec<RunningStats<F>>,
    head: Head,
}

impl<F: Float> Classifier<F> {
    fn new(kind: ClassifierKind, sample: &Features<'_>, classes: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let head = match (kind, sample) {
            (ClassifierKind::Linear, Features::Latent(x)) => {
                Head::Linear { out: DenseLayer::new(&mut params, "probe.out", x[0].len(), classes, rng) }
            }
            (ClassifierKind::Cnn { channels, hidden, kernel }, Features::Spectra(x)) => {
                let s = x[0];
                let trunk =
                    ConvTrunk::new(&mut params, &mut running, "cnn", s.frames, s.bands, channels, hidden, kernel, rng);
                let out = DenseLayer::new(&mut params, "cnn.out", hidden, classes, rng);
                Head::Cnn { trunk, out }
            }
            _ => return Err(Error::Request("linear probes take latents, CNNs take spectrograms".into())),
        };
        Ok(Self { kind, classes, params, running, head })
    }

    fn logits(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        match &self.head {
            Head::Linear { out } => out.forward(ctx, x),
            Head::Cnn { trunk, out } => {
                let h = trunk.forward(ctx, x)?;
                out.forward(ctx, h)
            }
        }
    }

    /// Class posteriors, one row per input.
    pub fn predict_proba(&self, features: Features<'_>) -> Result<Vec<Vec<f64>>> {
        let all: Vec<usize> = (0..features.len()).collect();
        let mut out = Vec::with_capacity(all.len());
        for chunk in all.chunks(CHUNK) {
            let x = features.tensor::<F>(chunk)?;
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let mut ctx = Ctx::new(&mut g, &p, &self.running, Mode::Infer);
            let xv = ctx.g.constant(x);
            let logits = self.logits(&mut ctx, xv)?;
            for row in g.value(logits).rows() {
                let mut r: Vec<f64> = row.iter().map(|&v| Float::to_f64(v)).collect();
                softmax_in_place(&mut r);
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, features: Features<'_>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(features)?.iter().map(|r| argmax(r)).collect())
    }
}

pub fn argmax(r: &[f64]) -> usize {
    r.iter().enumerate().fold(0, |b, (i, &v)| if v > r[b] { i } else { b })
}

/// Cross-entropy training with Adam on shuffled mini-batches.
pub fn train_classifier<F: Float>(
    kind: ClassifierKind,
    features: Features<'_>,
    labels: &[usize],
    classes: usize,
    training: &ClassifierTraining,
) -> Result<Classifier<F>> {
    if features.len() != labels.len() {
        return Err(Error::Request(alloc::format!("{} inputs for {} labels", features.len(), labels.len())));
    }
    if labels.iter().any(|&y| y >= classes) {
        return Err(Error::Request("label outside class range".into()));
    }
    let distinct = labels.iter().collect::<alloc::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Request("classifier needs at least two distinct labels".into()));
    }
    let mut rng = seeded(training.seed);
    let mut clf = Classifier::<F>::new(kind, &features, classes, &mut rng)?;
    let mut adam = Adam::<F>::new(training.learning_rate);
    let min_batch = match kind {
        ClassifierKind::Linear => 1,
        ClassifierKind::Cnn { .. } => 2,
    };
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..training.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(training.batch_size.max(1)) {
            if idx.len() < min_batch {
                continue;
            }
            let x = features.tensor::<F>(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g);
            let mut ctx = Ctx::new(&mut g, &p, &clf.running, Mode::Train);
            let xv = ctx.g.constant(x);
            let logits = clf.logits(&mut ctx, xv)?;
            let updates = core::mem::take(&mut ctx.updates);
            let logq = g.log_softmax(logits);
            let picked = g.pick(logq, &y)?;
            let ll = g.sum(picked);
            let loss = g.scale(ll, F::from_f64(-1.0 / idx.len() as f64));
            let value = g.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(String::from("classifier cross-entropy")));
            }
            let grads = g.backward(loss)?;
            let refs: Vec<Option<&Tensor<F>>> = p.0.iter().map(|&v| grads.get(v)).collect();
            adam.step(clf.params.tensors_mut(), &refs)?;
            apply_running_updates(&mut clf.running, updates);
        }
    }
    Ok(clf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Zt,
    Zp,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Instrument,
    Pitch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Cell {
    /// Model whose latents were probed; `None` for raw-input CNNs.
    pub model: Option<ModelMode>,
    pub feature: Feature,
    pub task: Task,
    pub n_percent: f64,
    pub f1: f64,
}

fn ground_truth(corpus: &Corpus, idx: &[usize], task: Task) -> Vec<usize> {
    idx.iter()
        .map(|&i| match task {
            Task::Instrument => corpus.examples[i].instrument,
            Task::Pitch => corpus.examples[i].pitch,
        })
        .collect()
}

fn classes(corpus: &Corpus, task: Task) -> usize {
    match task {
        Task::Instrument => corpus.instrument_classes(),
        Task::Pitch => corpus.pitch_classes(),
    }
}

/// Linear-probe F1 for `{z_t, z_p} × {instrument, pitch}`: probes train on
/// train-split posterior means with full ground truth, score on val.
pub fn probe_cells<F: Float>(
    model: &Gmvae<F>,
    corpus: &Corpus,
    n_percent: f64,
    training: &ClassifierTraining,
) -> Result<Vec<F1Cell>> {
    let train = corpus.indices(Split::Train);
    let val = corpus.indices(Split::Val);
    let (zp_tr, zt_tr) = model.latent_means(corpus, &train)?;
    let (zp_va, zt_va) = model.latent_means(corpus, &val)?;
    let mut cells = Vec::new();
    for (feature, tr, va) in [(Feature::Zt, &zt_tr, &zt_va), (Feature::Zp, &zp_tr, &zp_va)] {
        for task in [Task::Instrument, Task::Pitch] {
            let k = classes(corpus, task);
            let clf = train_classifier::<f32>(
                ClassifierKind::Linear,
                Features::Latent(tr),
                &ground_truth(corpus, &train, task),
                k,
                training,
            )?;
            let pred = clf.predict(Features::Latent(va))?;
            let f1 = macro_f1(&pred, &ground_truth(corpus, &val, task), k)?;
            cells.push(F1Cell { model: Some(model.mode()), feature, task, n_percent, f1 });
        }
    }
    Ok(cells)
}

/// CNN on raw spectrograms trained on the train examples accepted by
/// `use_example`; returns the classifier and its val F1.
pub fn train_raw_cnn(
    corpus: &Corpus,
    task: Task,
    kind: ClassifierKind,
    training: &ClassifierTraining,
    use_example: impl Fn(usize) -> bool,
) -> Result<(Classifier<f32>, f64)> {
    let train: Vec<usize> = corpus.indices(Split::Train).into_iter().filter(|&i| use_example(i)).collect();
    let val = corpus.indices(Split::Val);
    let k = classes(corpus, task);
    let specs: Vec<&Spectrogram> = train.iter().map(|&i| &corpus.examples[i].spectrogram).collect();
    let clf = train_classifier::<f32>(kind, Features::Spectra(&specs), &ground_truth(corpus, &train, task), k, training)?;
    let vspecs: Vec<&Spectrogram> = val.iter().map(|&i| &corpus.examples[i].spectrogram).collect();
    let pred = clf.predict(Features::Spectra(&vspecs))?;
    let f1 = macro_f1(&pred, &ground_truth(corpus, &val, task), k)?;
    Ok((clf, f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityCell {
    pub n_percent: f64,
    pub w: f64,
    pub instrument_f1: f64,
    pub pitch_f1: f64,
}

/// For every val example's (instrument, pitch) pair and each `w`,
/// synthesizes `repetitions` samples and scores them with the reference
/// CNNs.
pub fn controllability_eval<F: Float>(
    model: &Gmvae<F>,
    cnn_instrument: &Classifier<f32>,
    cnn_pitch: &Classifier<f32>,
    w_grid: &[f64],
    corpus: &Corpus,
    repetitions: usize,
    n_percent: f64,
    seed: u64,
) -> Result<Vec<ControllabilityCell>> {
    let val = corpus.indices(Split::Val);
    let mut cells = Vec::with_capacity(w_grid.len());
    for (wi, &w) in w_grid.iter().enumerate() {
        let mut truth_k = Vec::new();
        let mut truth_m = Vec::new();
        let mut pred_k = Vec::new();
        let mut pred_m = Vec::new();
        for (j, &i) in val.iter().enumerate() {
            let e = &corpus.examples[i];
            let req = SynthesisRequest {
                pitch: e.pitch,
                instrument: e.instrument,
                w,
                repetitions,
                seed: seed ^ ((wi as u64) << 32) ^ j as u64,
            };
            let out = synthesize(model, &req)?;
            let refs: Vec<&Spectrogram> = out.iter().collect();
            pred_k.extend(cnn_instrument.predict(Features::Spectra(&refs))?);
            pred_m.extend(cnn_pitch.predict(Features::Spectra(&refs))?);
            truth_k.extend(core::iter::repeat_n(e.instrument, repetitions));
            truth_m.extend(core::iter::repeat_n(e.pitch, repetitions));
        }
        cells.push(ControllabilityCell {
            n_percent,
            w,
            instrument_f1: macro_f1(&pred_k, &truth_k, cnn_instrument.classes)?,
            pitch_f1: macro_f1(&pred_m, &truth_m, cnn_pitch.classes)?,
        });
    }
    Ok(cells)
}

/// The `count` most frequent instruments (ties to the lower index),
/// paired cyclically.
pub fn transfer_pairs(corpus: &Corpus, count: usize) -> Vec<(usize, usize)> {
    let mut freq = vec![0usize; corpus.instrument_classes()];
    for e in &corpus.examples {
        freq[e.instrument] += 1;
    }
    let mut order: Vec<usize> = (0..freq.len()).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    order.truncate(count.min(order.len()));
    if order.len() < 2 {
        return Vec::new();
    }
    (0..order.len()).map(|i| (order[i], order[(i + 1) % order.len()])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorShift {
    pub source: usize,
    pub target: usize,
    pub sources: usize,
    pub alphas: Vec<f64>,
    /// Mean instrument posterior per α.
    pub mean_posterior: Vec<Vec<f64>>,
    /// Pitch macro-F1 against the sources' labels per α.
    pub pitch_f1: Vec<f64>,
    /// Every source note lies inside the target instrument's range.
    pub range_compatible: bool,
}

impl PosteriorShift {
    pub fn target_mass(&self) -> Vec<f64> {
        self.mean_posterior.iter().map(|p| p[self.target]).collect()
    }

    /// The consecutive α step with the largest change in target mass.
    pub fn largest_step(&self) -> Option<(f64, f64)> {
        let m = self.target_mass();
        (1..m.len())
            .fold(None, |best: Option<(usize, f64)>, i| {
                let d = (m[i] - m[i - 1]).abs();
                match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                }
            })
            .map(|(i, _)| (self.alphas[i - 1], self.alphas[i]))
    }

    /// Whether the largest step has 0.5 as one of its endpoints.
    pub fn peak_at_half(&self) -> bool {
        self.largest_step().is_some_and(|(a, b)| a == 0.5 || b == 0.5 || (a < 0.5 && b > 0.5))
    }
}

pub fn posterior_shift_eval<F: Float>(
    model: &Gmvae<F>,
    cnn_instrument: &Classifier<f32>,
    cnn_pitch: &Classifier<f32>,
    pairs: &[(usize, usize)],
    alphas: &[f64],
    corpus: &Corpus,
) -> Result<Vec<PosteriorShift>> {
    let val = corpus.indices(Split::Val);
    let mut out = Vec::with_capacity(pairs.len());
    for &(source, target) in pairs {
        let idx: Vec<usize> = val.iter().copied().filter(|&i| corpus.examples[i].instrument == source).collect();
        if idx.is_empty() {
            return Err(Error::Request(alloc::format!("no validation examples of instrument {source}")));
        }
        let specs: Vec<&Spectrogram> = idx.iter().map(|&i| &corpus.examples[i].spectrogram).collect();
        let req = TransferRequest { sources: specs, source_class: source, target_class: target, alphas: alphas.to_vec() };
        let moved = transfer_timbre(model, &req)?;
        let truth_m: Vec<usize> = idx.iter().map(|&i| corpus.examples[i].pitch).collect();
        let mut mean_posterior = Vec::with_capacity(alphas.len());
        let mut pitch_f1 = Vec::with_capacity(alphas.len());
        for a in 0..alphas.len() {
            let at: Vec<&Spectrogram> = moved.iter().map(|per| &per[a]).collect();
            let post = cnn_instrument.predict_proba(Features::Spectra(&at))?;
            let mut mean = vec![0.0; cnn_instrument.classes];
            for row in &post {
                for (m, p) in mean.iter_mut().zip(row) {
                    *m += p / post.len() as f64;
                }
            }
            mean_posterior.push(mean);
            let pred = cnn_pitch.predict(Features::Spectra(&at))?;
            pitch_f1.push(macro_f1(&pred, &truth_m, cnn_pitch.classes)?);
        }
        let tgt = &corpus.archetypes[target];
        let range_compatible = idx.iter().all(|&i| tgt.covers(corpus.examples[i].midi));
        out.push(PosteriorShift {
            source,
            target,
            sources: idx.len(),
            alphas: alphas.to_vec(),
            mean_posterior,
            pitch_f1,
            range_compatible,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidStat {
    pub instrument: usize,
    pub n: usize,
    /// Populations at `-delta` (a) and `+delta` (b).
    pub test: WelchTest,
    /// Sign of `mean(+delta) − mean(−delta)`.
    pub direction: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidReport {
    pub dim: usize,
    pub delta: f64,
    pub effects: Vec<f64>,
    pub stats: Vec<CentroidStat>,
    /// Instruments with fewer than two validation examples.
    pub skipped: Vec<usize>,
}

impl CentroidReport {
    pub fn significant(&self, alpha: f64) -> usize {
        self.stats.iter().filter(|s| s.test.p_value < alpha).count()
    }

    /// Largest fraction of tested instruments sharing one shift sign.
    pub fn sign_consistency(&self) -> f64 {
        if self.stats.is_empty() {
            return 0.0;
        }
        let up = self.stats.iter().filter(|s| s.direction > 0).count();
        let down = self.stats.iter().filter(|s| s.direction < 0).count();
        up.max(down) as f64 / self.stats.len() as f64
    }
}

/// Per instrument, Welch test between the spectral centroids of val
/// examples decoded with `z_t[dim] ∓ delta`.
pub fn centroid_ttest<F: Float>(
    model: &Gmvae<F>,
    corpus: &Corpus,
    dim: usize,
    delta: f64,
    effects: Vec<f64>,
) -> Result<CentroidReport> {
    let val = corpus.indices(Split::Val);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &val {
        by_class.entry(corpus.examples[i].instrument).or_default().push(i);
    }
    let mut stats = Vec::new();
    let mut skipped = Vec::new();
    for k in 0..corpus.instrument_classes() {
        let idx = by_class.get(&k).cloned().unwrap_or_default();
        if idx.len() < 2 {
            skipped.push(k);
            continue;
        }
        let specs: Vec<&Spectrogram> = idx.iter().map(|&i| &corpus.examples[i].spectrogram).collect();
        let down = centroids(corpus, &traverse_dimension(model, &specs, dim, -delta)?)?;
        let up = centroids(corpus, &traverse_dimension(model, &specs, dim, delta)?)?;
        let test = welch_t_test(&down, &up)?;
        let diff = test.mean_b - test.mean_a;
        let direction = if diff > 0.0 {
            1
        } else if diff < 0.0 {
            -1
        } else {
            0
        };
        stats.push(CentroidStat { instrument: k, n: idx.len(), test, direction });
    }
    Ok(CentroidReport { dim, delta, effects, stats, skipped })
}

/// Everything the evaluation suite measures; absent fragments are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f_scores: Vec<F1Cell>,
    pub controllability: Vec<ControllabilityCell>,
    pub posterior_shift: Vec<PosteriorShift>,
    pub centroid: Option<CentroidReport>,
}

impl EvalReport {
    pub fn f1(&self, model: Option<ModelMode>, feature: Feature, task: Task, n_percent: f64) -> Option<f64> {
        self.f_scores
            .iter()
            .find(|c| c.model == model && c.feature == feature && c.task == task && c.n_percent == n_percent)
            .map(|c| c.f1)
    }

    /// Every F1 lies in `[0, 1]` and every posterior row sums to 1.
    pub fn validate(&self) -> Result<()> {
        let f1s = self
            .f_scores
            .iter()
            .map(|c| c.f1)
            .chain(self.controllability.iter().flat_map(|c| [c.instrument_f1, c.pitch_f1]))
            .chain(self.posterior_shift.iter().flat_map(|p| p.pitch_f1.iter().copied()));
        for f in f1s {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Domain { op: "eval_report", detail: alloc::format!("F1 {f} outside [0, 1]") });
            }
        }
        for p in &self.posterior_shift {
            for row in &p.mean_posterior {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Domain { op: "eval_report", detail: alloc::format!("posterior sums to {s}") });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert!((macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[2], &[2], 5).unwrap(), 1.0);
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn welch_edge_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(welch_t_test(&a, &a).unwrap().p_value, 1.0);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p_value, 1.0);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap().p_value, 0.0);
        assert!(welch_t_test(&[1.0], &a).is_err());
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a; I_{1/2}(a, a) = 1/2.
        for &x in &[0.1, 0.5, 0.93] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-12);
            assert!((regularized_incomplete_beta(x, 3.0, 1.0) - x * x * x).abs() < 1e-12);
        }
        assert!((regularized_incomplete_beta(0.5, 4.5, 4.5) - 0.5).abs() < 1e-12);
        // Student t with 1 dof is Cauchy: P(|T| > 1) = 1/2.
        assert!((student_t_two_tailed(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separable_probe_fits() {
        let x: Vec<Vec<f64>> =
            (0..40).map(|i| (0..16).map(|d| if d == 3 { if i % 2 == 0 { 2.0 } else { -2.0 } } else { 0.1 * d as f64 }).collect()).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let t = ClassifierTraining { epochs: 50, learning_rate: 0.05, batch_size: 8, seed: 3 };
        let c = train_classifier::<f64>(ClassifierKind::Linear, Features::Latent(&x), &y, 2, &t).unwrap();
        assert_eq!(c.predict(Features::Latent(&x)).unwrap(), y);
        let again = train_classifier::<f64>(ClassifierKind::Linear, Features::Latent(&x), &y, 2, &t).unwrap();
        assert_eq!(c, again);
        assert!(train_classifier::<f64>(ClassifierKind::Linear, Features::Latent(&x), &[0; 40], 2, &t).is_err());
    }

    #[test]
    fn largest_step_location() {
        let p = PosteriorShift {
            source: 0,
            target: 1,
            sources: 3,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            mean_posterior: [0.0, 0.05, 0.5, 0.9, 0.95].iter().map(|&m| vec![1.0 - m, m]).collect(),
            pitch_f1: vec![1.0; 5],
            range_compatible: true,
        };
        assert_eq!(p.largest_step(), Some((0.25, 0.5)));
        assert!(p.peak_at_half());
    }
}
