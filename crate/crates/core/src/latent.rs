//! Applications of a trained model's latent spaces: component sampling,
//! timbre transfer by mean-difference arithmetic, single-dimension
//! traversal and latent export.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::dsp::{spectral_centroid, MelFilterbank, Spectrogram};
use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::gmvae::{Gmvae, MixturePrior, Which};
use crate::nn::{seeded, Rng};
use crate::tensor::Tensor;

/// Rows decoded or encoded per forward pass.
pub const CHUNK: usize = 128;

/// Draws from `N(μ_class, w·σ² I)`. `w = 0` returns the mean without
/// touching `rng`.
pub fn sample_component(prior: &MixturePrior, class: usize, w: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if class >= prior.components {
        return Err(Error::Request(alloc::format!("class {class} outside [0, {})", prior.components)));
    }
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::Request(alloc::format!("multiplier {w} must be finite and non-negative")));
    }
    let mean = prior.mean(class);
    if w == 0.0 {
        return Ok(mean.to_vec());
    }
    let s = libm::sqrt(w) * prior.std;
    Ok(mean
        .iter()
        .map(|&m| {
            let e: f64 = StandardNormal.sample(rng);
            m + s * e
        })
        .collect())
}

pub fn stack<F: Float>(specs: &[&Spectrogram]) -> Result<Tensor<F>> {
    let first = specs.first().ok_or(Error::Empty("spectrogram batch"))?;
    let (t, f) = (first.frames, first.bands);
    let mut data = Vec::with_capacity(specs.len() * t * f);
    for s in specs {
        if (s.frames, s.bands) != (t, f) {
            return Err(shape_err("stack", alloc::format!("{}x{} vs {t}x{f}", s.frames, s.bands)));
        }
        data.extend(s.values.iter().map(|&v| F::from_f64(v as f64)));
    }
    Tensor::new(&[specs.len(), t, f], data)
}

pub fn unstack<F: Float>(t: &Tensor<F>) -> Result<Vec<Spectrogram>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(shape_err("unstack", alloc::format!("expected rank 3, got {s:?}")));
    }
    t.data()
        .chunks_exact(s[1] * s[2])
        .map(|c| Spectrogram::new(s[1], s[2], c.iter().map(|&v| v.to_f32()).collect(), true))
        .collect()
}

fn rows_tensor<F: Float>(rows: &[Vec<f64>]) -> Result<Tensor<F>> {
    let l = rows.first().map_or(0, Vec::len);
    Tensor::new(&[rows.len(), l], rows.iter().flatten().map(|&v| F::from_f64(v)).collect())
}

/// Decodes paired code rows in chunks.
pub fn decode_rows<F: Float>(model: &Gmvae<F>, z_p: &[Vec<f64>], z_t: &[Vec<f64>]) -> Result<Vec<Spectrogram>> {
    if z_p.len() != z_t.len() {
        return Err(shape_err("decode_rows", alloc::format!("{} vs {} codes", z_p.len(), z_t.len())));
    }
    let mut out = Vec::with_capacity(z_p.len());
    for (p, t) in z_p.chunks(CHUNK).zip(z_t.chunks(CHUNK)) {
        let x = model.decode(&rows_tensor(p)?, &rows_tensor(t)?)?;
        out.extend(unstack(&x)?);
    }
    Ok(out)
}

/// Posterior means `(z_p, z_t)` of arbitrary spectrograms, in chunks.
pub fn encode_means<F: Float>(model: &Gmvae<F>, specs: &[&Spectrogram]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut zp = Vec::with_capacity(specs.len());
    let mut zt = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(CHUNK) {
        let x = stack::<F>(chunk)?;
        for (which, out) in [(Which::Pitch, &mut zp), (Which::Timbre, &mut zt)] {
            let (m, _) = model.encode(&x, which)?;
            out.extend(m.rows().map(|r| r.iter().map(|&v| Float::to_f64(v)).collect::<Vec<_>>()));
        }
    }
    Ok((zp, zt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub pitch: usize,
    pub instrument: usize,
    pub w: f64,
    pub repetitions: usize,
    pub seed: u64,
}

/// Decodes `repetitions` codes sampled from the requested pitch and
/// instrument components.
pub fn synthesize<F: Float>(model: &Gmvae<F>, req: &SynthesisRequest) -> Result<Vec<Spectrogram>> {
    let pitch_prior = model.pitch_prior();
    let timbre_prior = model.timbre_prior()?;
    let mut rng = seeded(req.seed);
    let mut zp = Vec::with_capacity(req.repetitions);
    let mut zt = Vec::with_capacity(req.repetitions);
    for _ in 0..req.repetitions {
        zp.push(sample_component(&pitch_prior, req.pitch, req.w, &mut rng)?);
        zt.push(sample_component(&timbre_prior, req.instrument, req.w, &mut rng)?);
    }
    if req.repetitions == 0 {
        return Ok(Vec::new());
    }
    decode_rows(model, &zp, &zt)
}

/// `z_t + α (μ_target − μ_source)`.
pub fn transfer_code(z_t: &[f64], mu_source: &[f64], mu_target: &[f64], alpha: f64) -> Vec<f64> {
    z_t.iter().zip(mu_source).zip(mu_target).map(|((&z, &s), &t)| z + alpha * (t - s)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRequest<'a> {
    pub sources: Vec<&'a Spectrogram>,
    pub source_class: usize,
    pub target_class: usize,
    pub alphas: Vec<f64>,
}

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

impl TransferRequest<'_> {
    pub fn validate(&self, instrument_classes: usize) -> Result<()> {
        for c in [self.source_class, self.target_class] {
            if c >= instrument_classes {
                return Err(Error::Request(alloc::format!("instrument class {c} outside [0, {instrument_classes})")));
            }
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Request(alloc::format!("alpha {a} outside [0, 1]")));
        }
        if self.source_class == self.target_class && self.alphas.iter().any(|&a| a != 0.0) {
            return Err(Error::Request("source and target class coincide".into()));
        }
        Ok(())
    }
}

/// Output `[source][alpha]`: the source's pitch code with its timbre code
/// moved toward the target component.
pub fn transfer_timbre<F: Float>(model: &Gmvae<F>, req: &TransferRequest<'_>) -> Result<Vec<Vec<Spectrogram>>> {
    req.validate(model.config.instrument_classes)?;
    let prior = model.timbre_prior()?;
    let (zp, zt) = encode_means(model, &req.sources)?;
    let (mu_s, mu_t) = (prior.mean(req.source_class), prior.mean(req.target_class));
    let mut out: Vec<Vec<Spectrogram>> = (0..req.sources.len()).map(|_| Vec::new()).collect();
    for &alpha in &req.alphas {
        let moved: Vec<Vec<f64>> = zt.iter().map(|z| transfer_code(z, mu_s, mu_t, alpha)).collect();
        for (o, s) in out.iter_mut().zip(decode_rows(model, &zp, &moved)?) {
            o.push(s);
        }
    }
    Ok(out)
}

/// Re-decodes each input with `delta` added to `z_t[dim]`.
pub fn traverse_dimension<F: Float>(
    model: &Gmvae<F>,
    sources: &[&Spectrogram],
    dim: usize,
    delta: f64,
) -> Result<Vec<Spectrogram>> {
    if dim >= model.config.latent_dim {
        return Err(Error::Request(alloc::format!("dimension {dim} outside [0, {})", model.config.latent_dim)));
    }
    let (zp, mut zt) = encode_means(model, sources)?;
    for z in &mut zt {
        z[dim] += delta;
    }
    decode_rows(model, &zp, &zt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidDimension {
    pub dim: usize,
    /// Mean absolute centroid change in Hz per timbre dimension.
    pub effects: Vec<f64>,
    pub delta: f64,
}

/// Band centers matching a corpus's analysis settings.
pub fn band_centers(corpus: &Corpus) -> Vec<f64> {
    MelFilterbank::new(&corpus.config.mel).centers_hz
}

/// Spectral centroids of decoded spectrograms under `corpus`'s
/// normalization.
pub fn centroids(corpus: &Corpus, specs: &[Spectrogram]) -> Result<Vec<f64>> {
    let centers = band_centers(corpus);
    specs.iter().map(|s| spectral_centroid(s, &corpus.stats, &centers)).collect()
}

/// The timbre dimension whose `±2σ_t` traversal moves the spectral
/// centroid most, averaged over validation examples.
pub fn find_centroid_dimension<F: Float>(model: &Gmvae<F>, corpus: &Corpus) -> Result<CentroidDimension> {
    let idx = corpus.indices(Split::Val);
    if idx.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let specs: Vec<&Spectrogram> = idx.iter().map(|&i| &corpus.examples[i].spectrogram).collect();
    let (zp, zt) = encode_means(model, &specs)?;
    let delta = 2.0 * model.config.timbre_std;
    let mut effects = vec![0.0; model.config.latent_dim];
    for (d, e) in effects.iter_mut().enumerate() {
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let moved: Vec<Vec<f64>> = zt
                .iter()
                .map(|z| {
                    let mut z = z.clone();
                    z[d] += sign * delta;
                    z
                })
                .collect();
            centroids(corpus, &decode_rows(model, &zp, &moved)?)
        };
        let up = shifted(1.0)?;
        let down = shifted(-1.0)?;
        *e = up.iter().zip(&down).map(|(a, b)| (a - b).abs()).sum::<f64>() / up.len() as f64;
    }
    let dim = effects
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > effects[best] { i } else { best });
    Ok(CentroidDimension { dim, effects, delta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Example,
    PitchMean,
    TimbreMean,
}

/// One line of the latent export. Prior-mean rows carry only the code of
/// their own space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub kind: RowKind,
    pub id: usize,
    pub split: Option<Split>,
    /// `-1` when not applicable.
    pub pitch: i64,
    /// `-1` when unlabeled or not applicable.
    pub instrument: i64,
    pub z_t: Option<Vec<f64>>,
    pub z_p: Option<Vec<f64>>,
}

/// Every corpus example followed by the `M` pitch and `K` timbre
/// component means.
pub fn latent_rows<F: Float>(model: &Gmvae<F>, corpus: &Corpus) -> Result<Vec<LatentRow>> {
    let all: Vec<usize> = (0..corpus.examples.len()).collect();
    let (zp, zt) = model.latent_means(corpus, &all)?;
    let mut rows: Vec<LatentRow> = corpus
        .examples
        .iter()
        .zip(zp)
        .zip(zt)
        .map(|((e, zp), zt)| LatentRow {
            kind: RowKind::Example,
            id: e.id,
            split: Some(e.split),
            pitch: e.pitch as i64,
            instrument: e.instrument_label().map_or(-1, |k| k as i64),
            z_t: Some(zt),
            z_p: Some(zp),
        })
        .collect();
    let pitch = model.pitch_prior();
    rows.extend((0..pitch.components).map(|m| LatentRow {
        kind: RowKind::PitchMean,
        id: m,
        split: None,
        pitch: m as i64,
        instrument: -1,
        z_t: None,
        z_p: Some(pitch.mean(m).to_vec()),
    }));
    // The baseline's single standard-normal component sits at the origin.
    let timbre = match model.timbre_prior() {
        Ok(p) => p,
        Err(_) => MixturePrior::new(vec![0.0; model.config.instrument_classes * model.config.latent_dim], model.config.instrument_classes, 1.0)?,
    };
    rows.extend((0..timbre.components).map(|k| LatentRow {
        kind: RowKind::TimbreMean,
        id: k,
        split: None,
        pitch: -1,
        instrument: k as i64,
        z_t: Some(timbre.mean(k).to_vec()),
        z_p: None,
    }));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_multiplier_is_a_lookup() {
        let p = MixturePrior::new(vec![1.0, 2.0, 3.0, 4.0], 2, 0.5).unwrap();
        let mut a = seeded(9);
        let b = seeded(9);
        assert_eq!(sample_component(&p, 1, 0.0, &mut a).unwrap(), vec![3.0, 4.0]);
        assert_eq!(a, b);
        assert!(sample_component(&p, 2, 0.0, &mut a).is_err());
        assert!(sample_component(&p, 0, -0.1, &mut a).is_err());
    }

    #[test]
    fn transfer_round_trip() {
        let z = [0.3, -1.2, 4.0];
        let (s, t) = ([1.0, 0.0, -2.0], [-0.5, 2.5, 1.0]);
        let there = transfer_code(&z, &s, &t, 1.0);
        let back = transfer_code(&there, &t, &s, 1.0);
        for (a, b) in back.iter().zip(&z) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(transfer_code(&z, &s, &t, 0.0), z.to_vec());
    }
}
