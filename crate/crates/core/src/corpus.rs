//! Synthetic labeled corpus of instrument notes.
//!
//! Each archetype is an additive-synthesis recipe (harmonic rolloff,
//! odd/even balance, inharmonicity, ADSR) with its own pitch range. The
//! first archetype always spans every pitch class; the others overlap it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::dsp::{MelAnalyzer, MelConfig, NormalizationStats, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::nn::{seeded, Rng};

/// Tone length before the 500 ms analysis clip is taken.
pub const TONE_SECONDS: f64 = 0.6;
pub const PEAK: f32 = 0.9;
const MAX_PARTIALS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstrumentArchetype {
    pub name: String,
    /// Partial `n` has amplitude `n^-rolloff`.
    pub rolloff: f64,
    /// Gain applied to even-numbered partials.
    pub even_gain: f64,
    /// Partial `n` sits at `f0·n·sqrt(1 + B·n²)`.
    pub inharmonicity: f64,
    pub attack: f64,
    pub decay: f64,
    /// Sustain level in `(0, 1]`.
    pub sustain: f64,
    pub release: f64,
    /// Per-note rolloff jitter, uniform in `±brightness_jitter`.
    pub brightness_jitter: f64,
    pub midi_lo: u8,
    pub midi_hi: u8,
}

impl InstrumentArchetype {
    pub fn validate(&self) -> Result<()> {
        let ok = self.midi_lo <= self.midi_hi
            && self.attack > 0.0
            && self.decay > 0.0
            && self.release > 0.0
            && self.sustain > 0.0
            && self.sustain <= 1.0
            && self.rolloff > 0.0
            && self.even_gain >= 0.0
            && self.inharmonicity >= 0.0
            && self.brightness_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid archetype {}", self.name)))
        }
    }

    fn signature(&self) -> [f64; 8] {
        [
            self.rolloff,
            self.even_gain,
            self.inharmonicity,
            self.attack,
            self.decay,
            self.sustain,
            self.release,
            self.brightness_jitter,
        ]
    }

    pub fn covers(&self, midi: u8) -> bool {
        (self.midi_lo..=self.midi_hi).contains(&midi)
    }
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * libm::pow(2.0, (midi - 69.0) / 12.0)
}

/// Per-note variation drawn by [`synth_tone`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToneJitter {
    pub rolloff_delta: f64,
    pub detune_cents: f64,
    pub envelope_scale: f64,
}

impl ToneJitter {
    pub const NONE: ToneJitter = ToneJitter { rolloff_delta: 0.0, detune_cents: 0.0, envelope_scale: 1.0 };

    pub fn draw(a: &InstrumentArchetype, rng: &mut Rng) -> Self {
        let j = a.brightness_jitter;
        Self {
            rolloff_delta: if j > 0.0 { rng.random_range(-j..j) } else { 0.0 },
            detune_cents: rng.random_range(-5.0..5.0),
            envelope_scale: rng.random_range(0.9..1.1),
        }
    }
}

/// Renders a 600 ms note with jitter drawn from `rng`.
pub fn synth_tone(a: &InstrumentArchetype, midi: u8, rng: &mut Rng) -> Result<Waveform> {
    if !a.covers(midi) {
        return Err(Error::Request(alloc::format!(
            "pitch {midi} outside {} range [{}, {}]",
            a.name,
            a.midi_lo,
            a.midi_hi
        )));
    }
    let jitter = ToneJitter::draw(a, rng);
    let phases: Vec<f64> = (0..MAX_PARTIALS).map(|_| rng.random_range(0.0..core::f64::consts::TAU)).collect();
    Ok(render_tone(a, midi, jitter, &phases))
}

/// Deterministic renderer behind [`synth_tone`].
pub fn render_tone(a: &InstrumentArchetype, midi: u8, jitter: ToneJitter, phases: &[f64]) -> Waveform {
    let sr = crate::dsp::SAMPLE_RATE as f64;
    let n = libm::round(TONE_SECONDS * sr) as usize;
    let f0 = midi_to_hz(midi as f64 + jitter.detune_cents / 100.0);
    let rolloff = (a.rolloff + jitter.rolloff_delta).max(0.05);
    let nyquist = sr / 2.0;
    let mut out = vec![0.0f64; n];
    for p in 1..=MAX_PARTIALS {
        let pf = p as f64;
        let freq = f0 * pf * libm::sqrt(1.0 + a.inharmonicity * pf * pf);
        if freq >= 0.95 * nyquist {
            break;
        }
        let mut amp = libm::pow(pf, -rolloff);
        if p % 2 == 0 {
            amp *= a.even_gain;
        }
        if amp < 1e-6 {
            continue;
        }
        // Phasor recurrence instead of per-sample sin().
        let step = core::f64::consts::TAU * freq / sr;
        let (ws, wc) = (libm::sin(step), libm::cos(step));
        let phase = phases.get(p - 1).copied().unwrap_or(0.0);
        let (mut s, mut c) = (libm::sin(phase), libm::cos(phase));
        for o in out.iter_mut() {
            *o += amp * s;
            let ns = s * wc + c * ws;
            c = c * wc - s * ws;
            s = ns;
        }
    }
    let env = Envelope::from(a, jitter.envelope_scale);
    for (i, o) in out.iter_mut().enumerate() {
        *o *= env.at(i as f64 / sr, TONE_SECONDS);
    }
    let peak = out.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    Waveform::new(out.iter().map(|&x| (x * gain) as f32).collect(), crate::dsp::SAMPLE_RATE)
}

struct Envelope {
    attack: f64,
    decay: f64,
    sustain: f64,
    release: f64,
}

impl Envelope {
    fn from(a: &InstrumentArchetype, scale: f64) -> Self {
        Self { attack: a.attack * scale, decay: a.decay * scale, sustain: a.sustain, release: a.release * scale }
    }

    fn at(&self, t: f64, total: f64) -> f64 {
        let level = if t < self.attack {
            t / self.attack
        } else if t < self.attack + self.decay {
            1.0 - (1.0 - self.sustain) * (t - self.attack) / self.decay
        } else {
            self.sustain
        };
        let release_start = total - self.release;
        if t > release_start {
            level * ((total - t) / self.release).max(0.0)
        } else {
            level
        }
    }
}

struct Recipe {
    name: &'static str,
    rolloff: f64,
    even_gain: f64,
    inharmonicity: f64,
    attack: f64,
    decay: f64,
    sustain: f64,
    release: f64,
    jitter: f64,
    /// Pitch range as fractions of the pitch-class span.
    range: (f64, f64),
}

const RECIPES: [Recipe; 12] = [
    Recipe { name: "keys", rolloff: 1.6, even_gain: 1.0, inharmonicity: 4e-4, attack: 0.004, decay: 0.30, sustain: 0.25, release: 0.08, jitter: 0.35, range: (0.0, 1.0) },
    Recipe { name: "bowed", rolloff: 1.3, even_gain: 0.85, inharmonicity: 0.0, attack: 0.09, decay: 0.10, sustain: 0.90, release: 0.05, jitter: 0.30, range: (0.25, 1.0) },
    Recipe { name: "reed", rolloff: 0.95, even_gain: 0.12, inharmonicity: 0.0, attack: 0.03, decay: 0.05, sustain: 0.85, release: 0.04, jitter: 0.30, range: (0.1, 0.75) },
    Recipe { name: "brass", rolloff: 0.65, even_gain: 1.0, inharmonicity: 0.0, attack: 0.05, decay: 0.08, sustain: 0.80, release: 0.05, jitter: 0.25, range: (0.0, 0.6) },
    Recipe { name: "flute", rolloff: 2.6, even_gain: 0.7, inharmonicity: 0.0, attack: 0.12, decay: 0.05, sustain: 0.95, release: 0.06, jitter: 0.40, range: (0.4, 1.0) },
    Recipe { name: "pluck", rolloff: 1.3, even_gain: 0.9, inharmonicity: 1.2e-3, attack: 0.002, decay: 0.12, sustain: 0.05, release: 0.03, jitter: 0.30, range: (0.0, 0.55) },
    Recipe { name: "organ", rolloff: 0.9, even_gain: 0.5, inharmonicity: 0.0, attack: 0.01, decay: 0.02, sustain: 1.0, release: 0.02, jitter: 0.20, range: (0.2, 0.9) },
    Recipe { name: "mallet", rolloff: 2.0, even_gain: 0.3, inharmonicity: 3e-3, attack: 0.002, decay: 0.20, sustain: 0.10, release: 0.05, jitter: 0.30, range: (0.35, 1.0) },
    Recipe { name: "horn", rolloff: 0.85, even_gain: 0.8, inharmonicity: 0.0, attack: 0.08, decay: 0.10, sustain: 0.70, release: 0.07, jitter: 0.25, range: (0.05, 0.65) },
    Recipe { name: "oboe", rolloff: 0.75, even_gain: 0.6, inharmonicity: 0.0, attack: 0.04, decay: 0.06, sustain: 0.75, release: 0.04, jitter: 0.25, range: (0.3, 0.85) },
    Recipe { name: "harp", rolloff: 1.8, even_gain: 1.0, inharmonicity: 2e-4, attack: 0.003, decay: 0.25, sustain: 0.15, release: 0.10, jitter: 0.30, range: (0.0, 0.8) },
    Recipe { name: "whistle", rolloff: 3.2, even_gain: 0.2, inharmonicity: 0.0, attack: 0.07, decay: 0.04, sustain: 0.85, release: 0.03, jitter: 0.35, range: (0.5, 1.0) },
];

/// Default archetype table for `k` instruments over `m` contiguous pitches
/// starting at `base_midi`. At most 12 archetypes are available.
pub fn default_archetypes(k: usize, m: usize, base_midi: u8) -> Result<Vec<InstrumentArchetype>> {
    if k > RECIPES.len() {
        return Err(Error::Config(alloc::format!("at most {} archetypes are defined", RECIPES.len())));
    }
    if m == 0 || base_midi as usize + m > 128 {
        return Err(Error::Config(alloc::format!("pitch span {base_midi}+{m} exceeds MIDI range")));
    }
    let span = (m - 1) as f64;
    Ok(RECIPES[..k]
        .iter()
        .map(|r| {
            let lo = libm::round(r.range.0 * span) as u8;
            let hi = libm::round(r.range.1 * span) as u8;
            InstrumentArchetype {
                name: r.name.into(),
                rolloff: r.rolloff,
                even_gain: r.even_gain,
                inharmonicity: r.inharmonicity,
                attack: r.attack,
                decay: r.decay,
                sustain: r.sustain,
                release: r.release,
                brightness_jitter: r.jitter,
                midi_lo: base_midi + lo,
                midi_hi: base_midi + hi,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub instruments: usize,
    pub pitches: usize,
    pub base_midi: u8,
    pub total_examples: usize,
    /// Per-instrument count weights are drawn from `1 ± imbalance`.
    pub imbalance: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub mel: MelConfig,
    /// Overrides the default archetype table when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetypes: Option<Vec<InstrumentArchetype>>,
}

impl CorpusConfig {
    /// Laptop-scale corpus: 6 instruments, 30 pitches, about 1,800 notes.
    pub fn desk() -> Self {
        Self {
            instruments: 6,
            pitches: 30,
            base_midi: 48,
            total_examples: 1800,
            imbalance: 0.6,
            val_fraction: 0.1,
            seed: 0,
            mel: MelConfig::default(),
            archetypes: None,
        }
    }

    /// Shapes of the original recordings: 12 instruments, 82 pitches.
    pub fn full_scale() -> Self {
        Self { instruments: 12, pitches: 82, base_midi: 24, total_examples: 1885, ..Self::desk() }
    }

    pub fn archetypes(&self) -> Result<Vec<InstrumentArchetype>> {
        let table = match &self.archetypes {
            Some(a) => a.clone(),
            None => default_archetypes(self.instruments, self.pitches, self.base_midi)?,
        };
        if table.len() != self.instruments {
            return Err(Error::Config(alloc::format!(
                "{} archetypes for {} instruments",
                table.len(),
                self.instruments
            )));
        }
        for a in &table {
            a.validate()?;
        }
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                if table[i].signature() == table[j].signature() {
                    return Err(Error::Config(alloc::format!(
                        "archetypes {} and {} are identical",
                        table[i].name,
                        table[j].name
                    )));
                }
            }
        }
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruments < 2 || self.pitches < 2 {
            return Err(Error::Config("need at least 2 instruments and 2 pitches".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.imbalance) {
            return Err(Error::Config("val_fraction and imbalance must lie in [0, 1)".into()));
        }
        self.mel.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: usize,
    pub midi: u8,
    /// Pitch class in `[0, M)`; always observed.
    pub pitch: usize,
    /// Ground-truth instrument class in `[0, K)`, used by evaluation.
    pub instrument: usize,
    /// Whether the instrument label is visible during training.
    pub labeled: bool,
    pub split: Split,
    /// Seed of the note's synthesis rng.
    pub seed: u64,
    pub spectrogram: Spectrogram,
}

impl Example {
    /// Instrument label as seen by the training objective.
    pub fn instrument_label(&self) -> Option<usize> {
        self.labeled.then_some(self.instrument)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub archetypes: Vec<InstrumentArchetype>,
    pub stats: NormalizationStats,
    pub examples: Vec<Example>,
    /// Percentage of train examples carrying instrument labels.
    pub labeled_percent: f64,
}

/// Pitch and instrument assignment for every note, before synthesis.
pub fn plan_notes(config: &CorpusConfig, archetypes: &[InstrumentArchetype], rng: &mut Rng) -> Vec<(usize, u8)> {
    let k = archetypes.len();
    let weights: Vec<f64> = (0..k)
        .map(|_| {
            let imb = config.imbalance;
            if imb > 0.0 {
                rng.random_range(1.0 - imb..1.0 + imb)
            } else {
                1.0
            }
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut notes = Vec::new();
    for (i, a) in archetypes.iter().enumerate() {
        let range: Vec<u8> = (a.midi_lo..=a.midi_hi).collect();
        let target = libm::round(config.total_examples as f64 * weights[i] / wsum) as usize;
        let count = target.max(range.len());
        let per = count / range.len();
        let mut extra: Vec<u8> = range.clone();
        extra.shuffle(rng);
        extra.truncate(count - per * range.len());
        extra.sort_unstable();
        for &midi in &range {
            let n = per + extra.binary_search(&midi).map_or(0, |_| 1);
            notes.extend(core::iter::repeat_n((i, midi), n));
        }
    }
    notes
}

/// Builds the corpus as a pure function of `config`.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let archetypes = config.archetypes()?;
    let base = config.base_midi;
    for a in &archetypes {
        if a.midi_lo < base || (a.midi_hi - base) as usize >= config.pitches {
            return Err(Error::Config(alloc::format!("{} range leaves the pitch span", a.name)));
        }
    }
    let mut rng = seeded(config.seed);
    let notes = plan_notes(config, &archetypes, &mut rng);
    let analyzer = MelAnalyzer::new(config.mel.clone())?;
    let seeds: Vec<u64> = notes.iter().map(|_| rng.next_u64()).collect();
    let mut raw = Vec::with_capacity(notes.len());
    for (&(inst, midi), &seed) in notes.iter().zip(&seeds) {
        let mut note_rng = seeded(seed);
        let wave = synth_tone(&archetypes[inst], midi, &mut note_rng)?;
        raw.push(analyzer.mel_spectrogram(&wave, None)?);
    }
    let splits = stratified_split(&notes.iter().map(|n| n.0).collect::<Vec<_>>(), archetypes.len(), config.val_fraction, &mut rng);
    let stats = NormalizationStats::from_log_spectrograms(
        raw.iter().zip(&splits).filter(|(_, &s)| s == Split::Train).map(|(r, _)| r),
    )?;
    let examples = notes
        .iter()
        .zip(raw)
        .zip(splits)
        .zip(seeds)
        .enumerate()
        .map(|(id, (((&(instrument, midi), spec), split), seed))| Example {
            id,
            midi,
            pitch: (midi - base) as usize,
            instrument,
            labeled: true,
            split,
            seed,
            spectrogram: spec.normalized_with(&stats),
        })
        .collect();
    Ok(Corpus { config: config.clone(), archetypes, stats, examples, labeled_percent: 100.0 })
}

/// Assigns `round(fraction · n_k)` examples of every class to validation.
pub fn stratified_split(classes: &[usize], k: usize, val_fraction: f64, rng: &mut Rng) -> Vec<Split> {
    let mut out = vec![Split::Train; classes.len()];
    for c in 0..k {
        let mut idx: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
        idx.shuffle(rng);
        let n_val = libm::round(val_fraction * idx.len() as f64) as usize;
        for &i in &idx[..n_val] {
            out[i] = Split::Val;
        }
    }
    out
}

impl Corpus {
    pub fn pitch_classes(&self) -> usize {
        self.config.pitches
    }

    pub fn instrument_classes(&self) -> usize {
        self.config.instruments
    }

    /// Re-renders an example's waveform from its note seed.
    pub fn render(&self, id: usize) -> Result<Waveform> {
        let e = self.examples.get(id).ok_or_else(|| Error::Request(alloc::format!("no example {id}")))?;
        synth_tone(&self.archetypes[e.instrument], e.midi, &mut seeded(e.seed))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.examples.iter().filter(|e| e.split == split).map(|e| e.id).collect()
    }

    /// Keeps instrument labels on `percent`% of each instrument's train
    /// examples; validation labels are untouched.
    pub fn mask_labels(&self, percent: f64, rng: &mut Rng) -> Result<Corpus> {
        if !(0.0..=100.0).contains(&percent) {
            return Err(Error::Config(alloc::format!("label percentage {percent} outside [0, 100]")));
        }
        let mut out = self.clone();
        for c in 0..self.instrument_classes() {
            let mut idx: Vec<usize> = self
                .examples
                .iter()
                .filter(|e| e.split == Split::Train && e.instrument == c)
                .map(|e| e.id)
                .collect();
            idx.shuffle(rng);
            let keep = libm::round(percent / 100.0 * idx.len() as f64) as usize;
            for (n, &i) in idx.iter().enumerate() {
                out.examples[i].labeled = n < keep;
            }
        }
        out.labeled_percent = percent;
        Ok(out)
    }

    /// One epoch of shuffled mini-batches over `split`; the last batch may
    /// be short.
    pub fn batches(&self, split: Split, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        let mut idx = self.indices(split);
        if idx.is_empty() {
            return Err(Error::Empty("split"));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        idx.shuffle(rng);
        Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::spectral_centroid;

    fn tiny() -> CorpusConfig {
        CorpusConfig { instruments: 2, pitches: 2, total_examples: 4, imbalance: 0.0, ..CorpusConfig::desk() }
    }

    #[test]
    fn a4_is_440() {
        assert_eq!(midi_to_hz(69.0), 440.0);
    }

    #[test]
    fn steep_rolloff_gives_a_sine() {
        let mut a = default_archetypes(1, 30, 48).unwrap().remove(0);
        a.rolloff = 1000.0;
        a.inharmonicity = 0.0;
        let w = render_tone(&a, 69, ToneJitter::NONE, &[0.0; 40]);
        let cfg = MelConfig::default();
        let p = crate::dsp::stft_power(&w.samples, &cfg).unwrap();
        let frame = &p[10 * cfg.n_bins()..11 * cfg.n_bins()];
        let peak = frame.iter().enumerate().fold(0, |b, (i, &v)| if v > frame[b] { i } else { b });
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        assert!((peak as f64 * bin_hz - 440.0).abs() < bin_hz);
        // Nothing near the second harmonic.
        let h2 = libm::round(880.0 / bin_hz) as usize;
        assert!(frame[h2] < frame[peak] * 1e-6);
    }

    #[test]
    fn out_of_range_pitch_rejected() {
        let a = &default_archetypes(6, 30, 48).unwrap()[4];
        assert!(synth_tone(a, a.midi_lo - 1, &mut seeded(0)).is_err());
    }

    #[test]
    fn archetype_centroids_differ() {
        let cfg = CorpusConfig::desk();
        let table = cfg.archetypes().unwrap();
        let analyzer = MelAnalyzer::new(cfg.mel.clone()).unwrap();
        let stats = NormalizationStats::new(libm::log(crate::dsp::LOG_FLOOR), 10.0).unwrap();
        let midi = 62;
        let centroids: Vec<f64> = table
            .iter()
            .filter(|a| a.covers(midi))
            .map(|a| {
                let w = render_tone(a, midi, ToneJitter::NONE, &[0.0; 40]);
                let s = analyzer.mel_spectrogram(&w, Some(&stats)).unwrap();
                spectral_centroid(&s, &stats, &analyzer.filterbank.centers_hz).unwrap()
            })
            .collect();
        assert!(centroids.len() >= 2);
        let mut sorted = centroids.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Every pair of archetypes differs; the closest pair by > 10%.
        let min_ratio = sorted.windows(2).map(|w| w[1] / w[0]).fold(f64::INFINITY, f64::min);
        assert!(min_ratio > 1.1, "centroids {centroids:?}");
    }

    #[test]
    fn tiny_corpus() {
        let c = build_corpus(&tiny()).unwrap();
        assert_eq!(c.examples.len(), 4);
        assert!(c.stats.min_log_mag.is_finite() && c.stats.max_log_mag.is_finite());
        for e in &c.examples {
            assert_eq!((e.spectrogram.frames, e.spectrogram.bands), (43, 256));
            assert!(e.spectrogram.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_degenerate_config() {
        let cfg = CorpusConfig { instruments: 1, ..tiny() };
        assert!(matches!(build_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn batches_partition_split() {
        let classes: Vec<usize> = (0..130).map(|i| i % 2).collect();
        let mut c = build_corpus(&tiny()).unwrap();
        let proto = c.examples[0].clone();
        c.examples = classes
            .iter()
            .enumerate()
            .map(|(id, &k)| Example { id, instrument: k, split: Split::Train, ..proto.clone() })
            .collect();
        let b = c.batches(Split::Train, 128, &mut seeded(3)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
        assert_eq!(b, c.batches(Split::Train, 128, &mut seeded(3)).unwrap());
        assert!(c.batches(Split::Val, 128, &mut seeded(3)).is_err());
    }
}
