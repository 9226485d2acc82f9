//! Log-mel spectrogram front end and spectral centroid.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22_050;
/// Floor added before taking the log of mel power.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// Linear-interpolation resampling.
    pub fn resampled(&self, rate: u32) -> Waveform {
        if rate == self.sample_rate || self.samples.is_empty() {
            return Waveform::new(self.samples.clone(), rate);
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let n_out = libm::floor((self.samples.len() as f64) / ratio).max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (libm::floor(pos) as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = (pos - i0 as f64) as f32;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Waveform::new(samples, rate)
    }

    /// Truncates or zero-pads to exactly `n` samples.
    pub fn fitted(&self, n: usize) -> Waveform {
        let mut samples = self.samples.clone();
        samples.resize(n, 0.0);
        Waveform::new(samples, self.sample_rate)
    }
}

/// Analysis parameters. Defaults: 256 HTK mel bands, 2048-sample Hann
/// window and FFT, 256-sample hop, 43 frames over a 500 ms clip at 22.05 kHz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub frames: usize,
    pub clip_samples: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_mels: 256,
            window_samples: 2048,
            hop_samples: 256,
            fft_size: 2048,
            frames: 43,
            clip_samples: 11_025,
        }
    }
}

impl MelConfig {
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.window_samples >= 2
            && self.window_samples <= self.fft_size
            && self.fft_size.is_power_of_two()
            && self.hop_samples > 0
            && self.frames > 0
            && self.n_mels > 0
            && self.sample_rate > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid mel configuration {self:?}")))
        }
    }
}

/// Periodic Hann window, `w[i] = 0.5 (1 − cos(2πi/n))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - libm::cos(2.0 * core::f64::consts::PI * i as f64 / n as f64)))
        .collect()
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (libm::cos(ang), libm::sin(ang));
        for start in (0..n).step_by(len) {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let next = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = next;
            }
        }
        len <<= 1;
    }
}

/// Power spectrogram `[frames × (fft_size/2 + 1)]`, row-major.
///
/// Frame `t` covers samples `[t·hop, t·hop + window)`; samples past the end
/// of the signal are zero, and exactly `cfg.frames` frames are produced.
pub fn stft_power(samples: &[f32], cfg: &MelConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    cfg.validate()?;
    let window = hann_window(cfg.window_samples);
    let bins = cfg.n_bins();
    let mut out = Vec::with_capacity(cfg.frames * bins);
    let mut re = vec![0.0; cfg.fft_size];
    let mut im = vec![0.0; cfg.fft_size];
    for t in 0..cfg.frames {
        re.fill(0.0);
        im.fill(0.0);
        let start = t * cfg.hop_samples;
        for (i, &w) in window.iter().enumerate() {
            if let Some(&s) = samples.get(start + i) {
                re[i] = s as f64 * w;
            }
        }
        fft_in_place(&mut re, &mut im);
        out.extend((0..bins).map(|k| re[k] * re[k] + im[k] * im[k]));
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters between 0 Hz and Nyquist.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels × n_bins]`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Center frequency of each band in Hz.
    pub centers_hz: Vec<f64>,
    /// Nonzero bin range of each band.
    spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_bins();
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                *w = up.min(down).max(0.0);
            }
            if row.iter().all(|&w| w <= 0.0) {
                let nearest = libm::round(c / bin_hz) as usize;
                row[nearest.min(n_bins - 1)] = 1.0;
            }
        }
        let spans = weights
            .chunks_exact(n_bins)
            .map(|row| {
                let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&w| w > 0.0).map_or(lo, |i| i + 1);
                (lo, hi)
            })
            .collect();
        Self { weights, n_mels: cfg.n_mels, n_bins, centers_hz: edges[1..=cfg.n_mels].to_vec(), spans }
    }

    /// Applies the filters to a `[frames × n_bins]` power matrix.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        let frames = power.len() / self.n_bins;
        let mut out = vec![0.0; frames * self.n_mels];
        for (frame, orow) in power.chunks_exact(self.n_bins).zip(out.chunks_exact_mut(self.n_mels)) {
            for (m, (o, &(lo, hi))) in orow.iter_mut().zip(&self.spans).enumerate() {
                let w = &self.weights[m * self.n_bins + lo..m * self.n_bins + hi];
                *o = w.iter().zip(&frame[lo..hi]).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

/// Corpus-wide log-magnitude range used to map onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min_log_mag: f64,
    pub max_log_mag: f64,
}

impl NormalizationStats {
    pub fn new(min_log_mag: f64, max_log_mag: f64) -> Result<Self> {
        if !(min_log_mag < max_log_mag) || !min_log_mag.is_finite() || !max_log_mag.is_finite() {
            return Err(Error::Config(alloc::format!(
                "normalization range [{min_log_mag}, {max_log_mag}] is empty"
            )));
        }
        Ok(Self { min_log_mag, max_log_mag })
    }

    /// Affine map of `[min, max]` onto `[-1, 1]`, clipped.
    pub fn normalize(&self, log_mag: f64) -> f64 {
        let x = 2.0 * (log_mag - self.min_log_mag) / (self.max_log_mag - self.min_log_mag) - 1.0;
        x.clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        (x + 1.0) / 2.0 * (self.max_log_mag - self.min_log_mag) + self.min_log_mag
    }

    /// Range over a set of log-magnitude spectrograms.
    pub fn from_log_spectrograms<'a>(items: impl IntoIterator<Item = &'a Spectrogram>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in items {
            for &v in &s.values {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
        Self::new(lo, hi)
    }
}

/// `frames × bands` matrix, row-major (one row per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn new(frames: usize, bands: usize, values: Vec<f32>, normalized: bool) -> Result<Self> {
        if frames * bands != values.len() || frames == 0 || bands == 0 {
            return Err(Error::Shape {
                op: "spectrogram",
                detail: alloc::format!("{frames}x{bands} needs {} values, got {}", frames * bands, values.len()),
            });
        }
        Ok(Self { frames, bands, values, normalized })
    }

    pub fn at(&self, frame: usize, band: usize) -> f32 {
        self.values[frame * self.bands + band]
    }

    /// Applies corpus normalization to a log-magnitude spectrogram.
    pub fn normalized_with(&self, stats: &NormalizationStats) -> Spectrogram {
        let values = self.values.iter().map(|&v| stats.normalize(v as f64) as f32).collect();
        Spectrogram { frames: self.frames, bands: self.bands, values, normalized: true }
    }
}

/// Precomputed analysis state: window, filterbank and configuration.
#[derive(Clone, Debug)]
pub struct MelAnalyzer {
    pub config: MelConfig,
    pub filterbank: MelFilterbank,
}

impl MelAnalyzer {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = MelFilterbank::new(&config);
        Ok(Self { config, filterbank })
    }

    /// Log-mel spectrogram of the first `clip_samples` of `w` (zero-padded
    /// when shorter); normalized when `stats` is given.
    pub fn mel_spectrogram(&self, w: &Waveform, stats: Option<&NormalizationStats>) -> Result<Spectrogram> {
        if w.samples.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        let w = if w.sample_rate != self.config.sample_rate {
            w.resampled(self.config.sample_rate)
        } else {
            w.clone()
        };
        let clip = w.fitted(self.config.clip_samples);
        let power = stft_power(&clip.samples, &self.config)?;
        let mel = self.filterbank.apply(&power);
        let values = mel
            .iter()
            .map(|&p| {
                let l = libm::log(p + LOG_FLOOR);
                match stats {
                    Some(s) => s.normalize(l) as f32,
                    None => l as f32,
                }
            })
            .collect();
        Spectrogram::new(self.config.frames, self.config.n_mels, values, stats.is_some())
    }

    /// Energy-weighted mean band-center frequency, averaged over frames
    /// that carry energy.
    pub fn spectral_centroid(&self, s: &Spectrogram, stats: &NormalizationStats) -> Result<f64> {
        spectral_centroid(s, stats, &self.filterbank.centers_hz)
    }
}

/// Spectral centroid of a normalized spectrogram over the given band
/// center frequencies.
pub fn spectral_centroid(s: &Spectrogram, stats: &NormalizationStats, centers_hz: &[f64]) -> Result<f64> {
    if centers_hz.len() != s.bands {
        return Err(Error::Shape {
            op: "spectral_centroid",
            detail: alloc::format!("{} bands vs {} centers", s.bands, centers_hz.len()),
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for row in s.values.chunks_exact(s.bands) {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&v, &f) in row.iter().zip(centers_hz) {
            let log_mag = if s.normalized { stats.denormalize(v as f64) } else { v as f64 };
            let p = (libm::exp(log_mag) - LOG_FLOOR).max(0.0);
            num += f * p;
            den += p;
        }
        if den > 0.0 {
            total += num / den;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Domain { op: "spectral_centroid", detail: "spectrogram has no energy".into() });
    }
    Ok(total / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_closed_form() {
        let w = hann_window(4);
        let expected = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        for n in [2, 3, 17, 2048] {
            assert_eq!(hann_window(n)[0], 0.0);
        }
        let s: f64 = hann_window(2048).iter().sum();
        assert!((s - 1024.0).abs() < 1e-6);
    }

    #[test]
    fn sine_peaks_at_its_bin() {
        let cfg = MelConfig::default();
        let k = 100;
        let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        let x: Vec<f32> = (0..cfg.clip_samples)
            .map(|i| libm::sin(2.0 * core::f64::consts::PI * f * i as f64 / cfg.sample_rate as f64) as f32)
            .collect();
        let p = stft_power(&x, &cfg).unwrap();
        let bins = cfg.n_bins();
        // Frames fully inside the signal.
        for frame in p.chunks_exact(bins).take(30) {
            let argmax = frame.iter().enumerate().fold(0, |b, (i, &v)| if v > frame[b] { i } else { b });
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn silence_and_empty() {
        let cfg = MelConfig::default();
        let p = stft_power(&vec![0.0; 5000], &cfg).unwrap();
        assert_eq!(p.len(), 43 * 1025);
        assert!(p.iter().all(|&v| v == 0.0));
        assert!(matches!(stft_power(&[], &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn filterbank_rows_and_centers() {
        let fb = MelFilterbank::new(&MelConfig::default());
        for m in 0..fb.n_mels {
            assert!(fb.weights[m * fb.n_bins..(m + 1) * fb.n_bins].iter().any(|&w| w > 0.0), "band {m}");
        }
        assert!(fb.centers_hz.windows(2).all(|w| w[0] < w[1]));
        assert!((hz_to_mel(1000.0) - 999.985_537_139_6).abs() < 1e-6);
        assert!((mel_to_hz(hz_to_mel(440.0)) - 440.0).abs() < 1e-9);
    }

    #[test]
    fn silence_maps_to_floor() {
        let a = MelAnalyzer::new(MelConfig::default()).unwrap();
        let stats = NormalizationStats::new(libm::log(LOG_FLOOR), 5.0).unwrap();
        let s = a.mel_spectrogram(&Waveform::new(vec![0.0; 11025], SAMPLE_RATE), Some(&stats)).unwrap();
        assert_eq!((s.frames, s.bands), (43, 256));
        assert!(s.values.iter().all(|&v| v == -1.0));
        assert_eq!(stats.normalize(5.0), 1.0);
        assert_eq!(stats.normalize(100.0), 1.0);
        assert_eq!(stats.normalize(-100.0), -1.0);
    }

    #[test]
    fn centroid_of_single_and_paired_bands() {
        let stats = NormalizationStats::new(libm::log(LOG_FLOOR), 2.0).unwrap();
        let centers: Vec<f64> = (0..8).map(|i| 100.0 * (i + 1) as f64).collect();
        let mut v = vec![-1.0f32; 3 * 8];
        for t in 0..3 {
            v[t * 8 + 5] = 0.5;
        }
        let s = Spectrogram::new(3, 8, v.clone(), true).unwrap();
        assert!((spectral_centroid(&s, &stats, &centers).unwrap() - 600.0).abs() < 1e-6);
        for t in 0..3 {
            v[t * 8 + 1] = 0.5;
        }
        let s = Spectrogram::new(3, 8, v, true).unwrap();
        assert!((spectral_centroid(&s, &stats, &centers).unwrap() - 400.0).abs() < 1e-6);
        let silent = Spectrogram::new(3, 8, vec![-1.0; 24], true).unwrap();
        assert!(spectral_centroid(&silent, &stats, &centers).is_err());
    }

    #[test]
    fn resample_keeps_duration() {
        let w = Waveform::new(vec![0.5; 44_100], 44_100);
        let r = w.resampled(SAMPLE_RATE);
        assert_eq!(r.samples.len(), 22_050);
        assert!(r.samples.iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }
}
