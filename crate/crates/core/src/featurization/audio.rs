//! Log-Mel filterbank features and spectrogram patching.
//!
//! Frames use a Hamming window of `round(0.025 * sr)` samples every
//! `round(0.010 * sr)` samples, zero-padded to the next power of two. Power
//! spectra are pooled by triangular filters spaced evenly on the HTK mel
//! scale `2595 * log10(1 + f / 700)` from 0 Hz to Nyquist; each triangle is
//! linear in mel. Energies are floored at 1e-12 before the natural log.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, LOG_FLOOR};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub window_s: f64,
    pub hop_s: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            n_mels: 128,
            window_s: 0.025,
            hop_s: 0.010,
        }
    }
}

impl FbankConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_s * sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_s * sample_rate as f64).round() as usize
    }

    /// `1 + floor((len - win) / hop)`, or `None` when shorter than a window.
    pub fn frame_count(&self, samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_len(sample_rate);
        let hop = self.hop_len(sample_rate);
        (samples >= win && hop > 0).then(|| 1 + (samples - win) / hop)
    }
}

/// Log-Mel energies stored bin-major: `values[bin * frames + frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub frame_hop_s: f64,
}

impl Spectrogram {
    pub fn new(values: Vec<f64>, bins: usize, frames: usize, frame_hop_s: f64) -> Result<Self> {
        if bins == 0 || frames == 0 || values.len() != bins * frames {
            return Err(Error::validation(format!(
                "spectrogram of {bins} bins x {frames} frames cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("spectrogram contains non-finite values"));
        }
        Ok(Spectrogram {
            values,
            bins,
            frames,
            frame_hop_s,
        })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Energy-weighted argmax bin of one frame.
    pub fn peak_bin(&self, frame: usize) -> usize {
        (0..self.bins)
            .max_by(|&a, &b| self.at(a, frame).total_cmp(&self.at(b, frame)))
            .unwrap_or(0)
    }
}

/// Reusable filterbank extractor for one sample rate.
pub struct Fbank {
    config: FbankConfig,
    sample_rate: u32,
    window: Vec<f64>,
    hop: usize,
    n_fft: usize,
    fft: Arc<dyn Fft<f64>>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl Fbank {
    pub fn new(config: FbankConfig, sample_rate: u32) -> Result<Self> {
        if sample_rate < 8000 {
            return Err(Error::validation(format!(
                "sample rate {sample_rate} Hz is below the 8 kHz minimum"
            )));
        }
        if config.n_mels == 0 {
            return Err(Error::validation("fbank needs at least one mel bin"));
        }
        let win = config.window_len(sample_rate);
        let hop = config.hop_len(sample_rate);
        if win < 2 || hop == 0 {
            return Err(Error::validation("fbank window and hop must be positive"));
        }
        let window: Vec<f64> = (0..win)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1) as f64).cos())
            .collect();
        let n_fft = win.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);

        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| top * i as f64 / (config.n_mels + 1) as f64)
            .collect();
        let bin_mels: Vec<f64> = (0..=n_fft / 2)
            .map(|b| hz_to_mel(b as f64 * sample_rate as f64 / n_fft as f64))
            .collect();
        let mut filters = Vec::with_capacity(config.n_mels);
        for m in 0..config.n_mels {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            let weights: Vec<(usize, f64)> = bin_mels
                .iter()
                .enumerate()
                .filter_map(|(b, &mel)| {
                    let w = if mel > lo && mel <= center {
                        (mel - lo) / (center - lo)
                    } else if mel > center && mel < hi {
                        (hi - mel) / (hi - center)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((b, w))
                })
                .collect();
            let first = weights.first().map_or(0, |&(b, _)| b);
            let mut dense = Vec::new();
            for (b, w) in weights {
                dense.resize(b - first, 0.0);
                dense.push(w);
            }
            filters.push((first, dense));
        }
        let centers_hz = points[1..=config.n_mels].iter().map(|&m| mel_to_hz(m)).collect();
        Ok(Fbank {
            config,
            sample_rate,
            window,
            hop,
            n_fft,
            fft,
            filters,
            centers_hz,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.config
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Centre frequency of every mel filter, in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn compute(&self, waveform: &[f32]) -> Result<Spectrogram> {
        let win = self.window.len();
        let frames = self
            .config
            .frame_count(waveform.len(), self.sample_rate)
            .ok_or_else(|| {
                Error::validation(format!(
                    "waveform of {} samples is shorter than one {win}-sample window",
                    waveform.len()
                ))
            })?;
        let bins = self.config.n_mels;
        let mut values = vec![0.0; bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let x = if i < win {
                    waveform[start + i] as f64 * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(x, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, (first, weights)) in self.filters.iter().enumerate() {
                let energy: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                values[m * frames + t] = energy.max(LOG_FLOOR).ln();
            }
        }
        Spectrogram::new(values, bins, frames, self.config.hop_s)
    }
}

/// One-shot helper with the default 128-bin, 25 ms / 10 ms configuration.
pub fn log_mel_fbank(waveform: &[f32], sample_rate: u32) -> Result<Spectrogram> {
    Fbank::new(FbankConfig::default(), sample_rate)?.compute(waveform)
}

/// How a spectrogram is cut into acoustic patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcousticPatchMode {
    /// Full-height `F x 2` strips in time order; a trailing odd frame is dropped.
    #[default]
    Temporal,
    /// `16 x 16` squares, time-major.
    Square,
}

pub const SQUARE_PATCH: usize = 16;

impl AcousticPatchMode {
    pub fn patch_dim(self, bins: usize) -> usize {
        match self {
            AcousticPatchMode::Temporal => bins * 2,
            AcousticPatchMode::Square => SQUARE_PATCH * SQUARE_PATCH,
        }
    }

    pub fn patch_count(self, bins: usize, frames: usize) -> usize {
        match self {
            AcousticPatchMode::Temporal => frames / 2,
            AcousticPatchMode::Square => (bins / SQUARE_PATCH) * (frames / SQUARE_PATCH),
        }
    }

    /// Acoustic token indices whose patches contain `frame`.
    pub fn tokens_of_frame(self, bins: usize, frames: usize, frame: usize) -> Vec<usize> {
        match self {
            AcousticPatchMode::Temporal if frame < 2 * (frames / 2) => vec![frame / 2],
            AcousticPatchMode::Square if frame / SQUARE_PATCH < frames / SQUARE_PATCH => {
                let per_block = bins / SQUARE_PATCH;
                let block = frame / SQUARE_PATCH;
                (block * per_block..(block + 1) * per_block).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Flattened acoustic patches, one per row. Temporal patches are laid out
/// `(bin, frame-in-patch)`; square patches the same within their block.
pub fn split_spectrogram_patches<T: Real>(spec: &Spectrogram, mode: AcousticPatchMode) -> Result<Tensor<T>> {
    let (bins, frames) = (spec.bins, spec.frames);
    let (height, width) = match mode {
        AcousticPatchMode::Temporal => (bins, 2),
        AcousticPatchMode::Square => {
            if bins % SQUARE_PATCH != 0 {
                return Err(Error::validation(format!(
                    "{bins} mel bins are not divisible into {SQUARE_PATCH}-bin squares"
                )));
            }
            (SQUARE_PATCH, SQUARE_PATCH)
        }
    };
    if frames < width {
        return Err(Error::validation(format!(
            "{frames} frames cannot fill a {width}-frame patch"
        )));
    }
    let count = mode.patch_count(bins, frames);
    let mut out = Vec::with_capacity(count * height * width);
    for tb in 0..frames / width {
        for fb in 0..bins / height {
            for f in fb * height..(fb + 1) * height {
                for t in tb * width..(tb + 1) * width {
                    out.push(T::of(spec.at(f, t)));
                }
            }
        }
    }
    Tensor::new([count, height * width], out)
}

/// Inverse of temporal patching. Frames beyond `2 * M` come back as `fill`.
pub fn assemble_temporal_patches<T: Real>(
    patches: &Tensor<T>,
    bins: usize,
    frames: usize,
    fill: f64,
) -> Result<Vec<f64>> {
    if patches.shape() != [frames / 2, bins * 2] {
        return Err(Error::Dimension {
            op: "assemble_temporal_patches",
            lhs: patches.shape().to_vec(),
            rhs: vec![frames / 2, bins * 2],
        });
    }
    let mut values = vec![fill; bins * frames];
    for (i, row) in patches.data().chunks(bins * 2).enumerate() {
        for f in 0..bins {
            for dt in 0..2 {
                values[f * frames + 2 * i + dt] = row[f * 2 + dt].to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bins: usize, frames: usize) -> Spectrogram {
        let values = (0..bins * frames).map(|i| i as f64).collect();
        Spectrogram::new(values, bins, frames, 0.01).unwrap()
    }

    #[test]
    fn temporal_patch_counts() {
        let p = split_spectrogram_patches::<f64>(&spec(128, 1000), AcousticPatchMode::Temporal).unwrap();
        assert_eq!(p.shape(), &[500, 256]);
        let p = split_spectrogram_patches::<f64>(&spec(128, 2), AcousticPatchMode::Temporal).unwrap();
        assert_eq!(p.shape(), &[1, 256]);
        assert!(split_spectrogram_patches::<f64>(&spec(128, 1), AcousticPatchMode::Temporal).is_err());
    }

    #[test]
    fn square_patch_counts() {
        let p = split_spectrogram_patches::<f64>(&spec(128, 33), AcousticPatchMode::Square).unwrap();
        assert_eq!(p.shape(), &[16, 256]);
        assert!(split_spectrogram_patches::<f64>(&spec(120, 33), AcousticPatchMode::Square).is_err());
        assert!(split_spectrogram_patches::<f64>(&spec(128, 15), AcousticPatchMode::Square).is_err());
    }

    #[test]
    fn temporal_patches_are_time_ordered_and_invertible() {
        let s = spec(3, 7);
        let p = split_spectrogram_patches::<f64>(&s, AcousticPatchMode::Temporal).unwrap();
        assert_eq!(
            p.row(1),
            &[s.at(0, 2), s.at(0, 3), s.at(1, 2), s.at(1, 3), s.at(2, 2), s.at(2, 3)]
        );
        let back = assemble_temporal_patches(&p, 3, 7, f64::NAN).unwrap();
        for f in 0..3 {
            for t in 0..6 {
                assert_eq!(back[f * 7 + t], s.at(f, t));
            }
            assert!(back[f * 7 + 6].is_nan());
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FbankConfig::default();
        assert_eq!(cfg.frame_count(16000, 16000), Some(98));
        assert_eq!(cfg.frame_count(399, 16000), None);
        assert_eq!(cfg.frame_count(400, 16000), Some(1));
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let s = log_mel_fbank(&vec![0.0; 8000], 16000).unwrap();
        assert!(s.values.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn rejects_short_waveform_and_low_rate() {
        assert!(log_mel_fbank(&[0.0; 100], 16000).is_err());
        assert!(log_mel_fbank(&[0.0; 1000], 4000).is_err());
    }
}
