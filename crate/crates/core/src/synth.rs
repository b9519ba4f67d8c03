//! Deterministic tri-modal synthetic data with planted class signals.
//!
//! Every class owns one region per modality, fixed by the seed:
//!
//! * visual: a `2 x 2` block of patches in image `c mod J`, filled with a
//!   class pattern of amplitude [`VISUAL_AMPLITUDE`];
//! * acoustic: a sine burst at a class frequency inside a class time slot,
//!   amplitude [`ACOUSTIC_AMPLITUDE`];
//! * textual: a three-token motif written at a class position, present with
//!   probability `snr / (1 + snr)`.
//!
//! Noise is everywhere, with standard deviation `amplitude / snr`. A label
//! draws each class positive with `positive_rate`; an all-negative draw
//! turns one uniformly chosen class positive.
//!
//! On disk a dataset is a directory holding `manifest.json` plus, per
//! sample, `{split}/{id:05}.img` and `{split}/{id:05}.wav` in the formats of
//! [`crate::featurization::io`].

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurization::io::{read_images, read_waveform, write_images, write_waveform};
use crate::featurization::{AcousticPatchMode, FbankConfig, ImageGeometry, VisualInput};
use crate::pooling::AttentionMap;
use crate::seed::derive_seed;

pub const VISUAL_AMPLITUDE: f64 = 0.8;
pub const ACOUSTIC_AMPLITUDE: f64 = 0.5;
pub const MOTIF_LEN: usize = 3;
/// Side of a visual plant, in patches.
pub const BLOCK_PATCHES: usize = 2;
/// Fraction of a class time slot covered by its burst.
const BURST_FRACTION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub text_len: usize,
    pub vocab: usize,
    pub snr: f64,
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            train: 256,
            valid: 64,
            test: 128,
            images: 4,
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            duration_s: 2.0,
            sample_rate: 8000,
            text_len: 16,
            vocab: 100,
            snr: 5.0,
            positive_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn geometry(&self) -> ImageGeometry {
        ImageGeometry {
            count: self.images,
            height: self.height,
            width: self.width,
            channels: self.channels,
            patch: self.patch,
        }
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::validation("synthetic data needs at least 2 classes"));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::validation(format!(
                "snr must be positive and finite, got {}",
                self.snr
            )));
        }
        let floor = 1.0 / self.classes as f64;
        if !(self.positive_rate >= floor && self.positive_rate < 1.0) {
            return Err(Error::validation(format!(
                "positive_rate must lie in [1/classes, 1) = [{floor}, 1) since every label has a positive, got {}",
                self.positive_rate
            )));
        }
        if self.train == 0 || self.valid == 0 || self.test == 0 {
            return Err(Error::validation("every split needs at least one sample"));
        }
        let g = self.geometry();
        g.validate()?;
        let slots = (g.height / g.patch / BLOCK_PATCHES) * (g.width / g.patch / BLOCK_PATCHES);
        let per_image = self.classes.div_ceil(self.images);
        if slots < per_image {
            return Err(Error::validation(format!(
                "{}x{} images with {}-pixel patches have {slots} plant slots, {per_image} classes need one each",
                g.height, g.width, g.patch
            )));
        }
        let fbank = FbankConfig::default();
        let frames = fbank.frame_count(self.samples(), self.sample_rate).unwrap_or(0);
        if self.sample_rate < 8000 || frames < 4 * self.classes {
            return Err(Error::validation(format!(
                "{} s at {} Hz gives {frames} frames, too few to host {} bursts",
                self.duration_s, self.sample_rate, self.classes
            )));
        }
        if self.text_len / self.classes < MOTIF_LEN {
            return Err(Error::validation(format!(
                "text length {} cannot hold {} motifs of {MOTIF_LEN} tokens",
                self.text_len, self.classes
            )));
        }
        if self.vocab <= MOTIF_LEN * self.classes {
            return Err(Error::validation(format!(
                "vocabulary of {} leaves no background tokens beside {} motif ids",
                self.vocab,
                MOTIF_LEN * self.classes
            )));
        }
        Ok(())
    }
}

/// Index sets that carry class signal in one sample.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRegions {
    /// Visual token (patch) indices, row-major within image.
    pub visual: Vec<usize>,
    /// Spectrogram frames overlapping a burst.
    pub acoustic_frames: Vec<usize>,
    /// Text positions holding a motif token.
    pub text: Vec<usize>,
}

impl PlantedRegions {
    /// Acoustic token indices covering the planted frames.
    pub fn acoustic_tokens(&self, mode: AcousticPatchMode, bins: usize, frames: usize) -> Vec<usize> {
        let mut tokens: Vec<usize> = self
            .acoustic_frames
            .iter()
            .flat_map(|&f| mode.tokens_of_frame(bins, frames, f))
            .collect();
        tokens.sort_unstable();
        tokens.dedup();
        tokens
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: usize,
    pub visual: VisualInput,
    pub waveform: Vec<f32>,
    pub text: Vec<usize>,
    pub label: Vec<u8>,
    pub planted: PlantedRegions,
}

/// Seed-fixed class regions and patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLayout {
    /// Per class: image index and top-left patch `(row, col)`.
    pub blocks: Vec<(usize, usize, usize)>,
    /// Per class: pixel pattern in `[0.5, 1]`, block-local `(y, x, c)` order.
    pub patterns: Vec<Vec<f32>>,
    pub frequencies_hz: Vec<f64>,
    /// Per class: burst `[start, end)` in samples.
    pub bursts: Vec<(usize, usize)>,
    pub motifs: Vec<[usize; MOTIF_LEN]>,
    pub motif_positions: Vec<usize>,
    pub background_ids: Vec<usize>,
}

impl ClassLayout {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.layout"));
        let g = spec.geometry();
        let (slot_rows, slot_cols) = (g.height / g.patch / BLOCK_PATCHES, g.width / g.patch / BLOCK_PATCHES);
        let mut free: Vec<Vec<(usize, usize)>> = (0..spec.images)
            .map(|_| {
                let mut slots: Vec<_> = (0..slot_rows)
                    .flat_map(|r| (0..slot_cols).map(move |c| (r * BLOCK_PATCHES, c * BLOCK_PATCHES)))
                    .collect();
                slots.shuffle(&mut rng);
                slots
            })
            .collect();
        let side = BLOCK_PATCHES * g.patch;
        let blocks = (0..spec.classes)
            .map(|c| {
                let image = c % spec.images;
                let (r, col) = free[image].pop().expect("slot count validated");
                (image, r, col)
            })
            .collect();
        let patterns = (0..spec.classes)
            .map(|_| {
                (0..side * side * g.channels)
                    .map(|_| rng.random_range(0.5f32..=1.0))
                    .collect()
            })
            .collect();
        let nyquist = spec.sample_rate as f64 / 2.0;
        let frequencies_hz = (0..spec.classes)
            .map(|c| 0.8 * nyquist * (c + 1) as f64 / (spec.classes + 1) as f64)
            .collect();
        let n = spec.samples();
        let slot = n / spec.classes;
        let burst = (slot as f64 * BURST_FRACTION) as usize;
        let bursts = (0..spec.classes)
            .map(|c| {
                let start = c * slot + (slot - burst) / 2;
                (start, start + burst)
            })
            .collect();
        let mut ids: Vec<usize> = (0..spec.vocab).collect();
        ids.shuffle(&mut rng);
        let motifs = (0..spec.classes)
            .map(|c| [ids[MOTIF_LEN * c], ids[MOTIF_LEN * c + 1], ids[MOTIF_LEN * c + 2]])
            .collect();
        let stride = spec.text_len / spec.classes;
        let motif_positions = (0..spec.classes).map(|c| c * stride).collect();
        let mut background_ids = ids[MOTIF_LEN * spec.classes..].to_vec();
        background_ids.sort_unstable();
        Ok(ClassLayout {
            blocks,
            patterns,
            frequencies_hz,
            bursts,
            motifs,
            motif_positions,
            background_ids,
        })
    }

    /// Token indices of the visual block planted for `class`.
    pub fn visual_tokens(&self, geometry: &ImageGeometry, class: usize) -> Vec<usize> {
        let (image, r, c) = self.blocks[class];
        (0..BLOCK_PATCHES)
            .flat_map(|dr| (0..BLOCK_PATCHES).map(move |dc| geometry.patch_index(image, r + dr, c + dc)))
            .collect()
    }
}

/// Per-class draw rate `q` such that, after rejecting all-negative labels,
/// each class is positive with probability `positive_rate`:
/// `q / (1 - (1 - q)^C) = positive_rate`, solved by bisection.
fn draw_rate(spec: &SynthSpec) -> f64 {
    let c = spec.classes as i32;
    let marginal = |q: f64| q / (1.0 - (1.0 - q).powi(c));
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if marginal(mid) < spec.positive_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_label(spec: &SynthSpec, q: f64, rng: &mut impl Rng) -> Vec<u8> {
    loop {
        let label: Vec<u8> = (0..spec.classes).map(|_| u8::from(rng.random_bool(q))).collect();
        if label.contains(&1) {
            return label;
        }
    }
}

fn make_sample(spec: &SynthSpec, layout: &ClassLayout, split: &str, id: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("synth.{split}.{id}")));
    let label = draw_label(spec, draw_rate(spec), &mut rng);
    let g = spec.geometry();
    let fbank = FbankConfig::default();
    let mut planted = PlantedRegions::default();

    let pixel_noise = Normal::new(0.0, VISUAL_AMPLITUDE / spec.snr).expect("finite sigma");
    let mut pixels: Vec<f32> = (0..g.pixel_count())
        .map(|_| (pixel_noise.sample(&mut rng) as f32).abs().min(1.0))
        .collect();
    let side = BLOCK_PATCHES * g.patch;
    for (c, _) in label.iter().enumerate().filter(|(_, &y)| y == 1) {
        let (image, r, col) = layout.blocks[c];
        let (y0, x0) = (r * g.patch, col * g.patch);
        for y in 0..side {
            for x in 0..side {
                for ch in 0..g.channels {
                    let at = ((image * g.height + y0 + y) * g.width + x0 + x) * g.channels + ch;
                    let signal = VISUAL_AMPLITUDE as f32 * layout.patterns[c][(y * side + x) * g.channels + ch];
                    pixels[at] = (signal + pixels[at]).min(1.0);
                }
            }
        }
        planted.visual.extend(layout.visual_tokens(&g, c));
    }
    planted.visual.sort_unstable();

    let n = spec.samples();
    let wave_noise = Normal::new(0.0, ACOUSTIC_AMPLITUDE / spec.snr).expect("finite sigma");
    let mut waveform: Vec<f32> = (0..n).map(|_| wave_noise.sample(&mut rng) as f32).collect();
    let (win, hop) = (fbank.window_len(spec.sample_rate), fbank.hop_len(spec.sample_rate));
    let frames = fbank.frame_count(n, spec.sample_rate).unwrap_or(0);
    for (c, _) in label.iter().enumerate().filter(|(_, &y)| y == 1) {
        let (start, end) = layout.bursts[c];
        let w = 2.0 * std::f64::consts::PI * layout.frequencies_hz[c] / spec.sample_rate as f64;
        for (i, s) in waveform[start..end].iter_mut().enumerate() {
            *s += (ACOUSTIC_AMPLITUDE * (w * (start + i) as f64).sin()) as f32;
        }
        planted
            .acoustic_frames
            .extend((0..frames).filter(|&f| f * hop < end && f * hop + win > start));
    }
    planted.acoustic_frames.sort_unstable();
    planted.acoustic_frames.dedup();

    let mut text: Vec<usize> = (0..spec.text_len)
        .map(|_| layout.background_ids[rng.random_range(0..layout.background_ids.len())])
        .collect();
    let keep = spec.snr / (1.0 + spec.snr);
    for (c, _) in label.iter().enumerate().filter(|(_, &y)| y == 1) {
        if rng.random_bool(keep) {
            let at = layout.motif_positions[c];
            text[at..at + MOTIF_LEN].copy_from_slice(&layout.motifs[c]);
            planted.text.extend(at..at + MOTIF_LEN);
        }
    }
    planted.text.sort_unstable();

    Ok(SynthSample {
        id,
        visual: VisualInput::new(g, pixels)?,
        waveform,
        text,
        label,
        planted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub layout: ClassLayout,
    pub train: Vec<SynthSample>,
    pub valid: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SynthSample]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::validation(format!(
                "unknown split {other:?}; expected train, valid or test"
            ))),
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Builds all three splits. Splits are disjoint by construction: every
/// sample draws from its own `(split, id)` seed.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    let layout = ClassLayout::new(spec)?;
    let build = |split: &str, count: usize| -> Result<Vec<SynthSample>> {
        (0..count).map(|id| make_sample(spec, &layout, split, id)).collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: build("train", spec.train)?,
        valid: build("valid", spec.valid)?,
        test: build("test", spec.test)?,
        layout,
    })
}

/// Mean over the map's rows of the weight on `planted` columns.
pub fn attention_mass_on_planted(map: &AttentionMap, planted: &[usize]) -> Result<f64> {
    map.mass_on(planted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub images: String,
    pub waveform: String,
    pub text: Vec<usize>,
    pub label: Vec<u8>,
    pub planted: PlantedRegions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub layout: ClassLayout,
    pub train: Vec<ManifestEntry>,
    pub valid: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes binaries and the manifest; returns the manifest bytes.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    for split in SPLITS {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut list = Vec::new();
        for s in dataset.split(split)? {
            let images = format!("{split}/{:05}.img", s.id);
            let waveform = format!("{split}/{:05}.wav", s.id);
            write_images(&dir.join(&images), &s.visual)?;
            write_waveform(&dir.join(&waveform), &s.waveform, dataset.spec.sample_rate)?;
            list.push(ManifestEntry {
                id: s.id,
                images,
                waveform,
                text: s.text.clone(),
                label: s.label.clone(),
                planted: s.planted.clone(),
            });
        }
        entries.push(list);
    }
    let test = entries.pop().unwrap_or_default();
    let valid = entries.pop().unwrap_or_default();
    let train = entries.pop().unwrap_or_default();
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        layout: dataset.layout.clone(),
        train,
        valid,
        test,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    let path = dir.join(MANIFEST);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.spec.validate()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let spec = manifest.spec.clone();
    let load = |entries: &[ManifestEntry]| -> Result<Vec<SynthSample>> {
        entries
            .iter()
            .map(|e| {
                let visual = read_images(&dir.join(&e.images), spec.patch)?;
                if visual.geometry() != spec.geometry() {
                    return Err(Error::format(dir.join(&e.images), "geometry differs from the manifest"));
                }
                let (waveform, sr) = read_waveform(&dir.join(&e.waveform))?;
                if sr != spec.sample_rate {
                    return Err(Error::format(
                        dir.join(&e.waveform),
                        "sample rate differs from the manifest",
                    ));
                }
                Ok(SynthSample {
                    id: e.id,
                    visual,
                    waveform,
                    text: e.text.clone(),
                    label: e.label.clone(),
                    planted: e.planted.clone(),
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(&manifest.train)?,
        valid: load(&manifest.valid)?,
        test: load(&manifest.test)?,
        layout: manifest.layout,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec {
            train: 3,
            valid: 2,
            test: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn labels_always_have_a_positive() {
        let data = generate(&SynthSpec { train: 200, ..tiny() }).unwrap();
        assert!(data.train.iter().all(|s| s.label.contains(&1)));
    }

    #[test]
    fn geometry_too_small_is_rejected() {
        let spec = SynthSpec {
            height: 8,
            width: 8,
            images: 1,
            ..tiny()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn planted_indices_are_in_range() {
        let spec = tiny();
        let data = generate(&spec).unwrap();
        let frames = FbankConfig::default()
            .frame_count(spec.samples(), spec.sample_rate)
            .unwrap();
        for s in &data.train {
            assert!(s.planted.visual.iter().all(|&i| i < spec.geometry().patch_count()));
            assert!(s.planted.acoustic_frames.iter().all(|&f| f < frames));
            assert!(s.planted.text.iter().all(|&p| p < spec.text_len));
        }
    }
}
