//! Featurization of datasets, mini-batch training and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{flops_model, Lengths};
use crate::error::{Error, Result};
use crate::featurization::{split_image_patches, split_spectrogram_patches, AcousticPatchMode, Fbank, FbankConfig};
use crate::fusion::predict_labels;
use crate::metrics::{metrics, MetricsReport};
use crate::model::{Model, SampleInput};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::pooling::PassTag;
use crate::seed::derive_seed;
use crate::synth::{Dataset, SynthSample, SynthSpec};

/// A sample ready for the model, with planted regions in token indices.
#[derive(Clone, Debug)]
pub struct FeaturizedSample {
    pub id: usize,
    pub input: SampleInput<f32>,
    pub label: Vec<f32>,
    pub targets: Vec<u8>,
    pub planted_visual: Vec<usize>,
    pub planted_acoustic: Vec<usize>,
}

/// Cuts images into patches and waveforms into standardized log-mel patches.
pub struct Featurizer {
    fbank: Fbank,
    mode: AcousticPatchMode,
}

impl Featurizer {
    pub fn new(spec: &SynthSpec, mode: AcousticPatchMode) -> Result<Self> {
        Ok(Featurizer {
            fbank: Fbank::new(FbankConfig::default(), spec.sample_rate)?,
            mode,
        })
    }

    /// Per-utterance standardization: zero mean, unit variance over all
    /// bins and frames.
    pub fn featurize(&self, sample: &SynthSample) -> Result<FeaturizedSample> {
        let visual = split_image_patches::<f32>(&sample.visual);
        let mut spec = self.fbank.compute(&sample.waveform)?;
        let n = spec.values.len() as f64;
        let mean = spec.values.iter().sum::<f64>() / n;
        let std = (spec.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        spec.values.iter_mut().for_each(|v| *v = (*v - mean) * scale);
        let acoustic = split_spectrogram_patches::<f32>(&spec, self.mode)?;
        let planted_acoustic = sample.planted.acoustic_tokens(self.mode, spec.bins, spec.frames);
        Ok(FeaturizedSample {
            id: sample.id,
            input: SampleInput {
                visual,
                acoustic,
                text: sample.text.clone(),
            },
            label: sample.label.iter().map(|&y| f32::from(y)).collect(),
            targets: sample.label.clone(),
            planted_visual: sample.planted.visual.clone(),
            planted_acoustic,
        })
    }

    pub fn featurize_all(&self, samples: &[SynthSample]) -> Result<Vec<FeaturizedSample>> {
        samples.iter().map(|s| self.featurize(s)).collect()
    }

    pub fn mode(&self) -> AcousticPatchMode {
        self.mode
    }
}

#[derive(Clone, Debug)]
pub struct FeaturizedDataset {
    pub train: Vec<FeaturizedSample>,
    pub valid: Vec<FeaturizedSample>,
    pub test: Vec<FeaturizedSample>,
}

impl FeaturizedDataset {
    pub fn new(dataset: &Dataset, mode: AcousticPatchMode) -> Result<Self> {
        let f = Featurizer::new(&dataset.spec, mode)?;
        Ok(FeaturizedDataset {
            train: f.featurize_all(&dataset.train)?,
            valid: f.featurize_all(&dataset.valid)?,
            test: f.featurize_all(&dataset.test)?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[FeaturizedSample]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::validation(format!(
                "unknown split {other:?}; expected train, valid or test"
            ))),
        }
    }

    /// `(Q, visual patch dim, M, acoustic patch dim)` of the first sample.
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let s = self
            .train
            .first()
            .ok_or_else(|| Error::validation("empty training split"))?;
        let (v, a) = (s.input.visual.shape(), s.input.acoustic.shape());
        Ok((v[0], v[1], a[0], a[1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub threshold: f64,
}

impl Default for TrainSettings {
    /// 40 epochs of batch 8 at learning rate 1e-4.
    fn default() -> Self {
        TrainSettings {
            epochs: 40,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Mean BCE over `batch`, then one Adam step on the averaged gradient.
pub fn training_step(model: &mut Model<f32>, adam: &mut Adam<f32>, batch: &[&FeaturizedSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut total: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
    let mut loss_sum = 0.0;
    for sample in batch {
        let mut tape = Tape::with_params(&model.params);
        let (loss, _) = model.loss(&mut tape, &sample.input, &sample.label)?;
        loss_sum += f64::from(tape.item(loss));
        for (acc, g) in total.iter_mut().zip(tape.backward(loss).into_params()) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for g in total.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    adam.step(&mut model.params, &total);
    Ok(loss_sum / batch.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub mean_loss: f64,
    pub predictions: Vec<Vec<u8>>,
}

pub fn evaluate(model: &Model<f32>, samples: &[FeaturizedSample], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::validation("cannot evaluate an empty split"));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for s in samples {
        let mut tape = Tape::with_params(&model.params);
        let (loss, out) = model.loss(&mut tape, &s.input, &s.label)?;
        loss_sum += f64::from(tape.item(loss));
        let logits: Vec<f64> = tape.value(out.predictions.p).iter().map(|&z| f64::from(z)).collect();
        predictions.push(predict_labels(&logits, threshold)?);
    }
    let targets: Vec<Vec<u8>> = samples.iter().map(|s| s.targets.clone()).collect();
    Ok(Evaluation {
        report: metrics(&predictions, &targets)?,
        mean_loss: loss_sum / samples.len() as f64,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub valid_weighted_accuracy: f64,
    pub valid_f1: f64,
    /// Forward FLOPs spent in pooling per sample.
    pub pool_flops: u64,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out =
        String::from("epoch,train_loss,valid_loss,valid_accuracy,valid_weighted_accuracy,valid_f1,pool_flops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch, r.train_loss, r.valid_loss, r.valid_accuracy, r.valid_weighted_accuracy, r.valid_f1, r.pool_flops
        );
    }
    out
}

/// Runs `settings.epochs` epochs with a seed-derived shuffle per epoch and
/// evaluates on `valid` after each one.
pub fn train(
    model: &mut Model<f32>,
    train: &[FeaturizedSample],
    valid: &[FeaturizedSample],
    settings: &TrainSettings,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    settings.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::validation("training needs non-empty train and valid splits"));
    }
    let first = &train[0].input;
    let lengths = Lengths {
        q: first.visual.shape()[0],
        m: first.acoustic.shape()[0],
        text: first.text.len(),
    };
    let pool_flops = flops_model(model.wiring(), lengths, &model.config).pools;
    let mut adam = Adam::new(&model.params, settings.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train.shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&FeaturizedSample> = chunk.iter().map(|&i| &train[i]).collect();
            loss_sum += training_step(model, &mut adam, &batch)?;
            batches += 1;
        }
        let eval = evaluate(model, valid, settings.threshold)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss: eval.mean_loss,
            valid_accuracy: eval.report.average.accuracy,
            valid_weighted_accuracy: eval.report.average.weighted_accuracy,
            valid_f1: eval.report.average.f1,
            pool_flops,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, valid acc {:.3}, f1 {:.3}",
            row.train_loss,
            row.valid_accuracy,
            row.valid_f1
        );
        logs.push(row);
    }
    Ok(logs)
}

/// Mean attention mass on planted tokens per pooling pass, next to the
/// uniform-attention baseline `|planted| / N`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PlantedMass {
    pub visual_pass1: f64,
    pub acoustic: f64,
    pub visual_pass2: f64,
    pub visual_uniform: f64,
    pub acoustic_uniform: f64,
    pub samples: usize,
}

pub fn planted_mass(model: &Model<f32>, samples: &[FeaturizedSample]) -> Result<PlantedMass> {
    let mut m = PlantedMass::default();
    for s in samples {
        let mut tape = Tape::with_params(&model.params);
        let out = model.forward(&mut tape, &s.input)?;
        let (q, n_a) = (s.input.visual.shape()[0], s.input.acoustic.shape()[0]);
        m.visual_uniform += s.planted_visual.len() as f64 / q as f64;
        m.acoustic_uniform += s.planted_acoustic.len() as f64 / n_a as f64;
        for map in out.state.attention_maps(&tape) {
            match map.pass {
                PassTag::VisualPass1 => m.visual_pass1 += map.mass_on(&s.planted_visual)?,
                PassTag::VisualPass2 => m.visual_pass2 += map.mass_on(&s.planted_visual)?,
                PassTag::Acoustic => m.acoustic += map.mass_on(&s.planted_acoustic)?,
            }
        }
        m.samples += 1;
    }
    let n = m.samples.max(1) as f64;
    for v in [
        &mut m.visual_pass1,
        &mut m.acoustic,
        &mut m.visual_pass2,
        &mut m.visual_uniform,
        &mut m.acoustic_uniform,
    ] {
        *v /= n;
    }
    Ok(m)
}
