//! The tri-modal model: embeddings, three encoders, pooling steps and the
//! fusion head, wired together by a [`Variant`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, SummaryVector, TransformerConfig};
use crate::error::{Error, Result};
use crate::featurization::{Modality, PatchEmbed, TextEmbed, TokenSequence};
use crate::fusion::{fuse, FusionParams, Predictions};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};
use crate::pooling::{AttentionMap, PoolParams, Pooled};
use crate::seed::derive_seed;
use crate::variants::{Variant, Wiring};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    /// Pooled token count K.
    pub k_tokens: usize,
    /// Longest sequence any encoder accepts, excluding [CLS].
    pub max_tokens: usize,
    pub classes: usize,
    pub vocab: usize,
    pub text_max_len: usize,
    pub visual_patch_dim: usize,
    pub acoustic_patch_dim: usize,
}

impl ModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d: self.d,
            heads: self.heads,
            head_dim: self.head_dim,
            layers: self.layers,
            max_tokens: self.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transformer().validate()?;
        if self.k_tokens == 0 {
            return Err(Error::validation("k_tokens must be positive"));
        }
        if self.k_tokens > self.max_tokens {
            return Err(Error::validation(format!(
                "k_tokens = {} exceeds max_tokens = {}",
                self.k_tokens, self.max_tokens
            )));
        }
        if self.classes < 2 {
            return Err(Error::validation("classes must be at least 2"));
        }
        if self.vocab == 0 || self.text_max_len == 0 {
            return Err(Error::validation("vocab and text_max_len must be positive"));
        }
        if self.text_max_len > self.max_tokens {
            return Err(Error::validation(format!(
                "text_max_len = {} exceeds max_tokens = {}",
                self.text_max_len, self.max_tokens
            )));
        }
        if self.visual_patch_dim == 0 || self.acoustic_patch_dim == 0 {
            return Err(Error::validation("patch dimensions must be positive"));
        }
        Ok(())
    }
}

/// One featurized sample: flattened patches and token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput<T> {
    /// `Q x visual_patch_dim`.
    pub visual: Tensor<T>,
    /// `M x acoustic_patch_dim`.
    pub acoustic: Tensor<T>,
    pub text: Vec<usize>,
}

impl<T: Real> SampleInput<T> {
    pub fn cast<U: Real>(&self) -> SampleInput<U> {
        SampleInput {
            visual: self.visual.cast(),
            acoustic: self.acoustic.cast(),
            text: self.text.clone(),
        }
    }
}

/// Token sequences and the textual summary handed to a variant.
#[derive(Clone, Copy, Debug)]
pub struct ModalityTokens {
    pub visual: TokenSequence,
    pub acoustic: TokenSequence,
    pub v_l: SummaryVector,
}

/// Everything the encoders and pools produced in one forward pass.
#[derive(Clone, Debug)]
pub struct TriModalState {
    pub v_l: SummaryVector,
    /// Preliminary, text-conditioned visual summary (absent without pooling).
    pub v_one: Option<SummaryVector>,
    pub a: SummaryVector,
    /// Final visual summary.
    pub v: SummaryVector,
    pub z_v: Option<Var>,
    pub z_a: Option<Var>,
    pub z_v_hat: Option<Var>,
    pub pools: Vec<Pooled>,
}

impl TriModalState {
    pub fn attention_maps<T: Real>(&self, tape: &Tape<'_, T>) -> Vec<AttentionMap> {
        self.pools.iter().map(|p| AttentionMap::from_tape(tape, p)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub state: TriModalState,
    pub predictions: Predictions,
    /// Encoder input lengths, in call order, e.g. `[N_text, K, K, K]`.
    pub encoder_lengths: Vec<(Modality, usize)>,
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub variant: Arc<dyn Variant<T>>,
    pub visual_embed: PatchEmbed,
    pub acoustic_embed: PatchEmbed,
    pub text_embed: TextEmbed,
    pub text_encoder: Encoder,
    pub visual_encoder: Encoder,
    pub acoustic_encoder: Encoder,
    pub pool_visual: Option<PoolParams>,
    pub pool_acoustic: Option<PoolParams>,
    pub pool_visual_second: Option<PoolParams>,
    pub fusion: FusionParams,
}

impl<T: Real> Model<T> {
    /// Builds and initialises every parameter from `seed`. Parameters that
    /// the variant never uses are not created.
    pub fn new(config: ModelConfig, variant: Arc<dyn Variant<T>>, seed: u64) -> Result<Self> {
        config.validate()?;
        let wiring = variant.wiring();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model.init"));
        let mut params = ParamStore::new();
        let tc = config.transformer();
        let d = config.d;
        let visual_embed = PatchEmbed::new(
            &mut params,
            "visual.embed",
            Modality::Visual,
            config.visual_patch_dim,
            d,
            &mut rng,
        );
        let acoustic_embed = PatchEmbed::new(
            &mut params,
            "acoustic.embed",
            Modality::Acoustic,
            config.acoustic_patch_dim,
            d,
            &mut rng,
        );
        let text_embed = TextEmbed::new(
            &mut params,
            "text.embed",
            config.vocab,
            config.text_max_len,
            d,
            &mut rng,
        );
        let text_encoder = Encoder::new(&mut params, "text.encoder", tc, &mut rng)?;
        let visual_encoder = Encoder::new(&mut params, "visual.encoder", tc, &mut rng)?;
        let acoustic_encoder = Encoder::new(&mut params, "acoustic.encoder", tc, &mut rng)?;
        let k = config.k_tokens;
        let (pool_visual, pool_acoustic, pool_visual_second) = if wiring.pooling {
            let v1 = PoolParams::new(&mut params, "pool.visual1", d, 1, k, &mut rng)?;
            let a = PoolParams::new(&mut params, "pool.acoustic", d, 2, k, &mut rng)?;
            let v2 = if wiring.second_visual_pass {
                Some(PoolParams::new(&mut params, "pool.visual2", d, 2, k, &mut rng)?)
            } else {
                None
            };
            (Some(v1), Some(a), v2)
        } else {
            (None, None, None)
        };
        let fusion = FusionParams::new(&mut params, "head", d, config.classes, wiring.feature_fusion, &mut rng)?;
        Ok(Model {
            config,
            params,
            variant,
            visual_embed,
            acoustic_embed,
            text_embed,
            text_encoder,
            visual_encoder,
            acoustic_encoder,
            pool_visual,
            pool_acoustic,
            pool_visual_second,
            fusion,
        })
    }

    pub fn wiring(&self) -> Wiring {
        self.variant.wiring()
    }

    /// Checks every input shape before any compute.
    pub fn validate_input(&self, input: &SampleInput<T>) -> Result<()> {
        let check = |name: &'static str, t: &Tensor<T>, dim: usize| -> Result<()> {
            if t.shape().len() != 2 || t.shape()[1] != dim || t.shape()[0] == 0 {
                return Err(Error::Dimension {
                    op: name,
                    lhs: t.shape().to_vec(),
                    rhs: vec![0, dim],
                });
            }
            Ok(())
        };
        check("visual_input", &input.visual, self.config.visual_patch_dim)?;
        check("acoustic_input", &input.acoustic, self.config.acoustic_patch_dim)?;
        self.text_embed.validate_ids(&input.text)?;
        if !self.wiring().pooling {
            self.visual_encoder.check_len(input.visual.shape()[0])?;
            self.acoustic_encoder.check_len(input.acoustic.shape()[0])?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, input: &SampleInput<T>) -> Result<ForwardOutput> {
        self.validate_input(input)?;
        let text = self.text_embed.embed(tape, &input.text)?;
        let v_l = self.text_encoder.encode(tape, &text)?.summary;
        let visual_patches = tape.constant(input.visual.clone());
        let visual = self.visual_embed.embed(tape, visual_patches)?;
        let acoustic_patches = tape.constant(input.acoustic.clone());
        let acoustic = self.acoustic_embed.embed(tape, acoustic_patches)?;
        let tokens = ModalityTokens { visual, acoustic, v_l };
        let mut encoder_lengths = vec![(Modality::Textual, text.len)];
        let state = self.variant.encode(self, tape, &tokens, &mut encoder_lengths)?;
        let predictions = fuse(tape, state.v, state.a, state.v_l, &self.fusion)?;
        Ok(ForwardOutput {
            state,
            predictions,
            encoder_lengths,
        })
    }

    /// Forward pass plus mean BCE of the final logits against `label`.
    pub fn loss(&self, tape: &mut Tape<'_, T>, input: &SampleInput<T>, label: &[T]) -> Result<(Var, ForwardOutput)> {
        if label.len() != self.config.classes {
            return Err(Error::validation(format!(
                "label has {} entries, model has {} classes",
                label.len(),
                self.config.classes
            )));
        }
        let out = self.forward(tape, input)?;
        let loss = tape.bce_with_logits(out.predictions.p, label)?;
        Ok((loss, out))
    }

    /// Encodes a pooled or raw sequence with the given encoder and records its length.
    pub fn run_encoder(
        &self,
        tape: &mut Tape<'_, T>,
        encoder: &Encoder,
        seq: &TokenSequence,
        lengths: &mut Vec<(Modality, usize)>,
    ) -> Result<SummaryVector> {
        lengths.push((seq.modality, seq.len));
        Ok(encoder.encode(tape, seq)?.summary)
    }
}
