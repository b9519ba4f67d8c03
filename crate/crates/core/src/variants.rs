//! Model wirings, registered by name and chosen at runtime.
//!
//! | name                | pooling | second visual pass | feature fusion |
//! |---------------------|---------|--------------------|----------------|
//! | `full`              | yes     | yes                | yes            |
//! | `no_two_pass`       | yes     | no                 | yes            |
//! | `no_attention`      | no      | no                 | yes            |
//! | `no_feature_fusion` | yes     | yes                | no             |

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::encoder::SummaryVector;
use crate::error::{Error, Result};
use crate::featurization::Modality;
use crate::model::{ModalityTokens, Model, TriModalState};
use crate::numerics::{Real, Tape};
use crate::pooling::{attend_pool, PassTag};

/// Structural switches a variant exposes to the cost model and to
/// parameter construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Wiring {
    pub pooling: bool,
    pub second_visual_pass: bool,
    pub feature_fusion: bool,
}

pub trait Variant<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn wiring(&self) -> Wiring;

    /// Turns embedded visual and acoustic tokens into summaries.
    fn encode(
        &self,
        model: &Model<T>,
        tape: &mut Tape<'_, T>,
        tokens: &ModalityTokens,
        lengths: &mut Vec<(Modality, usize)>,
    ) -> Result<TriModalState>;
}

fn missing(what: &str) -> Error {
    Error::validation(format!("model was built without {what}"))
}

/// Text-conditioned visual pool, then the acoustic pool conditioned on the
/// preliminary visual summary and the text.
fn pooled_first_pass<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    tokens: &ModalityTokens,
    lengths: &mut Vec<(Modality, usize)>,
) -> Result<TriModalState> {
    let k = model.config.k_tokens;
    let pool_v = model.pool_visual.as_ref().ok_or_else(|| missing("the visual pool"))?;
    let pool_a = model
        .pool_acoustic
        .as_ref()
        .ok_or_else(|| missing("the acoustic pool"))?;
    let v_l = tokens.v_l;

    let z_v = attend_pool(tape, &tokens.visual, &[v_l], pool_v, PassTag::VisualPass1)?;
    let v_one = model.run_encoder(tape, &model.visual_encoder, &z_v.as_sequence(k), lengths)?;

    let z_a = attend_pool(tape, &tokens.acoustic, &[v_one, v_l], pool_a, PassTag::Acoustic)?;
    let a = model.run_encoder(tape, &model.acoustic_encoder, &z_a.as_sequence(k), lengths)?;

    Ok(TriModalState {
        v_l,
        v_one: Some(v_one),
        a,
        v: v_one,
        z_v: Some(z_v.tokens),
        z_a: Some(z_a.tokens),
        z_v_hat: None,
        pools: vec![z_v, z_a],
    })
}

/// Re-pools the raw visual tokens conditioned on the acoustic summary and
/// the text, through the same visual encoder as the first pass.
fn second_visual_pass<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    tokens: &ModalityTokens,
    state: &mut TriModalState,
    lengths: &mut Vec<(Modality, usize)>,
) -> Result<()> {
    let k = model.config.k_tokens;
    let pool = model
        .pool_visual_second
        .as_ref()
        .ok_or_else(|| missing("the second visual pool"))?;
    let z = attend_pool(tape, &tokens.visual, &[state.a, state.v_l], pool, PassTag::VisualPass2)?;
    let v: SummaryVector = model.run_encoder(tape, &model.visual_encoder, &z.as_sequence(k), lengths)?;
    state.v = v;
    state.z_v_hat = Some(z.tokens);
    state.pools.push(z);
    Ok(())
}

pub struct Full;

impl<T: Real> Variant<T> for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn wiring(&self) -> Wiring {
        Wiring {
            pooling: true,
            second_visual_pass: true,
            feature_fusion: true,
        }
    }

    fn encode(
        &self,
        model: &Model<T>,
        tape: &mut Tape<'_, T>,
        tokens: &ModalityTokens,
        lengths: &mut Vec<(Modality, usize)>,
    ) -> Result<TriModalState> {
        let mut state = pooled_first_pass(model, tape, tokens, lengths)?;
        second_visual_pass(model, tape, tokens, &mut state, lengths)?;
        Ok(state)
    }
}

/// Stops after the acoustic pass; the preliminary visual summary is final.
pub struct NoTwoPass;

impl<T: Real> Variant<T> for NoTwoPass {
    fn name(&self) -> &'static str {
        "no_two_pass"
    }

    fn wiring(&self) -> Wiring {
        Wiring {
            pooling: true,
            second_visual_pass: false,
            feature_fusion: true,
        }
    }

    fn encode(
        &self,
        model: &Model<T>,
        tape: &mut Tape<'_, T>,
        tokens: &ModalityTokens,
        lengths: &mut Vec<(Modality, usize)>,
    ) -> Result<TriModalState> {
        pooled_first_pass(model, tape, tokens, lengths)
    }
}

/// Feeds the full visual and acoustic token sequences to their encoders.
pub struct NoAttention;

impl<T: Real> Variant<T> for NoAttention {
    fn name(&self) -> &'static str {
        "no_attention"
    }

    fn wiring(&self) -> Wiring {
        Wiring {
            pooling: false,
            second_visual_pass: false,
            feature_fusion: true,
        }
    }

    fn encode(
        &self,
        model: &Model<T>,
        tape: &mut Tape<'_, T>,
        tokens: &ModalityTokens,
        lengths: &mut Vec<(Modality, usize)>,
    ) -> Result<TriModalState> {
        let v = model.run_encoder(tape, &model.visual_encoder, &tokens.visual, lengths)?;
        let a = model.run_encoder(tape, &model.acoustic_encoder, &tokens.acoustic, lengths)?;
        Ok(TriModalState {
            v_l: tokens.v_l,
            v_one: None,
            a,
            v,
            z_v: None,
            z_a: None,
            z_v_hat: None,
            pools: Vec::new(),
        })
    }
}

/// Full progressive pooling, but the decision layer only sees the three
/// per-modality heads.
pub struct NoFeatureFusion;

impl<T: Real> Variant<T> for NoFeatureFusion {
    fn name(&self) -> &'static str {
        "no_feature_fusion"
    }

    fn wiring(&self) -> Wiring {
        Wiring {
            feature_fusion: false,
            ..<Full as Variant<T>>::wiring(&Full)
        }
    }

    fn encode(
        &self,
        model: &Model<T>,
        tape: &mut Tape<'_, T>,
        tokens: &ModalityTokens,
        lengths: &mut Vec<(Modality, usize)>,
    ) -> Result<TriModalState> {
        Full.encode(model, tape, tokens, lengths)
    }
}

pub struct VariantRegistry<T: Real> {
    entries: BTreeMap<&'static str, Arc<dyn Variant<T>>>,
}

impl<T: Real> Default for VariantRegistry<T> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<T: Real> VariantRegistry<T> {
    pub fn empty() -> Self {
        VariantRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        let builtins: [Arc<dyn Variant<T>>; 4] = [
            Arc::new(Full),
            Arc::new(NoTwoPass),
            Arc::new(NoAttention),
            Arc::new(NoFeatureFusion),
        ];
        for variant in builtins {
            registry.register(variant).expect("builtin names are unique");
        }
        registry
    }

    pub fn register(&mut self, variant: Arc<dyn Variant<T>>) -> Result<()> {
        let name = variant.name();
        if self.entries.contains_key(name) {
            return Err(Error::validation(format!("variant {name} is already registered")));
        }
        self.entries.insert(name, variant);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Variant<T>>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::validation(format!(
                "unknown variant {name:?}; expected one of {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Looks a builtin variant up by name.
pub fn variant<T: Real>(name: &str) -> Result<Arc<dyn Variant<T>>> {
    VariantRegistry::with_builtins().get(name)
}
