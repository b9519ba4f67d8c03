use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Standard deviation of every randomly initialised weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
}

/// `N x d` token matrix on a tape, tagged with its modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub modality: Modality,
    pub len: usize,
}

/// Linear patch-to-token projection.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch_dim: usize,
    pub d: usize,
    pub modality: Modality,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        modality: Modality,
        patch_dim: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PatchEmbed {
            weight: store.add(format!("{prefix}.weight"), Tensor::randn([patch_dim, d], INIT_STD, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([d])),
            patch_dim,
            d,
            modality,
        }
    }

    /// `tokens[i] = patches[i] · W + b`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, patches: Var) -> Result<TokenSequence> {
        let shape = tape.shape(patches).to_vec();
        if shape.len() != 2 || shape[1] != self.patch_dim {
            return Err(Error::Dimension {
                op: "embed_patches",
                lhs: shape,
                rhs: vec![self.patch_dim, self.d],
            });
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let projected = tape.matmul(patches, w)?;
        let tokens = tape.add_bias(projected, b)?;
        Ok(TokenSequence {
            tokens,
            modality: self.modality,
            len: shape[0],
        })
    }
}

/// Trainable token, position and single-segment embedding tables.
#[derive(Clone, Debug)]
pub struct TextEmbed {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub vocab: usize,
    pub max_len: usize,
    pub d: usize,
}

impl TextEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        TextEmbed {
            token: store.add(format!("{prefix}.token"), Tensor::randn([vocab, d], INIT_STD, rng)),
            position: store.add(format!("{prefix}.position"), Tensor::randn([max_len, d], INIT_STD, rng)),
            segment: store.add(format!("{prefix}.segment"), Tensor::randn([1, d], INIT_STD, rng)),
            vocab,
            max_len,
            d,
        }
    }

    pub fn validate_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::validation("text input has no tokens"));
        }
        if ids.len() > self.max_len {
            return Err(Error::validation(format!(
                "text of {} tokens exceeds the {}-token limit",
                ids.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(Error::validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<TokenSequence> {
        self.validate_ids(ids)?;
        let n = ids.len();
        let table = tape.param(self.token);
        let tokens = tape.gather_rows(table, ids)?;
        let pos_table = tape.param(self.position);
        let pos = tape.slice_rows(pos_table, 0, n)?;
        let seg_row = tape.param(self.segment);
        let seg = tape.repeat_rows(seg_row, n)?;
        let summed = tape.add(tokens, pos)?;
        let tokens = tape.add(summed, seg)?;
        Ok(TokenSequence {
            tokens,
            modality: Modality::Textual,
            len: n,
        })
    }
}
