//! Pre-LN transformer encoder with a learned [CLS] summary token.
//!
//! Each block computes `z' = MSA(LN(z)) + z` then `z = FFN(LN(z')) + z'`.
//! There is no final LayerNorm; the summary is the raw position-0 state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurization::{Modality, TokenSequence, INIT_STD};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var, LN_EPS};

/// FFN hidden width as a multiple of `d`.
pub const FFN_MULT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    /// Longest token sequence the positional table accepts (excluding [CLS]).
    pub max_tokens: usize,
}

impl TransformerConfig {
    /// 768 wide, 12 heads of 64, 12 layers.
    pub fn full_scale(max_tokens: usize) -> Self {
        TransformerConfig {
            d: 768,
            heads: 12,
            head_dim: 64,
            layers: 12,
            max_tokens,
        }
    }

    /// 32 wide, 4 heads of 8, 2 layers.
    pub fn desk(max_tokens: usize) -> Self {
        TransformerConfig {
            d: 32,
            heads: 4,
            head_dim: 8,
            layers: 2,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::validation(format!("degenerate transformer config {self:?}")));
        }
        if self.heads * self.head_dim != self.d {
            return Err(Error::validation(format!(
                "heads ({}) x head_dim ({}) must equal d ({})",
                self.heads, self.head_dim, self.d
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::validation("max_tokens must be positive"));
        }
        Ok(())
    }
}

/// Parameters of one encoder block. `w_qkv` is `d x 3d` with column blocks
/// `[Q | K | V]`; head `h` owns columns `h*d_h..(h+1)*d_h` of each block.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_qkv: ParamId,
    pub w_msa: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let h = FFN_MULT * d;
        LayerParams {
            ln1_gamma: store.add(format!("{prefix}.ln1.gamma"), Tensor::ones([d])),
            ln1_beta: store.add(format!("{prefix}.ln1.beta"), Tensor::zeros([d])),
            w_qkv: store.add(format!("{prefix}.w_qkv"), Tensor::randn([d, 3 * d], INIT_STD, rng)),
            w_msa: store.add(format!("{prefix}.w_msa"), Tensor::randn([d, d], INIT_STD, rng)),
            ln2_gamma: store.add(format!("{prefix}.ln2.gamma"), Tensor::ones([d])),
            ln2_beta: store.add(format!("{prefix}.ln2.beta"), Tensor::zeros([d])),
            w1: store.add(format!("{prefix}.w1"), Tensor::randn([d, h], INIT_STD, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([h])),
            w2: store.add(format!("{prefix}.w2"), Tensor::randn([h, d], INIT_STD, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d])),
        }
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
pub fn msa<T: Real>(tape: &mut Tape<'_, T>, x: Var, layer: &LayerParams, config: &TransformerConfig) -> Result<Var> {
    let d = config.d;
    let dh = config.head_dim;
    let w_qkv = tape.param(layer.w_qkv);
    let qkv = tape.matmul(x, w_qkv)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, d + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let w_msa = tape.param(layer.w_msa);
    tape.matmul(concat, w_msa)
}

/// `GELU(z W1 + b1) W2 + b2`, rowwise.
pub fn ffn<T: Real>(tape: &mut Tape<'_, T>, z: Var, layer: &LayerParams) -> Result<Var> {
    let w1 = tape.param(layer.w1);
    let b1 = tape.param(layer.b1);
    let w2 = tape.param(layer.w2);
    let b2 = tape.param(layer.b2);
    let hidden = tape.matmul(z, w1)?;
    let hidden = tape.add_bias(hidden, b1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, w2)?;
    tape.add_bias(out, b2)
}

/// One pre-LN residual block.
pub fn block<T: Real>(tape: &mut Tape<'_, T>, z: Var, layer: &LayerParams, config: &TransformerConfig) -> Result<Var> {
    let (g1, b1) = (tape.param(layer.ln1_gamma), tape.param(layer.ln1_beta));
    let normed = tape.layer_norm(z, g1, b1, LN_EPS)?;
    let attended = msa(tape, normed, layer, config)?;
    let z_mid = tape.add(attended, z)?;
    let (g2, b2) = (tape.param(layer.ln2_gamma), tape.param(layer.ln2_beta));
    let normed = tape.layer_norm(z_mid, g2, b2, LN_EPS)?;
    let fed = ffn(tape, normed, layer)?;
    tape.add(fed, z_mid)
}

/// The [CLS] output of an encoder: a `1 x d` row on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SummaryVector {
    pub value: Var,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub summary: SummaryVector,
    /// All `(N + 1) x d` final states, [CLS] first.
    pub states: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: TransformerConfig,
    pub cls: ParamId,
    /// `(max_tokens + 1) x d`; row 0 belongs to [CLS].
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let cls = store.add(format!("{prefix}.cls"), Tensor::randn([1, d], INIT_STD, rng));
        let pos = store.add(
            format!("{prefix}.pos"),
            Tensor::randn([config.max_tokens + 1, d], INIT_STD, rng),
        );
        let layers = (0..config.layers)
            .map(|l| LayerParams::new(store, &format!("{prefix}.layer{l}"), d, rng))
            .collect();
        Ok(Encoder {
            config,
            cls,
            pos,
            layers,
        })
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::validation("encoder input has no tokens"));
        }
        if n > self.config.max_tokens {
            return Err(Error::validation(format!(
                "{n} tokens exceed the encoder limit of max_tokens = {}",
                self.config.max_tokens
            )));
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, input: &TokenSequence) -> Result<Encoded> {
        self.check_len(input.len)?;
        let width = tape.shape(input.tokens).last().copied().unwrap_or(0);
        if width != self.config.d {
            return Err(Error::Dimension {
                op: "encode",
                lhs: tape.shape(input.tokens).to_vec(),
                rhs: vec![input.len, self.config.d],
            });
        }
        let cls = tape.param(self.cls);
        let seq = tape.concat_rows(&[cls, input.tokens])?;
        let pos_table = tape.param(self.pos);
        let pos = tape.slice_rows(pos_table, 0, input.len + 1)?;
        let mut z = tape.add(seq, pos)?;
        for layer in &self.layers {
            z = block(tape, z, layer, &self.config)?;
        }
        let summary = tape.slice_rows(z, 0, 1)?;
        Ok(Encoded {
            summary: SummaryVector {
                value: summary,
                modality: input.modality,
            },
            states: z,
        })
    }
}
