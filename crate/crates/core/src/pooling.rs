//! Context-conditioned token pooling.
//!
//! Given `N` tokens and `m` summary vectors, each summary is repeated `N`
//! times and concatenated to the tokens along the feature axis. A linear map
//! scores every augmented row against `K` output slots, a softmax over the
//! `N` token entries of each slot turns the scores into weights, and the
//! `K` pooled tokens are the weighted sums `softmax(scores)ᵀ · tokens`.
//! Every pooled token is therefore a convex combination of input tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::SummaryVector;
use crate::error::{Error, Result};
use crate::featurization::{Modality, TokenSequence, INIT_STD};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Which pooling step produced an attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassTag {
    VisualPass1,
    Acoustic,
    VisualPass2,
}

impl PassTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PassTag::VisualPass1 => "visual_pass1",
            PassTag::Acoustic => "acoustic",
            PassTag::VisualPass2 => "visual_pass2",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            PassTag::Acoustic => Modality::Acoustic,
            _ => Modality::Visual,
        }
    }
}

impl std::fmt::Display for PassTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct PoolParams {
    /// `((1 + m) d) x K`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub k_tokens: usize,
    pub contexts: usize,
    pub d: usize,
}

impl PoolParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        contexts: usize,
        k_tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k_tokens == 0 {
            return Err(Error::validation("pool needs at least one output token"));
        }
        if !(1..=2).contains(&contexts) {
            return Err(Error::validation(format!(
                "pool takes one or two context summaries, got {contexts}"
            )));
        }
        Ok(PoolParams {
            weight: store.add(
                format!("{prefix}.weight"),
                Tensor::randn([(1 + contexts) * d, k_tokens], INIT_STD, rng),
            ),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([k_tokens])),
            k_tokens,
            contexts,
            d,
        })
    }
}

/// Output of one pooling step, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// `K x d` pooled tokens.
    pub tokens: Var,
    /// `N x K` softmax weights; column `k` is the distribution of slot `k`.
    pub weights: Var,
    pub pass: PassTag,
}

impl Pooled {
    pub fn as_sequence(&self, k_tokens: usize) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens,
            modality: self.pass.modality(),
            len: k_tokens,
        }
    }
}

pub fn attend_pool<T: Real>(
    tape: &mut Tape<'_, T>,
    input: &TokenSequence,
    contexts: &[SummaryVector],
    params: &PoolParams,
    pass: PassTag,
) -> Result<Pooled> {
    if input.len == 0 {
        return Err(Error::validation("cannot pool an empty token sequence"));
    }
    if contexts.len() != params.contexts {
        return Err(Error::validation(format!(
            "pool expects {} context summaries, got {}",
            params.contexts,
            contexts.len()
        )));
    }
    for ctx in contexts {
        let len = tape.value(ctx.value).len();
        if len != params.d {
            return Err(Error::validation(format!(
                "context summary has length {len}, expected d = {}",
                params.d
            )));
        }
    }
    let n = input.len;
    let mut parts = Vec::with_capacity(1 + contexts.len());
    parts.push(input.tokens);
    for ctx in contexts {
        parts.push(tape.repeat_rows(ctx.value, n)?);
    }
    let augmented = tape.concat_cols(&parts)?;
    let w = tape.param(params.weight);
    let b = tape.param(params.bias);
    let scores = tape.matmul(augmented, w)?;
    let scores = tape.add_bias(scores, b)?;
    let weights = tape.softmax(scores, 0)?;
    let tokens = tape.matmul_tn(weights, input.tokens)?;
    Ok(Pooled { tokens, weights, pass })
}

/// A `K x N` attention map read back from the tape, one row per pooled token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor<f64>,
    pub modality: Modality,
    pub pass: PassTag,
}

impl AttentionMap {
    pub fn from_tape<T: Real>(tape: &Tape<'_, T>, pooled: &Pooled) -> Self {
        let shape = tape.shape(pooled.weights);
        let (n, k) = (shape[0], shape[1]);
        let src = tape.value(pooled.weights);
        let weights = Tensor::from_fn([k, n], |i| {
            let (row, col) = (i / n, i % n);
            src[col * k + row].to_f64().unwrap_or(f64::NAN)
        });
        AttentionMap {
            weights,
            modality: pooled.pass.modality(),
            pass: pooled.pass,
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows())
            .map(|r| (self.weights.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over the rows of the weight falling on `columns`.
    pub fn mass_on(&self, columns: &[usize]) -> Result<f64> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.cols()) {
            return Err(Error::validation(format!(
                "index {bad} out of range for a map over {} tokens",
                self.cols()
            )));
        }
        let mut unique = columns.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let total: f64 = (0..self.rows())
            .map(|r| {
                let row = self.weights.row(r);
                unique.iter().map(|&c| row[c]).sum::<f64>()
            })
            .sum();
        Ok(total / self.rows() as f64)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(
        n: usize,
        k: usize,
        d: usize,
        m: usize,
        seed: u64,
    ) -> (ParamStore<f64>, PoolParams, Tensor<f64>, Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = PoolParams::new(&mut store, "pool", d, m, k, &mut rng).unwrap();
        *store.get_mut(params.weight) = Tensor::randn([(1 + m) * d, k], 1.0, &mut rng);
        *store.get_mut(params.bias) = Tensor::randn([k], 1.0, &mut rng);
        let tokens = Tensor::randn([n, d], 1.0, &mut rng);
        let ctx = (0..m).map(|_| Tensor::randn([1, d], 1.0, &mut rng)).collect();
        (store, params, tokens, ctx)
    }

    fn run(
        store: &ParamStore<f64>,
        params: &PoolParams,
        tokens: &Tensor<f64>,
        ctx: &[Tensor<f64>],
    ) -> (Tensor<f64>, AttentionMap) {
        let mut tape = Tape::with_params(store);
        let t = tape.constant(tokens.clone());
        let contexts: Vec<_> = ctx
            .iter()
            .map(|c| SummaryVector {
                value: tape.constant(c.clone()),
                modality: Modality::Textual,
            })
            .collect();
        let seq = TokenSequence {
            tokens: t,
            modality: Modality::Visual,
            len: tokens.shape()[0],
        };
        let pooled = attend_pool(&mut tape, &seq, &contexts, params, PassTag::VisualPass1).unwrap();
        (tape.tensor(pooled.tokens), AttentionMap::from_tape(&tape, &pooled))
    }

    #[test]
    fn single_token_passes_through() {
        let (store, params, tokens, ctx) = setup(1, 5, 3, 1, 7);
        let (pooled, map) = run(&store, &params, &tokens, &ctx);
        for k in 0..5 {
            assert_eq!(pooled.row(k), tokens.row(0));
        }
        assert!(map.weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn zero_weights_give_the_mean_token() {
        let (mut store, params, tokens, ctx) = setup(4, 2, 3, 2, 8);
        store
            .get_mut(params.weight)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        store.get_mut(params.bias).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let (pooled, map) = run(&store, &params, &tokens, &ctx);
        assert!(map.weights.data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        for k in 0..2 {
            for j in 0..3 {
                let mean = (0..4).map(|i| tokens.at(i, j)).sum::<f64>() / 4.0;
                assert!((pooled.at(k, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_count_and_width_are_validated() {
        let (store, params, tokens, _) = setup(3, 2, 4, 2, 9);
        let mut tape = Tape::with_params(&store);
        let t = tape.constant(tokens);
        let seq = TokenSequence {
            tokens: t,
            modality: Modality::Visual,
            len: 3,
        };
        let short = SummaryVector {
            value: tape.constant(Tensor::zeros([1, 3])),
            modality: Modality::Textual,
        };
        let ok = SummaryVector {
            value: tape.constant(Tensor::zeros([1, 4])),
            modality: Modality::Textual,
        };
        assert!(attend_pool(&mut tape, &seq, &[ok], &params, PassTag::Acoustic).is_err());
        assert!(attend_pool(&mut tape, &seq, &[ok, short], &params, PassTag::Acoustic).is_err());
        assert!(attend_pool(&mut tape, &seq, &[ok, ok], &params, PassTag::Acoustic).is_ok());
    }

    #[test]
    fn planted_mass() {
        let map = AttentionMap {
            weights: Tensor::full([3, 4], 0.25),
            modality: Modality::Visual,
            pass: PassTag::VisualPass1,
        };
        assert!((map.mass_on(&[0, 2]).unwrap() - 0.5).abs() < 1e-15);
        assert!(map.mass_on(&[4]).is_err());
        let one_hot = AttentionMap {
            weights: Tensor::new([2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            ..map
        };
        assert_eq!(one_hot.mass_on(&[1, 2]).unwrap(), 1.0);
    }
}
