//! Analytic FLOP model, wall-clock timing and peak-memory measurement.
//!
//! The analytic counts use the same convention as the tape counter in
//! [`crate::numerics::flops`], so the two agree exactly for a forward pass.
//! Reported FLOPs are forward-only; timings cover forward plus backward.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::FFN_MULT;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, SampleInput};
use crate::numerics::{flops, Tape, Tensor};
use crate::seed::derive_seed;
use crate::variants::{variant, Wiring};

/// Untimed runs before every timed series.
pub const WARMUP_RUNS: usize = 3;

/// Input token counts: visual `Q`, acoustic `M`, text `N_text`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Lengths {
    pub q: usize,
    pub m: usize,
    pub text: usize,
}

/// Per-component counts for one encoder layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockFlops {
    pub matmul: u64,
    pub elementwise: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.matmul + self.elementwise
    }
}

/// Forward FLOPs of `layers` blocks over `n` tokens plus [CLS]:
/// QKV `6N'd²`, scores `2N'²d`, aggregation `2N'²d`, output `2N'd²` and
/// FFN `16N'd²` with `N' = N + 1`, plus the per-element terms of layer
/// norms, residuals, biases, GELU, score scaling and softmax.
pub fn flops_attention_block(n: usize, d: usize, heads: usize, layers: usize) -> BlockFlops {
    let (n, d, h, l) = (n as u64 + 1, d as u64, heads as u64, layers as u64);
    let f = FFN_MULT as u64;
    let matmul = 3 * flops::matmul(n, d, d)
        + 2 * flops::matmul(n, n, d)
        + flops::matmul(n, d, d)
        + 2 * flops::matmul(n, d, f * d);
    let per_elem = 2 * flops::LAYER_NORM + 3 * flops::ELEMENTWISE + f * (flops::ELEMENTWISE + flops::GELU);
    let scores = h * n * n * (flops::ELEMENTWISE + flops::SOFTMAX);
    BlockFlops {
        matmul: l * matmul,
        elementwise: l * (per_elem * n * d + scores),
    }
}

/// One encoder call: positional add plus the block stack.
pub fn flops_encoder(n: usize, d: usize, heads: usize, layers: usize) -> u64 {
    (n as u64 + 1) * d as u64 * flops::ELEMENTWISE + flops_attention_block(n, d, heads, layers).total()
}

/// One pooling step over `n` tokens with `contexts` summaries into `k` slots.
pub fn flops_pool(n: usize, contexts: usize, k: usize, d: usize) -> u64 {
    let (n, m, k, d) = (n as u64, contexts as u64, k as u64, d as u64);
    flops::matmul(n, (1 + m) * d, k) + n * k * (flops::ELEMENTWISE + flops::SOFTMAX) + flops::matmul(k, n, d)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub wiring: Wiring,
    pub lengths: Lengths,
    pub k_tokens: usize,
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    /// Patch projections and text embedding sums.
    pub embeddings: u64,
    pub pools: u64,
    pub textual_encoder: u64,
    /// Both visual passes when the second pass is wired.
    pub visual_encoder: u64,
    pub acoustic_encoder: u64,
    pub fusion: u64,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.embeddings + self.pools + self.textual_encoder + self.visual_encoder + self.acoustic_encoder + self.fusion
    }
}

/// Forward FLOPs of a whole model. `config.k_tokens` is `K`.
pub fn flops_model(wiring: Wiring, lengths: Lengths, config: &ModelConfig) -> FlopsReport {
    let ModelConfig {
        d,
        heads,
        layers,
        k_tokens: k,
        classes,
        ..
    } = *config;
    let (du, c) = (d as u64, classes as u64);
    let embed = |n: usize, dim: usize| flops::matmul(n as u64, dim as u64, du) + n as u64 * du * flops::ELEMENTWISE;
    let embeddings = embed(lengths.q, config.visual_patch_dim)
        + embed(lengths.m, config.acoustic_patch_dim)
        + 2 * lengths.text as u64 * du * flops::ELEMENTWISE;
    let enc = |n: usize| flops_encoder(n, d, heads, layers);
    let (pools, visual_encoder, acoustic_encoder) = if wiring.pooling {
        let mut pools = flops_pool(lengths.q, 1, k, d) + flops_pool(lengths.m, 2, k, d);
        let mut visual = enc(k);
        if wiring.second_visual_pass {
            pools += flops_pool(lengths.q, 2, k, d);
            visual += enc(k);
        }
        (pools, visual, enc(k))
    } else {
        (0, enc(lengths.q), enc(lengths.m))
    };
    let head = |inputs: u64| flops::matmul(1, inputs, c) + c * flops::ELEMENTWISE;
    let heads_used = if wiring.feature_fusion { 4 } else { 3 };
    let fusion = 3 * head(du) + if wiring.feature_fusion { head(3 * du) } else { 0 } + flops::matmul(c, heads_used, 1);
    FlopsReport {
        wiring,
        lengths,
        k_tokens: k,
        d,
        heads,
        head_dim: config.head_dim,
        layers,
        embeddings,
        pools,
        textual_encoder: enc(lengths.text),
        visual_encoder,
        acoustic_encoder,
        fusion,
    }
}

/// Wall-clock statistics over `runs` forward+backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeStats {
    pub runs: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

/// Times `runs` forward+backward passes after [`WARMUP_RUNS`] untimed ones.
/// The standard deviation is the population value, so one run gives zero.
pub fn bench_time(model: &Model<f32>, input: &SampleInput<f32>, label: &[f32], runs: usize) -> Result<TimeStats> {
    if runs == 0 {
        return Err(Error::validation("bench needs at least one run"));
    }
    let once = || -> Result<f64> {
        let start = Instant::now();
        let mut tape = Tape::with_params(&model.params);
        let (loss, _) = model.loss(&mut tape, input, label)?;
        let grads = tape.backward(loss);
        std::hint::black_box(&grads);
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..WARMUP_RUNS {
        once()?;
    }
    let times = (0..runs).map(|_| once()).collect::<Result<Vec<_>>>()?;
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / runs as f64;
    Ok(TimeStats {
        runs,
        mean_s: mean,
        std_s: var.sqrt(),
    })
}

/// Peak tensor bytes the tape holds across one forward+backward pass.
pub fn bench_memory(model: &Model<f32>, input: &SampleInput<f32>, label: &[f32]) -> Result<usize> {
    let mut tape = Tape::with_params(&model.params);
    let (loss, _) = model.loss(&mut tape, input, label)?;
    tape.backward(loss);
    Ok(tape.peak_bytes())
}

/// Random patches, ids and label of the requested lengths.
pub fn random_sample(config: &ModelConfig, lengths: Lengths, seed: u64) -> (SampleInput<f32>, Vec<f32>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bench.input"));
    let visual = Tensor::randn([lengths.q, config.visual_patch_dim], 1.0, &mut rng);
    let acoustic = Tensor::randn([lengths.m, config.acoustic_patch_dim], 1.0, &mut rng);
    let text = (0..lengths.text).map(|_| rng.random_range(0..config.vocab)).collect();
    let label = (0..config.classes)
        .map(|_| f32::from(u8::from(rng.random_bool(0.5))))
        .collect();
    (SampleInput { visual, acoustic, text }, label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Flops,
    Time,
    Memory,
}

/// One CSV row. Columns that the mode does not measure stay empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub k_tokens: usize,
    pub lengths: Lengths,
    pub flops_total: u64,
    pub time: Option<TimeStats>,
    pub peak_bytes: Option<usize>,
    /// `flops(no_attention) / flops(this row)` at the same lengths.
    pub flops_ratio: f64,
}

/// Runs every `(variant, K)` pair. Models are built only for time and
/// memory modes; FLOP rows are closed-form.
pub fn run_bench(
    mode: BenchMode,
    variants: &[&str],
    ks: &[usize],
    lengths: Lengths,
    base: &ModelConfig,
    runs: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let baseline_wiring = variant::<f32>("no_attention")?.wiring();
    for &name in variants {
        let v = variant::<f32>(name)?;
        for &k in ks {
            let config = ModelConfig {
                k_tokens: k,
                max_tokens: base.max_tokens.max(k),
                ..*base
            };
            config.validate()?;
            let report = flops_model(v.wiring(), lengths, &config);
            let baseline = flops_model(baseline_wiring, lengths, &config);
            let mut row = BenchRow {
                variant: name.to_string(),
                k_tokens: k,
                lengths,
                flops_total: report.total(),
                time: None,
                peak_bytes: None,
                flops_ratio: baseline.total() as f64 / report.total() as f64,
            };
            if mode != BenchMode::Flops {
                let model = Model::<f32>::new(config, v.clone(), seed)?;
                let (input, label) = random_sample(&config, lengths, seed);
                match mode {
                    BenchMode::Time => row.time = Some(bench_time(&model, &input, &label, runs)?),
                    BenchMode::Memory => row.peak_bytes = Some(bench_memory(&model, &input, &label)?),
                    BenchMode::Flops => {}
                }
            }
            log::info!("bench {name} K={k}: {} flops", row.flops_total);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `variant,K,Q,M,flops_total,time_mean_s,time_std_s,peak_bytes,flops_ratio`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,K,Q,M,flops_total,time_mean_s,time_std_s,peak_bytes,flops_ratio\n");
    for r in rows {
        let (mean, std) = r.time.map_or((String::new(), String::new()), |t| {
            (format!("{:.6e}", t.mean_s), format!("{:.6e}", t.std_s))
        });
        let peak = r.peak_bytes.map_or(String::new(), |b| b.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{mean},{std},{peak},{:.4}",
            r.variant, r.k_tokens, r.lengths.q, r.lengths.m, r.flops_total, r.flops_ratio
        );
    }
    out
}

/// The 768-wide, 12-layer configuration with 16-pixel RGB patches and
/// 128-bin temporal acoustic patches.
pub fn full_scale_config(k_tokens: usize, lengths: Lengths) -> ModelConfig {
    ModelConfig {
        d: 768,
        heads: 12,
        head_dim: 64,
        layers: 12,
        k_tokens,
        max_tokens: lengths.q.max(lengths.m).max(lengths.text).max(k_tokens),
        classes: 6,
        vocab: 1000,
        text_max_len: lengths.text,
        visual_patch_dim: 16 * 16 * 3,
        acoustic_patch_dim: 128 * 2,
    }
}

/// Width 64, 4 heads of 16, 4 layers; same patch geometry as the full scale.
pub fn desk_bench_config(k_tokens: usize, lengths: Lengths) -> ModelConfig {
    ModelConfig {
        d: 64,
        heads: 4,
        head_dim: 16,
        layers: 4,
        ..full_scale_config(k_tokens, lengths)
    }
}

/// `Q = 576`, `M = 512`, `N_text = 300`.
pub const FULL_SCALE_LENGTHS: Lengths = Lengths {
    q: 576,
    m: 512,
    text: 300,
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_single_token_block() {
        // N' = 2: matmuls 6·2 + 4·4 + 2·2 + 16·2 = 64; elementwise 55·2 + 6·4 = 134.
        let b = flops_attention_block(1, 1, 1, 1);
        assert_eq!((b.matmul, b.elementwise), (64, 134));
    }

    #[test]
    fn components_sum_to_total() {
        let cfg = full_scale_config(32, FULL_SCALE_LENGTHS);
        let full = variant::<f32>("full").unwrap().wiring();
        let r = flops_model(full, FULL_SCALE_LENGTHS, &cfg);
        assert_eq!(
            r.total(),
            r.embeddings + r.pools + r.textual_encoder + r.visual_encoder + r.acoustic_encoder + r.fusion
        );
    }

    #[test]
    fn csv_has_one_row_per_pair() {
        let cfg = desk_bench_config(8, FULL_SCALE_LENGTHS);
        let rows = run_bench(
            BenchMode::Flops,
            &["full", "no_attention"],
            &[8, 16],
            FULL_SCALE_LENGTHS,
            &cfg,
            1,
            0,
        )
        .unwrap();
        assert_eq!(bench_csv(&rows).lines().count(), 1 + 4);
    }
}
