//! The gradient-check suite: every differentiable primitive plus a tiny
//! end-to-end model, all in 64-bit.
//!
//! Each check reduces its output to a scalar through a fixed random
//! projection, so no coordinate of the Jacobian is hidden by symmetry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, TransformerConfig};
use crate::error::Result;
use crate::featurization::{Modality, TokenSequence};
use crate::model::{Model, ModelConfig, SampleInput};
use crate::numerics::{grad_check, Fault, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use crate::pooling::{attend_pool, PassTag, PoolParams};
use crate::seed::derive_seed;
use crate::variants::variant;

/// Relative tolerance of the suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

type Builder = fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Box<dyn Fn(&mut Tape<'_, f64>) -> Result<Var>>;

/// `sum(x ⊙ r)` for a fixed random `r`.
fn project(tape: &mut Tape<'_, f64>, x: Var, r: &Tensor<f64>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = tape.constant(r.clone().reshape(shape)?);
    let y = tape.mul(x, r)?;
    Ok(tape.sum(y))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn add(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, randn(rng, shape))
}

macro_rules! unary {
    ($shape:expr, |$tape:ident, $x:ident| $body:expr) => {{
        let f: Builder = |store, rng| {
            let id = add(store, rng, "x", &$shape);
            let probe = {
                let mut tape = Tape::with_params(store);
                let $x = tape.param(id);
                let $tape = &mut tape;
                let y: Var = $body.expect("probe shape");
                tape.value(y).len()
            };
            let r = randn(rng, &[probe]);
            Box::new(move |$tape: &mut Tape<'_, f64>| {
                let $x = $tape.param(id);
                let y: Var = $body?;
                project($tape, y, &r)
            })
        };
        f
    }};
}

macro_rules! binary {
    ($sa:expr, $sb:expr, |$tape:ident, $a:ident, $b:ident| $body:expr) => {{
        let f: Builder = |store, rng| {
            let ia = add(store, rng, "a", &$sa);
            let ib = add(store, rng, "b", &$sb);
            let probe = {
                let mut tape = Tape::with_params(store);
                let ($a, $b) = (tape.param(ia), tape.param(ib));
                let $tape = &mut tape;
                let y: Var = $body.expect("probe shape");
                tape.value(y).len()
            };
            let r = randn(rng, &[probe]);
            Box::new(move |$tape: &mut Tape<'_, f64>| {
                let ($a, $b) = ($tape.param(ia), $tape.param(ib));
                let y: Var = $body?;
                project($tape, y, &r)
            })
        };
        f
    }};
}

fn checks() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", binary!([3, 4], [4, 2], |t, a, b| t.matmul(a, b))),
        ("matmul_tn", binary!([4, 3], [4, 2], |t, a, b| t.matmul_tn(a, b))),
        ("matmul_nt", binary!([3, 4], [2, 4], |t, a, b| t.matmul_nt(a, b))),
        ("add", binary!([3, 4], [3, 4], |t, a, b| t.add(a, b))),
        ("mul", binary!([3, 4], [3, 4], |t, a, b| t.mul(a, b))),
        ("add_bias", binary!([3, 4], [4], |t, a, b| t.add_bias(a, b))),
        ("scale", unary!([3, 4], |t, x| Ok::<_, crate::Error>(t.scale(x, 0.7)))),
        ("softmax_rows", unary!([3, 5], |t, x| t.softmax(x, 1))),
        ("softmax_columns", unary!([5, 3], |t, x| t.softmax(x, 0))),
        ("layer_norm", {
            let f: Builder = |store, rng| {
                let x = add(store, rng, "x", &[3, 5]);
                let g = add(store, rng, "gamma", &[5]);
                let b = add(store, rng, "beta", &[5]);
                let r = randn(rng, &[15]);
                Box::new(move |t: &mut Tape<'_, f64>| {
                    let (x, g, b) = (t.param(x), t.param(g), t.param(b));
                    let y = t.layer_norm(x, g, b, LN_EPS)?;
                    project(t, y, &r)
                })
            };
            f
        }),
        ("gelu", unary!([4, 5], |t, x| Ok::<_, crate::Error>(t.gelu(x)))),
        (
            "concat_cols",
            binary!([3, 2], [3, 4], |t, a, b| t.concat_cols(&[a, b, a])),
        ),
        ("concat_rows", binary!([2, 3], [4, 3], |t, a, b| t.concat_rows(&[b, a]))),
        ("repeat_rows", unary!([1, 4], |t, x| t.repeat_rows(x, 3))),
        ("slice_rows", unary!([5, 3], |t, x| t.slice_rows(x, 1, 3))),
        ("slice_cols", unary!([3, 5], |t, x| t.slice_cols(x, 2, 2))),
        ("reshape", unary!([3, 4], |t, x| t.reshape(x, [2, 6]))),
        ("sum", unary!([3, 4], |t, x| Ok::<_, crate::Error>(t.sum(x)))),
        ("gather_rows", unary!([5, 3], |t, x| t.gather_rows(x, &[4, 0, 4, 2]))),
        ("bce_with_logits", {
            let f: Builder = |store, rng| {
                let z = add(store, rng, "z", &[1, 5]);
                let targets: Vec<f64> = (0..5).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
                Box::new(move |t: &mut Tape<'_, f64>| {
                    let z = t.param(z);
                    t.bce_with_logits(z, &targets)
                })
            };
            f
        }),
        ("attend_pool", {
            // bce(softmax-pooled tokens) on 3 tokens, d = 2.
            let f: Builder = |store, rng| {
                let tokens = add(store, rng, "tokens", &[3, 2]);
                let ctx = add(store, rng, "context", &[1, 2]);
                let pool = PoolParams::new(store, "pool", 2, 1, 2, rng).expect("valid pool");
                *store.get_mut(pool.weight) = randn(rng, &[4, 2]);
                *store.get_mut(pool.bias) = randn(rng, &[2]);
                Box::new(move |t: &mut Tape<'_, f64>| {
                    let seq = TokenSequence {
                        tokens: t.param(tokens),
                        modality: Modality::Visual,
                        len: 3,
                    };
                    let ctx = crate::encoder::SummaryVector {
                        value: t.param(ctx),
                        modality: Modality::Textual,
                    };
                    let pooled = attend_pool(t, &seq, &[ctx], &pool, PassTag::VisualPass1)?;
                    let flat = t.reshape(pooled.tokens, [1, 4])?;
                    t.bce_with_logits(flat, &[1.0, 0.0, 0.0, 1.0])
                })
            };
            f
        }),
        ("encoder", {
            let f: Builder = |store, rng| {
                let cfg = TransformerConfig {
                    d: 8,
                    heads: 2,
                    head_dim: 4,
                    layers: 2,
                    max_tokens: 4,
                };
                let enc = Encoder::new(store, "enc", cfg, rng).expect("valid encoder");
                enlarge(store, rng);
                let tokens = add(store, rng, "tokens", &[4, 8]);
                let r = randn(rng, &[8]);
                Box::new(move |t: &mut Tape<'_, f64>| {
                    let seq = TokenSequence {
                        tokens: t.param(tokens),
                        modality: Modality::Visual,
                        len: 4,
                    };
                    let out = enc.encode(t, &seq)?;
                    project(t, out.summary.value, &r)
                })
            };
            f
        }),
    ]
}

/// Raises weights from the 0.02 init to unit scale so the check exercises
/// non-linear regimes.
fn enlarge(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let scale = if store.name(id).ends_with("gamma") { 0.3 } else { 0.5 };
        let noise = Tensor::randn(shape, scale, rng);
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(p, n)| *p += n);
    }
}

/// Tiny model: `d = 8`, `K = 2`, `L = 1`, `Q = M = 4`, `N_text = 4`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        head_dim: 4,
        layers: 1,
        k_tokens: 2,
        max_tokens: 4,
        classes: 3,
        vocab: 10,
        text_max_len: 4,
        visual_patch_dim: 6,
        acoustic_patch_dim: 4,
    }
}

fn model_check(name: &str, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let config = tiny_model_config();
    let model = Model::<f64>::new(config, variant(name)?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck.model.input"));
    let mut store = model.params.clone();
    enlarge(&mut store, &mut rng);
    let input = SampleInput {
        visual: Tensor::randn([4, config.visual_patch_dim], 1.0, &mut rng),
        acoustic: Tensor::randn([4, config.acoustic_patch_dim], 1.0, &mut rng),
        text: (0..4).map(|_| rng.random_range(0..config.vocab)).collect(),
    };
    let label = [1.0, 0.0, 1.0];
    grad_check(
        format!("model_{name}"),
        &mut store,
        |tape| Ok(model.loss(tape, &input, &label)?.0),
        GRADCHECK_TOLERANCE,
        fault,
    )
}

/// Runs every check with one seed. `fault` is injected into the analytic
/// pass of every check.
pub fn gradcheck_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (name, build) in checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("gradcheck.{name}")));
        let mut store = ParamStore::new();
        let f = build(&mut store, &mut rng);
        reports.push(grad_check(name, &mut store, f, GRADCHECK_TOLERANCE, fault)?);
    }
    for name in ["full", "no_two_pass", "no_attention", "no_feature_fusion"] {
        reports.push(model_check(name, seed, fault)?);
    }
    Ok(reports)
}

/// Primitive checks only, for repeated randomized runs.
pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    checks()
        .into_iter()
        .filter(|(name, _)| !matches!(*name, "encoder" | "attend_pool"))
        .map(|(name, build)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("gradcheck.{name}")));
            let mut store = ParamStore::new();
            let f = build(&mut store, &mut rng);
            grad_check(name, &mut store, f, GRADCHECK_TOLERANCE, None)
        })
        .collect()
}

/// `op,coords,max_rel_error,status` table.
pub fn report_table(reports: &[GradCheckReport]) -> String {
    let mut out = format!("{:<20} {:>7} {:>14}  status\n", "op", "coords", "max_rel_error");
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:>7} {:>14.3e}  {}\n",
            r.name,
            r.coords_checked,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
