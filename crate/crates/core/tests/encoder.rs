use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tripool::encoder::{msa, Encoder, LayerParams, TransformerConfig};
use tripool::featurization::{Modality, TokenSequence};
use tripool::numerics::{gelu_value, ParamStore, Tape, Tensor, LN_EPS};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn naive_msa(x: &Mat, w_qkv: &Mat, w_msa: &Mat, heads: usize, dh: usize) -> Mat {
    let d = heads * dh;
    let qkv = mm(x, w_qkv);
    let n = x.len();
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = (0..n).map(|j| e[j] / z * qkv[j][2 * d + h * dh + c]).sum();
            }
        }
    }
    mm(&concat, w_msa)
}

fn naive_ln(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

/// Straight-line re-implementation of the encoder from its parameters.
fn naive_encode(store: &ParamStore<f64>, enc: &Encoder, tokens: &Mat) -> Mat {
    let c = enc.config;
    let pos = mat(store.get(enc.pos));
    let mut z: Mat = std::iter::once(store.get(enc.cls).data().to_vec())
        .chain(tokens.iter().cloned())
        .collect();
    z = add(&z, &pos[..z.len()].to_vec());
    let get = |id| mat(store.get(id));
    let vec_of = |id| store.get(id).data().to_vec();
    for l in &enc.layers {
        let normed = naive_ln(&z, &vec_of(l.ln1_gamma), &vec_of(l.ln1_beta));
        let attended = naive_msa(&normed, &get(l.w_qkv), &get(l.w_msa), c.heads, c.head_dim);
        let mid = add(&attended, &z);
        let normed = naive_ln(&mid, &vec_of(l.ln2_gamma), &vec_of(l.ln2_beta));
        let hidden: Mat = add_row(&mm(&normed, &get(l.w1)), &vec_of(l.b1))
            .into_iter()
            .map(|r| r.into_iter().map(gelu_value).collect())
            .collect();
        let fed = add_row(&mm(&hidden, &get(l.w2)), &vec_of(l.b2));
        z = add(&fed, &mid);
    }
    z
}

/// Randomizes every parameter at unit scale so the oracle comparison
/// exercises non-trivial attention patterns.
fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn close(a: &Mat, b: &[f64], tol: f64) -> bool {
    a.iter().flatten().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
pub fn msa_matches_loop_oracle_on_100_instances() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(1..4);
        let dh = rng.random_range(1..5);
        let n = rng.random_range(1..8);
        let config = TransformerConfig {
            d: heads * dh,
            heads,
            head_dim: dh,
            layers: 1,
            max_tokens: n,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = LayerParams::new(&mut store, "l", config.d, &mut rng);
        randomize(&mut store, &mut rng);
        let x = Tensor::<f64>::randn([n, config.d], 1.0, &mut rng);
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let out = msa(&mut tape, xv, &layer, &config).unwrap();
        let expect = naive_msa(
            &mat(&x),
            &mat(store.get(layer.w_qkv)),
            &mat(store.get(layer.w_msa)),
            heads,
            dh,
        );
        assert!(close(&expect, tape.value(out), 1e-10), "seed {seed}");
    }
}

fn build(config: TransformerConfig, seed: u64) -> (ParamStore<f64>, Encoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", config, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    (store, enc)
}

fn encode(store: &ParamStore<f64>, enc: &Encoder, x: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::with_params(store);
    let tokens = tape.constant(x.clone());
    let seq = TokenSequence {
        tokens,
        modality: Modality::Visual,
        len: x.rows(),
    };
    let out = enc.encode(&mut tape, &seq).unwrap();
    tape.value(out.states).to_vec()
}

#[test]
fn single_layer_two_token_encoder_matches_straight_line_oracle() {
    let config = TransformerConfig {
        d: 4,
        heads: 2,
        head_dim: 2,
        layers: 1,
        max_tokens: 2,
    };
    for seed in 0..20 {
        let (store, enc) = build(config, seed);
        let x = Tensor::<f64>::randn([2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let got = encode(&store, &enc, &x);
        assert!(close(&naive_encode(&store, &enc, &mat(&x)), &got, 1e-10), "seed {seed}");
    }
}

#[test]
fn deeper_encoders_match_oracle() {
    let config = TransformerConfig {
        d: 6,
        heads: 3,
        head_dim: 2,
        layers: 3,
        max_tokens: 7,
    };
    for seed in 0..10 {
        let (store, enc) = build(config, seed);
        let x = Tensor::<f64>::randn([5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 7));
        assert!(close(
            &naive_encode(&store, &enc, &mat(&x)),
            &encode(&store, &enc, &x),
            1e-10
        ));
    }
}

#[test]
fn summary_is_permutation_invariant_without_positions() {
    let config = TransformerConfig {
        d: 8,
        heads: 2,
        head_dim: 4,
        layers: 2,
        max_tokens: 6,
    };
    let (mut store, enc) = build(config, 3);
    *store.get_mut(enc.pos) = Tensor::zeros([7, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::randn([6, 8], 1.0, &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = Tensor::from_fn([6, 8], |i| x.at(perm[i / 8], i % 8));
    let a = encode(&store, &enc, &x);
    let b = encode(&store, &enc, &permuted);
    for j in 0..8 {
        assert!((a[j] - b[j]).abs() <= 1e-10);
    }
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((b[(i + 1) * 8 + j] - a[(p + 1) * 8 + j]).abs() <= 1e-10);
        }
    }
}

#[test]
fn msa_is_permutation_equivariant() {
    let config = TransformerConfig {
        d: 6,
        heads: 2,
        head_dim: 3,
        layers: 1,
        max_tokens: 5,
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = LayerParams::new(&mut store, "l", 6, &mut rng);
        randomize(&mut store, &mut rng);
        let x = Tensor::<f64>::randn([5, 6], 1.0, &mut rng);
        let perm = [4, 2, 0, 3, 1];
        let px = Tensor::from_fn([5, 6], |i| x.at(perm[i / 6], i % 6));
        let mut tape = Tape::with_params(&store);
        let (a, b) = (tape.constant(x), tape.constant(px));
        let ya = msa(&mut tape, a, &layer, &config).unwrap();
        let yb = msa(&mut tape, b, &layer, &config).unwrap();
        let (ya, yb) = (tape.value(ya).to_vec(), tape.value(yb).to_vec());
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..6 {
                assert!((yb[i * 6 + j] - ya[p * 6 + j]).abs() <= 1e-12);
            }
        }
    }
}
