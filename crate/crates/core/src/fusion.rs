//! Per-modality heads, tri-modal feature fusion and decision fusion.

use rand::Rng;

use crate::encoder::SummaryVector;
use crate::error::{Error, Result};
use crate::featurization::INIT_STD;
use crate::numerics::{sigmoid, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Head {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inputs: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Head {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn([inputs, classes], INIT_STD, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([classes])),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub visual: Head,
    pub acoustic: Head,
    pub textual: Head,
    /// `3d -> C` over `[v; a; v_l]`; absent when feature fusion is ablated.
    pub fusion: Option<Head>,
    /// `4 x 1` (or `3 x 1` without fusion), rows ordered `p_v, p_a, p_l, p_fusion`.
    pub decision: ParamId,
    pub d: usize,
    pub classes: usize,
}

impl FusionParams {
    /// Heads start at `normal(0, 0.02)` and the decision weights at a uniform
    /// average, so every head receives gradient from the first step.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        classes: usize,
        feature_fusion: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::validation(format!("need at least 2 classes, got {classes}")));
        }
        let visual = Head::new(store, &format!("{prefix}.visual"), d, classes, rng);
        let acoustic = Head::new(store, &format!("{prefix}.acoustic"), d, classes, rng);
        let textual = Head::new(store, &format!("{prefix}.textual"), d, classes, rng);
        let fusion = feature_fusion.then(|| Head::new(store, &format!("{prefix}.fusion"), 3 * d, classes, rng));
        let heads = if feature_fusion { 4 } else { 3 };
        let decision = store.add(
            format!("{prefix}.decision"),
            Tensor::full([heads, 1], T::of(1.0 / heads as f64)),
        );
        Ok(FusionParams {
            visual,
            acoustic,
            textual,
            fusion,
            decision,
            d,
            classes,
        })
    }

    pub fn head_count(&self) -> usize {
        if self.fusion.is_some() {
            4
        } else {
            3
        }
    }
}

/// Logit vectors, each `1 x C`, plus the final `p`.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub p_v: Var,
    pub p_a: Var,
    pub p_l: Var,
    pub p_fusion: Option<Var>,
    pub p: Var,
}

pub fn fuse<T: Real>(
    tape: &mut Tape<'_, T>,
    v: SummaryVector,
    a: SummaryVector,
    v_l: SummaryVector,
    params: &FusionParams,
) -> Result<Predictions> {
    for s in [v, a, v_l] {
        if tape.value(s.value).len() != params.d {
            return Err(Error::Dimension {
                op: "fuse",
                lhs: tape.shape(s.value).to_vec(),
                rhs: vec![1, params.d],
            });
        }
    }
    let p_v = params.visual.apply(tape, v.value)?;
    let p_a = params.acoustic.apply(tape, a.value)?;
    let p_l = params.textual.apply(tape, v_l.value)?;
    let p_fusion = match &params.fusion {
        Some(head) => {
            let joint = tape.concat_cols(&[v.value, a.value, v_l.value])?;
            Some(head.apply(tape, joint)?)
        }
        None => None,
    };
    let mut rows = vec![p_v, p_a, p_l];
    rows.extend(p_fusion);
    let stacked = tape.concat_rows(&rows)?;
    let w = tape.param(params.decision);
    let combined = tape.matmul_tn(stacked, w)?;
    let p = tape.reshape(combined, [1, params.classes])?;
    Ok(Predictions {
        p_v,
        p_a,
        p_l,
        p_fusion,
        p,
    })
}

/// `1` where `sigmoid(logit) >= threshold`; ties are positive.
pub fn predict_labels(logits: &[f64], threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(logits.iter().map(|&z| u8::from(sigmoid(z) >= threshold)).collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::featurization::Modality;

    #[test]
    fn tie_threshold_is_inclusive() {
        assert_eq!(predict_labels(&[0.0, 0.0], 0.5).unwrap(), vec![1, 1]);
        assert_eq!(predict_labels(&[-50.0, 50.0], 0.5).unwrap(), vec![0, 1]);
        assert!(predict_labels(&[0.0], 1.0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FusionParams::new(&mut store, "head", 4, 3, true, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::with_params(&store);
        let s = |tape: &mut Tape<'_, f64>, rng: &mut ChaCha8Rng| SummaryVector {
            value: tape.constant(Tensor::randn([1, 4], 1.0, rng)),
            modality: Modality::Visual,
        };
        let (v, a, l) = (s(&mut tape, &mut rng), s(&mut tape, &mut rng), s(&mut tape, &mut rng));
        let out = fuse(&mut tape, v, a, l, &params).unwrap();
        assert_eq!(tape.value(out.p), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mismatched_summary_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = FusionParams::new(&mut store, "head", 4, 2, false, &mut rng).unwrap();
        assert_eq!(params.head_count(), 3);
        assert_eq!(store.get(params.decision).shape(), &[3, 1]);
        let mut tape = Tape::with_params(&store);
        let good = SummaryVector {
            value: tape.constant(Tensor::zeros([1, 4])),
            modality: Modality::Visual,
        };
        let bad = SummaryVector {
            value: tape.constant(Tensor::zeros([1, 5])),
            modality: Modality::Acoustic,
        };
        assert!(fuse(&mut tape, good, bad, good, &params).is_err());
        assert!(FusionParams::new(&mut store, "x", 4, 1, true, &mut rng).is_err());
    }
}
