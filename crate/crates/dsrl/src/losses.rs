//! Auxiliary objectives and the total training objective.
//!
//! * similarity: normalized L1 distance between semantic features and the
//!   embedded knowledge mask, averaged over samples with a usable mask;
//! * transition: squared L2 error of the motion predictor against the next
//!   motion features, which are held as data;
//! * reward: L1 (or optionally L2) error of the reward head;
//! * total: weighted sum of all components with per-term reporting.

use thiserror::Error;

use crate::nn::{Mlp, ParamId, ParamStore, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Denominators at or below this are treated as degenerate empty-scene masks.
pub const SIMILARITY_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite loss component: {0}")]
    NonFinite(&'static str),
}

/// Norm used by the reward prediction loss.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNorm {
    L1,
    L2,
}

/// Motion predictor and reward head.
pub struct PredictorHeads {
    pub motion_predictor: Mlp,
    pub reward_head: Mlp,
}

impl PredictorHeads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        compact_dim: usize,
        fused_dim: usize,
        action_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            motion_predictor: Mlp::new(
                store,
                rng,
                "predictor.motion",
                &[compact_dim + action_dim, hidden, hidden, compact_dim],
            ),
            reward_head: Mlp::new(
                store,
                rng,
                "predictor.reward",
                &[fused_dim + action_dim, hidden, hidden, 1],
            ),
        }
    }

    /// Predicted next motion features from `[f_m, action]`.
    pub fn predict_motion(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_mot: Var,
        actions: Var,
        trainable: bool,
    ) -> Var {
        let joined = tape.concat_cols(f_mot, actions);
        self.motion_predictor.forward(tape, store, joined, trainable)
    }

    /// Predicted reward from `[f, action]`.
    pub fn predict_reward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: Var,
        actions: Var,
        trainable: bool,
    ) -> Var {
        let joined = tape.concat_cols(fused, actions);
        self.reward_head.forward(tape, store, joined, trainable)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.motion_predictor.param_ids();
        ids.extend(self.reward_head.param_ids());
        ids
    }
}

/// Normalized L1 similarity between feature maps and mask embeddings:
/// mean over usable samples of |F - H|_1 / |H|_1. Samples whose mask
/// embedding has L1 norm at most [`SIMILARITY_EPS`] are excluded from the
/// mean; the second return value counts them.
pub fn similarity_loss(
    tape: &mut Tape,
    features: Var,
    mask_embed: Var,
) -> Result<(Var, usize), LossError> {
    let fs = tape.shape(features);
    let hs = tape.shape(mask_embed);
    if fs != hs {
        return Err(LossError::ShapeMismatch {
            expected: format!("{fs:?}"),
            got: format!("{hs:?}"),
        });
    }
    let b = fs[0];
    let per_sample = fs[1..].iter().product::<usize>();
    let target = tape.detach(mask_embed);
    let f2 = tape.reshape(features, &[b, per_sample]);
    let h2 = tape.reshape(target, &[b, per_sample]);
    let diff = tape.sub(f2, h2);
    let num_abs = tape.abs(diff);
    let num = tape.sum_cols(num_abs);
    let den_abs = tape.abs(h2);
    let den = tape.sum_cols(den_abs);

    // Per-sample weights from the denominator values: skip degenerate masks
    // and bump their denominator so the quotient stays finite.
    let den_vals = tape.value(den).clone();
    let mut weights = ArrayD::<f64>::zeros(IxDyn(&[b, 1]));
    let mut bump = ArrayD::<f64>::zeros(IxDyn(&[b, 1]));
    let mut valid = 0usize;
    for i in 0..b {
        if den_vals[[i, 1 - 1]] > SIMILARITY_EPS {
            valid += 1;
        } else {
            bump[[i, 0]] = 1.0;
        }
    }
    let skipped = b - valid;
    if valid == 0 {
        return Ok((tape.scalar_const(0.0), skipped));
    }
    for i in 0..b {
        if den_vals[[i, 0]] > SIMILARITY_EPS {
            weights[[i, 0]] = 1.0 / valid as f64;
        }
    }
    let bump_c = tape.constant(bump);
    let den_safe = tape.add(den, bump_c);
    let ratio = tape.div(num, den_safe);
    let w = tape.constant(weights);
    let weighted = tape.mul(ratio, w);
    Ok((tape.sum_all(weighted), skipped))
}

/// Squared L2 transition error per sample, averaged over the batch. The
/// target is detached: gradients reach the predictor and the features at
/// time t, never the next-step features.
pub fn transition_loss(tape: &mut Tape, predicted: Var, target: Var) -> Result<Var, LossError> {
    check_same(tape, predicted, target)?;
    let t = tape.detach(target);
    let diff = tape.sub(predicted, t);
    let sq = tape.square(diff);
    let per_sample = tape.sum_cols(sq);
    Ok(tape.mean_all(per_sample))
}

/// Reward prediction error, mean over the batch.
pub fn reward_loss(
    tape: &mut Tape,
    predicted: Var,
    rewards: Var,
    norm: RewardNorm,
) -> Result<Var, LossError> {
    check_same(tape, predicted, rewards)?;
    let r = tape.detach(rewards);
    let diff = tape.sub(predicted, r);
    Ok(match norm {
        RewardNorm::L1 => {
            let a = tape.abs(diff);
            tape.mean_all(a)
        }
        RewardNorm::L2 => {
            let s = tape.square(diff);
            tape.mean_all(s)
        }
    })
}

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<(), LossError> {
    let sa = tape.shape(a);
    let sb = tape.shape(b);
    if sa != sb {
        return Err(LossError::ShapeMismatch {
            expected: format!("{sa:?}"),
            got: format!("{sb:?}"),
        });
    }
    Ok(())
}

/// Per-term weights of the total objective. All default to 1 (an unweighted
/// sum); ablations zero out excluded terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_trans: f64,
    pub w_sg: f64,
    pub w_r: f64,
    pub w_pi: f64,
    pub w_q: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_trans: 1.0,
            w_sg: 1.0,
            w_r: 1.0,
            w_pi: 1.0,
            w_q: 1.0,
        }
    }
}

/// Component terms of one update; absent terms are disabled by the ablation.
#[derive(Default, Clone, Copy)]
pub struct LossTerms {
    pub l_trans: Option<Var>,
    pub l_sg: Option<Var>,
    pub l_r: Option<Var>,
    pub l_pi: Option<Var>,
    pub l_q: Option<Var>,
}

/// Scalar values of every component plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_trans: f64,
    pub l_sg: f64,
    pub l_r: f64,
    pub l_pi: f64,
    pub l_q: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Weighted sum of all present components. Every component is checked for
/// finiteness first; the offending component is named on failure.
pub fn total_loss(
    tape: &mut Tape,
    terms: LossTerms,
    weights: LossWeights,
) -> Result<(Var, LossReport), LossError> {
    let fetch = |tape: &Tape, v: Option<Var>, name: &'static str| -> Result<f64, LossError> {
        match v {
            None => Ok(0.0),
            Some(var) => {
                let value = tape.scalar(var);
                if !value.is_finite() {
                    return Err(LossError::NonFinite(name));
                }
                Ok(value)
            }
        }
    };
    let report = LossReport {
        l_trans: fetch(tape, terms.l_trans, "transition")?,
        l_sg: fetch(tape, terms.l_sg, "similarity")?,
        l_r: fetch(tape, terms.l_r, "reward")?,
        l_pi: fetch(tape, terms.l_pi, "policy")?,
        l_q: fetch(tape, terms.l_q, "critic")?,
        total: 0.0,
        weights,
    };

    let mut acc: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, term: Option<Var>, w: f64| {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = tape.scale(t, w);
                acc = Some(match acc {
                    Some(a) => tape.add(a, scaled),
                    None => scaled,
                });
            }
        }
    };
    add_term(tape, terms.l_trans, weights.w_trans);
    add_term(tape, terms.l_sg, weights.w_sg);
    add_term(tape, terms.l_r, weights.w_r);
    add_term(tape, terms.l_pi, weights.w_pi);
    add_term(tape, terms.l_q, weights.w_q);
    let total_var = acc.unwrap_or_else(|| tape.scalar_const(0.0));
    let total = tape.scalar(total_var);
    if !total.is_finite() {
        return Err(LossError::NonFinite("total"));
    }
    Ok((
        total_var,
        LossReport {
            total,
            ..report
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_against_fd;
    use rand::SeedableRng;

    fn arr(shape: &[usize], f: impl Fn(usize) -> f64) -> ArrayD<f64> {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn similarity_identical_inputs_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(arr(&[2, 3, 2, 2], |i| (i as f64 * 0.3).sin() + 2.0));
        let (loss, skipped) = similarity_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn similarity_hand_value_two_vs_one() {
        let mut tape = Tape::new();
        let f = tape.constant(arr(&[1, 1, 1, 1], |_| 2.0));
        let h = tape.constant(arr(&[1, 1, 1, 1], |_| 1.0));
        let (loss, _) = similarity_loss(&mut tape, f, h).unwrap();
        assert_eq!(tape.scalar(loss), 1.0); // |2-1| / |1|
    }

    #[test]
    fn similarity_joint_scaling_invariance() {
        let base_f = arr(&[2, 2, 2, 2], |i| (i as f64 * 0.7).sin());
        let base_h = arr(&[2, 2, 2, 2], |i| (i as f64 * 0.4).cos() + 0.3);
        let eval = |c: f64| {
            let mut tape = Tape::new();
            let f = tape.constant(base_f.mapv(|v| v * c));
            let h = tape.constant(base_h.mapv(|v| v * c));
            let (loss, _) = similarity_loss(&mut tape, f, h).unwrap();
            tape.scalar(loss)
        };
        let l1 = eval(1.0);
        let lc = eval(std::f64::consts::PI);
        assert!((l1 - lc).abs() / l1.abs() < 1e-6, "{l1} vs {lc}");
    }

    #[test]
    fn similarity_skips_degenerate_masks() {
        let mut tape = Tape::new();
        // Sample 0 has a zero mask embedding; sample 1 is informative.
        let mut h = arr(&[2, 1, 2, 2], |_| 0.0);
        for k in 0..4 {
            h[[1, 0, k / 2, k % 2]] = 1.0;
        }
        let f = arr(&[2, 1, 2, 2], |_| 2.0);
        let fv = tape.constant(f);
        let hv = tape.constant(h);
        let (loss, skipped) = similarity_loss(&mut tape, fv, hv).unwrap();
        assert_eq!(skipped, 1);
        // Only sample 1 counts: |2-1|*4 / 4 = 1.
        assert!((tape.scalar(loss) - 1.0).abs() < 1e-12);
        assert!(tape.scalar(loss).is_finite());
    }

    #[test]
    fn similarity_all_degenerate_returns_zero_with_count() {
        let mut tape = Tape::new();
        let f = tape.constant(arr(&[3, 1, 2, 2], |i| i as f64));
        let h = tape.constant(arr(&[3, 1, 2, 2], |_| 0.0));
        let (loss, skipped) = similarity_loss(&mut tape, f, h).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
        assert_eq!(skipped, 3);
    }

    #[test]
    fn transition_zero_and_unit_cases() {
        let mut tape = Tape::new();
        let p = tape.constant(arr(&[1, 4], |i| i as f64));
        let same = tape.constant(arr(&[1, 4], |i| i as f64));
        let l0 = transition_loss(&mut tape, p, same).unwrap();
        assert_eq!(tape.scalar(l0), 0.0);

        // One coordinate off by exactly 1.
        let mut off = arr(&[1, 4], |i| i as f64);
        off[[0, 2]] += 1.0;
        let t = tape.constant(off);
        let l1 = transition_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.scalar(l1), 1.0);
    }

    #[test]
    fn transition_gradient_only_depends_on_target_value() {
        // Two tapes: target as a detached computed node vs a plain constant
        // with the same value. Encoder-side gradients must match bitwise.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let heads = PredictorHeads::new(&mut store, &mut rng, 4, 8, 2, 8);
        let f_m = arr(&[3, 4], |i| (i as f64 * 0.31).sin());
        let act = arr(&[3, 2], |i| (i as f64 * 0.17).cos());
        let target_value = arr(&[3, 4], |i| (i as f64 * 0.53).sin());

        let grads_with = |via_ops: bool| {
            let mut tape = Tape::new();
            let f = tape.constant(f_m.clone());
            let a = tape.constant(act.clone());
            let pred = heads.predict_motion(&mut tape, &store, f, a, true);
            let target = if via_ops {
                // build the same value through extra ops
                let half = tape.constant(target_value.mapv(|v| v / 2.0));
                tape.scale(half, 2.0)
            } else {
                tape.constant(target_value.clone())
            };
            let loss = transition_loss(&mut tape, pred, target).unwrap();
            let g = tape.backward(loss);
            let by_param = tape.param_grads(&g);
            heads
                .motion_predictor
                .param_ids()
                .iter()
                .map(|id| by_param[id].iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        // Values are identical up to fp: v/2*2 == v exactly for these inputs.
        assert_eq!(grads_with(true), grads_with(false));
    }

    #[test]
    fn transition_gradcheck_predictor_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let heads = PredictorHeads::new(&mut store, &mut rng, 3, 6, 2, 6);
        let f_m = arr(&[4, 3], |i| (i as f64 * 0.41).sin());
        let act = arr(&[4, 2], |i| (i as f64 * 0.19).cos());
        let target = arr(&[4, 3], |i| (i as f64 * 0.29).sin());
        let ids = heads.motion_predictor.param_ids();

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let f = tape.constant(f_m.clone());
            let a = tape.constant(act.clone());
            let t = tape.constant(target.clone());
            let pred = heads.predict_motion(&mut tape, store, f, a, true);
            let loss = transition_loss(&mut tape, pred, t).unwrap();
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let f = tape.constant(f_m.clone());
        let a = tape.constant(act.clone());
        let t = tape.constant(target.clone());
        let pred = heads.predict_motion(&mut tape, &store, f, a, true);
        let loss = transition_loss(&mut tape, pred, t).unwrap();
        let grads = tape.backward(loss);
        let analytic = tape.param_grads(&grads);
        let report = check_against_fd(&mut store, &ids, &analytic, 1e-3, 1e-3, 1e-8, run);
        assert!(report.pass_fraction() >= 0.99, "worst {:?}", report.worst);
    }

    #[test]
    fn reward_loss_cases_and_gradcheck() {
        let mut tape = Tape::new();
        let p = tape.constant(arr(&[2, 1], |_| 0.0));
        let r = tape.constant(arr(&[2, 1], |_| 3.0));
        let l = reward_loss(&mut tape, p, r, RewardNorm::L1).unwrap();
        assert_eq!(tape.scalar(l), 3.0);
        let perfect = reward_loss(&mut tape, r, r, RewardNorm::L1).unwrap();
        assert_eq!(tape.scalar(perfect), 0.0);
        let l2 = reward_loss(&mut tape, p, r, RewardNorm::L2).unwrap();
        assert_eq!(tape.scalar(l2), 9.0);

        // gradcheck through the head (L2 so the loss is smooth everywhere)
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let heads = PredictorHeads::new(&mut store, &mut rng, 3, 5, 2, 6);
        let fused = arr(&[4, 5], |i| (i as f64 * 0.23).sin());
        let act = arr(&[4, 2], |i| (i as f64 * 0.11).cos());
        let rewards = arr(&[4, 1], |i| i as f64 * 0.5 - 1.0);
        let ids = heads.reward_head.param_ids();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let f = tape.constant(fused.clone());
            let a = tape.constant(act.clone());
            let rv = tape.constant(rewards.clone());
            let pred = heads.predict_reward(&mut tape, store, f, a, true);
            let loss = reward_loss(&mut tape, pred, rv, RewardNorm::L2).unwrap();
            tape.scalar(loss)
        };
        let mut tape = Tape::new();
        let f = tape.constant(fused.clone());
        let a = tape.constant(act.clone());
        let rv = tape.constant(rewards.clone());
        let pred = heads.predict_reward(&mut tape, &store, f, a, true);
        let loss = reward_loss(&mut tape, pred, rv, RewardNorm::L2).unwrap();
        let grads = tape.backward(loss);
        let analytic = tape.param_grads(&grads);
        let report = check_against_fd(&mut store, &ids, &analytic, 1e-3, 1e-3, 1e-8, run);
        assert!(report.pass_fraction() >= 0.99, "worst {:?}", report.worst);
    }

    #[test]
    fn total_loss_sums_and_reports() {
        let mut tape = Tape::new();
        let one = tape.scalar_const(1.0);
        let terms = LossTerms {
            l_trans: Some(one),
            l_sg: Some(one),
            l_r: Some(one),
            l_pi: Some(one),
            l_q: Some(one),
        };
        let (total, report) = total_loss(&mut tape, terms, LossWeights::default()).unwrap();
        assert_eq!(tape.scalar(total), 5.0);
        assert_eq!(report.total, 5.0);
        assert_eq!(report.l_pi, 1.0);

        // all zero -> zero
        let zero = tape.scalar_const(0.0);
        let terms0 = LossTerms {
            l_trans: Some(zero),
            l_sg: Some(zero),
            l_r: Some(zero),
            l_pi: Some(zero),
            l_q: Some(zero),
        };
        let (t0, _) = total_loss(&mut tape, terms0, LossWeights::default()).unwrap();
        assert_eq!(tape.scalar(t0), 0.0);
    }

    #[test]
    fn total_loss_ablation_zeroes_excluded_terms() {
        let mut tape = Tape::new();
        let one = tape.scalar_const(1.0);
        // Similarity-plus-SAC configuration: no transition term built at all.
        let terms = LossTerms {
            l_trans: None,
            l_sg: Some(one),
            l_r: Some(one),
            l_pi: Some(one),
            l_q: Some(one),
        };
        let (total, report) = total_loss(&mut tape, terms, LossWeights::default()).unwrap();
        assert_eq!(report.l_trans, 0.0);
        assert_eq!(tape.scalar(total), 4.0);
    }

    #[test]
    fn total_loss_nonfinite_names_component() {
        let mut tape = Tape::new();
        let bad = tape.scalar_const(f64::NAN);
        let ok = tape.scalar_const(1.0);
        let terms = LossTerms {
            l_trans: None,
            l_sg: None,
            l_r: Some(bad),
            l_pi: Some(ok),
            l_q: Some(ok),
        };
        let err = total_loss(&mut tape, terms, LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("reward"), "{err}");
    }
}
