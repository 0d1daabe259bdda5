//! Soft actor-critic over fused feature vectors.
//!
//! Squashed-Gaussian policy, twin critics with the minimum used for the
//! Bellman backup, exponential-moving-average target critics, and optional
//! automatic entropy temperature. Critic-loss gradients flow back into the
//! feature pipeline; the policy loss detaches the features and freezes the
//! critics, per the usual pixel-SAC convention.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Linear, Mlp, ParamId, ParamStore, Tape, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum SacError {
    #[error("non-finite features passed to the policy")]
    NonFiniteFeatures,
}

/// Entropy temperature handling.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Tune log(alpha) toward a target entropy.
    Auto,
    /// Keep alpha fixed at the given value.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct SacConfig {
    pub feature_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: AlphaMode,
    /// Target policy entropy when alpha is auto-tuned.
    pub target_entropy: f64,
}

impl SacConfig {
    pub fn new(feature_dim: usize, action_dim: usize) -> Self {
        Self {
            feature_dim,
            action_dim,
            hidden: 128,
            gamma: 0.99,
            tau: 0.01,
            alpha: AlphaMode::Auto,
            target_entropy: -(action_dim as f64),
        }
    }
}

/// Policy head: shared trunk, mean and log-std outputs.
pub struct Actor {
    trunk: Mlp,
    mean: Linear,
    log_std: Linear,
}

/// One action selection.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean_action: Vec<f64>,
    /// Pre-squash sample, mean and std, for density cross-checks.
    pub pre_squash: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub struct SacAgent {
    pub actor: Actor,
    q1: Mlp,
    q2: Mlp,
    target_q1: Mlp,
    target_q2: Mlp,
    pub log_alpha: ParamId,
    pub cfg: SacConfig,
}

impl SacAgent {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: SacConfig) -> Self {
        let trunk = Mlp::new(
            store,
            rng,
            "actor.trunk",
            &[cfg.feature_dim, cfg.hidden, cfg.hidden],
        );
        let mean = Linear::new(store, rng, "actor.mean", cfg.hidden, cfg.action_dim, 1.0);
        let log_std = Linear::new(store, rng, "actor.log_std", cfg.hidden, cfg.action_dim, 1.0);
        let qdims = [cfg.feature_dim + cfg.action_dim, cfg.hidden, cfg.hidden, 1];
        let q1 = Mlp::new(store, rng, "critic.q1", &qdims);
        let q2 = Mlp::new(store, rng, "critic.q2", &qdims);
        let target_q1 = Mlp::new(store, rng, "target.q1", &qdims);
        let target_q2 = Mlp::new(store, rng, "target.q2", &qdims);
        // Targets start as exact copies of the online critics.
        for (src, dst) in q1
            .param_ids()
            .into_iter()
            .chain(q2.param_ids())
            .zip(target_q1.param_ids().into_iter().chain(target_q2.param_ids()))
        {
            let v = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
        let alpha0 = match cfg.alpha {
            AlphaMode::Auto => 0.0, // alpha = 1 initially
            AlphaMode::Fixed(a) => a.max(1e-12).ln(),
        };
        let log_alpha = store.register("alpha.log_alpha", ArrayD::from_elem(IxDyn(&[1]), alpha0));
        Self {
            actor: Actor { trunk, mean, log_std },
            q1,
            q2,
            target_q1,
            target_q2,
            log_alpha,
            cfg,
        }
    }

    pub fn actor_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.actor.trunk.param_ids();
        ids.extend([
            self.actor.mean.w,
            self.actor.mean.b,
            self.actor.log_std.w,
            self.actor.log_std.b,
        ]);
        ids
    }

    pub fn critic_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.q1.param_ids();
        ids.extend(self.q2.param_ids());
        ids
    }

    pub fn target_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.target_q1.param_ids();
        ids.extend(self.target_q2.param_ids());
        ids
    }

    /// Current entropy temperature.
    pub fn alpha(&self, store: &ParamStore) -> f64 {
        store.value(self.log_alpha)[0].exp()
    }

    /// Policy distribution parameters for a feature batch.
    fn policy_params(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        trainable: bool,
    ) -> (Var, Var) {
        let h = self.actor.trunk.forward(tape, store, features, trainable);
        let h = tape.relu(h);
        let mean = self.actor.mean.forward(tape, store, h, trainable);
        let raw = self.actor.log_std.forward(tape, store, h, trainable);
        // Soft clamp keeps log-std inside [LOG_STD_MIN, LOG_STD_MAX] while
        // staying differentiable.
        let t = tape.tanh(raw);
        let t = tape.add_scalar(t, 1.0);
        let t = tape.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
        let log_std = tape.add_scalar(t, LOG_STD_MIN);
        (mean, log_std)
    }

    /// Reparameterized batch sample: actions in [-1, 1] and per-sample log
    /// probability including the tanh change-of-variables correction.
    pub fn sample_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        noise: &Array2<f64>,
        trainable: bool,
    ) -> (Var, Var) {
        let (mean, log_std) = self.policy_params(tape, store, features, trainable);
        let std = tape.exp(log_std);
        let eps = tape.constant(noise.clone().into_dyn());
        let scaled = tape.mul(std, eps);
        let u = tape.add(mean, scaled);
        let action = tape.tanh(u);

        // log N(u; mean, std) summed over action dims
        let centered = tape.sub(u, mean);
        let z = tape.div(centered, std);
        let zsq = tape.square(z);
        let half_zsq = tape.scale(zsq, -0.5);
        let neg_log_std = tape.neg(log_std);
        let gauss = tape.add(half_zsq, neg_log_std);
        let gauss = tape.add_scalar(gauss, -0.5 * LN_2PI);

        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let neg2u = tape.scale(u, -2.0);
        let sp = tape.softplus(neg2u);
        let u_plus_sp = tape.add(u, sp);
        let inner = tape.scale(u_plus_sp, -2.0);
        let correction = tape.add_scalar(inner, 2.0 * std::f64::consts::LN_2);

        let per_dim = tape.sub(gauss, correction);
        let log_prob = tape.sum_cols(per_dim);
        (action, log_prob)
    }

    /// Deterministic batch action: squashed mean.
    pub fn mean_action_batch(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Var {
        let (mean, _) = self.policy_params(tape, store, features, false);
        tape.tanh(mean)
    }

    /// Single-observation action selection on a scratch tape.
    pub fn select_action(
        &self,
        store: &ParamStore,
        features: &[f64],
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyOutput, SacError> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFiniteFeatures);
        }
        let a_dim = self.cfg.action_dim;
        let mut tape = Tape::new();
        let f = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, features.len()]), features.to_vec()).unwrap(),
        );
        let (mean, log_std) = self.policy_params(&mut tape, store, f, false);
        let mean_v: Vec<f64> = tape.value(mean).iter().copied().collect();
        let std_v: Vec<f64> = tape.value(log_std).iter().map(|v| v.exp()).collect();
        let noise: Vec<f64> = if deterministic {
            vec![0.0; a_dim]
        } else {
            (0..a_dim).map(|_| gauss(rng)).collect()
        };
        let u: Vec<f64> = (0..a_dim)
            .map(|j| mean_v[j] + std_v[j] * noise[j])
            .collect();
        let action: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
        let mean_action: Vec<f64> = mean_v.iter().map(|v| v.tanh()).collect();
        let log_prob: f64 = (0..a_dim)
            .map(|j| {
                let z = (u[j] - mean_v[j]) / std_v[j];
                let gauss = -0.5 * z * z - std_v[j].ln() - 0.5 * LN_2PI;
                let corr = 2.0
                    * (std::f64::consts::LN_2 - u[j] - crate::nn::tape::softplus(-2.0 * u[j]));
                gauss - corr
            })
            .sum();
        Ok(PolicyOutput {
            action,
            log_prob,
            mean_action,
            pre_squash: u,
            mean: mean_v,
            std: std_v,
        })
    }

    /// Q estimates for a feature/action batch from the online critics.
    pub fn q_values(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        actions: Var,
        trainable: bool,
    ) -> (Var, Var) {
        let joined = tape.concat_cols(features, actions);
        (
            self.q1.forward(tape, store, joined, trainable),
            self.q2.forward(tape, store, joined, trainable),
        )
    }

    fn target_q_values(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        actions: Var,
    ) -> (Var, Var) {
        let joined = tape.concat_cols(features, actions);
        (
            self.target_q1.forward(tape, store, joined, false),
            self.target_q2.forward(tape, store, joined, false),
        )
    }

    /// Soft Bellman error against the frozen target:
    /// y = r + gamma (1 - done) (min(Q~1, Q~2)(f', a') - alpha log pi(a'|f')),
    /// averaged over both critics. `y` is held as data.
    #[allow(clippy::too_many_arguments)]
    pub fn critic_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        actions: Var,
        rewards: Var,
        next_features: Var,
        done: Var,
        next_noise: &Array2<f64>,
    ) -> Var {
        let alpha = self.alpha(store);
        let next_f = tape.detach(next_features);
        let (next_a, next_logp) = self.sample_batch(tape, store, next_f, next_noise, false);
        let (t1, t2) = self.target_q_values(tape, store, next_f, next_a);
        let min_t = tape.min2(t1, t2);
        let ent = tape.scale(next_logp, alpha);
        let v_next = tape.sub(min_t, ent);
        let not_done = tape.neg(done);
        let not_done = tape.add_scalar(not_done, 1.0);
        let masked = tape.mul(v_next, not_done);
        let discounted = tape.scale(masked, self.cfg.gamma);
        let y = tape.add(rewards, discounted);
        let y = tape.detach(y);

        let (q1, q2) = self.q_values(tape, store, features, actions, true);
        let d1 = tape.sub(q1, y);
        let d2 = tape.sub(q2, y);
        let s1 = tape.square(d1);
        let s2 = tape.square(d2);
        let m1 = tape.mean_all(s1);
        let m2 = tape.mean_all(s2);
        let sum = tape.add(m1, m2);
        tape.scale(sum, 0.5)
    }

    /// Policy objective: mean(alpha log pi(a|f) - min(Q1, Q2)(f, a)) with a
    /// reparameterized. Features are detached and the critics frozen, so
    /// gradients reach only the actor. Also returns log pi for the
    /// temperature update.
    pub fn actor_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        noise: &Array2<f64>,
    ) -> (Var, Var) {
        let alpha = self.alpha(store);
        let f = tape.detach(features);
        let (a, logp) = self.sample_batch(tape, store, f, noise, true);
        let (q1, q2) = self.q_values(tape, store, f, a, false);
        let min_q = tape.min2(q1, q2);
        let ent = tape.scale(logp, alpha);
        let gap = tape.sub(ent, min_q);
        let loss = tape.mean_all(gap);
        (loss, logp)
    }

    /// Temperature objective: mean(-log_alpha (log pi + target_entropy))
    /// with log pi held as data. Only meaningful in auto mode.
    pub fn alpha_loss(&self, tape: &mut Tape, store: &ParamStore, log_prob: Var) -> Var {
        let logp = tape.detach(log_prob);
        let shifted = tape.add_scalar(logp, self.cfg.target_entropy);
        let la = tape.param(store, self.log_alpha, true);
        let la_mat = tape.reshape(la, &[1, 1]);
        let prod = tape.matmul(shifted, la_mat);
        let neg = tape.neg(prod);
        tape.mean_all(neg)
    }

    /// EMA update: target <- (1 - tau) target + tau online.
    pub fn target_update(&self, store: &mut ParamStore, tau: f64) {
        for (src, dst) in self
            .q1
            .param_ids()
            .into_iter()
            .chain(self.q2.param_ids())
            .zip(
                self.target_q1
                    .param_ids()
                    .into_iter()
                    .chain(self.target_q2.param_ids()),
            )
        {
            let online = store.value(src).clone();
            let target = store.value_mut(dst);
            target.zip_mut_with(&online, |t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Standard-normal noise batch from the given stream.
pub fn noise_batch(rng: &mut ChaCha8Rng, batch: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((batch, dim), |_| gauss(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_against_fd;
    use rand::SeedableRng;

    fn agent(feature_dim: usize, action_dim: usize, hidden: usize, seed: u64) -> (ParamStore, SacAgent) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = SacConfig::new(feature_dim, action_dim);
        cfg.hidden = hidden;
        let a = SacAgent::new(&mut store, &mut rng, cfg);
        (store, a)
    }

    fn feat(b: usize, d: usize, scale: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[b, d]), |ix| ((ix[0] * d + ix[1]) as f64 * scale).sin())
    }

    #[test]
    fn deterministic_selection_is_pure_and_bounded() {
        let (store, agent) = agent(4, 2, 16, 1);
        let f = vec![0.3, -0.2, 0.9, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a1 = agent.select_action(&store, &f, true, &mut rng).unwrap();
        let a2 = agent.select_action(&store, &f, true, &mut rng).unwrap();
        assert_eq!(a1.action, a2.action);
        for _ in 0..50 {
            let s = agent.select_action(&store, &f, false, &mut rng).unwrap();
            assert!(s.action.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn non_finite_features_rejected() {
        let (store, agent) = agent(3, 1, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            agent.select_action(&store, &[f64::NAN, 0.0, 0.0], true, &mut rng),
            Err(SacError::NonFiniteFeatures)
        ));
    }

    #[test]
    fn log_prob_matches_change_of_variables_oracle() {
        let (store, agent) = agent(5, 2, 16, 3);
        let f = vec![0.1, -0.7, 0.4, 0.9, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let out = agent.select_action(&store, &f, false, &mut rng).unwrap();
            // Independent oracle: Gaussian density at u plus log |d tanh/du|^-1
            // computed directly from tanh, not the softplus identity.
            let oracle: f64 = (0..2)
                .map(|j| {
                    let (u, mu, sd) = (out.pre_squash[j], out.mean[j], out.std[j]);
                    let z = (u - mu) / sd;
                    let gauss = -0.5 * z * z - sd.ln() - 0.5 * LN_2PI;
                    let jac = (1.0 - u.tanh().powi(2)).max(1e-300).ln();
                    gauss - jac
                })
                .sum();
            assert!(
                (out.log_prob - oracle).abs() < 1e-5,
                "{} vs {oracle}",
                out.log_prob
            );
        }
    }

    #[test]
    fn critic_loss_hand_case_terminal_transition() {
        // done = 1, Q == 0 everywhere, r = 2: per-critic loss (0 - 2)^2 = 4.
        let (mut store, agent) = agent(2, 1, 8, 4);
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let f = tape.constant(feat(1, 2, 0.3));
        let a = tape.constant(ArrayD::zeros(IxDyn(&[1, 1])));
        let r = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 2.0));
        let fnext = tape.constant(feat(1, 2, 0.5));
        let done = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 1.0));
        let noise = Array2::zeros((1, 1));
        let l = agent.critic_loss(&mut tape, &store, f, a, r, fnext, done, &noise);
        assert!((tape.scalar(l) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_zero_when_q_equals_target() {
        // done=1 makes y = r; force both critics to predict r by zeroing all
        // weights and setting the output bias to r.
        let (mut store, agent) = agent(2, 1, 8, 5);
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        for name in ["critic.q1.l3.bias", "critic.q2.l3.bias"] {
            store.value_mut(store.lookup(name).unwrap()).fill(2.0);
        }
        let mut tape = Tape::new();
        let f = tape.constant(feat(3, 2, 0.3));
        let a = tape.constant(ArrayD::zeros(IxDyn(&[3, 1])));
        let r = tape.constant(ArrayD::from_elem(IxDyn(&[3, 1]), 2.0));
        let fnext = tape.constant(feat(3, 2, 0.5));
        let done = tape.constant(ArrayD::from_elem(IxDyn(&[3, 1]), 1.0));
        let l = agent.critic_loss(&mut tape, &store, f, a, r, fnext, done, &Array2::zeros((3, 1)));
        assert!(tape.scalar(l).abs() < 1e-20);
    }

    #[test]
    fn double_critic_backup_uses_minimum() {
        // Distinct target critics: push target.q1 output bias high, q2 low.
        let (mut store, agent) = agent(2, 1, 8, 6);
        for id in agent.target_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        store
            .value_mut(store.lookup("target.q1.l3.bias").unwrap())
            .fill(100.0);
        store
            .value_mut(store.lookup("target.q2.l3.bias").unwrap())
            .fill(-3.0);
        // Zero online critics; alpha fixed tiny so entropy term vanishes.
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        store
            .value_mut(agent.log_alpha)
            .fill((1e-12f64).ln());
        let mut tape = Tape::new();
        let f = tape.constant(feat(1, 2, 0.2));
        let a = tape.constant(ArrayD::zeros(IxDyn(&[1, 1])));
        let r = tape.constant(ArrayD::zeros(IxDyn(&[1, 1])));
        let fnext = tape.constant(feat(1, 2, 0.4));
        let done = tape.constant(ArrayD::zeros(IxDyn(&[1, 1])));
        let l = agent.critic_loss(&mut tape, &store, f, a, r, fnext, done, &Array2::zeros((1, 1)));
        // y = gamma * min(100, -3) = -2.97; loss = y^2 per critic.
        let y = 0.99 * -3.0;
        assert!((tape.scalar(l) - y * y).abs() < 1e-9, "{}", tape.scalar(l));
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let (mut store, agent) = agent(3, 2, 8, 7);
        let f = feat(4, 3, 0.37);
        let a = ArrayD::from_shape_fn(IxDyn(&[4, 2]), |ix| ((ix[0] * 2 + ix[1]) as f64 * 0.21).cos() * 0.8);
        let r = ArrayD::from_shape_fn(IxDyn(&[4, 1]), |ix| ix[0] as f64 * 0.4 - 0.6);
        let fnext = feat(4, 3, 0.53);
        let done = ArrayD::from_shape_vec(IxDyn(&[4, 1]), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let noise = Array2::from_shape_fn((4, 2), |(i, j)| ((i * 2 + j) as f64 * 0.77).sin());
        let ids = agent.critic_param_ids();

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let av = tape.constant(a.clone());
            let rv = tape.constant(r.clone());
            let nv = tape.constant(fnext.clone());
            let dv = tape.constant(done.clone());
            let l = agent.critic_loss(&mut tape, store, fv, av, rv, nv, dv, &noise);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let av = tape.constant(a.clone());
        let rv = tape.constant(r.clone());
        let nv = tape.constant(fnext.clone());
        let dv = tape.constant(done.clone());
        let l = agent.critic_loss(&mut tape, &store, fv, av, rv, nv, dv, &noise);
        let grads = tape.backward(l);
        let analytic = tape.param_grads(&grads);
        let report = check_against_fd(&mut store, &ids, &analytic, 1e-3, 1e-3, 1e-8, run);
        assert!(report.pass_fraction() >= 0.99, "worst {:?}", report.worst);
    }

    #[test]
    fn actor_loss_constant_q_gives_no_q_gradient() {
        // alpha = 0 and constant critics: the Q term contributes nothing to
        // the actor gradient; with the entropy term also disabled, the whole
        // gradient vanishes.
        let (mut store, agent) = agent(3, 1, 8, 8);
        store.value_mut(agent.log_alpha).fill(f64::NEG_INFINITY); // alpha = 0
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(0.0); // Q == bias == 0 everywhere
        }
        let mut tape = Tape::new();
        let f = tape.constant(feat(4, 3, 0.3));
        let noise = Array2::from_shape_fn((4, 1), |(i, _)| (i as f64 * 0.7).sin());
        let (l, _) = agent.actor_loss(&mut tape, &store, f, &noise);
        let grads = tape.backward(l);
        let by_param = tape.param_grads(&grads);
        for id in agent.actor_param_ids() {
            if let Some(g) = by_param.get(&id) {
                assert!(g.iter().all(|&v| v.abs() < 1e-30), "leaked gradient");
            }
        }
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let (mut store, agent) = agent(3, 1, 8, 9);
        let f = feat(4, 3, 0.29);
        let noise = Array2::from_shape_fn((4, 1), |(i, _)| ((i as f64) * 0.41).sin());
        let ids = agent.actor_param_ids();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let (l, _) = agent.actor_loss(&mut tape, store, fv, &noise);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let (l, _) = agent.actor_loss(&mut tape, &store, fv, &noise);
        let grads = tape.backward(l);
        let analytic = tape.param_grads(&grads);
        let report = check_against_fd(&mut store, &ids, &analytic, 1e-3, 1e-3, 1e-8, run);
        assert!(report.pass_fraction() >= 0.99, "worst {:?}", report.worst);
    }

    #[test]
    fn higher_q_direction_attracts_policy_mean() {
        // Fabricate critics Q(f, a) = 3 a (linear, increasing): after one
        // actor update the squashed mean must move toward +1.
        let (mut store, agent) = agent(2, 1, 8, 10);
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        // q = l3(relu(l2(relu(l1([f, a]))))); make it linear in a: set l1 to
        // pass through a on one hidden unit pair (positive and negative
        // halves so relu keeps the signal), and compose identity downstream.
        for q in ["critic.q1", "critic.q2"] {
            let w1 = store.lookup(&format!("{q}.l1.weight")).unwrap();
            store.value_mut(w1)[[2, 0]] = 1.0; // +a into unit 0
            store.value_mut(w1)[[2, 1]] = -1.0; // -a into unit 1
            let w2 = store.lookup(&format!("{q}.l2.weight")).unwrap();
            store.value_mut(w2)[[0, 0]] = 1.0;
            store.value_mut(w2)[[1, 1]] = 1.0;
            let w3 = store.lookup(&format!("{q}.l3.weight")).unwrap();
            store.value_mut(w3)[[0, 0]] = 3.0;
            store.value_mut(w3)[[1, 0]] = -3.0; // 3(a+ - a-) = 3a
        }
        store.value_mut(agent.log_alpha).fill((1e-9f64).ln());

        let f = feat(8, 2, 0.11);
        let mean_of = |store: &ParamStore| {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let m = agent.mean_action_batch(&mut tape, store, fv);
            tape.value(m).iter().sum::<f64>() / 8.0
        };
        let before = mean_of(&store);
        let mut opt = crate::nn::Adam::new(agent.actor_param_ids(), 1e-2);
        for step in 0..20 {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let noise = noise_batch(&mut ChaCha8Rng::seed_from_u64(step), 8, 1);
            let (l, _) = agent.actor_loss(&mut tape, &store, fv, &noise);
            let grads = tape.backward(l);
            let by_param = tape.param_grads(&grads);
            opt.step(&mut store, &by_param);
        }
        let after = mean_of(&store);
        assert!(after > before, "mean moved {before} -> {after}");
    }

    #[test]
    fn entropy_term_alone_grows_policy_std() {
        // Q == 0 and a fixed alpha: minimizing alpha log pi maximizes
        // entropy, so the average std must increase.
        let (mut store, agent) = agent(2, 1, 8, 11);
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        store.value_mut(agent.log_alpha).fill(0.0); // alpha = 1
        let f = feat(8, 2, 0.19);
        let std_of = |store: &ParamStore| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = agent
                .select_action(store, &[0.1, -0.2], false, &mut rng)
                .unwrap();
            out.std[0]
        };
        let before = std_of(&store);
        let mut opt = crate::nn::Adam::new(agent.actor_param_ids(), 3e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let noise = noise_batch(&mut rng, 8, 1);
            let (l, _) = agent.actor_loss(&mut tape, &store, fv, &noise);
            let grads = tape.backward(l);
            let by_param = tape.param_grads(&grads);
            opt.step(&mut store, &by_param);
        }
        let after = std_of(&store);
        assert!(after > before, "std moved {before} -> {after}");
    }

    #[test]
    fn target_update_arithmetic() {
        let (mut store, agent) = agent(2, 1, 8, 12);
        // online = 2 everywhere, target = 0 everywhere
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(2.0);
        }
        for id in agent.target_param_ids() {
            store.value_mut(id).fill(0.0);
        }
        agent.target_update(&mut store, 0.5);
        for id in agent.target_param_ids() {
            assert!(store.value(id).iter().all(|&v| v == 1.0));
        }
        // tau = 1: copy exactly
        agent.target_update(&mut store, 1.0);
        for id in agent.target_param_ids() {
            assert!(store.value(id).iter().all(|&v| v == 2.0));
        }
        // tau = 0: unchanged
        for id in agent.critic_param_ids() {
            store.value_mut(id).fill(7.0);
        }
        agent.target_update(&mut store, 0.0);
        for id in agent.target_param_ids() {
            assert!(store.value(id).iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn alpha_loss_moves_alpha_toward_target_entropy() {
        let (store, agent) = agent(2, 1, 8, 13);
        // log pi far above target entropy: alpha should increase.
        let mut tape = Tape::new();
        let logp = tape.constant(ArrayD::from_elem(IxDyn(&[4, 1]), 5.0));
        let l = agent.alpha_loss(&mut tape, &store, logp);
        let grads = tape.backward(l);
        let g = &tape.param_grads(&grads)[&agent.log_alpha];
        assert!(g[0] < 0.0, "gradient should push log_alpha up, got {}", g[0]);
    }
}
