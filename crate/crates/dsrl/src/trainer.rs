//! End-to-end training: collect, filter into replay, update, evaluate,
//! checkpoint.
//!
//! The loop is strictly sequential and every random draw comes from a stream
//! derived from the run seed, so a run is a pure function of its config:
//! identical config and seed give bit-identical loss traces, and a resumed
//! checkpoint continues exactly where the original run would have gone.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{evaluate_model, EvalError};
use crate::losses::{
    reward_loss, similarity_loss, total_loss, transition_loss, LossError, LossReport, LossTerms,
};
use crate::mask_oracle::protocol::ExternalBackend;
use crate::mask_oracle::{
    AdvisorVerdict, CachedAdvisor, GroundTruthBackend, MaskOracle, OracleBackend, OracleError,
};
use crate::model::{latest_batch, residual_batch, AttentionSource, Model, ModelError, ACTION_DIM};
use crate::nn::{derive_seed, Adam, ParamId, Tape};
use crate::replay::{AdmissionStats, SelectiveReplay, TransitionRecord};
use crate::sac::{noise_batch, AlphaMode};
use crate::worldsim::{Action, EnvError, Frame, Observation, World};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Encoder(#[from] crate::encoders::EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: u64, source: LossError },
    #[error("loss construction failed at step {step}: {source}")]
    Loss { step: u64, source: LossError },
}

/// One row of the per-update loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub l_trans: f64,
    pub l_sg: f64,
    pub l_r: f64,
    pub l_pi: f64,
    pub l_q: f64,
    pub total: f64,
    pub alpha: f64,
    pub delta: f64,
    pub admitted: u64,
    pub rejected: u64,
    pub advisor_errors: u64,
    pub sg_skipped: u64,
}

pub const LOSS_CSV_HEADER: &str =
    "step,l_trans,l_sg,l_r,l_pi,l_q,total,alpha,delta,admitted,rejected,advisor_errors,sg_skipped";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRow {
    pub episode: u64,
    pub end_step: u64,
    pub reward: f64,
    pub distance: f64,
    pub crash_intensity: f64,
    pub avg_steer_pct: f64,
    pub avg_brake_pct: f64,
    pub length: u32,
}

pub const EPISODE_CSV_HEADER: &str =
    "episode,end_step,reward,distance,crash_intensity,avg_steer_pct,avg_brake_pct,length";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_distance: f64,
    pub mean_crash: f64,
}

pub const EVAL_CSV_HEADER: &str = "step,mean_reward,std_reward,mean_distance,mean_crash";

/// In-memory training log; mirrored to CSV files in the run directory.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<LossRow>,
    pub episodes: Vec<EpisodeRow>,
    pub evals: Vec<EvalRow>,
    pub wall_clock_s: f64,
}

enum Backend {
    Ground(GroundTruthBackend),
    External(Box<ExternalBackend>),
}

impl OracleBackend for Backend {
    fn retrieve_semantics(&self, frame: &Frame, prompt: &str) -> Result<Vec<String>, OracleError> {
        match self {
            Backend::Ground(b) => b.retrieve_semantics(frame, prompt),
            Backend::External(b) => b.retrieve_semantics(frame, prompt),
        }
    }

    fn mask_logits(&self, frame: &Frame, phrase: &str) -> Result<Array2<f64>, OracleError> {
        match self {
            Backend::Ground(b) => b.mask_logits(frame, phrase),
            Backend::External(b) => b.mask_logits(frame, phrase),
        }
    }

    fn advisor_judge(&self, frame: &Frame, action: Action) -> Result<AdvisorVerdict, OracleError> {
        match self {
            Backend::Ground(b) => b.advisor_judge(frame, action),
            Backend::External(b) => b.advisor_judge(frame, action),
        }
    }
}

fn make_backend(config: &RunConfig) -> Backend {
    match config.oracle.backend.as_str() {
        "external" => Backend::External(Box::new(ExternalBackend::new(
            config.oracle.endpoint.clone(),
            std::time::Duration::from_millis(config.oracle.timeout_ms),
        ))),
        _ => Backend::Ground(GroundTruthBackend),
    }
}

struct EpisodeAccum {
    reward: f64,
    distance: f64,
    crash: f64,
    steer_sum: f64,
    brake_count: f64,
    length: u32,
}

impl EpisodeAccum {
    fn new() -> Self {
        Self {
            reward: 0.0,
            distance: 0.0,
            crash: 0.0,
            steer_sum: 0.0,
            brake_count: 0.0,
            length: 0,
        }
    }
}

pub struct Trainer {
    pub model: Model,
    env: World,
    buffer: SelectiveReplay,
    advisor: CachedAdvisor<Backend>,
    mask_oracle: MaskOracle<Backend>,
    opt_features: Adam,
    opt_actor: Adam,
    opt_critic: Adam,
    opt_alpha: Adam,
    rng_policy: ChaCha8Rng,
    rng_prefill: ChaCha8Rng,
    rng_update: ChaCha8Rng,
    frames_done: u64,
    episode_idx: u64,
    accum: EpisodeAccum,
    needs_mask: bool,
    train_attention: AttentionSource,
    pub log: TrainLog,
    mask_oracle_errors: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::build(config)?;
        let seed = config.run.seed;
        let mut env = World::new(config.env_config()?);
        env.reset(derive_seed(seed, "episode.0"));

        let ablation = model.ablation;
        let needs_mask = ablation.similarity_on
            || (ablation.use_interaction && config.interaction.train_attention_source == "mask");
        let train_attention = if ablation.use_interaction
            && config.interaction.train_attention_source == "mask"
        {
            AttentionSource::Mask
        } else {
            AttentionSource::Semantic
        };

        let mut advisor_oracle = MaskOracle::new(make_backend(config));
        advisor_oracle.hard_threshold = config.loss.mask_hard_threshold;
        let mut mask_oracle = MaskOracle::new(make_backend(config));
        mask_oracle.hard_threshold = config.loss.mask_hard_threshold;

        let mut buffer =
            SelectiveReplay::new(config.replay.capacity, config.replay.t_decay, seed);
        buffer.filter_enabled = config.replay.advisor_filter;

        let lr = config.sac.lr;
        let mut feature_ids = model.pipeline.param_ids();
        feature_ids.extend(model.heads.param_ids());
        let opt_features = Adam::new(feature_ids, lr);
        let opt_actor = Adam::new(model.agent.actor_param_ids(), lr);
        let opt_critic = Adam::new(model.agent.critic_param_ids(), lr);
        let opt_alpha = Adam::new(vec![model.agent.log_alpha], lr);

        Ok(Self {
            model,
            env,
            buffer,
            advisor: CachedAdvisor::new(advisor_oracle),
            mask_oracle,
            opt_features,
            opt_actor,
            opt_critic,
            opt_alpha,
            rng_policy: ChaCha8Rng::seed_from_u64(derive_seed(seed, "rng.policy")),
            rng_prefill: ChaCha8Rng::seed_from_u64(derive_seed(seed, "rng.prefill")),
            rng_update: ChaCha8Rng::seed_from_u64(derive_seed(seed, "rng.update")),
            frames_done: 0,
            episode_idx: 0,
            accum: EpisodeAccum::new(),
            needs_mask,
            train_attention,
            log: TrainLog::default(),
            mask_oracle_errors: 0,
        })
    }

    pub fn frames_done(&self) -> u64 {
        self.frames_done
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Aggregate mask for an observation; oracle outages degrade to a zero
    /// mask (the similarity loss skips those samples) rather than stalling.
    fn mask_for(&mut self, obs: &Observation) -> Array2<f64> {
        let result = self
            .mask_oracle
            .retrieve_semantics(obs, &self.model.config.oracle.prompt)
            .and_then(|phrases| self.mask_oracle.knowledge_mask(obs, &phrases));
        match result {
            Ok(km) => km.aggregate,
            Err(_) => {
                self.mask_oracle_errors += 1;
                self.model.zero_mask()
            }
        }
    }

    /// One environment step plus (possibly) one gradient update.
    pub fn step_once(&mut self) -> Result<(), TrainError> {
        let config = self.model.config.clone();
        let obs = self.env.observation();
        let action = if self.frames_done < config.run.prefill {
            Action::new(
                self.rng_prefill.gen_range(-1.0..=1.0),
                self.rng_prefill.gen_range(-1.0..=1.0),
            )
        } else {
            let out = self.model.act(&obs, false, &mut self.rng_policy)?;
            Action::new(out.action[0], out.action[1])
        };
        let (next_obs, reward, done, info) = self.env.step(action)?;

        self.accum.reward += reward;
        self.accum.distance += info.distance_delta;
        self.accum.crash += info.crash_intensity;
        self.accum.steer_sum += info.steer_used.abs();
        self.accum.brake_count += info.brake_used;
        self.accum.length += 1;

        let mask = if self.needs_mask {
            Some(self.mask_for(&obs))
        } else {
            None
        };
        let record = TransitionRecord {
            frames: [
                obs.frames[0].clone(),
                obs.frames[1].clone(),
                obs.frames[2].clone(),
                next_obs.latest().clone(),
            ],
            action: [action.steer, action.accel],
            reward,
            done,
            mask_aggregate: mask,
            step_index: obs.step_index,
            episode_id: self.episode_idx,
        };
        let advisor = &mut self.advisor;
        self.buffer.push(record, &mut |rec: &TransitionRecord| {
            let rec_obs = Observation {
                frames: rec.window_t(),
                step_index: rec.step_index,
            };
            advisor.judge(
                &rec_obs,
                Action::new(rec.action[0], rec.action[1]),
            )
        });

        if done {
            self.log.episodes.push(EpisodeRow {
                episode: self.episode_idx,
                end_step: self.frames_done + 1,
                reward: self.accum.reward,
                distance: self.accum.distance,
                crash_intensity: self.accum.crash,
                avg_steer_pct: self.accum.steer_sum / self.accum.length.max(1) as f64 * 100.0,
                avg_brake_pct: self.accum.brake_count / self.accum.length.max(1) as f64 * 100.0,
                length: self.accum.length,
            });
            self.episode_idx += 1;
            self.accum = EpisodeAccum::new();
            let seed = derive_seed(config.run.seed, &format!("episode.{}", self.episode_idx));
            self.env.reset(seed);
        }

        self.frames_done += 1;
        if self.frames_done >= config.run.prefill
            && self.frames_done % config.run.update_every == 0
            && self.buffer.len() >= config.run.batch_size
        {
            self.update()?;
        }
        Ok(())
    }

    /// One gradient update over a sampled batch.
    fn update(&mut self) -> Result<(), TrainError> {
        self.update_impl(false)?;
        Ok(())
    }

    /// Update with optional gradient inspection: when `collect_audit` is
    /// set, returns which parameters received a nonzero gradient.
    fn update_impl(
        &mut self,
        collect_audit: bool,
    ) -> Result<Option<BTreeMap<String, bool>>, TrainError> {
        let config = &self.model.config;
        let step = self.frames_done;
        let batch_size = config.run.batch_size;
        let weights = config.effective_weights()?;
        let ablation = self.model.ablation;
        let use_motion = ablation.use_motion;

        // Gather batch data (owned copies; the borrow of the buffer ends
        // before the tape is built).
        let mut windows_t: Vec<[Frame; 3]> = Vec::with_capacity(batch_size);
        let mut windows_next: Vec<[Frame; 3]> = Vec::with_capacity(batch_size);
        let mut actions = ArrayD::zeros(IxDyn(&[batch_size, ACTION_DIM]));
        let mut rewards = ArrayD::zeros(IxDyn(&[batch_size, 1]));
        let mut dones = ArrayD::zeros(IxDyn(&[batch_size, 1]));
        let mut masks: Vec<Array2<f64>> = Vec::with_capacity(batch_size);
        {
            let records = self.buffer.sample(batch_size).expect("buffer prefilled");
            for (i, rec) in records.iter().enumerate() {
                windows_t.push(rec.window_t());
                windows_next.push(rec.window_next());
                actions[[i, 0]] = rec.action[0];
                actions[[i, 1]] = rec.action[1];
                rewards[[i, 0]] = rec.reward;
                dones[[i, 0]] = if rec.done { 1.0 } else { 0.0 };
                if self.needs_mask {
                    masks.push(
                        rec.mask_aggregate
                            .clone()
                            .unwrap_or_else(|| self.model.zero_mask()),
                    );
                }
            }
        }

        let mut tape = Tape::new();
        let latest_t = tape.constant(latest_batch(&windows_t));
        let res_t = if use_motion {
            Some(tape.constant(residual_batch(&windows_t)?))
        } else {
            None
        };
        let mask_slice = self.needs_mask.then_some(masks.as_slice());
        let out_t = self.model.pipeline.forward(
            &mut tape,
            &self.model.store,
            latest_t,
            res_t,
            mask_slice,
            self.train_attention,
            true,
        )?;

        // Next-step features are targets: frozen parameters, inference-mode
        // attention, and detached downstream.
        let latest_n = tape.constant(latest_batch(&windows_next));
        let res_n = if use_motion {
            Some(tape.constant(residual_batch(&windows_next)?))
        } else {
            None
        };
        let out_next = self.model.pipeline.forward(
            &mut tape,
            &self.model.store,
            latest_n,
            res_n,
            None,
            AttentionSource::Semantic,
            false,
        )?;

        let actions_v = tape.constant(actions);
        let rewards_v = tape.constant(rewards);
        let dones_v = tape.constant(dones);

        // Draw order is fixed: critic-target noise, then policy noise.
        let noise_next = noise_batch(&mut self.rng_update, batch_size, ACTION_DIM);
        let noise_pi = noise_batch(&mut self.rng_update, batch_size, ACTION_DIM);

        let l_q = self.model.agent.critic_loss(
            &mut tape,
            &self.model.store,
            out_t.fused,
            actions_v,
            rewards_v,
            out_next.fused,
            dones_v,
            &noise_next,
        );
        let (l_pi, logp) =
            self.model
                .agent
                .actor_loss(&mut tape, &self.model.store, out_t.fused, &noise_pi);
        let pred_r = self.model.heads.predict_reward(
            &mut tape,
            &self.model.store,
            out_t.fused,
            actions_v,
            true,
        );
        let l_r = reward_loss(&mut tape, pred_r, rewards_v, config.loss.reward_norm)
            .map_err(|source| TrainError::Loss { step, source })?;

        let mut sg_skipped = 0u64;
        let l_sg = if ablation.similarity_on {
            let embed = out_t.mask_embed.expect("masks supplied when similarity is on");
            let (loss, skipped) =
                similarity_loss(&mut tape, out_t.sem_map_raw, embed)
                    .map_err(|source| TrainError::Loss { step, source })?;
            sg_skipped = skipped as u64;
            Some(loss)
        } else {
            None
        };

        let l_trans = if ablation.transition_on {
            let f_mot = out_t.compact_mot.expect("motion stream on");
            let target = out_next.compact_mot.expect("motion stream on");
            let pred = self.model.heads.predict_motion(
                &mut tape,
                &self.model.store,
                f_mot,
                actions_v,
                true,
            );
            Some(
                transition_loss(&mut tape, pred, target)
                    .map_err(|source| TrainError::Loss { step, source })?,
            )
        } else {
            None
        };

        let terms = LossTerms {
            l_trans,
            l_sg,
            l_r: Some(l_r),
            l_pi: Some(l_pi),
            l_q: Some(l_q),
        };
        let (total_var, report) = total_loss(&mut tape, terms, weights)
            .map_err(|source| TrainError::NonFinite { step, source })?;

        // The temperature loss only touches log_alpha, so it can ride along
        // in the same backward pass.
        let auto_alpha = matches!(config.alpha_mode()?, AlphaMode::Auto);
        let grand = if auto_alpha {
            let l_alpha = self
                .model
                .agent
                .alpha_loss(&mut tape, &self.model.store, logp);
            tape.add(total_var, l_alpha)
        } else {
            total_var
        };

        let grads = tape.backward(grand);
        let by_param = tape.param_grads(&grads);
        let audit = collect_audit.then(|| {
            let mut map = BTreeMap::new();
            for id in self.model.store.ids() {
                let nonzero = by_param
                    .get(&id)
                    .map(|g| g.iter().any(|&v| v != 0.0))
                    .unwrap_or(false);
                map.insert(self.model.store.name(id).to_string(), nonzero);
            }
            map
        });
        let tau = config.sac.tau;
        self.opt_features.step(&mut self.model.store, &by_param);
        self.opt_actor.step(&mut self.model.store, &by_param);
        self.opt_critic.step(&mut self.model.store, &by_param);
        if auto_alpha {
            self.opt_alpha.step(&mut self.model.store, &by_param);
        }
        self.model.agent.target_update(&mut self.model.store, tau);

        self.push_loss_row(step, report, sg_skipped);
        Ok(audit)
    }

    fn push_loss_row(&mut self, step: u64, report: LossReport, sg_skipped: u64) {
        let stats = self.buffer.stats;
        self.log.losses.push(LossRow {
            step,
            l_trans: report.l_trans,
            l_sg: report.l_sg,
            l_r: report.l_r,
            l_pi: report.l_pi,
            l_q: report.l_q,
            total: report.total,
            alpha: self.model.agent.alpha(&self.model.store),
            delta: self.buffer.current_delta(),
            admitted: stats.admitted,
            rejected: stats.rejected,
            advisor_errors: stats.advisor_errors,
            sg_skipped,
        });
    }

    fn run_eval(&mut self) -> Result<(), TrainError> {
        let config = &self.model.config;
        let env_cfg = config.env_config()?;
        let report = evaluate_model(
            &self.model,
            &env_cfg,
            config.run.eval_episodes,
            &[derive_seed(config.run.seed, "eval.seed")],
        )?;
        self.log.evals.push(EvalRow {
            step: self.frames_done,
            mean_reward: report.reward.mean,
            std_reward: report.reward.std,
            mean_distance: report.distance.mean,
            mean_crash: report.crash_intensity.mean,
        });
        Ok(())
    }

    /// Run to `total_frames`, evaluating and checkpointing on the interval.
    pub fn run(&mut self, out_dir: &Path) -> Result<PathBuf, TrainError> {
        let started = Instant::now();
        std::fs::create_dir_all(out_dir)?;
        let total = self.model.config.run.total_frames;
        let eval_interval = self.model.config.run.eval_interval;
        while self.frames_done < total {
            self.step_once()?;
            if eval_interval > 0 && self.frames_done % eval_interval == 0 {
                self.run_eval()?;
                self.checkpoint(&out_dir.join("checkpoint_latest.dsrl"))?;
                self.write_logs(out_dir)?;
            }
        }
        self.log.wall_clock_s = started.elapsed().as_secs_f64();
        let final_path = out_dir.join("checkpoint_final.dsrl");
        self.checkpoint(&final_path)?;
        self.write_logs(out_dir)?;
        Ok(final_path)
    }

    /// Write the CSV logs (losses, episodes, evals) into the run directory.
    pub fn write_logs(&self, out_dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(out_dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("losses.csv"))?);
        writeln!(f, "{LOSS_CSV_HEADER}")?;
        for r in &self.log.losses {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.l_trans,
                r.l_sg,
                r.l_r,
                r.l_pi,
                r.l_q,
                r.total,
                r.alpha,
                r.delta,
                r.admitted,
                r.rejected,
                r.advisor_errors,
                r.sg_skipped
            )?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("episodes.csv"))?);
        writeln!(f, "{EPISODE_CSV_HEADER}")?;
        for r in &self.log.episodes {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                r.episode,
                r.end_step,
                r.reward,
                r.distance,
                r.crash_intensity,
                r.avg_steer_pct,
                r.avg_brake_pct,
                r.length
            )?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("eval.csv"))?);
        writeln!(f, "{EVAL_CSV_HEADER}")?;
        for r in &self.log.evals {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.step, r.mean_reward, r.std_reward, r.mean_distance, r.mean_crash
            )?;
        }
        let meta = serde_json::json!({
            "wall_clock_s": self.log.wall_clock_s,
            "tag": self.model.config.run.tag,
            "seed": self.model.config.run.seed,
            "total_frames": self.model.config.run.total_frames,
            "mask_oracle_errors": self.mask_oracle_errors,
            "advisor_cache_hits": self.advisor.hits,
            "advisor_cache_misses": self.advisor.misses,
        });
        std::fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Full training state into one archive: parameters, optimizer moments,
    /// RNG streams, environment state, episode accumulators and (optionally)
    /// the replay buffer.
    pub fn checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut a = Archive::new();
        self.model.export_params(&mut a);
        a.insert_u64(
            "trainer/counters",
            vec![self.frames_done, self.episode_idx, self.mask_oracle_errors],
        );
        a.insert_f64(
            "trainer/accum",
            ArrayD::from_shape_vec(
                IxDyn(&[6]),
                vec![
                    self.accum.reward,
                    self.accum.distance,
                    self.accum.crash,
                    self.accum.steer_sum,
                    self.accum.brake_count,
                    self.accum.length as f64,
                ],
            )
            .unwrap(),
        );
        for (name, rng) in [
            ("rng/policy", &self.rng_policy),
            ("rng/prefill", &self.rng_prefill),
            ("rng/update", &self.rng_update),
            ("rng/env", self.env.rng()),
        ] {
            a.insert_u64(name, rng_words(rng));
        }
        let (admit, sample) = self.buffer.rng_states();
        a.insert_u64("rng/buffer_admit", rng_words(admit));
        a.insert_u64("rng/buffer_sample", rng_words(sample));

        // Optimizers.
        for (group, opt) in [
            ("features", &self.opt_features),
            ("actor", &self.opt_actor),
            ("critic", &self.opt_critic),
            ("alpha", &self.opt_alpha),
        ] {
            let (t, rows) = opt.state();
            a.insert_u64(&format!("opt/{group}/t"), vec![t]);
            for (id, m, v) in rows {
                let name = self.model.store.name(id);
                a.insert_f64(&format!("opt/{group}/m/{name}"), m.clone());
                a.insert_f64(&format!("opt/{group}/v/{name}"), v.clone());
            }
        }

        // Environment snapshot.
        let s = self.env.state();
        a.insert_f64(
            "env/ego",
            ArrayD::from_shape_vec(
                IxDyn(&[7]),
                vec![
                    s.ego_pos[0],
                    s.ego_pos[1],
                    s.ego_heading,
                    s.ego_speed,
                    s.cumulative_crash,
                    s.step_index as f64,
                    if s.done { 1.0 } else { 0.0 },
                ],
            )
            .unwrap(),
        );
        let n = s.obstacles.len();
        let mut obs_arr = ArrayD::zeros(IxDyn(&[n, 7]));
        for (i, ob) in s.obstacles.iter().enumerate() {
            obs_arr[[i, 0]] = ob.kind.as_index() as f64;
            obs_arr[[i, 1]] = ob.pos[0];
            obs_arr[[i, 2]] = ob.pos[1];
            obs_arr[[i, 3]] = ob.vel[0];
            obs_arr[[i, 4]] = ob.vel[1];
            obs_arr[[i, 5]] = ob.radius;
            obs_arr[[i, 6]] = ob.id as f64;
        }
        a.insert_f64("env/obstacles", obs_arr);
        let res = self.model.config.env.resolution;
        for (i, frame) in self.env.frame_stack().iter().enumerate() {
            a.insert_u8(
                &format!("env/frame{i}"),
                frame.data.as_ref().clone(),
                vec![res, res, 3],
            );
        }

        // Replay buffer.
        let include_buffer = self.model.config.run.checkpoint_buffer;
        a.insert_u64(
            "buffer/meta",
            vec![
                if include_buffer { self.buffer.len() as u64 } else { 0 },
                self.buffer.push_count(),
                self.buffer.stats.admitted,
                self.buffer.stats.rejected,
                self.buffer.stats.consulted,
                self.buffer.stats.advisor_errors,
                u64::from(include_buffer),
            ],
        );
        if include_buffer {
            for (i, rec) in self.buffer.records().enumerate() {
                let mut bytes = Vec::with_capacity(4 * res * res * 3);
                for f in &rec.frames {
                    bytes.extend_from_slice(f.data.as_ref());
                }
                a.insert_u8(&format!("buffer/{i}/frames"), bytes, vec![4, res, res, 3]);
                a.insert_f64(
                    &format!("buffer/{i}/scalars"),
                    ArrayD::from_shape_vec(
                        IxDyn(&[7]),
                        vec![
                            rec.action[0],
                            rec.action[1],
                            rec.reward,
                            if rec.done { 1.0 } else { 0.0 },
                            rec.step_index as f64,
                            rec.episode_id as f64,
                            if rec.mask_aggregate.is_some() { 1.0 } else { 0.0 },
                        ],
                    )
                    .unwrap(),
                );
                if let Some(mask) = &rec.mask_aggregate {
                    a.insert_f64(&format!("buffer/{i}/mask"), mask.clone().into_dyn());
                }
            }
        }
        a.write(path)?;
        Ok(())
    }

    /// Restore a trainer from a checkpoint produced by [`Trainer::checkpoint`].
    pub fn resume(path: &Path) -> Result<Self, TrainError> {
        let a = Archive::read(path)?;
        let json = a.get_string("meta/config")?;
        let config = RunConfig::from_json(&json)?;
        let mut trainer = Trainer::new(&config)?;
        trainer.model.import_params(&a)?;

        let counters = a.get_u64("trainer/counters")?;
        trainer.frames_done = counters[0];
        trainer.episode_idx = counters[1];
        trainer.mask_oracle_errors = counters[2];
        let acc = a.get_f64("trainer/accum")?;
        trainer.accum = EpisodeAccum {
            reward: acc[0],
            distance: acc[1],
            crash: acc[2],
            steer_sum: acc[3],
            brake_count: acc[4],
            length: acc[5] as u32,
        };
        trainer.rng_policy = rng_from_words(a.get_u64("rng/policy")?);
        trainer.rng_prefill = rng_from_words(a.get_u64("rng/prefill")?);
        trainer.rng_update = rng_from_words(a.get_u64("rng/update")?);

        // Optimizers.
        for (group, opt) in [
            ("features", &mut trainer.opt_features),
            ("actor", &mut trainer.opt_actor),
            ("critic", &mut trainer.opt_critic),
            ("alpha", &mut trainer.opt_alpha),
        ] {
            let t = a.get_u64(&format!("opt/{group}/t"))?[0];
            let mut rows: Vec<(ParamId, ArrayD<f64>, ArrayD<f64>)> = Vec::new();
            for id in opt.ids.clone() {
                let name = trainer.model.store.name(id).to_string();
                let m_name = format!("opt/{group}/m/{name}");
                if a.contains(&m_name) {
                    rows.push((
                        id,
                        a.get_f64(&m_name)?.clone(),
                        a.get_f64(&format!("opt/{group}/v/{name}"))?.clone(),
                    ));
                }
            }
            opt.restore(t, rows);
        }

        // Environment.
        let ego = a.get_f64("env/ego")?;
        let obs_arr = a.get_f64("env/obstacles")?;
        let mut obstacles = Vec::new();
        for i in 0..obs_arr.shape()[0] {
            obstacles.push(crate::worldsim::Obstacle {
                id: obs_arr[[i, 6]] as u32,
                kind: crate::worldsim::ObjectKind::from_index(obs_arr[[i, 0]] as usize),
                pos: [obs_arr[[i, 1]], obs_arr[[i, 2]]],
                vel: [obs_arr[[i, 3]], obs_arr[[i, 4]]],
                radius: obs_arr[[i, 5]],
            });
        }
        let state = crate::worldsim::WorldState {
            ego_pos: [ego[0], ego[1]],
            ego_heading: ego[2],
            ego_speed: ego[3],
            obstacles,
            step_index: ego[5] as u32,
            cumulative_crash: ego[4],
            done: ego[6] != 0.0,
        };
        let res = config.env.resolution;
        let mut frames = Vec::new();
        for i in 0..3 {
            let (bytes, _) = a.get_u8(&format!("env/frame{i}"))?;
            frames.push(Frame {
                resolution: res,
                data: std::sync::Arc::new(bytes.to_vec()),
            });
        }
        trainer
            .env
            .restore(state, rng_from_words(a.get_u64("rng/env")?), frames);

        // Buffer.
        let meta = a.get_u64("buffer/meta")?;
        let (count, push_count) = (meta[0] as usize, meta[1]);
        let stats = AdmissionStats {
            admitted: meta[2],
            rejected: meta[3],
            consulted: meta[4],
            advisor_errors: meta[5],
        };
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let (bytes, _) = a.get_u8(&format!("buffer/{i}/frames"))?;
            let plane = res * res * 3;
            let mk = |k: usize| Frame {
                resolution: res,
                data: std::sync::Arc::new(bytes[k * plane..(k + 1) * plane].to_vec()),
            };
            let sc = a.get_f64(&format!("buffer/{i}/scalars"))?;
            let mask = if sc[6] != 0.0 {
                let m = a.get_f64(&format!("buffer/{i}/mask"))?;
                Some(
                    Array2::from_shape_vec((res, res), m.iter().copied().collect())
                        .expect("mask shape"),
                )
            } else {
                None
            };
            records.push(TransitionRecord {
                frames: [mk(0), mk(1), mk(2), mk(3)],
                action: [sc[0], sc[1]],
                reward: sc[2],
                done: sc[3] != 0.0,
                mask_aggregate: mask,
                step_index: sc[4] as u32,
                episode_id: sc[5] as u64,
            });
        }
        trainer.buffer.restore(
            records,
            push_count,
            stats,
            rng_from_words(a.get_u64("rng/buffer_admit")?),
            rng_from_words(a.get_u64("rng/buffer_sample")?),
        );
        Ok(trainer)
    }

    /// Dry-run gradient audit: collect a few transitions with the advisor
    /// filter off, run exactly one update, and report which parameters
    /// received a nonzero gradient. Model state is rebuilt from scratch, so
    /// this never disturbs real training.
    pub fn audit_gradients(config: &RunConfig) -> Result<BTreeMap<String, bool>, TrainError> {
        let mut cfg = config.clone();
        cfg.run.prefill = cfg.run.batch_size as u64;
        cfg.run.update_every = u64::MAX; // no implicit updates
        cfg.replay.advisor_filter = false;
        let mut t = Trainer::new(&cfg)?;
        for _ in 0..cfg.run.batch_size {
            t.step_once()?;
        }
        Ok(t.update_impl(true)?.expect("audit requested"))
    }
}

/// ChaCha8 state as words: 4 seed words, stream, word position (lo, hi).
fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words = Vec::with_capacity(7);
    for chunk in seed.chunks(8) {
        words.push(u64::from_le_bytes(chunk.try_into().unwrap()));
    }
    words.push(rng.get_stream());
    let pos = rng.get_word_pos();
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

fn rng_from_words(words: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (i, w) in words[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos((words[5] as u128) | ((words[6] as u128) << 64));
    rng
}

/// Convenience entry point: build a trainer, run it, return the final
/// checkpoint path and the in-memory log.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<(PathBuf, TrainLog), TrainError> {
    let mut trainer = Trainer::new(config)?;
    let path = trainer.run(out_dir)?;
    Ok((path, trainer.log))
}
