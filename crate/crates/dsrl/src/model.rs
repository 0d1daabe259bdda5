//! Feature pipeline and full model assembly.
//!
//! [`FeaturePipeline`] wires the configured streams together: semantic
//! encoder, optional motion encoder, optional interaction, fusion. A
//! [`Model`] adds the predictor heads and the SAC agent on top and owns the
//! parameter store. Component initializers draw from seeds derived per
//! component name, so models built for different ablations share identical
//! weights for the components they have in common.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{AblationSpec, RunConfig};
use crate::encoders::{frame_to_array, motion_input, ConvEncoder, EncoderConfig, EncoderError};
use crate::interaction::{fuse, InteractionConfig, InteractionError, InteractionModule};
use crate::losses::PredictorHeads;
use crate::nn::{derive_seed, ParamId, ParamStore, Tape, Var};
use crate::sac::{PolicyOutput, SacAgent, SacConfig, SacError};
use crate::worldsim::Observation;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error("pipeline misuse: {0}")]
    Misuse(String),
    #[error("checkpoint/architecture mismatch: {0}")]
    Incompatible(String),
}

/// Which features feed the semantic side of the attention.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttentionSource {
    /// Embedded knowledge mask (training only).
    Mask,
    /// Raw semantic features (inference, or the train-time ablation).
    Semantic,
}

pub struct FeaturePipeline {
    pub semantic: ConvEncoder,
    pub motion: Option<ConvEncoder>,
    pub interaction: Option<InteractionModule>,
    pub mask_target_grad: bool,
}

/// Everything one forward pass produces; downstream losses pick what they
/// need.
pub struct PipelineOutput {
    /// Raw semantic map (pre-enhancement), the similarity-loss side.
    pub sem_map_raw: Var,
    /// Enhanced (or raw, without interaction) maps feeding the compacts.
    pub sem_map: Var,
    pub mot_map: Option<Var>,
    pub compact_sem: Var,
    pub compact_mot: Option<Var>,
    /// Final fused feature vector.
    pub fused: Var,
    /// Embedded knowledge mask, when masks were supplied.
    pub mask_embed: Option<Var>,
    /// Interaction map X, when the interaction ran.
    pub attention: Option<Var>,
}

impl FeaturePipeline {
    pub fn new(
        store: &mut ParamStore,
        master_seed: u64,
        encoder_cfg: EncoderConfig,
        reduced_channels: usize,
        ablation: AblationSpec,
        mask_target_grad: bool,
    ) -> Self {
        let mut rng_sem = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "init.semantic"));
        let semantic = ConvEncoder::new(store, &mut rng_sem, "semantic", 3, encoder_cfg);
        let motion = ablation.use_motion.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "init.motion"));
            ConvEncoder::new(store, &mut rng, "motion", 6, encoder_cfg)
        });
        let interaction = ablation.use_interaction.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "init.interaction"));
            InteractionModule::new(
                store,
                &mut rng,
                "interaction",
                InteractionConfig {
                    channels: encoder_cfg.channels,
                    reduced_channels,
                    feat_hw: encoder_cfg.feat_hw(),
                },
            )
        });
        Self {
            semantic,
            motion,
            interaction,
            mask_target_grad,
        }
    }

    /// Width of the fused feature vector.
    pub fn feature_dim(&self) -> usize {
        let d = self.semantic.cfg.compact_dim;
        if self.motion.is_some() {
            2 * d
        } else {
            d
        }
    }

    /// Full forward pass.
    ///
    /// `residuals` is required when the motion stream exists; `masks` only
    /// when the caller wants the mask embedding (similarity loss or
    /// mask-sourced attention).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        latest: Var,
        residuals: Option<Var>,
        masks: Option<&[Array2<f64>]>,
        attention_source: AttentionSource,
        trainable: bool,
    ) -> Result<PipelineOutput, ModelError> {
        let sem_map_raw = self.semantic.conv_forward(tape, store, latest, trainable)?;
        let mot_map_raw = match (&self.motion, residuals) {
            (Some(motion), Some(res)) => Some(motion.conv_forward(tape, store, res, trainable)?),
            (Some(_), None) => {
                return Err(ModelError::Misuse(
                    "motion stream enabled but no residuals supplied".into(),
                ))
            }
            (None, _) => None,
        };
        let mask_embed = match masks {
            Some(aggregates) => Some(self.semantic.encode_mask(
                tape,
                store,
                aggregates,
                self.mask_target_grad && trainable,
            )?),
            None => None,
        };

        let (sem_map, mot_map, attention) = match (&self.interaction, mot_map_raw) {
            (Some(ix), Some(mot_raw)) => {
                let sem_side = match attention_source {
                    AttentionSource::Mask => mask_embed.ok_or_else(|| {
                        ModelError::Misuse(
                            "mask-sourced attention requested without masks".into(),
                        )
                    })?,
                    AttentionSource::Semantic => sem_map_raw,
                };
                let h = ix.reduce_semantic(tape, store, sem_side, trainable)?;
                let fm = ix.reduce_motion(tape, store, mot_raw, trainable)?;
                let x = ix.attention_map(tape, h, fm)?;
                let (sem_enh, mot_enh) =
                    ix.enhance(tape, store, sem_map_raw, mot_raw, x, trainable)?;
                (sem_enh, Some(mot_enh), Some(x))
            }
            (_, mot_raw) => (sem_map_raw, mot_raw, None),
        };

        let compact_sem = self.semantic.compact(tape, store, sem_map, trainable);
        let compact_mot = match (&self.motion, mot_map) {
            (Some(motion), Some(m)) => Some(motion.compact(tape, store, m, trainable)),
            _ => None,
        };
        let fused = match compact_mot {
            Some(cm) => fuse(tape, compact_sem, cm)?,
            None => compact_sem,
        };
        Ok(PipelineOutput {
            sem_map_raw,
            sem_map,
            mot_map,
            compact_sem,
            compact_mot,
            fused,
            mask_embed,
            attention,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.semantic.param_ids();
        if let Some(m) = &self.motion {
            ids.extend(m.param_ids());
        }
        if let Some(ix) = &self.interaction {
            ids.extend(ix.param_ids());
        }
        ids
    }
}

/// Pipeline + predictor heads + SAC agent over one parameter store.
pub struct Model {
    pub store: ParamStore,
    pub pipeline: FeaturePipeline,
    pub heads: PredictorHeads,
    pub agent: SacAgent,
    pub config: RunConfig,
    pub ablation: AblationSpec,
}

pub const ACTION_DIM: usize = 2;

impl Model {
    pub fn build(config: &RunConfig) -> Result<Self, crate::config::ConfigError> {
        let ablation = config.ablation()?;
        let seed = config.run.seed;
        let mut store = ParamStore::new();
        let encoder_cfg = EncoderConfig {
            resolution: config.env.resolution,
            channels: config.encoder.channels,
            compact_dim: config.encoder.compact_dim,
        };
        let pipeline = FeaturePipeline::new(
            &mut store,
            seed,
            encoder_cfg,
            config.encoder.reduced_channels,
            ablation,
            config.encoder.mask_target_grad,
        );
        let feature_dim = pipeline.feature_dim();
        let mut rng_heads = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init.heads"));
        let heads = PredictorHeads::new(
            &mut store,
            &mut rng_heads,
            config.encoder.compact_dim,
            feature_dim,
            ACTION_DIM,
            config.sac.hidden,
        );
        let mut rng_sac = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init.sac"));
        let sac_cfg = SacConfig {
            feature_dim,
            action_dim: ACTION_DIM,
            hidden: config.sac.hidden,
            gamma: config.sac.gamma,
            tau: config.sac.tau,
            alpha: config.alpha_mode()?,
            target_entropy: config
                .sac
                .target_entropy
                .unwrap_or(-(ACTION_DIM as f64)),
        };
        let agent = SacAgent::new(&mut store, &mut rng_sac, sac_cfg);
        Ok(Self {
            store,
            pipeline,
            heads,
            agent,
            config: config.clone(),
            ablation,
        })
    }

    /// Inference features for one observation (scratch tape, no gradients,
    /// semantic-side attention — no oracle involved).
    pub fn features_for(&self, obs: &Observation) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let latest = frame_to_array(obs.latest()).insert_axis(ndarray::Axis(0));
        let latest = tape.constant(latest);
        let residuals = if self.pipeline.motion.is_some() {
            let r = motion_input(&obs.frames)?.insert_axis(ndarray::Axis(0));
            Some(tape.constant(r))
        } else {
            None
        };
        let out = self.pipeline.forward(
            &mut tape,
            &self.store,
            latest,
            residuals,
            None,
            AttentionSource::Semantic,
            false,
        )?;
        Ok(tape.value(out.fused).iter().copied().collect())
    }

    /// Select an action for one observation.
    pub fn act(
        &self,
        obs: &Observation,
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyOutput, ModelError> {
        let features = self.features_for(obs)?;
        Ok(self.agent.select_action(&self.store, &features, deterministic, rng)?)
    }

    /// Attention map for one observation in inference mode, reshaped to
    /// `[N, N]`, or None when the model has no interaction module.
    pub fn attention_for(&self, obs: &Observation) -> Result<Option<Array2<f64>>, ModelError> {
        if self.pipeline.interaction.is_none() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let latest = frame_to_array(obs.latest()).insert_axis(ndarray::Axis(0));
        let latest = tape.constant(latest);
        let r = motion_input(&obs.frames)?.insert_axis(ndarray::Axis(0));
        let residuals = Some(tape.constant(r));
        let out = self.pipeline.forward(
            &mut tape,
            &self.store,
            latest,
            residuals,
            None,
            AttentionSource::Semantic,
            false,
        )?;
        let x = out.attention.expect("interaction module produced X");
        let shape = tape.shape(x);
        let n = shape[1];
        let flat: Vec<f64> = tape.value(x).iter().copied().collect();
        Ok(Some(Array2::from_shape_vec((n, n), flat).expect("square map")))
    }

    /// Write all parameters plus the config into an archive.
    pub fn export_params(&self, archive: &mut crate::archive::Archive) {
        archive.insert_string("meta/config", &self.config.to_json());
        for id in self.store.ids() {
            archive.insert_f64(
                &format!("param/{}", self.store.name(id)),
                self.store.value(id).clone(),
            );
        }
    }

    /// Load parameters from an archive, validating shapes. Mismatched or
    /// missing arrays are reported by name.
    pub fn import_params(&mut self, archive: &crate::archive::Archive) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = format!("param/{}", self.store.name(id));
            match archive.get_f64(&name) {
                Ok(value) => {
                    if value.shape() != self.store.value(id).shape() {
                        problems.push(format!(
                            "{name}: archive {:?} vs model {:?}",
                            value.shape(),
                            self.store.value(id).shape()
                        ));
                    } else {
                        *self.store.value_mut(id) = value.clone();
                    }
                }
                Err(_) => problems.push(format!("{name}: missing")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Incompatible(problems.join("; ")))
        }
    }

    /// Batch of zero-mask placeholders, used when a record has no cached
    /// mask but the pipeline needs one structurally.
    pub fn zero_mask(&self) -> Array2<f64> {
        let r = self.config.env.resolution;
        Array2::zeros((r, r))
    }

    /// Build a model from a checkpoint archive alone (config travels inside).
    pub fn from_archive(archive: &crate::archive::Archive) -> Result<Self, ModelError> {
        let json = archive
            .get_string("meta/config")
            .map_err(|e| ModelError::Incompatible(format!("no embedded config: {e}")))?;
        let config = RunConfig::from_json(&json)
            .map_err(|e| ModelError::Incompatible(format!("embedded config invalid: {e}")))?;
        let mut model = Model::build(&config)
            .map_err(|e| ModelError::Incompatible(format!("cannot rebuild model: {e}")))?;
        model.import_params(archive)?;
        Ok(model)
    }
}

/// Assemble `[b, 3, h, w]` latest-frame inputs from observation windows.
pub fn latest_batch(windows: &[[crate::worldsim::Frame; 3]]) -> ArrayD<f64> {
    let res = windows[0][2].resolution;
    let mut out = ArrayD::zeros(IxDyn(&[windows.len(), 3, res, res]));
    for (b, w) in windows.iter().enumerate() {
        let arr = frame_to_array(&w[2]);
        out.index_axis_mut(ndarray::Axis(0), b).assign(&arr);
    }
    out
}

/// Assemble `[b, 6, h, w]` motion residual inputs from observation windows.
pub fn residual_batch(
    windows: &[[crate::worldsim::Frame; 3]],
) -> Result<ArrayD<f64>, EncoderError> {
    let res = windows[0][2].resolution;
    let mut out = ArrayD::zeros(IxDyn(&[windows.len(), 6, res, res]));
    for (b, w) in windows.iter().enumerate() {
        let arr = motion_input(w)?;
        out.index_axis_mut(ndarray::Axis(0), b).assign(&arr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationTag;
    use crate::worldsim::{Action, World};

    fn small_config(tag: AblationTag) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run.tag = tag.key().into();
        cfg.env.resolution = 32;
        cfg.encoder.channels = 8;
        cfg.encoder.compact_dim = 16;
        cfg.encoder.reduced_channels = 4;
        cfg.sac.hidden = 32;
        cfg
    }

    fn obs_for(cfg: &RunConfig, steps: u32) -> Observation {
        let mut w = World::new(cfg.env_config().unwrap());
        let mut obs = w.reset(3);
        for _ in 0..steps {
            obs = w.step(Action::new(0.1, 0.6)).unwrap().0;
        }
        obs
    }

    #[test]
    fn feature_dims_per_ablation() {
        let m1 = Model::build(&small_config(AblationTag::M1)).unwrap();
        assert_eq!(m1.pipeline.feature_dim(), 16);
        assert!(m1.pipeline.motion.is_none());
        assert!(m1.pipeline.interaction.is_none());
        let m4 = Model::build(&small_config(AblationTag::M4)).unwrap();
        assert_eq!(m4.pipeline.feature_dim(), 32);
        assert!(m4.pipeline.motion.is_some());
        assert!(m4.pipeline.interaction.is_some());
    }

    #[test]
    fn shared_components_initialize_identically_across_ablations() {
        let m2 = Model::build(&small_config(AblationTag::M2)).unwrap();
        let m4 = Model::build(&small_config(AblationTag::M4)).unwrap();
        for name in ["semantic.conv1.weight", "motion.conv3.weight", "semantic.fc.weight"] {
            let a = m2.store.value(m2.store.lookup(name).unwrap());
            let b = m4.store.value(m4.store.lookup(name).unwrap());
            assert_eq!(a, b, "{name} differs between ablations");
        }
    }

    #[test]
    fn m4_with_zero_fn_matches_m2_bitwise() {
        let cfg2 = small_config(AblationTag::M2);
        let cfg4 = small_config(AblationTag::M4);
        let m2 = Model::build(&cfg2).unwrap();
        let m4 = Model::build(&cfg4).unwrap(); // FN weights are zero-initialized
        let obs = obs_for(&cfg2, 6);
        let f2 = m2.features_for(&obs).unwrap();
        let f4 = m4.features_for(&obs).unwrap();
        assert_eq!(f2.len(), f4.len());
        for (a, b) in f2.iter().zip(f4.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn inference_needs_no_masks_and_is_deterministic() {
        let cfg = small_config(AblationTag::M4);
        let model = Model::build(&cfg).unwrap();
        let obs = obs_for(&cfg, 4);
        let f1 = model.features_for(&obs).unwrap();
        let f2 = model.features_for(&obs).unwrap();
        assert_eq!(f1, f2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.act(&obs, true, &mut rng).unwrap();
        assert_eq!(out.action.len(), 2);
        assert!(out.action.iter().all(|a| (-1.0..=1.0).contains(a)));
    }

    #[test]
    fn train_forward_mask_attention_exposes_everything() {
        let cfg = small_config(AblationTag::M4);
        let model = Model::build(&cfg).unwrap();
        let obs = obs_for(&cfg, 8);
        let mut tape = Tape::new();
        let latest = tape.constant(latest_batch(&[obs.frames.clone()]));
        let res = tape.constant(residual_batch(&[obs.frames.clone()]).unwrap());
        let mask = Array2::from_shape_fn((32, 32), |(r, c)| ((r + c) as f64 * 0.2).sin().abs());
        let out = model
            .pipeline
            .forward(
                &mut tape,
                &model.store,
                latest,
                Some(res),
                Some(&[mask]),
                AttentionSource::Mask,
                true,
            )
            .unwrap();
        assert!(out.mask_embed.is_some());
        assert!(out.attention.is_some());
        assert_eq!(tape.shape(out.fused), vec![1, 32]);
        // X rows sum to one.
        let x = out.attention.unwrap();
        let xv = tape.value(x);
        let n = tape.shape(x)[1];
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| xv[[0, i, j]]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_attention_without_masks_is_misuse() {
        let cfg = small_config(AblationTag::M4);
        let model = Model::build(&cfg).unwrap();
        let obs = obs_for(&cfg, 2);
        let mut tape = Tape::new();
        let latest = tape.constant(latest_batch(&[obs.frames.clone()]));
        let res = tape.constant(residual_batch(&[obs.frames.clone()]).unwrap());
        let result = model.pipeline.forward(
            &mut tape,
            &model.store,
            latest,
            Some(res),
            None,
            AttentionSource::Mask,
            true,
        );
        let Err(err) = result else {
            panic!("expected misuse error")
        };
        assert!(err.to_string().contains("without masks"));
    }

    #[test]
    fn param_export_import_roundtrip_and_mismatch_detection() {
        let cfg = small_config(AblationTag::M3);
        let model = Model::build(&cfg).unwrap();
        let mut archive = crate::archive::Archive::new();
        model.export_params(&mut archive);

        // Roundtrip into a fresh model with a different seed.
        let mut other = Model::build(&cfg.with_seed(99)).unwrap();
        other.import_params(&archive).unwrap();
        let obs = obs_for(&cfg, 3);
        assert_eq!(
            model.features_for(&obs).unwrap(),
            other.features_for(&obs).unwrap()
        );

        // A structurally different model reports the offending arrays.
        let mut m1 = Model::build(&small_config(AblationTag::M1)).unwrap();
        let err = m1.import_params(&archive).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("actor.trunk.l1.weight"), "{msg}");

        // Model::from_archive rebuilds from the embedded config.
        let rebuilt = Model::from_archive(&archive).unwrap();
        assert_eq!(
            rebuilt.features_for(&obs).unwrap(),
            model.features_for(&obs).unwrap()
        );
    }
}
