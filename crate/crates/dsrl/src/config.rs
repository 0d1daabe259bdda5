//! Run configuration: plain-text TOML with sections, strict key checking,
//! and dotted-path overrides for the CLI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossWeights, RewardNorm};
use crate::sac::AlphaMode;
use crate::worldsim::{EnvConfig, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override {0}: expected section.key=value")]
    BadOverride(String),
}

/// Incremental model configurations. `Full` is an alias for `M4`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AblationTag {
    M1,
    M2,
    M3,
    M4,
    Full,
}

impl AblationTag {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "M1" => Ok(Self::M1),
            "M2" => Ok(Self::M2),
            "M3" => Ok(Self::M3),
            "M4" => Ok(Self::M4),
            "full" => Ok(Self::Full),
            other => Err(ConfigError::Invalid(format!(
                "unknown ablation tag {other:?}; expected M1, M2, M3, M4 or full"
            ))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::M1 => "M1",
            Self::M2 => "M2",
            Self::M3 => "M3",
            Self::M4 => "M4",
            Self::Full => "full",
        }
    }

    pub const ALL: [AblationTag; 5] = [
        AblationTag::M1,
        AblationTag::M2,
        AblationTag::M3,
        AblationTag::M4,
        AblationTag::Full,
    ];
}

/// Which components and loss terms an ablation enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub use_motion: bool,
    pub use_interaction: bool,
    pub similarity_on: bool,
    pub transition_on: bool,
}

/// Incremental component map: M1 is the single-stream baseline, M2 adds the
/// motion stream with plain concatenation, M3 adds mask supervision, M4 adds
/// motion supervision and interaction.
pub fn build_ablation(tag: AblationTag) -> AblationSpec {
    match tag {
        AblationTag::M1 => AblationSpec {
            use_motion: false,
            use_interaction: false,
            similarity_on: false,
            transition_on: false,
        },
        AblationTag::M2 => AblationSpec {
            use_motion: true,
            use_interaction: false,
            similarity_on: false,
            transition_on: false,
        },
        AblationTag::M3 => AblationSpec {
            use_motion: true,
            use_interaction: false,
            similarity_on: true,
            transition_on: false,
        },
        AblationTag::M4 | AblationTag::Full => AblationSpec {
            use_motion: true,
            use_interaction: true,
            similarity_on: true,
            transition_on: true,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub tag: String,
    pub seed: u64,
    pub total_frames: u64,
    pub eval_interval: u64,
    pub eval_episodes: u32,
    pub prefill: u64,
    pub update_every: u64,
    pub batch_size: usize,
    /// Include the replay buffer in checkpoints so runs can resume exactly.
    pub checkpoint_buffer: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            tag: "full".into(),
            seed: 1,
            total_frames: 110_000,
            eval_interval: 5_000,
            eval_episodes: 10,
            prefill: 1_000,
            update_every: 1,
            batch_size: 32,
            checkpoint_buffer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub scenario: String,
    pub resolution: usize,
    pub max_steps: u32,
    pub k_progress: f64,
    pub k_crash: f64,
    pub k_steer: f64,
    pub crash_terminal: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            scenario: "JW".into(),
            resolution: 64,
            max_steps: 200,
            k_progress: 1.0,
            k_crash: 0.01,
            k_steer: 0.05,
            crash_terminal: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub channels: usize,
    pub compact_dim: usize,
    pub reduced_channels: usize,
    /// Let gradients flow into the encoder through the mask-embedding branch
    /// (off by default: the embedding is a supervision target).
    pub mask_target_grad: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            channels: 32,
            compact_dim: 64,
            reduced_channels: 16,
            mask_target_grad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionSection {
    /// "mask": training-time attention pairs the embedded knowledge mask
    /// with motion features. "semantic": use raw semantic features on both
    /// sides even in training (ablation).
    pub train_attention_source: String,
}

impl Default for InteractionSection {
    fn default() -> Self {
        Self {
            train_attention_source: "mask".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub w_trans: f64,
    pub w_sg: f64,
    pub w_r: f64,
    pub w_pi: f64,
    pub w_q: f64,
    pub reward_norm: RewardNorm,
    /// Binarize per-phrase masks at 0.5 before aggregation (ablation).
    pub mask_hard_threshold: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            w_trans: 1.0,
            w_sg: 1.0,
            w_r: 1.0,
            w_pi: 1.0,
            w_q: 1.0,
            reward_norm: RewardNorm::L1,
            mask_hard_threshold: false,
        }
    }
}

/// Either the literal string "auto" or a fixed numeric temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSetting {
    Named(String),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacSection {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: AlphaSetting,
    /// Defaults to -action_dim when absent.
    pub target_entropy: Option<f64>,
    pub hidden: usize,
    pub lr: f64,
}

impl Default for SacSection {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.01,
            alpha: AlphaSetting::Named("auto".into()),
            target_entropy: None,
            hidden: 128,
            lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySection {
    pub capacity: usize,
    pub t_decay: u64,
    pub advisor_filter: bool,
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            t_decay: 10_000,
            advisor_filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub backend: String,
    pub endpoint: String,
    pub timeout_ms: u64,
    pub prompt: String,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            backend: "ground_truth".into(),
            endpoint: String::new(),
            timeout_ms: 1_000,
            prompt: "List every object on or near the road that matters for driving.".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSection,
    pub encoder: EncoderSection,
    pub interaction: InteractionSection,
    pub loss: LossSection,
    pub sac: SacSection,
    pub replay: ReplaySection,
    pub oracle: OracleSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.tag()?;
        self.scenario()?;
        self.alpha_mode()?;
        if self.env.resolution % 8 != 0 || self.env.resolution < 16 {
            return Err(ConfigError::Invalid(format!(
                "env.resolution must be a multiple of 8 and at least 16, got {}",
                self.env.resolution
            )));
        }
        if self.run.batch_size == 0 || self.run.update_every == 0 {
            return Err(ConfigError::Invalid(
                "run.batch_size and run.update_every must be positive".into(),
            ));
        }
        if self.replay.capacity == 0 {
            return Err(ConfigError::Invalid("replay.capacity must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sac.gamma.min(0.9999)) || self.sac.gamma >= 1.0 {
            return Err(ConfigError::Invalid(format!(
                "sac.gamma must be in [0, 1), got {}",
                self.sac.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.sac.tau) {
            return Err(ConfigError::Invalid(format!(
                "sac.tau must be in [0, 1], got {}",
                self.sac.tau
            )));
        }
        for (name, w) in [
            ("loss.w_trans", self.loss.w_trans),
            ("loss.w_sg", self.loss.w_sg),
            ("loss.w_r", self.loss.w_r),
            ("loss.w_pi", self.loss.w_pi),
            ("loss.w_q", self.loss.w_q),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        match self.oracle.backend.as_str() {
            "ground_truth" => {}
            "external" => {
                if self.oracle.endpoint.is_empty() {
                    return Err(ConfigError::Invalid(
                        "oracle.endpoint is required for the external backend".into(),
                    ));
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown oracle.backend {other:?}; expected ground_truth or external"
                )));
            }
        }
        match self.interaction.train_attention_source.as_str() {
            "mask" | "semantic" => {}
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown interaction.train_attention_source {other:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> Result<AblationTag, ConfigError> {
        AblationTag::parse(&self.run.tag)
    }

    pub fn ablation(&self) -> Result<AblationSpec, ConfigError> {
        Ok(build_ablation(self.tag()?))
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        Scenario::from_key(&self.env.scenario).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "unknown env.scenario {:?}; expected JW, HB or HW",
                self.env.scenario
            ))
        })
    }

    pub fn alpha_mode(&self) -> Result<AlphaMode, ConfigError> {
        match &self.sac.alpha {
            AlphaSetting::Named(s) if s == "auto" => Ok(AlphaMode::Auto),
            AlphaSetting::Named(s) => Err(ConfigError::Invalid(format!(
                "sac.alpha must be \"auto\" or a number, got {s:?}"
            ))),
            AlphaSetting::Value(v) if *v > 0.0 && v.is_finite() => Ok(AlphaMode::Fixed(*v)),
            AlphaSetting::Value(v) => Err(ConfigError::Invalid(format!(
                "fixed sac.alpha must be positive and finite, got {v}"
            ))),
        }
    }

    pub fn env_config(&self) -> Result<EnvConfig, ConfigError> {
        Ok(EnvConfig {
            scenario: self.scenario()?,
            resolution: self.env.resolution,
            max_steps: self.env.max_steps,
            k_progress: self.env.k_progress,
            k_crash: self.env.k_crash,
            k_steer: self.env.k_steer,
            crash_terminal: self.env.crash_terminal,
        })
    }

    /// Loss weights with the ablation mask applied.
    pub fn effective_weights(&self) -> Result<LossWeights, ConfigError> {
        let ab = self.ablation()?;
        Ok(LossWeights {
            w_trans: if ab.transition_on { self.loss.w_trans } else { 0.0 },
            w_sg: if ab.similarity_on { self.loss.w_sg } else { 0.0 },
            w_r: self.loss.w_r,
            w_pi: self.loss.w_pi,
            w_q: self.loss.w_q,
        })
    }

    /// Canonical serialized form, stored inside checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Clone with a different ablation tag (shared everything else).
    pub fn with_tag(&self, tag: AblationTag) -> Self {
        let mut c = self.clone();
        c.run.tag = tag.key().into();
        c
    }

    /// Clone with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.run.seed = seed;
        c
    }
}

/// Apply one `section.key=value` override onto a parsed TOML document.
fn apply_override(doc: &mut toml::Value, entry: &str) -> Result<(), ConfigError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(entry.into()))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(entry.into()));
    }
    // Parse the value as TOML; fall back to a bare string.
    let parsed: toml::Value = toml::from_str::<toml::Value>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = doc;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(entry.into()))?;
        node = table
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigError::BadOverride(entry.into()))?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_full_equals_m4() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(build_ablation(AblationTag::Full), build_ablation(AblationTag::M4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[run]\nnonsense = 3\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn ablation_component_map_matches_contract() {
        let m1 = build_ablation(AblationTag::M1);
        assert!(!m1.use_motion && !m1.use_interaction && !m1.similarity_on && !m1.transition_on);
        let m2 = build_ablation(AblationTag::M2);
        assert!(m2.use_motion && !m2.use_interaction && !m2.similarity_on);
        let m3 = build_ablation(AblationTag::M3);
        assert!(m3.use_motion && m3.similarity_on && !m3.use_interaction && !m3.transition_on);
        let m4 = build_ablation(AblationTag::M4);
        assert!(m4.use_motion && m4.use_interaction && m4.similarity_on && m4.transition_on);
    }

    #[test]
    fn m3_minus_m2_delta_is_exactly_similarity_weight() {
        let base = RunConfig::default();
        let w2 = base.with_tag(AblationTag::M2).effective_weights().unwrap();
        let w3 = base.with_tag(AblationTag::M3).effective_weights().unwrap();
        assert_eq!(w2.w_sg, 0.0);
        assert_eq!(w3.w_sg, 1.0);
        assert_eq!(
            (w2.w_trans, w2.w_r, w2.w_pi, w2.w_q),
            (w3.w_trans, w3.w_r, w3.w_pi, w3.w_q)
        );
    }

    #[test]
    fn unknown_tag_is_error() {
        assert!(AblationTag::parse("M9").is_err());
        let mut cfg = RunConfig::default();
        cfg.run.tag = "banana".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alpha_modes_parse() {
        let auto = RunConfig::from_toml_str("[sac]\nalpha = \"auto\"\n").unwrap();
        assert_eq!(auto.alpha_mode().unwrap(), AlphaMode::Auto);
        let fixed = RunConfig::from_toml_str("[sac]\nalpha = 0.2\n").unwrap();
        assert_eq!(fixed.alpha_mode().unwrap(), AlphaMode::Fixed(0.2));
        let bad = RunConfig::from_toml_str("[sac]\nalpha = \"warm\"\n").unwrap_err();
        assert!(bad.to_string().contains("auto"), "{bad}");
    }

    #[test]
    fn overrides_apply_and_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[env]\nresolution = 64\n").unwrap();
        let cfg = RunConfig::load(
            &path,
            &[
                "env.resolution=32".into(),
                "run.seed=9".into(),
                "env.scenario=HW".into(),
                "sac.alpha=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.env.resolution, 32);
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.scenario().unwrap(), Scenario::HW);
        assert_eq!(cfg.alpha_mode().unwrap(), AlphaMode::Fixed(0.5));

        let err = RunConfig::load(&path, &["env.resolution=33".into()]).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{err}");
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 123;
        cfg.env.resolution = 32;
        let json = cfg.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = RunConfig::load(std::path::Path::new("/nope/город.toml"), &[]).unwrap_err();
        assert!(err.to_string().contains("город.toml"));
    }
}
