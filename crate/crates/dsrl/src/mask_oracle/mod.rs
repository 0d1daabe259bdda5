//! Knowledge-mask and advisor oracle.
//!
//! Two backends sit behind one trait: a pure ground-truth backend that reads
//! object kinds straight out of the rendered palette, and an external backend
//! that speaks the JSON wire protocol in [`protocol`] to a real
//! vision-language service. Downstream code only sees phrases, logit maps and
//! verdicts, so the backends are interchangeable.

pub mod protocol;

use ndarray::Array2;
use std::collections::HashMap;
use thiserror::Error;

use crate::nn::sigmoid;
use crate::worldsim::{Action, Frame, ObjectKind, Observation, COLOR_EGO, VIEW_UNITS};

/// Advisor cone: obstacles within this distance ahead of the ego matter.
pub const ADVISOR_CONE_LENGTH: f64 = 12.0;
/// Half-angle of the advisor cone, in radians (20 degrees).
pub const ADVISOR_CONE_HALF_ANGLE: f64 = 20.0 * std::f64::consts::PI / 180.0;
/// Steering magnitude considered erratic on a clear road.
pub const ADVISOR_STEER_LIMIT: f64 = 0.8;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("io failure talking to oracle backend: {0}")]
    Io(#[from] std::io::Error),
    #[error("oracle backend timed out after {0} ms")]
    Timeout(u64),
    #[error("malformed oracle response: {0}")]
    MalformedResponse(String),
    #[error("oracle backend error (status {status}): {message}")]
    Backend { status: u16, message: String },
    #[error("phrase not resolvable by the active backend: {0}")]
    UnresolvablePhrase(String),
}

/// Per-object logit maps plus their summed-sigmoid aggregate.
#[derive(Clone, Debug)]
pub struct KnowledgeMask {
    pub per_object: Vec<(String, Array2<f64>)>,
    pub aggregate: Array2<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Verdict {
    Reasonable,
    Unreasonable,
}

#[derive(Clone, Debug)]
pub struct AdvisorVerdict {
    pub verdict: Verdict,
    pub rationale: Option<String>,
}

/// A semantics/mask/advisor provider. Implementations must be deterministic
/// for identical inputs or document why they cannot be.
pub trait OracleBackend {
    /// Phrases describing the object kinds present in the frame.
    fn retrieve_semantics(&self, frame: &Frame, prompt: &str) -> Result<Vec<String>, OracleError>;
    /// Raw confidence logits for one phrase over the frame.
    fn mask_logits(&self, frame: &Frame, phrase: &str) -> Result<Array2<f64>, OracleError>;
    /// Reasonableness of an observation-action pair.
    fn advisor_judge(&self, frame: &Frame, action: Action) -> Result<AdvisorVerdict, OracleError>;
}

/// Oracle front end: phrase retrieval, mask aggregation and advisor calls
/// over any backend.
pub struct MaskOracle<B: OracleBackend> {
    pub backend: B,
    /// Optionally binarize each sigmoid mask at 0.5 before summation.
    pub hard_threshold: bool,
}

impl<B: OracleBackend> MaskOracle<B> {
    pub fn new(backend: B) -> Self {
        Self {
            backend,
            hard_threshold: false,
        }
    }

    pub fn retrieve_semantics(
        &self,
        obs: &Observation,
        prompt: &str,
    ) -> Result<Vec<String>, OracleError> {
        self.backend.retrieve_semantics(obs.latest(), prompt)
    }

    /// Aggregate mask over the given phrases: elementwise sum of the sigmoid
    /// of each per-phrase logit map. An empty phrase list yields a zero map.
    pub fn knowledge_mask(
        &self,
        obs: &Observation,
        phrases: &[String],
    ) -> Result<KnowledgeMask, OracleError> {
        let res = obs.resolution();
        let mut per_object = Vec::with_capacity(phrases.len());
        let mut aggregate = Array2::<f64>::zeros((res, res));
        for phrase in phrases {
            let logits = self.backend.mask_logits(obs.latest(), phrase)?;
            if logits.dim() != (res, res) {
                return Err(OracleError::MalformedResponse(format!(
                    "mask for '{phrase}' has shape {:?}, expected ({res}, {res})",
                    logits.dim()
                )));
            }
            for (agg, &logit) in aggregate.iter_mut().zip(logits.iter()) {
                let conf = sigmoid(logit);
                *agg += if self.hard_threshold {
                    if conf > 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    conf
                };
            }
            per_object.push((phrase.clone(), logits));
        }
        Ok(KnowledgeMask {
            per_object,
            aggregate,
        })
    }

    pub fn advisor_judge(
        &self,
        obs: &Observation,
        action: Action,
    ) -> Result<AdvisorVerdict, OracleError> {
        self.backend.advisor_judge(obs.latest(), action)
    }
}

/// Deterministic backend that recovers kinds, masks and hazards straight from
/// the rendered palette. Pure: same frame in, same answer out.
#[derive(Clone, Copy, Default)]
pub struct GroundTruthBackend;

impl GroundTruthBackend {
    fn kind_of_pixel(p: [u8; 3]) -> Option<ObjectKind> {
        ObjectKind::ALL.into_iter().find(|k| k.color() == p)
    }

    fn ego_centroid(frame: &Frame) -> Option<(f64, f64)> {
        let res = frame.resolution;
        let (mut rs, mut cs, mut n) = (0.0, 0.0, 0usize);
        for r in 0..res {
            for c in 0..res {
                if frame.pixel(r, c) == COLOR_EGO {
                    rs += r as f64;
                    cs += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (rs / n as f64, cs / n as f64))
    }

    /// Is any obstacle pixel within the braking cone ahead of the ego?
    fn obstacle_in_cone(frame: &Frame) -> bool {
        let res = frame.resolution;
        let units_per_px = VIEW_UNITS / res as f64;
        let Some((ego_r, ego_c)) = Self::ego_centroid(frame) else {
            return false;
        };
        let tan_half = ADVISOR_CONE_HALF_ANGLE.tan();
        for r in 0..res {
            for c in 0..res {
                if Self::kind_of_pixel(frame.pixel(r, c)).is_none() {
                    continue;
                }
                // Image up is the direction of travel.
                let ahead = (ego_r - r as f64) * units_per_px;
                let lateral = (c as f64 - ego_c) * units_per_px;
                if ahead <= 0.0 {
                    continue;
                }
                let dist = (ahead * ahead + lateral * lateral).sqrt();
                if dist <= ADVISOR_CONE_LENGTH && lateral.abs() <= ahead * tan_half {
                    return true;
                }
            }
        }
        false
    }
}

impl OracleBackend for GroundTruthBackend {
    fn retrieve_semantics(&self, frame: &Frame, _prompt: &str) -> Result<Vec<String>, OracleError> {
        let res = frame.resolution;
        let mut present = [false; 3];
        for r in 0..res {
            for c in 0..res {
                if let Some(kind) = Self::kind_of_pixel(frame.pixel(r, c)) {
                    present[kind.as_index()] = true;
                }
            }
        }
        Ok(ObjectKind::ALL
            .into_iter()
            .filter(|k| present[k.as_index()])
            .map(|k| k.phrase().to_string())
            .collect())
    }

    fn mask_logits(&self, frame: &Frame, phrase: &str) -> Result<Array2<f64>, OracleError> {
        let kind = ObjectKind::from_phrase(phrase)
            .map_err(|_| OracleError::UnresolvablePhrase(phrase.to_string()))?;
        let res = frame.resolution;
        let mut logits = Array2::from_elem((res, res), -crate::worldsim::CONFIDENCE_MARGIN);
        for r in 0..res {
            for c in 0..res {
                if Self::kind_of_pixel(frame.pixel(r, c)) == Some(kind) {
                    logits[[r, c]] = crate::worldsim::CONFIDENCE_MARGIN;
                }
            }
        }
        Ok(logits)
    }

    fn advisor_judge(&self, frame: &Frame, action: Action) -> Result<AdvisorVerdict, OracleError> {
        let hazard_ahead = Self::obstacle_in_cone(frame);
        let (verdict, rationale) = if action.accel > 0.0 && hazard_ahead {
            (
                Verdict::Unreasonable,
                "accelerating toward an obstacle in the braking cone",
            )
        } else if action.steer.abs() > ADVISOR_STEER_LIMIT && !hazard_ahead {
            (Verdict::Unreasonable, "hard steering on a clear road")
        } else {
            (Verdict::Reasonable, "no conflict detected")
        };
        Ok(AdvisorVerdict {
            verdict,
            rationale: Some(rationale.to_string()),
        })
    }
}

/// Memoizing advisor wrapper keyed by frame hash and quantized action, to
/// bound the number of backend calls during replay admission.
pub struct CachedAdvisor<B: OracleBackend> {
    pub oracle: MaskOracle<B>,
    cache: HashMap<(u64, i32, i32), Verdict>,
    pub hits: u64,
    pub misses: u64,
}

impl<B: OracleBackend> CachedAdvisor<B> {
    pub fn new(oracle: MaskOracle<B>) -> Self {
        Self {
            oracle,
            cache: HashMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn judge(&mut self, obs: &Observation, action: Action) -> Result<Verdict, OracleError> {
        let key = (
            fnv1a(&obs.latest().data),
            quantize(action.steer),
            quantize(action.accel),
        );
        if let Some(&v) = self.cache.get(&key) {
            self.hits += 1;
            return Ok(v);
        }
        let verdict = self.oracle.advisor_judge(obs, action)?.verdict;
        self.cache.insert(key, verdict);
        self.misses += 1;
        Ok(verdict)
    }
}

fn quantize(v: f64) -> i32 {
    (v / 0.05).round() as i32
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
