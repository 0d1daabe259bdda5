//! Dual-stream feature extraction.
//!
//! The semantic stream encodes the latest frame; the motion stream encodes
//! the channel-stacked residuals of the three most recent frames. Both use
//! the same four-layer 3x3 convolution stack (strides 2, 2, 2, 1, ReLU) and
//! reduce to a compact vector with a fully connected layer plus layer norm.
//! The mask branch reuses the semantic weights to embed aggregate knowledge
//! masks into feature space.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Conv2d, LayerNorm, Linear, ParamId, ParamStore, Tape, Var};
use crate::worldsim::Frame;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("motion input needs exactly 3 frames, got {0}")]
    FrameCount(usize),
}

/// Geometry and width settings shared by both streams.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Input frame resolution (square).
    pub resolution: usize,
    /// Channels of every conv layer (C).
    pub channels: usize,
    /// Compact vector width (D).
    pub compact_dim: usize,
}

impl EncoderConfig {
    /// Spatial side of the final feature map; the stride pattern divides the
    /// input by 8.
    pub fn feat_hw(&self) -> usize {
        self.resolution / 8
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.resolution % 8 != 0 || self.resolution < 16 {
            return Err(EncoderError::ShapeMismatch {
                expected: "resolution divisible by 8 and >= 16".into(),
                got: format!("{}", self.resolution),
            });
        }
        Ok(())
    }
}

/// Four conv layers and a compact head. `in_channels` is 3 for the semantic
/// stream and 6 for the motion stream.
pub struct ConvEncoder {
    convs: [Conv2d; 4],
    fc: Linear,
    ln: LayerNorm,
    pub in_channels: usize,
    pub cfg: EncoderConfig,
}

impl ConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        cfg: EncoderConfig,
    ) -> Self {
        cfg.validate().expect("encoder config");
        let c = cfg.channels;
        let gain = 2f64.sqrt();
        let convs = [
            Conv2d::new(store, rng, &format!("{name}.conv1"), in_channels, c, 3, 2, 1, gain),
            Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3, 2, 1, gain),
            Conv2d::new(store, rng, &format!("{name}.conv3"), c, c, 3, 2, 1, gain),
            Conv2d::new(store, rng, &format!("{name}.conv4"), c, c, 3, 1, 1, gain),
        ];
        let flat = c * cfg.feat_hw() * cfg.feat_hw();
        let fc = Linear::new(store, rng, &format!("{name}.fc"), flat, cfg.compact_dim, 1.0);
        let ln = LayerNorm::new(store, &format!("{name}.ln"), cfg.compact_dim);
        Self {
            convs,
            fc,
            ln,
            in_channels,
            cfg,
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(), EncoderError> {
        let shape = tape.shape(x);
        let want = [self.in_channels, self.cfg.resolution, self.cfg.resolution];
        if shape.len() != 4 || shape[1..] != want {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("[batch, {}, {}, {}]", want[0], want[1], want[2]),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Convolutional trunk: `[b, in, H, W] -> [b, C, H/8, W/8]` feature map.
    pub fn conv_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        trainable: bool,
    ) -> Result<Var, EncoderError> {
        self.check_input(tape, x)?;
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, store, h, trainable);
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Compact head: flatten the map and apply FC + layer norm.
    pub fn compact(&self, tape: &mut Tape, store: &ParamStore, fmap: Var, trainable: bool) -> Var {
        let shape = tape.shape(fmap);
        let flat = tape.reshape(fmap, &[shape[0], shape[1] * shape[2] * shape[3]]);
        let fc = self.fc.forward(tape, store, flat, trainable);
        self.ln.forward(tape, store, fc, trainable)
    }

    /// Full encode: feature map and compact vector.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Var), EncoderError> {
        let fmap = self.conv_forward(tape, store, x, trainable)?;
        let compact = self.compact(tape, store, fmap, trainable);
        Ok((fmap, compact))
    }

    /// Embed an aggregate knowledge mask with the semantic weights: the
    /// single channel is replicated to all three input channels. Pass
    /// `trainable = false` to hold the embedding as a supervision target.
    pub fn encode_mask(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        aggregates: &[Array2<f64>],
        trainable: bool,
    ) -> Result<Var, EncoderError> {
        let res = self.cfg.resolution;
        let b = aggregates.len();
        let mut input = ArrayD::<f64>::zeros(IxDyn(&[b, 3, res, res]));
        for (bi, agg) in aggregates.iter().enumerate() {
            if agg.dim() != (res, res) {
                return Err(EncoderError::ShapeMismatch {
                    expected: format!("({res}, {res})"),
                    got: format!("{:?}", agg.dim()),
                });
            }
            for ((r, c), &v) in agg.indexed_iter() {
                for ch in 0..3 {
                    input[[bi, ch, r, c]] = v;
                }
            }
        }
        let x = tape.constant(input);
        self.conv_forward(tape, store, x, trainable)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|c| [c.w, c.b]).collect();
        ids.extend([self.fc.w, self.fc.b, self.ln.gain, self.ln.bias]);
        ids
    }
}

/// Channel-first `[3, h, w]` array of one frame, pixels scaled to [0, 1].
pub fn frame_to_array(frame: &Frame) -> ArrayD<f64> {
    ArrayD::from_shape_vec(
        IxDyn(&[3, frame.resolution, frame.resolution]),
        frame.to_channels_f64(),
    )
    .expect("frame layout")
}

/// Residuals of adjacent frames, stacked to 6 channels:
/// `[f1 - f0; f2 - f1]`.
pub fn motion_input(frames: &[Frame]) -> Result<ArrayD<f64>, EncoderError> {
    if frames.len() != 3 {
        return Err(EncoderError::FrameCount(frames.len()));
    }
    let res = frames[0].resolution;
    for f in frames {
        if f.resolution != res {
            return Err(EncoderError::ShapeMismatch {
                expected: format!("resolution {res}"),
                got: format!("{}", f.resolution),
            });
        }
    }
    let a = frames[0].to_channels_f64();
    let b = frames[1].to_channels_f64();
    let c = frames[2].to_channels_f64();
    let plane = 3 * res * res;
    let mut out = vec![0.0; 2 * plane];
    for i in 0..plane {
        out[i] = b[i] - a[i];
        out[plane + i] = c[i] - b[i];
    }
    ArrayD::from_shape_vec(IxDyn(&[6, res, res]), out).map_err(|_| EncoderError::ShapeMismatch {
        expected: "[6, res, res]".into(),
        got: "internal".into(),
    })
}
