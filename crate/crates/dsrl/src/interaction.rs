//! Bidirectional cross-attention between the two streams.
//!
//! Both feature maps are reduced with a 1x1 convolution, flattened to one row
//! per spatial position, and combined into a row-stochastic interaction map
//! X. Two zero-initialized fully connected maps turn X into additive
//! enhancements for the semantic and motion maps, so a fresh module is an
//! exact identity. During training the semantic side of the attention comes
//! from the embedded knowledge mask; at inference the raw semantic features
//! stand in, with an identical call shape.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Conv2d, Linear, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum InteractionError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite values in attention input")]
    NonFinite,
}

/// Geometry of the interaction module.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InteractionConfig {
    /// Channels of the incoming feature maps (C).
    pub channels: usize,
    /// Reduced channels for the attention inputs (C').
    pub reduced_channels: usize,
    /// Spatial side of the feature maps (H_f = W_f).
    pub feat_hw: usize,
}

impl InteractionConfig {
    pub fn positions(&self) -> usize {
        self.feat_hw * self.feat_hw
    }
}

pub struct InteractionModule {
    reduce_sem: Conv2d,
    reduce_mot: Conv2d,
    fn_sem: Linear,
    fn_mot: Linear,
    pub cfg: InteractionConfig,
}

impl InteractionModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: InteractionConfig,
    ) -> Self {
        let n = cfg.positions();
        Self {
            reduce_sem: Conv2d::new(
                store,
                rng,
                &format!("{name}.reduce_sem"),
                cfg.channels,
                cfg.reduced_channels,
                1,
                1,
                0,
                1.0,
            ),
            reduce_mot: Conv2d::new(
                store,
                rng,
                &format!("{name}.reduce_mot"),
                cfg.channels,
                cfg.reduced_channels,
                1,
                1,
                0,
                1.0,
            ),
            // Zero init keeps the enhanced pipeline exactly equal to the
            // plain dual-stream model until training moves these weights.
            fn_sem: Linear::zeros(store, &format!("{name}.fn_sem"), n * n, n * cfg.channels),
            fn_mot: Linear::zeros(store, &format!("{name}.fn_mot"), n * n, n * cfg.channels),
            cfg,
        }
    }

    fn check_map(&self, tape: &Tape, x: Var) -> Result<(), InteractionError> {
        let shape = tape.shape(x);
        let want = [self.cfg.channels, self.cfg.feat_hw, self.cfg.feat_hw];
        if shape.len() != 4 || shape[1..] != want {
            return Err(InteractionError::ShapeMismatch {
                expected: format!("[batch, {}, {}, {}]", want[0], want[1], want[2]),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Reduce a `[b, C, H_f, W_f]` map to `[b, N, C']` rows of per-position
    /// features. Semantic-side and motion-side reducers are separate layers.
    pub fn reduce_semantic(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fmap: Var,
        trainable: bool,
    ) -> Result<Var, InteractionError> {
        self.reduce(tape, store, &self.reduce_sem, fmap, trainable)
    }

    pub fn reduce_motion(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fmap: Var,
        trainable: bool,
    ) -> Result<Var, InteractionError> {
        self.reduce(tape, store, &self.reduce_mot, fmap, trainable)
    }

    fn reduce(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv: &Conv2d,
        fmap: Var,
        trainable: bool,
    ) -> Result<Var, InteractionError> {
        self.check_map(tape, fmap)?;
        let b = tape.shape(fmap)[0];
        let reduced = conv.forward(tape, store, fmap, trainable);
        let n = self.cfg.positions();
        let by_channel = tape.reshape(reduced, &[b, self.cfg.reduced_channels, n]);
        Ok(tape.transpose_last2(by_channel)) // [b, N, C']
    }

    /// Interactive attention map from two `[b, N, C']` inputs:
    /// row-softmax(row-softmax(H F^T / sqrt(C')) + row-softmax(F H^T / sqrt(C'))).
    pub fn attention_map(
        &self,
        tape: &mut Tape,
        h: Var,
        f: Var,
    ) -> Result<Var, InteractionError> {
        let hs = tape.shape(h);
        let fs = tape.shape(f);
        if hs != fs || hs.len() != 3 {
            return Err(InteractionError::ShapeMismatch {
                expected: format!("matching [b, N, C'], got {hs:?}"),
                got: format!("{fs:?}"),
            });
        }
        if !tape.value(h).iter().all(|v| v.is_finite())
            || !tape.value(f).iter().all(|v| v.is_finite())
        {
            return Err(InteractionError::NonFinite);
        }
        let scale = 1.0 / (self.cfg.reduced_channels as f64).sqrt();
        let ft = tape.transpose_last2(f);
        let hf = tape.bmm(h, ft);
        let hf = tape.scale(hf, scale);
        let a1 = tape.softmax_last(hf);
        let ht = tape.transpose_last2(h);
        let fh = tape.bmm(f, ht);
        let fh = tape.scale(fh, scale);
        let a2 = tape.softmax_last(fh);
        let sum = tape.add(a1, a2);
        Ok(tape.softmax_last(sum))
    }

    /// Additive enhancement of both maps from the attention matrix. With the
    /// FN weights at zero this returns the inputs bit-for-bit.
    pub fn enhance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_sem: Var,
        f_mot: Var,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Var), InteractionError> {
        self.check_map(tape, f_sem)?;
        self.check_map(tape, f_mot)?;
        let n = self.cfg.positions();
        let xs = tape.shape(x);
        if xs != [tape.shape(f_sem)[0], n, n] {
            return Err(InteractionError::ShapeMismatch {
                expected: format!("[batch, {n}, {n}]"),
                got: format!("{xs:?}"),
            });
        }
        let b = xs[0];
        let flat = tape.reshape(x, &[b, n * n]);
        let map_shape = [b, self.cfg.channels, self.cfg.feat_hw, self.cfg.feat_hw];
        let es = self.fn_sem.forward(tape, store, flat, trainable);
        let es = tape.reshape(es, &map_shape);
        let em = self.fn_mot.forward(tape, store, flat, trainable);
        let em = tape.reshape(em, &map_shape);
        Ok((tape.add(f_sem, es), tape.add(f_mot, em)))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.reduce_sem.w,
            self.reduce_sem.b,
            self.reduce_mot.w,
            self.reduce_mot.b,
            self.fn_sem.w,
            self.fn_sem.b,
            self.fn_mot.w,
            self.fn_mot.b,
        ]
    }

    pub fn fn_param_ids(&self) -> Vec<ParamId> {
        vec![self.fn_sem.w, self.fn_sem.b, self.fn_mot.w, self.fn_mot.b]
    }
}

/// Concatenate the two compact vectors, semantic first.
pub fn fuse(tape: &mut Tape, f_sem: Var, f_mot: Var) -> Result<Var, InteractionError> {
    let ss = tape.shape(f_sem);
    let ms = tape.shape(f_mot);
    if ss.len() != 2 || ms.len() != 2 || ss[0] != ms[0] {
        return Err(InteractionError::ShapeMismatch {
            expected: "two [batch, D] vectors".into(),
            got: format!("{ss:?} vs {ms:?}"),
        });
    }
    Ok(tape.concat_cols(f_sem, f_mot))
}
