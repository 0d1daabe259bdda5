//! Network building blocks: convolution, linear, layer norm, MLP.
//!
//! Layers register their parameters in a [`ParamStore`] at construction and
//! replay them onto a [`Tape`] at forward time. The `trainable` flag decides
//! whether the pass contributes gradients to those parameters.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Orthogonal initialization via modified Gram-Schmidt on a Gaussian draw.
/// Rows are orthonormalized when `rows <= cols`, columns otherwise, then the
/// whole matrix is scaled by `gain`.
pub fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    // r <= c: orthonormalize the r rows.
    let mut m = Array2::<f64>::zeros((r, c));
    for e in m.iter_mut() {
        *e = gauss(rng);
    }
    for i in 0..r {
        for j in 0..i {
            let dot = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).zip_mut_with(&prev, |a, &b| *a -= dot * b);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        assert!(norm > 1e-12, "degenerate draw in orthogonal init");
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m.mapv_inplace(|v| v * gain);
    if transpose {
        m.t().as_standard_layout().to_owned()
    } else {
        m
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes exactly two draws per sample.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// 3x3 (or 1x1) convolution layer with per-channel bias.
#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let flat = orthogonal(rng, c_out, c_in * kernel * kernel, gain);
        let w = flat
            .into_shape_with_order(IxDyn(&[c_out, c_in, kernel, kernel]))
            .expect("conv weight shape");
        Self {
            w: store.register(&format!("{name}.weight"), w),
            b: store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let w = tape.param(store, self.w, trainable);
        let b = tape.param(store, self.b, trainable);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer; weight is stored `[in, out]` so the forward pass is
/// a plain `x . W + b`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let w = orthogonal(rng, d_in, d_out, gain).into_dyn();
        Self {
            w: store.register(&format!("{name}.weight"), w),
            b: store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d_out]))),
        }
    }

    /// All-zero weights and bias. Used by the interaction enhancement maps so
    /// the module starts as an exact identity.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.register(
                &format!("{name}.weight"),
                ArrayD::zeros(IxDyn(&[d_in, d_out])),
            ),
            b: store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d_out]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let w = tape.param(store, self.w, trainable);
        let b = tape.param(store, self.b, trainable);
        let prod = tape.matmul(x, w);
        tape.add_rowvec(prod, b)
    }
}

/// Layer normalization over the feature axis with learnable gain and bias.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(&format!("{name}.gain"), ArrayD::ones(IxDyn(&[dim]))),
            bias: store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let g = tape.param(store, self.gain, trainable);
        let b = tape.param(store, self.bias, trainable);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// ReLU MLP: hidden layers with ReLU, linear output.
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let gain = if i + 2 == dims.len() { 1.0 } else { 2f64.sqrt() };
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.l{}", i + 1),
                dims[i],
                dims[i + 1],
                gain,
            ));
        }
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h, trainable);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(&mut rng, 12, 5, 1.0); // rows > cols: columns orthonormal
        let gram = q.t().dot(&q);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[[i, j]] - expect).abs() < 1e-10,
                    "gram[{i},{j}] = {}",
                    gram[[i, j]]
                );
            }
        }
    }

    #[test]
    fn orthogonal_gain_scales_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = orthogonal(&mut rng, 6, 6, 2.0);
        let gram = q.t().dot(&q);
        for i in 0..6 {
            assert!((gram[[i, i]] - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mlp_shapes_and_zero_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(&mut store, &mut rng, "probe", &[4, 8, 2]);
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, 4])));
        let y = mlp.forward(&mut tape, &store, x, false);
        assert_eq!(tape.shape(y), vec![3, 2]);
        // zero input + zero bias -> zero output
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let l = Linear::new(&mut store, &mut rng, "d", 7, 3, 1.0);
            store.value(l.w).clone()
        };
        assert_eq!(build(), build());
    }
}
