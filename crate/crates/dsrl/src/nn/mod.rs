//! Small tape-based autodiff engine and the layers built on it.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod store;
pub mod tape;

pub use adam::Adam;
pub use layers::{orthogonal, Conv2d, LayerNorm, Linear, Mlp};
pub use store::{ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};

/// Deterministic seed derivation: one master seed fans out to independent
/// streams keyed by label (component init, environment, policy noise, ...).
/// SplitMix64 over the master seed xor a label hash.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325; // FNV-1a offset basis
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
