//! Adam optimizer over a group of parameters from a [`ParamStore`].

use ndarray::ArrayD;
use std::collections::HashMap;

use super::store::{ParamId, ParamStore};

pub struct Adam {
    pub ids: Vec<ParamId>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<ParamId, ArrayD<f64>>,
    v: HashMap<ParamId, ArrayD<f64>>,
}

impl Adam {
    pub fn new(ids: Vec<ParamId>, lr: f64) -> Self {
        Self {
            ids,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update using whichever of this group's parameters appear in
    /// `grads`; missing entries are treated as zero gradient and skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in &self.ids {
            let Some(g) = grads.get(&id) else { continue };
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |me, &ge| *me = 0.9 * *me + 0.1 * ge);
            v.zip_mut_with(g, |ve, &ge| *ve = 0.999 * *ve + 0.001 * ge * ge);
            let param = store.value_mut(id);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &me, &ve| {
                    *p -= lr * (me / bc1) / ((ve / bc2).sqrt() + eps);
                });
        }
    }

    /// Moment arrays for checkpointing, in group order. Parameters that have
    /// never received a gradient have no entry yet.
    pub fn state(&self) -> (u64, Vec<(ParamId, &ArrayD<f64>, &ArrayD<f64>)>) {
        let mut rows = Vec::new();
        for &id in &self.ids {
            if let (Some(m), Some(v)) = (self.m.get(&id), self.v.get(&id)) {
                rows.push((id, m, v));
            }
        }
        (self.t, rows)
    }

    pub fn restore(&mut self, t: u64, rows: Vec<(ParamId, ArrayD<f64>, ArrayD<f64>)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (id, m, v) in rows {
            self.m.insert(id, m);
            self.v.insert(id, v);
        }
    }
}
