//! Finite-difference gradient checking.
//!
//! The checker is deliberately independent of the tape's backward pass: it
//! only re-evaluates a scalar loss closure while nudging one parameter entry
//! at a time, so it can serve as the oracle that validates analytic
//! gradients. Stop-gradient semantics are the caller's responsibility: any
//! quantity that a loss treats as data (Bellman targets, prediction targets)
//! must be precomputed and captured by the closure, not recomputed from the
//! perturbed parameters.

use ndarray::ArrayD;
use std::collections::HashMap;

use super::store::{ParamId, ParamStore};

/// Outcome of checking one loss against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub total: usize,
    pub passed: usize,
    pub worst: Option<WorstEntry>,
}

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }
}

/// Compare `analytic` gradients for `ids` against central finite differences
/// of `loss_fn` with the given step. An element passes when the relative
/// error is within `rel_tol`, or when both gradients are below `abs_floor`
/// (the relative error of two near-zero numbers is noise).
pub fn check_against_fd<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &HashMap<ParamId, ArrayD<f64>>,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
    mut loss_fn: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut total = 0;
    let mut passed = 0;
    let mut worst: Option<WorstEntry> = None;
    for &id in ids {
        let n = store.value(id).len();
        for e in 0..n {
            let original = store.value(id).as_slice().unwrap()[e];
            set_elem(store, id, e, original + step);
            let f_plus = loss_fn(store);
            set_elem(store, id, e, original - step);
            let f_minus = loss_fn(store);
            set_elem(store, id, e, original);

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let an = analytic
                .get(&id)
                .map(|g| g.as_slice().unwrap()[e])
                .unwrap_or(0.0);
            let denom = an.abs().max(numeric.abs());
            let rel = if denom > 0.0 {
                (an - numeric).abs() / denom
            } else {
                0.0
            };
            let ok = rel <= rel_tol || (an.abs() < abs_floor && numeric.abs() < abs_floor);
            total += 1;
            if ok {
                passed += 1;
            } else if worst.as_ref().map(|w| rel > w.rel_err).unwrap_or(true) {
                worst = Some(WorstEntry {
                    param: store.name(id).to_string(),
                    element: e,
                    analytic: an,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    GradCheckReport {
        total,
        passed,
        worst,
    }
}

fn set_elem(store: &mut ParamStore, id: ParamId, e: usize, v: f64) {
    store.value_mut(id).as_slice_mut().unwrap()[e] = v;
}
