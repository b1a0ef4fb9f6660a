//! Finite-difference validation of tape gradients.

use super::tape::{Grads, Tape, VarId};
use super::tensor::ParamSet;

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error over all checked entries.
    pub max_rel_err: f64,
    /// Entry where it occurred: (param index, flat element index).
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Central-difference gradient check of `build` (a closure constructing the
/// loss on a fresh tape from the current parameters, e.g. a full forward
/// pass) against the tape's analytic gradients.
///
/// Relative error uses `|a − n| / max(|a|, |n|)`; entries where both
/// magnitudes are below `tiny` are compared absolutely against `tiny`
/// instead (both effectively zero).
pub fn gradcheck(
    params: &mut ParamSet,
    set_id: u32,
    h: f64,
    build: impl Fn(&ParamSet, &mut Tape) -> VarId,
) -> GradcheckReport {
    const TINY: f64 = 1e-6;
    let analytic: Grads = {
        let mut tape = Tape::new();
        let loss = build(params, &mut tape);
        tape.backward(loss)
    };
    let mut max_rel_err: f64 = 0.0;
    let mut worst = (0, 0);
    let mut entries_checked = 0;
    for idx in 0..params.len() {
        for e in 0..params.value(idx).len() {
            let orig = params.value(idx).data[e];
            let eval = |params: &mut ParamSet, v: f64| -> f64 {
                params.value_mut(idx).data[e] = v;
                let mut tape = Tape::new();
                let loss = build(params, &mut tape);
                tape.scalar(loss)
            };
            let fp = eval(params, orig + h);
            let fm = eval(params, orig - h);
            params.value_mut(idx).data[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.get(set_id, idx).map_or(0.0, |g| g.data[e]);
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < TINY {
                // both ~0: treat a small absolute discrepancy as zero error
                if (a - numeric).abs() < TINY {
                    0.0
                } else {
                    (a - numeric).abs()
                }
            } else {
                (a - numeric).abs() / denom
            };
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (idx, e);
            }
            entries_checked += 1;
        }
    }
    GradcheckReport {
        max_rel_err,
        worst,
        entries_checked,
    }
}
