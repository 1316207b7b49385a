//! Finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of |analytic − numeric| / max(1, |numeric|)
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Compare analytic parameter gradients of the scalar built by `fragment`
/// against central differences with step `h`.
///
/// `fragment` must be deterministic: it is evaluated twice per checked
/// entry. At most `max_entries_per_param` entries (evenly strided) of each
/// parameter are perturbed; `None` checks all of them.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut fragment: F,
    h: f64,
    tolerance: f64,
    max_entries_per_param: Option<usize>,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &ParamStore) -> Var,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = fragment(&mut tape, store);
    tape.backward(out).expect("grad_check fragment must produce a scalar");
    let mut analytic = ParamStore::new();
    for (_, name, t) in store.iter() {
        let mut zero = crate::tensor::Tensor::zeros(t.shape());
        zero.accumulate_grad(&vec![0.0; t.numel()]);
        analytic.insert(name, zero).unwrap();
    }
    tape.write_param_grads(&mut analytic);
    drop(tape);

    let mut eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let v = fragment(&mut tape, store);
        tape.scalar(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        entries_checked: 0,
        tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).numel();
        let stride = match max_entries_per_param {
            Some(cap) if cap > 0 && numel > cap => numel.div_ceil(cap),
            _ => 1,
        };
        for idx in (0..numel).step_by(stride) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).grad().unwrap()[idx];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if report.entries_checked == 1 || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = store.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    report
}
