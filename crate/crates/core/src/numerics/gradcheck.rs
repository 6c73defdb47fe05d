//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on probed coordinates per parameter tensor; `None` probes all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    /// Tape and finite-difference values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Worst per-coordinate error of each tensor.
    pub per_param: Vec<(String, f64)>,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the probed coordinates of each tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub max_tensor_rel_error: f64,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if g.value(out).len() != 1 {
        return Err(Error::Misuse("grad_check needs a scalar-valued function".into()));
    }
    Ok(g.scalar(out))
}

/// Compares the tape gradient of `f` with central differences over every
/// trainable parameter in `store`. `f` runs on an evaluation-mode graph and
/// must return a scalar.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let base = eval(&f, store)?;
    let again = eval(&f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Misuse(
            "grad_check target is not deterministic (run stochastic layers in eval mode)".into(),
        ));
    }

    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new();
        let out = f(&mut g, &analytic)?;
        g.backward(out)?;
        g.accumulate_param_grads(&mut analytic);
    }

    let mut probe = store.clone();
    let h = opts.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        per_param: Vec::new(),
        per_tensor: Vec::new(),
        max_tensor_rel_error: 0.0,
    };
    for id in store.ids() {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.value(id).len();
        let stride = match opts.max_entries_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut worst_here: f64 = 0.0;
        let (mut dd, mut aa, mut nn) = (0.0, 0.0, 0.0);
        for idx in (0..n).step_by(stride) {
            let a = analytic.grad(id).map_or(0.0, |g| g.data()[idx]);
            let orig = store.value(id).data()[idx];
            probe.value_mut(id)?.data_mut()[idx] = orig + h;
            let plus = eval(&f, &probe)?;
            probe.value_mut(id)?.data_mut()[idx] = orig - h;
            let minus = eval(&f, &probe)?;
            probe.value_mut(id)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(a, numeric);
            dd += (a - numeric) * (a - numeric);
            aa += a * a;
            nn += numeric * numeric;
            report.checked += 1;
            worst_here = worst_here.max(err);
            if report.worst.is_empty() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{idx}]", store.name(id));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
        report.per_param.push((store.name(id).to_string(), worst_here));
        let tensor_err = dd.sqrt() / aa.sqrt().max(nn.sqrt()).max(1e-8);
        report.max_tensor_rel_error = report.max_tensor_rel_error.max(tensor_err);
        report.per_tensor.push((store.name(id).to_string(), tensor_err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor2;
    use std::cell::Cell;

    #[test]
    fn nondeterministic_target_is_rejected() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor2::scalar(1.0));
        let counter = Cell::new(0.0);
        let r = grad_check(
            &store,
            |g, s| {
                counter.set(counter.get() + 1.0);
                let x = g.param(s, p);
                g.shift(x, counter.get())
            },
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::Misuse(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
    }
}
