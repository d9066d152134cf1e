//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use super::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Worst element seen by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over checked elements.
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn new() -> Self {
        Self { max_rel_err: 0.0, checked: 0, worst_analytic: 0.0, worst_numeric: 0.0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        self.checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_analytic = other.worst_analytic;
            self.worst_numeric = other.worst_numeric;
        }
        self
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Check `∂f/∂inputs` for a scalar-valued `f`.
pub fn check_input_gradients<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let up = eval(&work, &f)?;
            work[i].data_mut()[j] = x0 - eps;
            let down = eval(&work, &f)?;
            work[i].data_mut()[j] = x0;
            report.record(analytic[j], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Check `∂f/∂θ` for the listed parameters (optionally a strided subset of elements).
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::new();
    let value = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, store)?;
        Ok(g.value(out).data()[0])
    };
    for &id in ids {
        let n = store.value(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for j in (0..n).step_by(stride.max(1)) {
            let x0 = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = x0 + eps;
            let up = value(store)?;
            store.get_mut(id).value.data_mut()[j] = x0 - eps;
            let down = value(store)?;
            store.get_mut(id).value.data_mut()[j] = x0;
            report.record(analytic[j], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}
