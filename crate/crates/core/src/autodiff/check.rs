use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Step and error floor used by [`grad_check_with`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor; gradients smaller than this are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
        }
    }
}

pub fn grad_check<F>(params: &mut ParamStore<f64>, tol: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_with(params, tol, GradCheckOptions::default(), build)
}

/// Compares the analytic gradient of the scalar built by `build` against central
/// differences for every entry of every parameter.
pub fn grad_check_with<F>(
    params: &mut ParamStore<f64>,
    tol: f64,
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape, params)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::shape(format!(
                "grad_check needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let grads = tape.backward(out)?;
    let ids: Vec<_> = params.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .map(|g| g.into_data())
                .unwrap_or_else(|| vec![0.0; params.value(id).len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        entries_checked: 0,
        tol,
    };
    for (id, a) in ids.into_iter().zip(analytic) {
        for (k, &ak) in a.iter().enumerate() {
            let orig = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = orig + opts.eps;
            let plus = eval(params)?;
            params.value_mut(id).data_mut()[k] = orig - opts.eps;
            let minus = eval(params)?;
            params.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let denom = ak.abs().max(numeric.abs()).max(opts.floor);
            let rel = (ak - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_none() {
                if rel >= report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst_param = Some(format!("{}[{k}]", params.name(id)));
                }
            }
        }
    }
    Ok(report)
}
