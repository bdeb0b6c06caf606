use crate::error::{Error, Result};
use crate::numgrad::param::{ParamId, ParamStore};
use crate::numgrad::tape::{Tape, ValueId};

/// Relative errors are measured against max(|analytic|, |numeric|, FLOOR) so
/// near-zero gradients are compared absolutely at the floor's scale.
const REL_DENOM_FLOOR: f64 = 1e-6;

/// Worst finite-difference mismatch observed for one parameter.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub max_rel_err: f64,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of [`check_gradients`]: one entry per checked parameter.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// True iff every parameter's worst relative error is within `tol`.
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    /// Largest relative error across all parameters.
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// The entry with the largest relative error, if any parameter was checked.
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// One line per parameter, suitable for printing.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}: max rel err {:.3e} at ({}, {}) analytic {:.6e} numeric {:.6e}\n",
                e.param, e.max_rel_err, e.row, e.col, e.analytic, e.numeric
            ));
        }
        out
    }
}

/// Compare reverse-mode gradients of a scalar loss against central finite
/// differences `(f(θ+eps) - f(θ-eps)) / (2 eps)` for every entry of every
/// listed parameter. The closure must rebuild the loss from the store's
/// current values each time it is called.
pub fn check_gradients<F>(
    mut f: F,
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    if eps <= 0.0 {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    if tol <= 0.0 {
        return Err(Error::Argument(format!("tol must be positive, got {tol}")));
    }

    store.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let value = tape.value(loss);
        if value.shape() != (1, 1) {
            return Err(Error::dim(
                "check_gradients",
                format!("loss must be 1x1, got {}x{}", value.rows(), value.cols()),
            ));
        }
        if !value.get(0, 0).is_finite() {
            return Err(Error::NonFinite("loss in check_gradients".into()));
        }
        tape.backward(loss)?.accumulate_into(store)?;
    }

    let mut entries = Vec::with_capacity(params.len());
    for &pid in params {
        let (rows, cols) = store.get(pid).value.shape();
        let name = store.get(pid).name.clone();
        let mut worst = GradCheckEntry {
            param: name,
            max_rel_err: 0.0,
            row: 0,
            col: 0,
            analytic: store.get(pid).grad.get(0, 0),
            numeric: 0.0,
        };
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(pid).value.get(r, c);
                store.get_mut(pid).value.set(r, c, orig + eps);
                let plus = eval_scalar(&mut f, store)?;
                store.get_mut(pid).value.set(r, c, orig - eps);
                let minus = eval_scalar(&mut f, store)?;
                store.get_mut(pid).value.set(r, c, orig);

                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = store.get(pid).grad.get(r, c);
                let denom = analytic.abs().max(numeric.abs()).max(REL_DENOM_FLOOR);
                let rel = (analytic - numeric).abs() / denom;
                if rel >= worst.max_rel_err {
                    worst = GradCheckEntry {
                        param: worst.param,
                        max_rel_err: rel,
                        row: r,
                        col: c,
                        analytic,
                        numeric,
                    };
                }
            }
        }
        entries.push(worst);
    }

    Ok(GradCheckReport { eps, tol, entries })
}

fn eval_scalar<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss).get(0, 0);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss in check_gradients".into()));
    }
    Ok(v)
}
