//! Central-difference gradient checking.

use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Largest relative error found for one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`; only for
    /// losses that are smooth within `±2h`.
    FivePoint,
}

/// Compares the tape gradient of `loss_fn` against three-point central
/// differences for every entry of every trainable parameter in `store`.
///
/// `loss_fn` must build its loss on the supplied tape from the current
/// store values and be deterministic. The store is restored on return.
pub fn finite_diff_check<F>(store: &mut ParamStore, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    finite_diff_check_with(store, loss_fn, h, tol, Stencil::ThreePoint)
}

pub fn finite_diff_check_with<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    h: f64,
    tol: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    store.zero_grad();
    store.accumulate(&tape, &grads);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(store, &mut t)?;
        Ok(t.value(l).item())
    };

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::new();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let analytic = store.get(id).grad.clone();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            let mut at = |store: &mut ParamStore, offset: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[k] = orig + offset;
                let v = eval(store);
                store.value_mut(id).data_mut()[k] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(store, h)? - at(store, -h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let (p2, p1) = (at(store, 2.0 * h)?, at(store, h)?);
                    let (m1, m2) = (at(store, -h)?, at(store, -2.0 * h)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol })
}
