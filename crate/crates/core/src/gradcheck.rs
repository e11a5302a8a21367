//! Central finite-difference gradients, the oracle for every reverse-mode
//! derivative in this crate.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, ParamStore, Result};

/// Default perturbation.
pub const FD_STEP: f64 = 1e-5;

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, error `O(h²)`.
    #[default]
    Central,
    /// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`, error `O(h⁴)`.
    /// Tolerates a larger `h`, which keeps roundoff in `f` from swamping
    /// small derivatives.
    FivePoint,
}

/// Central differences for every scalar of every parameter in `store`.
///
/// `loss` must be deterministic. Each coordinate is restored bit-exactly after
/// it has been probed.
pub fn finite_difference_gradients<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    finite_difference_gradients_with(store, h, Stencil::Central, loss)
}

pub fn finite_difference_gradients_with<F>(store: &mut ParamStore, h: f64, stencil: Stencil, mut loss: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).data()[i];
            let mut probe = |offset: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[i] = orig + offset;
                let value = loss(store);
                store.get_mut(id).data_mut()[i] = orig;
                match value {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::NonFiniteLoss {
                        name: store.name(id).into(),
                        index: i,
                    }),
                    Err(e) => Err(e),
                }
            };
            let near = probe(h)? - probe(-h)?;
            g[i] = match stencil {
                Stencil::Central => near / (2.0 * h),
                Stencil::FivePoint => {
                    let far = probe(2.0 * h)? - probe(-2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
        }
        out.push(g);
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between two gradient sets, with the location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param_index: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        param_index: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (e, (&x, &y)) in a.iter().zip(n).enumerate() {
            report.checked += 1;
            let r = relative_error(x, y, floor);
            if r > report.max_relative_error {
                report = GradCheckReport {
                    max_relative_error: r,
                    param_index: p,
                    element: e,
                    analytic: x,
                    numeric: y,
                    checked: report.checked,
                };
            }
        }
    }
    report
}
