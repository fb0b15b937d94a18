use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Per-coordinate comparison of analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `(parameter, flat index, analytic, numeric, relative error)`.
    pub entries: Vec<(String, usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn rel_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.4)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors().fold(0.0, f64::max)
    }

    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        self.rel_errors().filter(|&e| e <= tol).count() as f64 / self.entries.len() as f64
    }

    /// The acceptance rule used throughout: `frac` of coordinates within `tol`, none above `max`.
    pub fn passes(&self, tol: f64, frac: f64, max: f64) -> bool {
        !self.entries.is_empty() && self.fraction_within(tol) >= frac && self.max_rel_error() <= max
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

/// Magnitude below which gradients are compared absolutely. Central
/// differences at `FD_STEP` carry roundoff near `1e-11` for O(1) losses, so
/// smaller gradients cannot be resolved to a relative `1e-4`.
pub const REL_FLOOR: f64 = 1e-6;

/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step [`FD_STEP`].
///
/// `build` records the function on a fresh graph and returns the scalar root;
/// it is re-run for every perturbed coordinate, so it must be deterministic.
/// `max_coords` caps how many coordinates of each parameter are probed (evenly
/// strided); `None` probes all of them.
pub fn finite_diff_check<F>(store: &ParamStore, max_coords: Option<usize>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = build(store, &mut g)?;
    let grads = g.backward(root)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, gt) in grads.params() {
        match analytic.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                    *a += b;
                }
            }
            None => {
                analytic.insert(name.to_string(), gt.clone());
            }
        }
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let r = build(s, &mut g)?;
        let v = g.value(r).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v} during finite differences")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for name in names {
        let base = store.value(&name)?.clone();
        let n = base.len();
        let stride = match max_coords {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus.data_mut()[idx] += FD_STEP;
            probe.set_value(&name, plus)?;
            let fp = eval(&probe)?;
            let mut minus = base.clone();
            minus.data_mut()[idx] -= FD_STEP;
            probe.set_value(&name, minus)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[idx]);
            report
                .entries
                .push((name.clone(), idx, a, numeric, relative_error(a, numeric)));
        }
        probe.set_value(&name, base)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![0.3, -1.2, 2.5]), true).unwrap();
        let r = finite_diff_check(&s, None, |s, g| {
            let x = g.param(s, "x")?;
            let sq = g.mul(x, x)?;
            let y = g.scale(sq, 1.5);
            Ok(g.sum_all(y))
        })
        .unwrap();
        assert_eq!(r.entries.len(), 3);
        assert!(r.max_rel_error() < 1e-9, "{:?}", r.entries);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(800.0), true).unwrap();
        let r = finite_diff_check(&s, None, |s, g| {
            let x = g.param(s, "x")?;
            let e = g.exp(x);
            Ok(g.sum_all(e))
        });
        assert!(r.is_err());
    }
}
