use super::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::par;

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences. Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh graph and the point as a leaf and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    if epsilon <= 0.0 {
        return Err(invalid("finite_diff_check: epsilon must be positive"));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let root = f(&mut g, x)?;
    let analytic = g.backward(root)?.wrt_or_zero(x, point.len());

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p)?;
        let r = f(&mut g, x)?;
        let v = g.value(r).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: "finite_diff_check",
            })
        }
    };

    let coords: Vec<usize> = (0..point.len()).collect();
    let errors = par::map(&coords, |&i| -> Result<f64> {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        Ok((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0))
    });
    errors.into_iter().try_fold(0.0_f64, |m, e| Ok(m.max(e?)))
}
