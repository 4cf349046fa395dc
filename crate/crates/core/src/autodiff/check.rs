//! Central finite-difference oracle for reverse-mode gradients.

use super::graph::{evaluate, gradient};
use super::{Graph, ParamTree, TensorError};

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// One-sided slopes disagreeing by more than this fraction (of `max(1, |slope|)`)
/// mark a coordinate as sitting on a kink.
pub const KINK_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct FdCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Largest relative error among non-suspect coordinates.
    pub max_rel_error: f64,
    /// Coordinates over tolerance.
    pub failures: Vec<FdCoordinate>,
    /// Coordinates where the function looks non-differentiable at step `h`
    /// (one-sided slopes disagree, or a perturbed evaluation failed). Not
    /// counted against the tolerance.
    pub suspects: Vec<FdCoordinate>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar output `output` against
/// central differences with step `h` for every coordinate of `params`.
pub fn finite_difference_check(
    graph: &Graph,
    output: &str,
    params: &ParamTree,
    h: f64,
    tol: f64,
) -> Result<FdReport, TensorError> {
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument { op: "finite_difference_check", detail: format!("h = {h}") });
    }
    let analytic = gradient(graph, output, params)?;
    let mut binding = graph.recorded_inputs();
    for (name, t) in params.iter() {
        binding.insert(name, t.clone());
    }
    let eval_at = |binding: &ParamTree| -> Option<f64> {
        evaluate(graph, binding).ok().and_then(|o| o.get(output).map(|t| t.item()))
    };
    let base = eval_at(&binding).ok_or_else(|| TensorError::UnknownName(output.to_string()))?;

    let mut report = FdReport { tolerance: tol, ..Default::default() };
    for (name, t) in params.iter() {
        let grad = analytic.get(name).expect("gradient for every param");
        for i in 0..t.len() {
            let original = t.data()[i];
            let probe = |x: f64, binding: &mut ParamTree| {
                binding.get_mut(name).expect("bound").data_mut()[i] = x;
                eval_at(binding)
            };
            let plus = probe(original + h, &mut binding);
            let minus = probe(original - h, &mut binding);
            binding.get_mut(name).expect("bound").data_mut()[i] = original;

            report.checked += 1;
            let a = grad.data()[i];
            let coord = |numeric: f64| FdCoordinate {
                param: name.to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            };
            let (Some(plus), Some(minus)) = (plus, minus) else {
                report.suspects.push(coord(f64::NAN));
                continue;
            };
            let numeric = (plus - minus) / (2.0 * h);
            let forward = (plus - base) / h;
            let backward = (base - minus) / h;
            let c = coord(numeric);
            if (forward - backward).abs() > KINK_THRESHOLD * numeric.abs().max(1.0) {
                report.suspects.push(c);
                continue;
            }
            report.max_rel_error = report.max_rel_error.max(c.rel_error);
            if c.rel_error >= tol {
                report.failures.push(c);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.7, -1.3, 2.1, 0.05])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y = g.sum_all(sq).unwrap();
        g.set_output("loss", y);
        let report = finite_difference_check(&g, "loss", &g.recorded_inputs(), 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn relu_kink_is_flagged_not_failed() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.0, 1.0])).unwrap();
        let r = g.relu(x).unwrap();
        let y = g.sum_all(r).unwrap();
        g.set_output("loss", y);
        let report = finite_difference_check(&g, "loss", &g.recorded_inputs(), 1e-5, 1e-4).unwrap();
        assert!(report.passed());
        assert_eq!(report.suspects.len(), 1);
        assert_eq!(report.suspects[0].index, 0);
    }

    #[test]
    fn sqrt_gradient_matches() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![4.0])).unwrap();
        let s = g.sqrt(x).unwrap();
        let y = g.sum_all(s).unwrap();
        g.set_output("loss", y);
        let report = finite_difference_check(&g, "loss", &g.recorded_inputs(), 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
