//! Central finite-difference oracle for checking analytic gradients.

use crate::graph::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest entrywise relative error over all inputs.
    pub max_rel_err: f64,
    /// Largest entrywise absolute error over all inputs.
    pub max_abs_err: f64,
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape's gradient of `f` w.r.t. every input against central
/// differences with step `h`. `f` must build a scalar from the given leaves.
pub fn check<F>(inputs: &[Mat], h: f64, floor: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(inputs)
        .map(|(v, m)| grads.get_or_zeros(*v, m.dim()))
        .collect();

    let eval = |xs: &[Mat]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|m| g.constant(m.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut work: Vec<Mat> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for (idx, &x0) in input.indexed_iter() {
            work[k][idx] = x0 + h;
            let fp = eval(&work);
            work[k][idx] = x0 - h;
            let fm = eval(&work);
            work[k][idx] = x0;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[k][idx];
            max_rel = max_rel.max(rel_err(a, num, floor));
            max_abs = max_abs.max((a - num).abs());
        }
    }
    GradCheck {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    }
}
