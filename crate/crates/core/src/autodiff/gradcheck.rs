//! Central finite-difference checks for graph-built scalar functions.

use super::{AutodiffError, Graph, Tensor, Var};

/// Denominator floor for entrywise relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// `‖analytic - numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`.
    pub norm_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let mut max_rel: f64 = 0.0;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        let d = (a - n).abs();
        max_rel = max_rel.max(d / a.abs().max(n.abs()).max(REL_FLOOR));
        diff2 += d * d;
        a2 += a * a;
        n2 += n * n;
    }
    let norm_rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
    (max_rel, norm_rel)
}

/// Compares the reverse-mode gradient of `f` with respect to every input
/// against central differences of step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<InputCheck>, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let (max_rel_error, norm_rel_error) = relative_errors(&analytic, &numeric);
        reports.push(InputCheck {
            max_rel_error,
            norm_rel_error,
            analytic,
            numeric,
        });
    }
    Ok(reports)
}
