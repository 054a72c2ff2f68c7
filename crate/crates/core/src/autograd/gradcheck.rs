use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients of a scalar computation against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`, element by element over every
/// input. `build` must record the computation from the given input vars and
/// return the scalar output.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("param leaf has grad").to_vec())
        .collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i][e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, e);
                report.analytic = analytic[i][e];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
