use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step on 32-bit values.
pub const FD_STEP: f64 = 1e-3;

/// Magnitude below which gradient errors are measured absolutely.
const REL_FLOOR: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// worst `|analytic - numeric| / max(1, |analytic|, |numeric|)` over the checked coordinates
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
}

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences at `point`.
///
/// `f` records its computation on the supplied tape, starting from the leaf it
/// is handed, and returns a one-element result. `coords` restricts the check to
/// a subset of flat coordinates (all of them when `None`). Differences are
/// accumulated in `f64`.
pub fn grad_check<F>(f: F, point: &Tensor, coords: Option<&[usize]>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let y0 = tape.value(y).item();
    if !y0.is_finite() {
        return Err(Error::NonFinite("grad_check: f(point)".into()));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p, false);
        let y = f(&mut t, x)?;
        let v = t.value(y).item() as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check: perturbed evaluation".into()));
        }
        Ok(v)
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        checked: 0,
    };
    for &i in coords {
        let base = point.data()[i] as f64;
        let mut plus = point.clone();
        plus.data_mut()[i] = (base + step) as f32;
        let mut minus = point.clone();
        minus.data_mut()[i] = (base - step) as f32;
        // use the actually representable step
        let span = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / span;
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
