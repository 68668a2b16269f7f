use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise `|a - b| / max(|a|, |b|, 1e-8)`.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates where one-sided differences disagree even at the smallest
    /// step, i.e. the probe sits on a kink. Excluded from `max_rel_error`.
    pub skipped: Vec<usize>,
    /// Coordinates whose first step straddled a kink and were compared at a
    /// smaller step instead.
    pub refined: Vec<usize>,
}

const MIN_STEP: f64 = 1e-7;
/// Relative one-sided slope disagreement treated as a kink.
const KINK_REL: f64 = 1e-2;

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    let y = tape.value(y).item()?;
    if !y.is_finite() {
        return Err(Error::Numeric("non-finite function value at probe point".into()));
    }
    Ok(y)
}

/// Checks the reverse-mode gradient of a scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let xv = tape.param("x", x.clone())?;
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.get("x").cloned().expect("x is registered");

    let f0 = eval_scalar(&f, x)?;
    // round-off in a one-sided difference is about ulp(f0) / h
    let noise = 1e-13 * f0.abs().max(1.0);
    let mut probe = x.clone();
    let mut max_rel: f64 = 0.0;
    let mut skipped = Vec::new();
    let mut refined = Vec::new();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut h = eps;
        let numeric = loop {
            probe.data_mut()[i] = orig + h;
            let fp = eval_scalar(&f, &probe)?;
            probe.data_mut()[i] = orig - h;
            let fm = eval_scalar(&f, &probe)?;
            probe.data_mut()[i] = orig;

            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            let bound = KINK_REL * forward.abs().max(backward.abs()) + 100.0 * noise / h;
            if (forward - backward).abs() <= bound {
                break Some((fp - fm) / (2.0 * h));
            }
            if h / 10.0 < 0.999 * MIN_STEP {
                break None;
            }
            h /= 10.0;
        };
        let Some(numeric) = numeric else {
            skipped.push(i);
            continue;
        };
        if h < eps {
            refined.push(i);
        }
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked: x.len() - skipped.len(),
        skipped,
        refined,
    })
}
