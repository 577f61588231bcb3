//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::{Matrix, Tape, Var};
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tol: f64,
    /// Flat indices whose relative error exceeds `tol`.
    pub failing: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.failing.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>16} {:>16} {:>12}", "index", "analytic", "numeric", "rel_err")?;
        for (k, (a, n)) in self.analytic.iter().zip(&self.numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            writeln!(f, "{k:>6} {a:>16.9e} {n:>16.9e} {rel:>12.3e}")?;
        }
        writeln!(
            f,
            "max_rel_err {:.3e}  max_abs_err {:.3e}  tol {:.1e}  {}",
            self.max_rel_err,
            self.max_abs_err,
            self.tol,
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the tape gradient of scalar `f` at `x` against
/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every entry. Relative error uses the
/// denominator `max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Matrix, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = xv.grad().unwrap_or_else(|| Matrix::zeros(x.dim())).iter().copied().collect();

    let eval = |m: Matrix| -> Result<f64> {
        let t = Tape::new();
        let v = t.constant(m);
        Ok(f(&t, v)?.item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    let flat: Vec<(usize, usize)> = (0..x.nrows()).flat_map(|i| (0..x.ncols()).map(move |j| (i, j))).collect();
    for &(i, j) in &flat {
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + eps;
        let fp = eval(probe.clone())?;
        probe[[i, j]] = orig - eps;
        let fm = eval(probe.clone())?;
        probe[[i, j]] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut failing = Vec::new();
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-8);
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(rel);
        if rel.is_nan() || rel > tol {
            failing.push(k);
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        tol,
        failing,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_squares() {
        let r = grad_check(|_, x| Ok(x.mul(x)?.sum()), &array![[1.0, 2.0, 3.0]], 1e-5, 1e-8).unwrap();
        assert!(r.pass(), "{r}");
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn constant_function() {
        let r = grad_check(|t, _| Ok(t.scalar(4.0)), &array![[1.0, 2.0]], 1e-5, 1e-8).unwrap();
        assert!(r.pass());
        assert!(r.analytic.iter().all(|&a| a == 0.0));
        assert!(r.numeric.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn detects_wrong_gradient() {
        // |x| has a kink at 0; checking right on it must flag the entry.
        let r = grad_check(|_, x| Ok(x.relu().sum()), &array![[0.0]], 1e-5, 1e-6).unwrap();
        assert!(!r.pass());
        assert_eq!(r.failing, vec![0]);
    }
}
