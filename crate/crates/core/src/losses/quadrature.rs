//! Adaptive Simpson quadrature with Richardson correction.

use super::LossError;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub abs_tol: f64,
    pub max_depth: u32,
    pub max_evals: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self { abs_tol: 1e-9, max_depth: 60, max_evals: 2_000_000 }
    }
}

impl Quadrature {
    pub fn with_tol(abs_tol: f64) -> Self {
        Self { abs_tol, ..Self::default() }
    }

    /// Integral of `f` over `[a, b]`; `b < a` flips the sign.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<f64, LossError> {
        if a == b {
            return Ok(0.0);
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(LossError::QuadratureFailed(format!("non-finite bounds [{a}, {b}]")));
        }
        if b < a {
            return self.integrate(f, b, a).map(|v| -v);
        }
        let mut run = Run { f: &f, evals: 0, max_evals: self.max_evals, max_depth: self.max_depth, hit_depth: false };
        // Eight initial panels guard against a coarse rule missing structure.
        const PANELS: usize = 8;
        let h = (b - a) / PANELS as f64;
        let mut panels = Vec::with_capacity(PANELS);
        let mut coarse = 0.0;
        for i in 0..PANELS {
            let lo = a + h * i as f64;
            let hi = if i + 1 == PANELS { b } else { lo + h };
            let mid = 0.5 * (lo + hi);
            let (flo, fmid, fhi) = (run.eval(lo)?, run.eval(mid)?, run.eval(hi)?);
            let whole = simpson(lo, hi, flo, fmid, fhi);
            coarse += whole.abs();
            panels.push((lo, hi, flo, fmid, fhi, whole));
        }
        let floor = 64.0 * f64::EPSILON * coarse;
        let tol = self.abs_tol.max(floor) / PANELS as f64;
        let mut total = 0.0;
        for (lo, hi, flo, fmid, fhi, whole) in panels {
            total += run.refine(lo, hi, flo, fmid, fhi, whole, tol, 0)?;
        }
        if run.hit_depth {
            return Err(LossError::QuadratureFailed(format!("maximum depth {} reached on [{a}, {b}]", self.max_depth)));
        }
        Ok(total)
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

struct Run<'a, F: Fn(f64) -> f64> {
    f: &'a F,
    evals: usize,
    max_evals: usize,
    max_depth: u32,
    hit_depth: bool,
}

impl<F: Fn(f64) -> f64> Run<'_, F> {
    fn eval(&mut self, x: f64) -> Result<f64, LossError> {
        self.evals += 1;
        if self.evals > self.max_evals {
            return Err(LossError::QuadratureFailed(format!("evaluation budget {} exhausted", self.max_evals)));
        }
        let y = (self.f)(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(LossError::QuadratureFailed(format!("integrand is {y} at {x}")))
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn refine(
        &mut self,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, LossError> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = self.eval(lm)?;
        let frm = self.eval(rm)?;
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        let delta = left + right - whole;
        let roundoff = 64.0 * f64::EPSILON * (left.abs() + right.abs());
        if delta.abs() <= 15.0 * tol || delta.abs() <= roundoff {
            return Ok(left + right + delta / 15.0);
        }
        if depth >= self.max_depth || m <= a || m >= b {
            self.hit_depth = true;
            return Ok(left + right + delta / 15.0);
        }
        Ok(self.refine(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)?
            + self.refine(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)?)
    }
}
