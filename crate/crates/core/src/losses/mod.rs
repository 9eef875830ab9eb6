//! Regression losses, the f-divergences they induce, and conversions
//! between the two.

pub mod expr;
pub mod quadrature;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expr::{Expr, Jet2};
pub use quadrature::Quadrature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("unknown loss `{0}` (expected quadratic, linex1, linex_half or shifted_cosh)")]
    UnknownLoss(String),
    #[error("quadrature failed: {0}")]
    QuadratureFailed(String),
    #[error("inconclusive classification of {side}: probes {probes:?}")]
    InconclusiveClassification { side: &'static str, probes: Vec<(f64, f64)> },
    #[error("distributions have different supports")]
    KeyMismatch,
    #[error("loss `{name}` is not centered: g(0) = {value}, g'(0) = {slope}")]
    NotCentered { name: String, value: f64, slope: f64 },
    #[error("divergence `{name}` is not normalized: f(1) = {value}, f'(1) = {slope}")]
    NotNormalized { name: String, value: f64, slope: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Extended-real value of a limit such as `f(0)` or `f'(inf)`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limit {
    Finite(f64),
    Infinite,
}

impl Limit {
    pub fn is_infinite(self) -> bool {
        matches!(self, Limit::Infinite)
    }

    pub fn value(self) -> f64 {
        match self {
            Limit::Finite(v) => v,
            Limit::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Finite(v) => write!(f, "{v}"),
            Limit::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossClassification {
    pub zero_forcing: bool,
    pub zero_avoiding: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinLoss {
    Quadratic,
    Linex1,
    LinexHalf,
    ShiftedCosh,
}

impl BuiltinLoss {
    pub const ALL: [BuiltinLoss; 4] =
        [BuiltinLoss::Quadratic, BuiltinLoss::Linex1, BuiltinLoss::LinexHalf, BuiltinLoss::ShiftedCosh];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinLoss::Quadratic => "quadratic",
            BuiltinLoss::Linex1 => "linex1",
            BuiltinLoss::LinexHalf => "linex_half",
            BuiltinLoss::ShiftedCosh => "shifted_cosh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn g(self, t: f64) -> f64 {
        match self {
            BuiltinLoss::Quadratic => 0.5 * t * t,
            BuiltinLoss::Linex1 => t.exp_m1() - t,
            BuiltinLoss::LinexHalf => 4.0 * (0.5 * t).exp_m1() - 2.0 * t,
            BuiltinLoss::ShiftedCosh => t.exp_m1() + (-t).exp_m1(),
        }
    }

    pub fn g_prime(self, t: f64) -> f64 {
        match self {
            BuiltinLoss::Quadratic => t,
            BuiltinLoss::Linex1 => t.exp_m1(),
            BuiltinLoss::LinexHalf => 2.0 * (0.5 * t).exp_m1(),
            BuiltinLoss::ShiftedCosh => t.exp() - (-t).exp(),
        }
    }

    pub fn g_double_prime(self, t: f64) -> f64 {
        match self {
            BuiltinLoss::Quadratic => 1.0,
            BuiltinLoss::Linex1 => t.exp(),
            BuiltinLoss::LinexHalf => (0.5 * t).exp(),
            BuiltinLoss::ShiftedCosh => t.exp() + (-t).exp(),
        }
    }

    /// Closed-form generator of the induced divergence.
    pub fn closed_form_f(self, t: f64) -> f64 {
        match self {
            BuiltinLoss::Quadratic => t - t.ln() - 1.0,
            BuiltinLoss::Linex1 => t * t.ln() - t + 1.0,
            BuiltinLoss::LinexHalf => 2.0 * t - 4.0 * t.sqrt() + 2.0,
            BuiltinLoss::ShiftedCosh => t * t.ln() - 0.5 * t + 0.5 / t,
        }
    }

    pub fn closed_form_f_prime(self, t: f64) -> f64 {
        match self {
            BuiltinLoss::Quadratic => 1.0 - 1.0 / t,
            BuiltinLoss::Linex1 => t.ln(),
            BuiltinLoss::LinexHalf => 2.0 - 2.0 / t.sqrt(),
            BuiltinLoss::ShiftedCosh => t.ln() + 0.5 - 0.5 / (t * t),
        }
    }

    pub fn known_f_at_zero(self) -> Limit {
        match self {
            BuiltinLoss::Quadratic | BuiltinLoss::ShiftedCosh => Limit::Infinite,
            BuiltinLoss::Linex1 => Limit::Finite(1.0),
            BuiltinLoss::LinexHalf => Limit::Finite(2.0),
        }
    }

    pub fn known_f_prime_at_infinity(self) -> Limit {
        match self {
            BuiltinLoss::Linex1 | BuiltinLoss::ShiftedCosh => Limit::Infinite,
            BuiltinLoss::Quadratic => Limit::Finite(1.0),
            BuiltinLoss::LinexHalf => Limit::Finite(2.0),
        }
    }

    pub fn known_classification(self) -> LossClassification {
        LossClassification {
            zero_forcing: self.known_f_at_zero().is_infinite(),
            zero_avoiding: self.known_f_prime_at_infinity().is_infinite(),
        }
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum LossForm {
    Builtin(BuiltinLoss),
    Expression(Arc<Expr>),
    Functions { g: ScalarFn, g_prime: ScalarFn, g_double_prime: ScalarFn },
}

/// A regression loss `g` applied to log-ratios.
#[derive(Clone)]
pub struct RegressionLoss {
    name: String,
    form: LossForm,
}

impl fmt::Debug for RegressionLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match &self.form {
            LossForm::Builtin(b) => format!("builtin {}", b.name()),
            LossForm::Expression(e) => format!("expression `{}`", e.source()),
            LossForm::Functions { .. } => "closures".to_string(),
        };
        f.debug_struct("RegressionLoss").field("name", &self.name).field("form", &form).finish()
    }
}

pub fn make_builtin_loss(name: &str) -> Result<RegressionLoss> {
    BuiltinLoss::from_name(name).map(RegressionLoss::builtin).ok_or_else(|| LossError::UnknownLoss(name.to_string()))
}

impl RegressionLoss {
    pub fn builtin(b: BuiltinLoss) -> Self {
        Self { name: b.name().to_string(), form: LossForm::Builtin(b) }
    }

    /// Parses `source` as an expression in `t`; rejects losses not
    /// minimized at zero.
    pub fn from_expression(name: &str, source: &str) -> Result<Self> {
        let expr = Expr::parse(source)?;
        Self::checked(name, LossForm::Expression(Arc::new(expr)))
    }

    pub fn from_functions(
        name: &str,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        g_double_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::checked(
            name,
            LossForm::Functions {
                g: Arc::new(g),
                g_prime: Arc::new(g_prime),
                g_double_prime: Arc::new(g_double_prime),
            },
        )
    }

    fn checked(name: &str, form: LossForm) -> Result<Self> {
        let loss = Self { name: name.to_string(), form };
        let (value, slope) = (loss.g(0.0), loss.g_prime(0.0));
        if !(value.abs() <= 1e-9 && slope.abs() <= 1e-9) {
            return Err(LossError::NotCentered { name: name.to_string(), value, slope });
        }
        Ok(loss)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn as_builtin(&self) -> Option<BuiltinLoss> {
        match self.form {
            LossForm::Builtin(b) => Some(b),
            _ => None,
        }
    }

    pub fn g(&self, t: f64) -> f64 {
        match &self.form {
            LossForm::Builtin(b) => b.g(t),
            LossForm::Expression(e) => e.eval(t),
            LossForm::Functions { g, .. } => g(t),
        }
    }

    pub fn g_prime(&self, t: f64) -> f64 {
        match &self.form {
            LossForm::Builtin(b) => b.g_prime(t),
            LossForm::Expression(e) => e.jet(t).d1,
            LossForm::Functions { g_prime, .. } => g_prime(t),
        }
    }

    pub fn g_double_prime(&self, t: f64) -> f64 {
        match &self.form {
            LossForm::Builtin(b) => b.g_double_prime(t),
            LossForm::Expression(e) => e.jet(t).d2,
            LossForm::Functions { g_double_prime, .. } => g_double_prime(t),
        }
    }

    /// `(g, g')` at `t` in one pass.
    pub fn value_and_slope(&self, t: f64) -> (f64, f64) {
        match &self.form {
            LossForm::Expression(e) => {
                let j = e.jet(t);
                (j.value, j.d1)
            }
            _ => (self.g(t), self.g_prime(t)),
        }
    }

    /// Numeric convexity check: `g'' >= -1e-9` on a grid over `[-10, 10]`.
    pub fn is_convex(&self) -> bool {
        (0..=2000).all(|i| {
            let t = -10.0 + 0.01 * i as f64;
            self.g_double_prime(t) >= -1e-9
        })
    }

    /// A non-convex loss induces a pseudo divergence; accepted but flagged.
    pub fn is_pseudo(&self) -> bool {
        !self.is_convex()
    }
}

/// `f(t) / t = int_0^{log t} g'(u) e^{-u} du`.
fn f_over_t(g: &RegressionLoss, t: f64, quad: &Quadrature) -> Result<f64> {
    quad.integrate(|u| g.g_prime(u) * (-u).exp(), 0.0, t.ln())
}

/// Generator of the divergence induced by `g` at `t > 0`.
pub fn f_from_g(g: &RegressionLoss, t: f64) -> Result<f64> {
    f_from_g_with(g, t, &Quadrature::default())
}

/// [`f_from_g`] with explicit quadrature settings; the absolute tolerance
/// applies to the returned value of `f`.
pub fn f_from_g_with(g: &RegressionLoss, t: f64, quad: &Quadrature) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(LossError::InvalidArgument(format!("f_from_g needs t > 0, got {t}")));
    }
    let inner = Quadrature { abs_tol: quad.abs_tol / t, ..*quad };
    Ok(t * f_over_t(g, t, &inner)?)
}

/// Recovers `g(t) = f(e^t) - int_0^t f(e^u) du`.
pub fn g_from_f(f: &FDivergenceSpec, t: f64) -> Result<f64> {
    g_from_f_with(f, t, &Quadrature::default())
}

pub fn g_from_f_with(f: &FDivergenceSpec, t: f64, quad: &Quadrature) -> Result<f64> {
    if !t.is_finite() {
        return Err(LossError::InvalidArgument(format!("g_from_f needs finite t, got {t}")));
    }
    let head = f.f(t.exp());
    if !head.is_finite() {
        return Err(LossError::QuadratureFailed(format!("f(e^{t}) = {head}")));
    }
    Ok(head - quad.integrate(|u| f.f(u.exp()), 0.0, t)?)
}

/// Builds the regression loss whose induced divergence is `f`.
pub fn loss_from_divergence(f: &FDivergenceSpec) -> Result<RegressionLoss> {
    let fg = f.clone();
    let fp = f.clone();
    let slope = move |t: f64| {
        let s = t.exp();
        s * fp.f_prime(s) - fp.f(s)
    };
    let curvature = {
        let slope = slope.clone();
        move |t: f64| {
            let h = 1e-5 * (1.0 + t.abs());
            (slope(t + h) - slope(t - h)) / (2.0 * h)
        }
    };
    RegressionLoss::from_functions(
        &format!("g_of_{}", f.name()),
        move |t| g_from_f(&fg, t).unwrap_or(f64::NAN),
        slope,
        curvature,
    )
}

/// Generator `f` of an f-divergence together with its boundary limits.
#[derive(Clone)]
pub struct FDivergenceSpec {
    name: String,
    f: ScalarFn,
    f_prime: ScalarFn,
    f_at_zero: Limit,
    f_prime_at_infinity: Limit,
}

impl fmt::Debug for FDivergenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FDivergenceSpec")
            .field("name", &self.name)
            .field("f_at_zero", &self.f_at_zero)
            .field("f_prime_at_infinity", &self.f_prime_at_infinity)
            .finish()
    }
}

impl FDivergenceSpec {
    pub fn new(
        name: &str,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f_at_zero: Limit,
        f_prime_at_infinity: Limit,
    ) -> Result<Self> {
        let spec =
            Self { name: name.to_string(), f: Arc::new(f), f_prime: Arc::new(f_prime), f_at_zero, f_prime_at_infinity };
        let (value, slope) = (spec.f(1.0), spec.f_prime(1.0));
        if !(value.abs() <= 1e-9 && slope.abs() <= 1e-9) {
            return Err(LossError::NotNormalized { name: name.to_string(), value, slope });
        }
        Ok(spec)
    }

    /// Closed-form generator for a built-in loss.
    pub fn closed_form(b: BuiltinLoss) -> Self {
        Self::new(
            &format!("f_{}", b.name()),
            move |t| b.closed_form_f(t),
            move |t| b.closed_form_f_prime(t),
            b.known_f_at_zero(),
            b.known_f_prime_at_infinity(),
        )
        .expect("closed forms are normalized")
    }

    /// Generator induced by `g`, evaluated by quadrature; limits come from
    /// the numeric probes of [`classify_loss`].
    pub fn induced_by(g: &RegressionLoss) -> Result<Self> {
        let report = classify_loss_report(g)?;
        let gf = g.clone();
        let gp = g.clone();
        Self::new(
            &format!("f_{}", g.name()),
            move |t| f_from_g(&gf, t).unwrap_or(f64::NAN),
            move |t| {
                if t == 1.0 {
                    return gp.g_prime(0.0);
                }
                f_from_g(&gp, t).unwrap_or(f64::NAN) / t + gp.g_prime(t.ln()) / t
            },
            report.f_at_zero,
            report.f_prime_at_infinity,
        )
    }

    /// Parses `source` as a generator in `t`; limits are probed numerically.
    pub fn from_expression(name: &str, source: &str) -> Result<Self> {
        let expr = Arc::new(Expr::parse(source)?);
        let (e1, e2) = (expr.clone(), expr);
        Self::probed(name, move |t| e1.eval(t), move |t| e2.jet(t).d1)
    }

    /// Generator whose boundary limits are judged from probes of `f`.
    pub fn probed(
        name: &str,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        f_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let zero: Vec<_> = ZERO_PROBES.iter().map(|&t| (t, f(t))).collect();
        let inf: Vec<_> = INFINITY_PROBES.iter().map(|&t| (t, f(t) / t)).collect();
        let f_at_zero = judge_probes("f(0)", &zero)?;
        let f_prime_at_infinity = judge_probes("f'(inf)", &inf)?;
        Self::new(name, f, f_prime, f_at_zero, f_prime_at_infinity)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn f(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    pub fn f_prime(&self, t: f64) -> f64 {
        (self.f_prime)(t)
    }

    pub fn f_at_zero(&self) -> Limit {
        self.f_at_zero
    }

    pub fn f_prime_at_infinity(&self) -> Limit {
        self.f_prime_at_infinity
    }

    pub fn classification(&self) -> LossClassification {
        LossClassification {
            zero_forcing: self.f_at_zero.is_infinite(),
            zero_avoiding: self.f_prime_at_infinity.is_infinite(),
        }
    }
}

const ZERO_PROBES: [f64; 4] = [1e-2, 1e-4, 1e-6, 1e-8];
const INFINITY_PROBES: [f64; 4] = [1e2, 1e4, 1e6, 1e8];
const MAGNITUDE_CUTOFF: f64 = 1e5;

/// Decides whether a probed sequence diverges. Probes are two decades
/// apart; log-type divergence adds ~4.6 per step, while convergent
/// sequences barely move over the last step.
fn judge_probes(side: &'static str, probes: &[(f64, f64)]) -> Result<Limit> {
    let last = probes[probes.len() - 1].1;
    let prev = probes[probes.len() - 2].1;
    if last.is_nan() || prev.is_nan() {
        return Err(LossError::InconclusiveClassification { side, probes: probes.to_vec() });
    }
    if last.abs() > MAGNITUDE_CUTOFF {
        return Ok(Limit::Infinite);
    }
    let step = last - prev;
    if step.abs() > 1.0 {
        Ok(Limit::Infinite)
    } else if step.abs() < 0.1 {
        Ok(Limit::Finite(last))
    } else {
        Err(LossError::InconclusiveClassification { side, probes: probes.to_vec() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub classification: LossClassification,
    pub f_at_zero: Limit,
    pub f_prime_at_infinity: Limit,
    /// `(t, f(t))` for small `t`.
    pub zero_probes: Vec<(f64, f64)>,
    /// `(t, f(t) / t)` for large `t`.
    pub infinity_probes: Vec<(f64, f64)>,
    pub pseudo: bool,
}

pub fn classify_loss(g: &RegressionLoss) -> Result<LossClassification> {
    classify_loss_report(g).map(|r| r.classification)
}

pub fn classify_loss_report(g: &RegressionLoss) -> Result<ClassificationReport> {
    let quad = Quadrature::default();
    let zero_probes =
        ZERO_PROBES.iter().map(|&t| f_from_g_with(g, t, &quad).map(|v| (t, v))).collect::<Result<Vec<_>>>()?;
    let infinity_probes =
        INFINITY_PROBES.iter().map(|&t| f_over_t(g, t, &quad).map(|v| (t, v))).collect::<Result<Vec<_>>>()?;
    let f_at_zero = judge_probes("f(0)", &zero_probes)?;
    let f_prime_at_infinity = judge_probes("f'(inf)", &infinity_probes)?;
    Ok(ClassificationReport {
        classification: LossClassification {
            zero_forcing: f_at_zero.is_infinite(),
            zero_avoiding: f_prime_at_infinity.is_infinite(),
        },
        f_at_zero,
        f_prime_at_infinity,
        zero_probes,
        infinity_probes,
        pseudo: g.is_pseudo(),
    })
}

fn check_mass(m: f64) -> Result<()> {
    if m.is_finite() && m >= 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidArgument(format!("mass must be finite and nonnegative, got {m}")))
    }
}

/// One term `q f(p / q)` of a divergence, extended to zero masses by the
/// generator's boundary limits.
pub fn divergence_term(p: f64, q: f64, f: &FDivergenceSpec) -> Result<f64> {
    check_mass(p)?;
    check_mass(q)?;
    Ok(if q > 0.0 {
        if p == 0.0 {
            match f.f_at_zero() {
                Limit::Finite(v) => q * v,
                Limit::Infinite => f64::INFINITY,
            }
        } else {
            q * f.f(p / q)
        }
    } else if p > 0.0 {
        match f.f_prime_at_infinity() {
            Limit::Finite(v) => v * p,
            Limit::Infinite => f64::INFINITY,
        }
    } else {
        0.0
    })
}

/// `D_f(p || q)` on masses that need not sum to one.
pub fn f_divergence<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>, f: &FDivergenceSpec) -> Result<f64> {
    if p.len() != q.len() || p.keys().zip(q.keys()).any(|(a, b)| a != b) {
        return Err(LossError::KeyMismatch);
    }
    let mut total = 0.0;
    for (pm, qm) in p.values().zip(q.values()) {
        total += divergence_term(*pm, *qm, f)?;
    }
    Ok(total)
}

/// [`f_divergence`] over aligned slices.
pub fn f_divergence_slices(p: &[f64], q: &[f64], f: &FDivergenceSpec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LossError::KeyMismatch);
    }
    let mut total = 0.0;
    for (pm, qm) in p.iter().zip(q) {
        total += divergence_term(*pm, *qm, f)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
