use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::series::{CoarseBundle, CoarsenerKind, ValueDomain};
use crate::{Error, Result};

/// Aggregate over the imputed values of one scope (a coarse interval or the
/// whole window).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Max,
    Min,
    Mean,
    CountPositive,
    /// Value at a fixed offset inside the scope.
    At(usize),
}

impl Aggregate {
    /// The coarsener this aggregate inverts when it appears in a
    /// measurement equality.
    pub fn coarsener(self) -> CoarsenerKind {
        match self {
            Aggregate::Sum => CoarsenerKind::Sum,
            Aggregate::Max => CoarsenerKind::Max,
            Aggregate::Min => CoarsenerKind::Min,
            Aggregate::Mean => CoarsenerKind::Mean,
            Aggregate::CountPositive => CoarsenerKind::CountPositive,
            Aggregate::At(_) => CoarsenerKind::Periodic,
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregate::Sum => f.write_str("sum(x)"),
            Aggregate::Max => f.write_str("max(x)"),
            Aggregate::Min => f.write_str("min(x)"),
            Aggregate::Mean => f.write_str("mean(x)"),
            Aggregate::CountPositive => f.write_str("count_pos(x)"),
            Aggregate::At(t) => write!(f, "at(x, {t})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    /// Coarse measurement `m[channel.kind]`.
    Measurement(String),
    /// Side scalar `s[name]`.
    Scalar(String),
    Agg(Aggregate),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    /// Product; at most one factor may depend on the imputed series.
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
}

impl Expr {
    pub fn m(name: &str) -> Expr {
        Expr::Measurement(name.to_string())
    }

    pub fn s(name: &str) -> Expr {
        Expr::Scalar(name.to_string())
    }

    pub fn c(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn agg(a: Aggregate) -> Expr {
        Expr::Agg(a)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::Add(Box::new(a), Box::new(b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::Mul(Box::new(a), Box::new(b))
    }

    /// True when the expression reads the imputed series.
    pub fn depends_on_series(&self) -> bool {
        match self {
            Expr::Agg(_) => true,
            Expr::Const(_) | Expr::Measurement(_) | Expr::Scalar(_) => false,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.depends_on_series() || b.depends_on_series()
            }
            Expr::Neg(a) => a.depends_on_series(),
        }
    }

    /// True when the expression contains an indicator (step) term.
    pub fn has_indicator(&self) -> bool {
        match self {
            Expr::Agg(Aggregate::CountPositive) => true,
            Expr::Agg(_) | Expr::Const(_) | Expr::Measurement(_) | Expr::Scalar(_) => false,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.has_indicator() || b.has_indicator(),
            Expr::Neg(a) => a.has_indicator(),
        }
    }

    pub fn check_linear(&self) -> Result<()> {
        match self {
            Expr::Mul(a, b) => {
                if a.depends_on_series() && b.depends_on_series() {
                    return Err(Error::Invalid(format!(
                        "product `{self}` multiplies two series-dependent terms"
                    )));
                }
                a.check_linear()?;
                b.check_linear()
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                a.check_linear()?;
                b.check_linear()
            }
            Expr::Neg(a) => a.check_linear(),
            _ => Ok(()),
        }
    }

    /// Every measurement and scalar name referenced.
    pub fn references(&self, measurements: &mut Vec<String>, scalars: &mut Vec<String>) {
        match self {
            Expr::Measurement(n) => measurements.push(n.clone()),
            Expr::Scalar(n) => scalars.push(n.clone()),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.references(measurements, scalars);
                b.references(measurements, scalars);
            }
            Expr::Neg(a) => a.references(measurements, scalars),
            Expr::Const(_) | Expr::Agg(_) => {}
        }
    }

    pub fn aggregates(&self, out: &mut Vec<Aggregate>) {
        match self {
            Expr::Agg(a) => out.push(*a),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.aggregates(out);
                b.aggregates(out);
            }
            Expr::Neg(a) => a.aggregates(out),
            _ => {}
        }
    }

    /// Evaluate an expression that must not read the series.
    pub fn eval_const(&self, res: &Resolver<'_>) -> Result<f64> {
        Ok(self.eval(None, res, Mode::Exact)?.value)
    }

    pub(crate) fn eval(&self, x: Option<&[f64]>, res: &Resolver<'_>, mode: Mode) -> Result<Dual> {
        Ok(match self {
            Expr::Const(v) => Dual::constant(*v),
            Expr::Measurement(n) => Dual::constant(res.measurement(n)?),
            Expr::Scalar(n) => Dual::constant(res.scalar(n)?),
            Expr::Agg(a) => {
                let x = x.ok_or_else(|| {
                    Error::Invalid(format!("`{a}` used where the imputed series is not available"))
                })?;
                eval_aggregate(*a, x, res.domain, mode)?
            }
            Expr::Add(a, b) => a.eval(x, res, mode)?.add(&b.eval(x, res, mode)?, 1.0),
            Expr::Sub(a, b) => a.eval(x, res, mode)?.add(&b.eval(x, res, mode)?, -1.0),
            Expr::Mul(a, b) => {
                let da = a.eval(x, res, mode)?;
                let db = b.eval(x, res, mode)?;
                match (&da.grad, &db.grad) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Invalid(format!("non-linear product `{self}`")))
                    }
                    (Some(_), None) => da.scale(db.value),
                    (None, _) => db.scale(da.value),
                }
            }
            Expr::Neg(a) => a.eval(x, res, mode)?.scale(-1.0),
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) => 2,
            Expr::Neg(_) => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Measurement(n) => write!(f, "m[{n}]"),
            Expr::Scalar(n) => write!(f, "s[{n}]"),
            Expr::Agg(a) => write!(f, "{a}"),
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                f.write_str(" + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                f.write_str(" - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                f.write_str(" * ")?;
                wrap(f, b, 3)
            }
            Expr::Neg(a) => {
                f.write_str("-")?;
                wrap(f, a, 4)
            }
        }
    }
}

/// Logistic-style step realised with `tanh`: `0.5 * (1 + tanh(k x))`.
pub fn smooth_step(x: f64, k: f64) -> f64 {
    0.5 * (1.0 + (k * x).tanh())
}

/// Derivative of [`smooth_step`] with respect to `x`.
pub fn smooth_step_grad(x: f64, k: f64) -> f64 {
    let t = (k * x).tanh();
    0.5 * k * (1.0 - t * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Mode {
    Exact,
    Smooth { sharpness: f64, unit: f64 },
}

/// Value plus optional gradient with respect to the scope's values.
#[derive(Debug, Clone)]
pub(crate) struct Dual {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { value: v, grad: None }
    }

    fn add(mut self, other: &Dual, sign: f64) -> Dual {
        self.value += sign * other.value;
        self.grad = match (self.grad.take(), &other.grad) {
            (None, None) => None,
            (Some(g), None) => Some(g),
            (None, Some(h)) => Some(h.iter().map(|v| sign * v).collect()),
            (Some(mut g), Some(h)) => {
                g.iter_mut().zip(h).for_each(|(a, b)| *a += sign * b);
                Some(g)
            }
        };
        self
    }

    fn scale(mut self, s: f64) -> Dual {
        self.value *= s;
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
        self
    }
}

fn eval_aggregate(a: Aggregate, x: &[f64], domain: ValueDomain, mode: Mode) -> Result<Dual> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let value = match a {
        Aggregate::Sum => {
            grad.fill(1.0);
            x.iter().sum()
        }
        Aggregate::Mean => {
            grad.fill(1.0 / n as f64);
            x.iter().sum::<f64>() / n as f64
        }
        Aggregate::Max => {
            // first index of the maximum carries the subgradient
            let (i, v) = x.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 { (i, v) } else { acc }
            });
            grad[i] = 1.0;
            v
        }
        Aggregate::Min => {
            let (i, v) = x.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| {
                if v < acc.1 { (i, v) } else { acc }
            });
            grad[i] = 1.0;
            v
        }
        Aggregate::At(t) => {
            if t >= n {
                return Err(Error::Shape(format!("at(x, {t}) outside a scope of {n} steps")));
            }
            grad[t] = 1.0;
            x[t]
        }
        Aggregate::CountPositive => match mode {
            Mode::Exact => x.iter().filter(|v| domain.is_positive(**v)).count() as f64,
            Mode::Smooth { sharpness, unit } => {
                let shift = domain.epsilon() / 2.0;
                let mut total = 0.0;
                for (g, &v) in grad.iter_mut().zip(x) {
                    let arg = (v - shift) / unit;
                    total += smooth_step(arg, sharpness);
                    *g = smooth_step_grad(arg, sharpness) / unit;
                }
                total
            }
        },
    };
    Ok(Dual { value, grad: Some(grad) })
}

/// Resolves measurement and scalar references for one scope.
pub struct Resolver<'a> {
    pub bundle: &'a CoarseBundle,
    pub scalars: &'a BTreeMap<String, f64>,
    pub domain: ValueDomain,
    /// Coarse interval index, or `None` for window scope.
    pub interval: Option<usize>,
}

impl Resolver<'_> {
    pub fn measurement(&self, name: &str) -> Result<f64> {
        let entry = self
            .bundle
            .entry(name)
            .ok_or_else(|| Error::UnresolvedMeasurement(name.to_string()))?;
        match self.interval {
            Some(j) => entry.values.get(j).copied().ok_or_else(|| {
                Error::Shape(format!("interval {j} outside measurement `{name}`"))
            }),
            None => {
                let v = &entry.values;
                Ok(match entry.spec.kind {
                    CoarsenerKind::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    CoarsenerKind::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
                    CoarsenerKind::Sum | CoarsenerKind::CountPositive => v.iter().sum(),
                    CoarsenerKind::Mean => v.iter().sum::<f64>() / v.len() as f64,
                    CoarsenerKind::Periodic => {
                        return Err(Error::Invalid(format!(
                            "periodic measurement `{name}` has no window-level value"
                        )))
                    }
                })
            }
        }
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnresolvedMeasurement(format!("s[{name}]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_values() {
        for k in [0.1, 1.0, 50.0] {
            assert_eq!(smooth_step(0.0, k), 0.5);
        }
        assert!(smooth_step(1.0, 1e3) > 1.0 - 1e-12);
        assert!(smooth_step(-1.0, 1e3) < 1e-12);
        // approximation within 2% outside |x| > 0.05 at the default sharpness
        assert!(smooth_step(0.05, 50.0) > 0.98);
    }

    #[test]
    fn step_gradient_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-0.3, -0.01, 0.0, 0.02, 0.4] {
            let fd = (smooth_step(x + h, 50.0) - smooth_step(x - h, 50.0)) / (2.0 * h);
            assert!((fd - smooth_step_grad(x, 50.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn display_is_parenthesised() {
        let e = Expr::mul(Expr::c(0.5), Expr::add(Expr::s("a"), Expr::s("b")));
        assert_eq!(e.to_string(), "0.5 * (s[a] + s[b])");
        let e = Expr::sub(Expr::m("q.max"), Expr::sub(Expr::agg(Aggregate::Max), Expr::c(1.0)));
        assert_eq!(e.to_string(), "m[q.max] - (max(x) - 1)");
    }

    #[test]
    fn nonlinear_product_rejected() {
        let e = Expr::mul(Expr::agg(Aggregate::Max), Expr::agg(Aggregate::Sum));
        assert!(e.check_linear().is_err());
        let e = Expr::mul(Expr::s("mss"), Expr::s("cwnd"));
        assert!(e.check_linear().is_ok());
    }
}
