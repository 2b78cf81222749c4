//! Declarative knowledge about the imputed series.
//!
//! Constraints come in two classes. Measurement constraints state that
//! re-applying a monitoring operator to the imputed series reproduces the
//! coarse measurement (residual `m - S(x)`). Operational constraints encode
//! inequalities between signals (`psi(x) <= 0`), optionally guarded by a
//! predicate over measurements and scalars only.
//!
//! Each constraint is evaluated per coarse interval (the default) or once over
//! the whole window. [`eval_exact`] is used for repair and reporting;
//! [`eval_smooth`] replaces indicators with a `tanh` step and also returns the
//! gradient with respect to the imputed values.

mod expr;
pub mod library;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use expr::{smooth_step, smooth_step_grad, Aggregate, Expr, Resolver};
pub use parse::{parse_constraint, parse_constraint_set, parse_expression};

use crate::series::{CoarseBundle, ValueDomain};
use crate::{Error, Result};
use expr::Mode;

/// Default sharpness of the smoothed step.
pub const DEFAULT_SHARPNESS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintClass {
    Measurement,
    Operational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerInterval,
    PerWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
}

impl Relation {
    fn as_str(self) -> &'static str {
        match self {
            Relation::Eq => "==",
            Relation::Le => "<=",
            Relation::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl CmpOp {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

/// Antecedent of an implication; never reads the imputed series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guard {
    pub lhs: Expr,
    pub op: CmpOp,
    pub rhs: Expr,
}

impl Guard {
    pub fn new(lhs: Expr, op: CmpOp, rhs: Expr) -> Self {
        Self { lhs, op, rhs }
    }

    pub fn holds(&self, res: &Resolver<'_>) -> Result<bool> {
        Ok(self.op.holds(self.lhs.eval_const(res)?, self.rhs.eval_const(res)?))
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.as_str(), self.rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    /// `phi = 0`
    Equality,
    /// `psi <= 0`
    Inequality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub class: ConstraintClass,
    pub scope: Scope,
    pub lhs: Expr,
    pub relation: Relation,
    pub rhs: Expr,
    #[serde(default)]
    pub guards: Vec<Guard>,
}

impl Constraint {
    pub fn new(
        name: impl Into<String>,
        class: ConstraintClass,
        lhs: Expr,
        relation: Relation,
        rhs: Expr,
    ) -> Result<Self> {
        let c = Self {
            name: name.into(),
            class,
            scope: Scope::PerInterval,
            lhs,
            relation,
            rhs,
            guards: Vec::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn when(mut self, guard: Guard) -> Result<Self> {
        self.guards.push(guard);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(Error::Invalid(format!("bad constraint name `{}`", self.name)));
        }
        self.lhs.check_linear()?;
        self.rhs.check_linear()?;
        if !self.lhs.depends_on_series() && !self.rhs.depends_on_series() {
            return Err(Error::Invalid(format!(
                "constraint `{}` never reads the imputed series",
                self.name
            )));
        }
        for g in &self.guards {
            if g.lhs.depends_on_series() || g.rhs.depends_on_series() {
                return Err(Error::Invalid(format!(
                    "guard of `{}` reads the imputed series; guards may only use measurements and scalars",
                    self.name
                )));
            }
        }
        if self.class == ConstraintClass::Measurement {
            if self.relation != Relation::Eq {
                return Err(Error::Invalid(format!(
                    "measurement constraint `{}` must be an equality",
                    self.name
                )));
            }
            if self.measurement_view().is_none() {
                return Err(Error::Invalid(format!(
                    "measurement constraint `{}` must have the shape `<aggregate>(x) == m[<name>]`",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn form(&self) -> Form {
        match self.relation {
            Relation::Eq => Form::Equality,
            _ => Form::Inequality,
        }
    }

    /// `phi` for equalities (`rhs - lhs`), `psi` for inequalities (`<= 0`).
    pub fn residual_expr(&self) -> Expr {
        match self.relation {
            Relation::Eq | Relation::Ge => Expr::sub(self.rhs.clone(), self.lhs.clone()),
            Relation::Le => Expr::sub(self.lhs.clone(), self.rhs.clone()),
        }
    }

    /// For measurement equalities: the inverted aggregate and measurement name.
    pub fn measurement_view(&self) -> Option<(Aggregate, String)> {
        if self.relation != Relation::Eq {
            return None;
        }
        match (&self.lhs, &self.rhs) {
            (Expr::Agg(a), Expr::Measurement(m)) | (Expr::Measurement(m), Expr::Agg(a)) => {
                Some((*a, m.clone()))
            }
            _ => None,
        }
    }

    pub fn has_indicator(&self) -> bool {
        self.lhs.has_indicator() || self.rhs.has_indicator()
    }

    /// Number of residuals produced for a window of `context_len` intervals.
    pub fn scope_count(&self, context_len: usize) -> usize {
        match self.scope {
            Scope::PerInterval => context_len,
            Scope::PerWindow => 1,
        }
    }

    pub fn references(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        let (mut m, mut s) = (Vec::new(), Vec::new());
        self.lhs.references(&mut m, &mut s);
        self.rhs.references(&mut m, &mut s);
        for g in &self.guards {
            g.lhs.references(&mut m, &mut s);
            g.rhs.references(&mut m, &mut s);
        }
        (m.into_iter().collect(), s.into_iter().collect())
    }

    pub(crate) fn scope_range(&self, j: usize, bundle: &CoarseBundle) -> (usize, usize) {
        match self.scope {
            Scope::PerInterval => (j * bundle.zoom, bundle.zoom),
            Scope::PerWindow => (0, bundle.fine_len()),
        }
    }

    pub(crate) fn resolver<'a>(&self, j: usize, ctx: &EvalContext<'a>) -> Resolver<'a> {
        Resolver {
            bundle: ctx.bundle,
            scalars: ctx.scalars,
            domain: ctx.domain,
            interval: match self.scope {
                Scope::PerInterval => Some(j),
                Scope::PerWindow => None,
            },
        }
    }

    /// Whether the guard fires on scope `j`. Independent of the imputed values.
    pub fn active(&self, j: usize, ctx: &EvalContext<'_>) -> Result<bool> {
        let res = self.resolver(j, ctx);
        for g in &self.guards {
            if !g.holds(&res)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Magnitude used to make residuals unit-free: the absolute value of the
    /// series-independent part of the residual, floored at 1.
    pub fn scale(&self, j: usize, ctx: &EvalContext<'_>) -> Result<f64> {
        let res = self.resolver(j, ctx);
        let zeros = vec![0.0; self.scope_range(j, ctx.bundle).1];
        // aggregates of an all-zero series are zero, leaving the measurement part
        let v = self.residual_expr().eval(Some(&zeros), &res, Mode::Exact)?.value;
        Ok(v.abs().max(1.0))
    }

    fn eval_mode(&self, imputed: &[f64], ctx: &EvalContext<'_>, mode: Mode) -> Result<Vec<ScopedResidual>> {
        if imputed.len() != ctx.bundle.fine_len() {
            return Err(Error::Shape(format!(
                "constraint `{}`: imputed length {} != {}",
                self.name,
                imputed.len(),
                ctx.bundle.fine_len()
            )));
        }
        let residual = self.residual_expr();
        let n = self.scope_count(ctx.bundle.context_len);
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let (start, len) = self.scope_range(j, ctx.bundle);
            let scale = self.scale(j, ctx)?;
            if !self.active(j, ctx)? {
                out.push(ScopedResidual { value: 0.0, scale, active: false, start, grad: vec![0.0; len] });
                continue;
            }
            let res = self.resolver(j, ctx);
            let d = residual.eval(Some(&imputed[start..start + len]), &res, mode)?;
            out.push(ScopedResidual {
                value: d.value,
                scale,
                active: true,
                start,
                grad: d.grad.unwrap_or_else(|| vec![0.0; len]),
            });
        }
        Ok(out)
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let class = match self.class {
            ConstraintClass::Measurement => "measurement",
            ConstraintClass::Operational => "operational",
        };
        let scope = match self.scope {
            Scope::PerInterval => "per_interval",
            Scope::PerWindow => "per_window",
        };
        write!(f, "{} {class} {scope}: {} {} {}", self.name, self.lhs, self.relation.as_str(), self.rhs)?;
        for (i, g) in self.guards.iter().enumerate() {
            f.write_str(if i == 0 { " when " } else { " and " })?;
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

/// Everything a constraint needs besides the imputed values.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub bundle: &'a CoarseBundle,
    pub scalars: &'a BTreeMap<String, f64>,
    pub domain: ValueDomain,
}

impl<'a> EvalContext<'a> {
    pub fn new(bundle: &'a CoarseBundle, scalars: &'a BTreeMap<String, f64>, domain: ValueDomain) -> Self {
        Self { bundle, scalars, domain }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing {
    pub sharpness: f64,
    /// Scale of the step argument; values are divided by it before the step.
    pub unit: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { sharpness: DEFAULT_SHARPNESS, unit: 1.0 }
    }
}

/// Residual for one scope with its gradient over `imputed[start..start + grad.len()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopedResidual {
    pub value: f64,
    pub scale: f64,
    /// False when a guard disabled the constraint (value is then 0).
    pub active: bool,
    pub start: usize,
    pub grad: Vec<f64>,
}

impl ScopedResidual {
    /// Violation magnitude: `|phi|` for equalities, `max(0, psi)` for inequalities.
    pub fn violation(&self, form: Form) -> f64 {
        match form {
            Form::Equality => self.value.abs(),
            Form::Inequality => self.value.max(0.0),
        }
    }
}

/// Exact residual per scope. Inequalities are violated when the value is > 0.
pub fn eval_exact(c: &Constraint, imputed: &[f64], ctx: &EvalContext<'_>) -> Result<Vec<f64>> {
    Ok(c.eval_mode(imputed, ctx, Mode::Exact)?.into_iter().map(|r| r.value).collect())
}

/// Exact residuals including scale and guard status.
pub fn eval_exact_detailed(c: &Constraint, imputed: &[f64], ctx: &EvalContext<'_>) -> Result<Vec<ScopedResidual>> {
    c.eval_mode(imputed, ctx, Mode::Exact)
}

/// Smoothed residual per scope with gradients.
pub fn eval_smooth(
    c: &Constraint,
    imputed: &[f64],
    ctx: &EvalContext<'_>,
    smoothing: Smoothing,
) -> Result<Vec<ScopedResidual>> {
    if !(smoothing.sharpness > 0.0) || !(smoothing.unit > 0.0) {
        return Err(Error::Invalid("smoothing sharpness and unit must be positive".into()));
    }
    c.eval_mode(imputed, ctx, Mode::Smooth { sharpness: smoothing.sharpness, unit: smoothing.unit })
}

/// Ordered, uniquely named list of constraints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &constraints {
            c.validate()?;
            if !seen.insert(c.name.clone()) {
                return Err(Error::Invalid(format!("duplicate constraint name `{}`", c.name)));
            }
        }
        Ok(Self { constraints })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Constraint> {
        self.constraints.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Constraint> {
        self.constraints.iter().find(|c| c.name == name)
    }

    /// Number of equality constraints (K).
    pub fn equality_count(&self) -> usize {
        self.constraints.iter().filter(|c| c.form() == Form::Equality).count()
    }

    /// Number of inequality constraints (H).
    pub fn inequality_count(&self) -> usize {
        self.constraints.iter().filter(|c| c.form() == Form::Inequality).count()
    }

    pub fn equalities(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter().filter(|c| c.form() == Form::Equality)
    }

    pub fn inequalities(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter().filter(|c| c.form() == Form::Inequality)
    }

    pub fn subset(&self, names: &[&str]) -> Result<ConstraintSet> {
        let mut out = Vec::new();
        for n in names {
            out.push(
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("no constraint named `{n}`")))?,
            );
        }
        ConstraintSet::new(out)
    }

    /// Check every reference against a bundle layout and scalar names.
    pub fn check_layout(&self, layout: &[String], scalar_names: &BTreeSet<String>) -> Result<()> {
        for c in &self.constraints {
            let (ms, ss) = c.references();
            for m in ms {
                if !layout.contains(&m) {
                    return Err(Error::UnresolvedMeasurement(m));
                }
            }
            for s in ss {
                if !scalar_names.contains(&s) {
                    return Err(Error::UnresolvedMeasurement(format!("s[{s}]")));
                }
            }
        }
        Ok(())
    }

    /// Serialize in the text format accepted by [`parse_constraint_set`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.constraints {
            s.push_str(&c.to_string());
            s.push('\n');
        }
        s
    }
}

impl<'a> IntoIterator for &'a ConstraintSet {
    type Item = &'a Constraint;
    type IntoIter = std::slice::Iter<'a, Constraint>;

    fn into_iter(self) -> Self::IntoIter {
        self.constraints.iter()
    }
}

/// Mean exact violation of one constraint over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStat {
    pub name: String,
    /// Mean violation in physical units over all scopes.
    pub mean_abs: f64,
    /// Mean violation divided by the constraint scale.
    pub mean_normalized: f64,
    /// Scopes with a violation above `tol`.
    pub violated: usize,
    pub scopes: usize,
}

/// Exact violations of every constraint of `set` for `outputs[i]` imputed on
/// `windows[i]`.
pub fn violation_summary(
    set: &ConstraintSet,
    windows: &[crate::series::WindowExample],
    outputs: &[Vec<f64>],
    tol: f64,
) -> Result<Vec<ViolationStat>> {
    if windows.len() != outputs.len() {
        return Err(Error::Shape("one output per window is required".into()));
    }
    let mut stats = Vec::with_capacity(set.len());
    for c in set {
        let (mut abs, mut norm, mut violated, mut scopes) = (0.0, 0.0, 0, 0);
        for (w, out) in windows.iter().zip(outputs) {
            let ctx = EvalContext::new(&w.input, &w.scalars, w.target.domain);
            for r in eval_exact_detailed(c, out, &ctx)? {
                let v = r.violation(c.form());
                abs += v;
                norm += v / r.scale;
                violated += usize::from(v > tol);
                scopes += 1;
            }
        }
        let n = scopes.max(1) as f64;
        stats.push(ViolationStat { name: c.name.clone(), mean_abs: abs / n, mean_normalized: norm / n, violated, scopes });
    }
    Ok(stats)
}
