//! Constraint enforcement: minimal L1 repair of an imputed window.
//!
//! The model output `x_hat` is projected onto the set of series that satisfy
//! every active constraint, minimizing `sum |x_t - x_hat_t|` over the indices
//! not pinned by a measurement. Each constraint is compiled into a mixed
//! integer linear program (big-M encodings for `max`, `min` and `count_pos`)
//! and solved with HiGHS. Windows whose constraints are all per-interval are
//! split into independent per-interval programs.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use highs::{Col, HighsModelStatus, RowProblem, Sense};
use serde::{Deserialize, Serialize};

use crate::constraints::{
    eval_exact_detailed, Aggregate, ConstraintClass, ConstraintSet, EvalContext, Expr, Form, Resolver, Scope,
};
use crate::series::{CoarseBundle, CoarsenerKind, FineSeries, ValueDomain, WindowExample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    /// Wall-clock budget per window and attempt.
    pub time_limit_s: f64,
    /// Known upper bound of the target channel (buffer size, link rate).
    pub capacity: Option<f64>,
    /// Among co-optimal repairs, prefer witnesses at the model's own peaks.
    pub tie_break: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { time_limit_s: 10.0, capacity: None, tie_break: true }
    }
}

/// `constant + sum coef * aggregate(x[scope])`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForm {
    pub constant: f64,
    pub terms: Vec<(Aggregate, f64)>,
}

impl LinearForm {
    fn constant(c: f64) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    fn scaled(mut self, k: f64) -> Self {
        self.constant *= k;
        for t in &mut self.terms {
            t.1 *= k;
        }
        self
    }

    fn plus(mut self, other: LinearForm, sign: f64) -> Self {
        self.constant += sign * other.constant;
        self.terms.extend(other.terms.into_iter().map(|(a, c)| (a, sign * c)));
        self
    }
}

fn linearize(e: &Expr, res: &Resolver<'_>) -> Result<LinearForm> {
    Ok(match e {
        Expr::Agg(a) => LinearForm { constant: 0.0, terms: vec![(*a, 1.0)] },
        Expr::Add(a, b) => linearize(a, res)?.plus(linearize(b, res)?, 1.0),
        Expr::Sub(a, b) => linearize(a, res)?.plus(linearize(b, res)?, -1.0),
        Expr::Neg(a) => linearize(a, res)?.scaled(-1.0),
        Expr::Mul(a, b) => match (a.depends_on_series(), b.depends_on_series()) {
            (true, true) => return Err(Error::Invalid(format!("non-linear product `{e}`"))),
            (true, false) => linearize(a, res)?.scaled(b.eval_const(res)?),
            (false, _) => linearize(b, res)?.scaled(a.eval_const(res)?),
        },
        _ => LinearForm::constant(e.eval_const(res)?),
    })
}

/// One active constraint instance over `x[start..start + len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopedRow {
    /// Index of the constraint in the set.
    pub constraint: usize,
    pub start: usize,
    pub len: usize,
    pub form: Form,
    /// Residual: `== 0` for equalities, `<= 0` for inequalities.
    pub lin: LinearForm,
}

/// A compiled repair problem for one window.
#[derive(Debug, Clone)]
pub struct RepairProblem {
    pub window_id: usize,
    pub set: ConstraintSet,
    pub bundle: CoarseBundle,
    pub scalars: BTreeMap<String, f64>,
    pub model_out: FineSeries,
    /// Big-M: upper bound for every fine value.
    pub upper: f64,
    /// Indices pinned by measurement equalities and their values.
    pub fixed: BTreeMap<usize, f64>,
    /// Rows whose guards hold, in declaration order.
    pub rows: Vec<ScopedRow>,
    /// A measurement pins one index to two different values, or to a value
    /// outside the domain.
    pub pin_conflict: bool,
}

/// Tolerance for "satisfied" when checking a candidate exactly.
fn tolerance(domain: ValueDomain, scale: f64) -> f64 {
    match domain {
        ValueDomain::NonnegInt => 1e-9 * scale.max(1.0),
        ValueDomain::NonnegReal => 1e-6 * scale.max(1.0),
    }
}

fn upper_bound(bundle: &CoarseBundle, channel: &str, capacity: Option<f64>) -> Option<f64> {
    let mut m = capacity;
    for e in bundle.entries.iter().filter(|e| e.channel == channel) {
        let factor = match e.spec.kind {
            // a non-negative value never exceeds its interval max or sum
            CoarsenerKind::Max | CoarsenerKind::Sum => 1.0,
            CoarsenerKind::Mean => bundle.zoom as f64,
            _ => continue,
        };
        for &v in &e.values {
            m = Some(m.map_or(v * factor, |m: f64| m.max(v * factor)));
        }
    }
    m
}

/// Resolve guards, measurements and scalars of `set` for one window.
pub fn compile(
    set: &ConstraintSet,
    bundle: &CoarseBundle,
    scalars: &BTreeMap<String, f64>,
    model_out: &FineSeries,
    cfg: &CemConfig,
) -> Result<RepairProblem> {
    bundle.validate()?;
    if model_out.values.len() != bundle.fine_len() {
        return Err(Error::Shape(format!(
            "model output has {} values, window needs {}",
            model_out.values.len(),
            bundle.fine_len()
        )));
    }
    if let Some(v) = model_out.values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("model output contains {v}")));
    }
    let ctx = EvalContext::new(bundle, scalars, model_out.domain);
    let mut rows = Vec::new();
    let mut fixed = BTreeMap::new();
    let mut pin_conflict = false;
    let mut pinned_max = 0.0f64;
    for (ci, c) in set.iter().enumerate() {
        let residual = c.residual_expr();
        for j in 0..c.scope_count(bundle.context_len) {
            if !c.active(j, &ctx)? {
                continue;
            }
            let (start, len) = c.scope_range(j, bundle);
            let res = c.resolver(j, &ctx);
            let lin = linearize(&residual, &res)?;
            if let Some(k) = lin.terms.iter().find_map(|(a, _)| match a {
                Aggregate::At(k) if *k >= len => Some(*k),
                _ => None,
            }) {
                return Err(Error::Invalid(format!("`{}` reads offset {k} of a scope of {len}", c.name)));
            }
            if c.class == ConstraintClass::Measurement {
                if let Some((Aggregate::At(k), m)) = c.measurement_view() {
                    let v = res.measurement(&m)?;
                    let valid = v >= 0.0 && (model_out.domain == ValueDomain::NonnegReal || v.fract() == 0.0);
                    match fixed.insert(start + k, v) {
                        Some(old) if old != v => pin_conflict = true,
                        _ if !valid => pin_conflict = true,
                        _ => pinned_max = pinned_max.max(v),
                    }
                }
            }
            rows.push(ScopedRow { constraint: ci, start, len, form: c.form(), lin });
        }
    }
    let upper = upper_bound(bundle, &model_out.channel, cfg.capacity).ok_or_else(|| {
        Error::Config(format!(
            "channel `{}` has no max, sum or mean measurement to bound it; supply a channel capacity",
            model_out.channel
        ))
    })?;
    Ok(RepairProblem {
        window_id: 0,
        set: set.clone(),
        bundle: bundle.clone(),
        scalars: scalars.clone(),
        model_out: model_out.clone(),
        upper: upper.max(pinned_max).max(0.0),
        fixed,
        rows,
        pin_conflict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    /// The model output already satisfied every constraint.
    AlreadyFeasible,
    Repaired,
    /// Repaired after dropping operational constraints.
    Relaxed,
    /// Even the measurement constraints could not be met; the model output
    /// is returned unchanged.
    Infeasible,
}

impl RepairStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RepairStatus::AlreadyFeasible => "already_feasible",
            RepairStatus::Repaired => "repaired",
            RepairStatus::Relaxed => "relaxed",
            RepairStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub window_id: usize,
    pub status: RepairStatus,
    /// `sum |x - x_hat|` over unpinned indices.
    pub objective: f64,
    /// Summed violation per constraint before and after repair.
    pub pre_violations: Vec<(String, f64)>,
    pub post_violations: Vec<(String, f64)>,
    pub relaxed: Vec<String>,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repair {
    pub series: FineSeries,
    pub report: RepairReport,
}

impl RepairProblem {
    pub fn with_id(mut self, id: usize) -> Self {
        self.window_id = id;
        self
    }

    fn domain(&self) -> ValueDomain {
        self.model_out.domain
    }

    /// Summed violation per constraint, skipping inactive scopes.
    pub fn violations(&self, x: &[f64]) -> Result<Vec<(String, f64)>> {
        let ctx = EvalContext::new(&self.bundle, &self.scalars, self.domain());
        self.set
            .iter()
            .map(|c| {
                let v = eval_exact_detailed(c, x, &ctx)?
                    .iter()
                    .filter(|r| r.active)
                    .map(|r| r.violation(c.form()))
                    .sum();
                Ok((c.name.clone(), v))
            })
            .collect()
    }

    /// Whether `x` lies in the domain and meets every active constraint.
    pub fn is_feasible(&self, x: &[f64]) -> Result<bool> {
        self.is_feasible_except(x, &BTreeSet::new())
    }

    fn is_feasible_except(&self, x: &[f64], dropped: &BTreeSet<usize>) -> Result<bool> {
        let domain = self.domain();
        if x.iter().any(|&v| v < 0.0 || (domain == ValueDomain::NonnegInt && v.fract() != 0.0)) {
            return Ok(false);
        }
        let ctx = EvalContext::new(&self.bundle, &self.scalars, domain);
        for (ci, c) in self.set.iter().enumerate() {
            if dropped.contains(&ci) {
                continue;
            }
            for r in eval_exact_detailed(c, x, &ctx)? {
                if r.active && r.violation(c.form()) > tolerance(domain, r.scale) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Repair objective of a candidate.
    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.model_out.values)
            .enumerate()
            .filter(|(t, _)| !self.fixed.contains_key(t))
            .map(|(_, (a, b))| (a - b).abs())
            .sum()
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let whole = self.set.iter().any(|c| c.scope == Scope::PerWindow);
        if whole {
            vec![(0, self.bundle.fine_len())]
        } else {
            let z = self.bundle.zoom;
            (0..self.bundle.context_len).map(|j| (j * z, (j + 1) * z)).collect()
        }
    }
}

enum Outcome {
    Solved(Vec<f64>),
    Infeasible,
    TimedOut,
}

/// Column bookkeeping so rows can merge repeated columns.
struct Builder {
    pb: RowProblem,
    cols: Vec<Col>,
}

impl Builder {
    fn col(&mut self, cost: f64, lo: f64, hi: f64, integer: bool) -> usize {
        let c = if integer { self.pb.add_integer_column(cost, lo..=hi) } else { self.pb.add_column(cost, lo..=hi) };
        self.cols.push(c);
        self.cols.len() - 1
    }

    fn row(&mut self, lo: f64, hi: f64, coefs: &BTreeMap<usize, f64>) {
        let factors: Vec<(Col, f64)> =
            coefs.iter().filter(|(_, &v)| v != 0.0).map(|(&i, &v)| (self.cols[i], v)).collect();
        self.pb.add_row(lo..=hi, &factors);
    }
}

/// Ranking of the indices of one scope: best witness first.
fn witness_weights(xhat: &[f64], largest: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xhat.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = xhat[a].total_cmp(&xhat[b]);
        (if largest { o.reverse() } else { o }).then(a.cmp(&b))
    });
    let mut w = vec![0.0; xhat.len()];
    for (rank, &i) in idx.iter().enumerate() {
        w[i] = rank as f64;
    }
    w
}

struct Program {
    b: Builder,
    x: Vec<usize>,
    d: Vec<usize>,
    /// Witness binaries with their tie-break weight.
    witnesses: Vec<(usize, f64)>,
}

fn build(p: &RepairProblem, range: (usize, usize), dropped: &BTreeSet<usize>, stage2: Option<f64>) -> Program {
    let (s, e) = range;
    let m = p.upper;
    let int = p.domain() == ValueDomain::NonnegInt;
    let xhat = &p.model_out.values;
    let mut b = Builder { pb: RowProblem::default(), cols: Vec::new() };
    let x: Vec<usize> = (s..e)
        .map(|t| match p.fixed.get(&t) {
            Some(&v) => b.col(0.0, v, v, int),
            None => b.col(0.0, 0.0, m, int),
        })
        .collect();
    let d_cost = if stage2.is_some() { 0.0 } else { 1.0 };
    let mut d = Vec::new();
    for t in s..e {
        if p.fixed.contains_key(&t) {
            continue;
        }
        let dc = b.col(d_cost, 0.0, f64::INFINITY, false);
        let xc = x[t - s];
        b.row(-xhat[t], f64::INFINITY, &BTreeMap::from([(dc, 1.0), (xc, -1.0)]));
        b.row(xhat[t], f64::INFINITY, &BTreeMap::from([(dc, 1.0), (xc, 1.0)]));
        d.push(dc);
    }
    let eps = p.domain().epsilon();
    let mut witnesses = Vec::new();
    for row in p.rows.iter().filter(|r| r.start >= s && r.start + r.len <= e && !dropped.contains(&r.constraint)) {
        let mut coefs: BTreeMap<usize, f64> = BTreeMap::new();
        let scope: Vec<usize> = x[row.start - s..row.start - s + row.len].to_vec();
        for &(agg, k) in &row.lin.terms {
            match agg {
                Aggregate::Sum | Aggregate::Mean => {
                    let f = if agg == Aggregate::Mean { k / row.len as f64 } else { k };
                    for &xc in &scope {
                        *coefs.entry(xc).or_default() += f;
                    }
                }
                Aggregate::At(i) => *coefs.entry(scope[i]).or_default() += k,
                Aggregate::Max | Aggregate::Min => {
                    let largest = agg == Aggregate::Max;
                    let y = b.col(0.0, 0.0, m, false);
                    let weights = witness_weights(&xhat[row.start..row.start + row.len], largest);
                    let mut pick = BTreeMap::new();
                    for (i, &xc) in scope.iter().enumerate() {
                        let w = b.col(0.0, 0.0, 1.0, true);
                        pick.insert(w, 1.0);
                        witnesses.push((w, weights[i]));
                        // y bounds x from one side, and equals it where w = 1
                        let both = BTreeMap::from([(y, 1.0), (xc, -1.0)]);
                        let tight = BTreeMap::from([(y, 1.0), (xc, -1.0), (w, if largest { m } else { -m })]);
                        if largest {
                            b.row(0.0, f64::INFINITY, &both);
                            b.row(f64::NEG_INFINITY, m, &tight);
                        } else {
                            b.row(f64::NEG_INFINITY, 0.0, &both);
                            b.row(-m, f64::INFINITY, &tight);
                        }
                    }
                    b.row(1.0, 1.0, &pick);
                    *coefs.entry(y).or_default() += k;
                }
                Aggregate::CountPositive => {
                    for &xc in &scope {
                        let on = b.col(0.0, 0.0, 1.0, true);
                        b.row(f64::NEG_INFINITY, 0.0, &BTreeMap::from([(xc, 1.0), (on, -m)]));
                        b.row(0.0, f64::INFINITY, &BTreeMap::from([(xc, 1.0), (on, -eps)]));
                        *coefs.entry(on).or_default() += k;
                    }
                }
            }
        }
        let rhs = -row.lin.constant;
        match row.form {
            Form::Equality => b.row(rhs, rhs, &coefs),
            Form::Inequality => b.row(f64::NEG_INFINITY, rhs, &coefs),
        }
    }
    if let Some(bound) = stage2 {
        let all: BTreeMap<usize, f64> = d.iter().map(|&c| (c, 1.0)).collect();
        b.row(f64::NEG_INFINITY, bound, &all);
        for &(w, weight) in &witnesses {
            b.pb.change_column_cost(b.cols[w], weight);
        }
    }
    Program { b, x, d, witnesses }
}

fn run(prog: Program, budget: Duration) -> Result<(HighsModelStatus, Vec<f64>, f64)> {
    let Program { b, x, .. } = prog;
    let mut model = b.pb.optimise(Sense::Minimise);
    model.make_quiet();
    model.set_option("time_limit", budget.as_secs_f64().max(1e-3));
    model.set_option("mip_rel_gap", 0.0);
    model.set_option("mip_abs_gap", 1e-9);
    let solved = model.try_solve().map_err(|e| Error::Solver(format!("HiGHS rejected the program: {e:?}")))?;
    let status = solved.status();
    if status != HighsModelStatus::Optimal {
        return Ok((status, Vec::new(), f64::NAN));
    }
    let sol = solved.get_solution();
    let all = sol.columns();
    Ok((status, x.iter().map(|&i| all[i]).collect(), solved.objective_value()))
}

fn solve_block(p: &RepairProblem, range: (usize, usize), dropped: &BTreeSet<usize>, cfg: &CemConfig) -> Result<Outcome> {
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.time_limit_s);
    let prog = build(p, range, dropped, None);
    let tie_break = cfg.tie_break && !prog.witnesses.is_empty() && !prog.d.is_empty();
    let (status, x, z) = run(prog, deadline.saturating_duration_since(Instant::now()))?;
    match status {
        HighsModelStatus::Optimal => {}
        HighsModelStatus::Infeasible | HighsModelStatus::UnboundedOrInfeasible => return Ok(Outcome::Infeasible),
        HighsModelStatus::ReachedTimeLimit => return Ok(Outcome::TimedOut),
        other => return Err(Error::Solver(format!("unexpected solver status {other:?}"))),
    }
    if !tie_break {
        return Ok(Outcome::Solved(x));
    }
    let left = deadline.saturating_duration_since(Instant::now());
    if left.is_zero() {
        return Ok(Outcome::Solved(x));
    }
    let bound = z + 1e-7 * z.abs().max(1.0);
    match run(build(p, range, dropped, Some(bound)), left)? {
        (HighsModelStatus::Optimal, x2, _) => Ok(Outcome::Solved(x2)),
        // the first stage already has an optimal answer
        _ => Ok(Outcome::Solved(x)),
    }
}

fn polish(p: &RepairProblem, x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.max(0.0);
        if p.domain() == ValueDomain::NonnegInt {
            *v = v.round();
        }
    }
    for (&t, &v) in &p.fixed {
        x[t] = v;
    }
}

fn attempt(p: &RepairProblem, dropped: &BTreeSet<usize>, cfg: &CemConfig) -> Result<Option<Vec<f64>>> {
    if p.pin_conflict {
        return Ok(None);
    }
    let mut x = p.model_out.values.clone();
    for range in p.blocks() {
        match solve_block(p, range, dropped, cfg)? {
            Outcome::Solved(v) => x[range.0..range.1].copy_from_slice(&v),
            Outcome::Infeasible => return Ok(None),
            Outcome::TimedOut => {
                log::warn!("window {}: solver hit the {} s limit", p.window_id, cfg.time_limit_s);
                return Ok(None);
            }
        }
    }
    polish(p, &mut x);
    Ok(Some(x))
}

/// Repair one window. Operational constraints are dropped in reverse
/// declaration order while the program is infeasible; if the measurement
/// constraints alone cannot be met the model output is returned unchanged.
pub fn enforce(p: &RepairProblem, cfg: &CemConfig) -> Result<Repair> {
    if !(cfg.time_limit_s > 0.0) {
        return Err(Error::Config("solver time limit must be positive".into()));
    }
    let t0 = Instant::now();
    let pre = p.violations(&p.model_out.values)?;
    let finish = |values: Vec<f64>, status: RepairStatus, relaxed: Vec<String>| -> Result<Repair> {
        let post = p.violations(&values)?;
        let objective = if status == RepairStatus::Infeasible { 0.0 } else { p.objective(&values) };
        Ok(Repair {
            series: FineSeries { values, ..p.model_out.clone() },
            report: RepairReport {
                window_id: p.window_id,
                status,
                objective,
                pre_violations: pre.clone(),
                post_violations: post,
                relaxed,
                solve_ms: t0.elapsed().as_secs_f64() * 1e3,
            },
        })
    };
    if p.is_feasible(&p.model_out.values)? {
        return finish(p.model_out.values.clone(), RepairStatus::AlreadyFeasible, Vec::new());
    }
    let used: BTreeSet<usize> = p.rows.iter().map(|r| r.constraint).collect();
    let mut droppable = p
        .set
        .iter()
        .enumerate()
        .filter(|(i, c)| c.class == ConstraintClass::Operational && used.contains(i))
        .map(|(i, _)| i)
        .rev();
    let mut dropped = BTreeSet::new();
    let mut relaxed = Vec::new();
    loop {
        if let Some(x) = attempt(p, &dropped, cfg)? {
            let status = if relaxed.is_empty() { RepairStatus::Repaired } else { RepairStatus::Relaxed };
            return finish(x, status, relaxed);
        }
        match droppable.next() {
            Some(i) => {
                let name = p.set.iter().nth(i).map(|c| c.name.clone()).unwrap_or_default();
                log::info!("window {}: dropping operational constraint {name}", p.window_id);
                dropped.insert(i);
                relaxed.push(name);
            }
            None => {
                log::warn!("window {}: measurement constraints are infeasible; keeping the model output", p.window_id);
                return finish(p.model_out.values.clone(), RepairStatus::Infeasible, relaxed);
            }
        }
    }
}

/// Compile and repair every window in order.
pub fn enforce_batch(
    set: &ConstraintSet,
    windows: &[WindowExample],
    outputs: &[FineSeries],
    cfg: &CemConfig,
) -> Result<Vec<Repair>> {
    if windows.len() != outputs.len() {
        return Err(Error::Shape(format!("{} windows but {} outputs", windows.len(), outputs.len())));
    }
    // HiGHS runs its own worker pool, so windows are solved one at a time
    windows
        .iter()
        .zip(outputs)
        .map(|(w, out)| enforce(&compile(set, &w.input, &w.scalars, out, cfg)?.with_id(w.id), cfg))
        .collect()
}

/// Exhaustive search over `grid^len` candidates using the exact evaluator.
/// Returns the first candidate (in odometer order) with the least objective.
pub fn brute_force_oracle(p: &RepairProblem, grid: &[f64]) -> Result<Option<(Vec<f64>, f64)>> {
    let n = p.bundle.fine_len();
    if n > 8 || grid.len() > 8 || grid.is_empty() {
        return Err(Error::Invalid(format!(
            "brute force is limited to 8 steps and 8 grid values, got {n} and {}",
            grid.len()
        )));
    }
    let mut digits = vec![0usize; n];
    let mut best: Option<(Vec<f64>, f64)> = None;
    loop {
        let x: Vec<f64> = digits.iter().map(|&d| grid[d]).collect();
        if p.is_feasible(&x)? {
            let obj = p.objective(&x);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((x, obj));
            }
        }
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < grid.len() {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// One CSV row per window.
pub fn reports_to_csv(reports: &[RepairReport]) -> Result<String> {
    let names: Vec<String> = reports
        .first()
        .map(|r| r.pre_violations.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["window_id".to_string(), "status".into(), "objective".into()];
    header.extend(names.iter().map(|n| format!("pre_{n}")));
    header.extend(names.iter().map(|n| format!("post_{n}")));
    header.extend(["relaxed".into(), "solve_ms".into()]);
    w.write_record(&header)?;
    for r in reports {
        let mut rec = vec![r.window_id.to_string(), r.status.as_str().into(), r.objective.to_string()];
        rec.extend(r.pre_violations.iter().map(|(_, v)| v.to_string()));
        rec.extend(r.post_violations.iter().map(|(_, v)| v.to_string()));
        rec.push(r.relaxed.join(";"));
        rec.push(format!("{:.3}", r.solve_ms));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::library::queue_constraints;
    use crate::series::{CoarseEntry, CoarsenerSpec};

    fn bundle(z: usize, maxes: &[f64], samples: &[f64], sent: &[f64]) -> CoarseBundle {
        let n = maxes.len();
        let entry = |ch: &str, spec, v: &[f64]| CoarseEntry { channel: ch.into(), spec, values: v.to_vec() };
        CoarseBundle::new(
            vec![
                entry("qlen", CoarsenerSpec::new(CoarsenerKind::Max, z).unwrap(), maxes),
                entry("qlen", CoarsenerSpec::periodic(z, 0).unwrap(), samples),
                entry("sent", CoarsenerSpec::new(CoarsenerKind::Sum, z).unwrap(), sent),
            ],
            n,
            z,
        )
        .unwrap()
    }

    fn out(v: &[f64]) -> FineSeries {
        FineSeries::relaxed("qlen", v.to_vec(), 1.0, ValueDomain::NonnegInt).unwrap()
    }

    fn problem(b: &CoarseBundle, v: &[f64]) -> RepairProblem {
        compile(&queue_constraints("qlen", "sent").unwrap(), b, &BTreeMap::new(), &out(v), &CemConfig::default())
            .unwrap()
    }

    #[test]
    fn feasible_output_is_untouched() {
        let b = bundle(4, &[5.0], &[2.0], &[4.0]);
        let p = problem(&b, &[2.0, 5.0, 1.0, 0.0]);
        let r = enforce(&p, &CemConfig::default()).unwrap();
        assert_eq!(r.report.status, RepairStatus::AlreadyFeasible);
        assert_eq!(r.report.objective, 0.0);
        assert_eq!(r.series.values, vec![2.0, 5.0, 1.0, 0.0]);
    }

    #[test]
    fn repair_meets_constraints_and_matches_oracle() {
        let b = bundle(4, &[5.0, 3.0], &[2.0, 0.0], &[3.0, 2.0]);
        let xhat = [0.4, 3.2, 3.9, 1.1, 0.2, 0.0, 4.0, 0.0];
        let p = problem(&b, &xhat);
        let r = enforce(&p, &CemConfig::default()).unwrap();
        assert_eq!(r.report.status, RepairStatus::Repaired);
        assert!(p.is_feasible(&r.series.values).unwrap(), "{:?}", r.series.values);
        let grid: Vec<f64> = (0..6).map(f64::from).collect();
        let (_, best) = brute_force_oracle(&p, &grid).unwrap().unwrap();
        assert!((r.report.objective - best).abs() < 1e-9, "{} vs {best}", r.report.objective);
    }

    #[test]
    fn tie_break_pins_the_models_peak() {
        // both samples need to become 5; either index can carry the max
        let b = bundle(3, &[5.0], &[0.0], &[3.0]);
        let p = problem(&b, &[0.0, 3.0, 3.0]);
        let r = enforce(&p, &CemConfig::default()).unwrap();
        assert_eq!(r.series.values, vec![0.0, 5.0, 3.0]);
    }

    #[test]
    fn repair_is_idempotent() {
        let b = bundle(4, &[5.0, 3.0], &[2.0, 0.0], &[3.0, 2.0]);
        let r1 = enforce(&problem(&b, &[0.4, 3.2, 3.9, 1.1, 0.2, 0.0, 4.0, 0.0]), &CemConfig::default()).unwrap();
        let r2 = enforce(&problem(&b, &r1.series.values), &CemConfig::default()).unwrap();
        assert_eq!(r2.series.values, r1.series.values);
        assert_eq!(r2.report.objective, 0.0);
    }

    #[test]
    fn operational_constraint_is_dropped_when_infeasible() {
        // max 4 with a 2-sample interval and zero departures: C3 forbids any
        // positive value, so only dropping it leaves a solution
        let b = bundle(2, &[4.0], &[0.0], &[0.0]);
        let r = enforce(&problem(&b, &[1.0, 1.0]), &CemConfig::default()).unwrap();
        assert_eq!(r.report.status, RepairStatus::Relaxed);
        assert_eq!(r.report.relaxed, vec!["C3".to_string()]);
        assert_eq!(r.series.values, vec![0.0, 4.0]);
    }

    #[test]
    fn measurement_conflict_returns_model_output() {
        // the periodic sample exceeds the interval max
        let b = bundle(2, &[1.0], &[3.0], &[2.0]);
        let r = enforce(&problem(&b, &[0.5, 0.5]), &CemConfig::default()).unwrap();
        assert_eq!(r.report.status, RepairStatus::Infeasible);
        assert_eq!(r.series.values, vec![0.5, 0.5]);
    }

    #[test]
    fn missing_bound_is_reported() {
        let spec = CoarsenerSpec::periodic(2, 0).unwrap();
        let b = CoarseBundle::new(vec![CoarseEntry { channel: "qlen".into(), spec, values: vec![1.0] }], 1, 2).unwrap();
        let set = crate::constraints::library::builtin_library(
            &["C2"],
            &crate::constraints::library::LibraryConfig::queue("qlen", "sent"),
        )
        .unwrap();
        let err = compile(&set, &b, &BTreeMap::new(), &out(&[0.0, 0.0]), &CemConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let cfg = CemConfig { capacity: Some(10.0), ..CemConfig::default() };
        let p = compile(&set, &b, &BTreeMap::new(), &out(&[0.0, 0.0]), &cfg).unwrap();
        assert_eq!(enforce(&p, &cfg).unwrap().series.values, vec![1.0, 0.0]);
    }

    #[test]
    fn report_csv_has_one_row_per_window() {
        let b = bundle(4, &[5.0], &[2.0], &[4.0]);
        let r = enforce(&problem(&b, &[2.0, 5.0, 1.0, 0.0]), &CemConfig::default()).unwrap();
        let text = reports_to_csv(&[r.report.clone(), r.report]).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("window_id,status,objective,pre_C1,pre_C2,pre_C3,post_C1"));
    }

    #[test]
    fn oracle_rejects_large_problems() {
        let b = bundle(4, &[5.0, 3.0, 1.0], &[2.0, 0.0, 0.0], &[3.0, 2.0, 1.0]);
        let p = problem(&b, &[0.0; 12]);
        assert!(brute_force_oracle(&p, &[0.0, 1.0]).is_err());
    }
}
