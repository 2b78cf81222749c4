//! Constraint-aware training with an augmented Lagrangian.
//!
//! For training example `i` the loss is
//!
//! ```text
//! l_combine + sum_k (mu * phi_k^2 + lam_eq[k,i] * phi_k)
//!           + sum_h (lam_ineq[h,i] * psi_h + mu * [lam_ineq[h,i] > 0 or psi_h > 0] * psi_h^2)
//! ```
//!
//! with residuals from the smoothed evaluator, divided by each constraint's
//! scale. Multipliers are kept per constraint, example and scope (coarse
//! interval). Between inner training loops `mu` grows by `mu_mult` and the
//! multipliers take a dual step.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{eval_exact_detailed, eval_smooth, ConstraintSet, EvalContext, Form, Smoothing, DEFAULT_SHARPNESS};
use crate::model::loss::class_loss_grad;
use crate::model::train::{normalized, Session};
use crate::model::{fit_targets, Model, TrainConfig, TrainMode};
use crate::series::WindowExample;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalConfig {
    pub mu0: f64,
    pub mu_mult: f64,
    /// Stop when the relative violation improvement drops below this.
    pub saturation_tol: f64,
    pub max_outer: usize,
    pub sharpness: f64,
}

impl Default for KalConfig {
    fn default() -> Self {
        Self { mu0: 1e-3, mu_mult: 1.5, saturation_tol: 0.01, max_outer: 10, sharpness: DEFAULT_SHARPNESS }
    }
}

impl KalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 > 0.0) || !(self.mu_mult >= 1.0) || self.max_outer == 0 || !(self.sharpness > 0.0) {
            return Err(Error::Config("need mu0 > 0, mu_mult >= 1, max_outer >= 1 and sharpness > 0".into()));
        }
        Ok(())
    }
}

/// Residuals indexed `[constraint][example][scope]`, already divided by scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub eq: Vec<Vec<Vec<f64>>>,
    pub ineq: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalState {
    pub mu: f64,
    pub mu_mult: f64,
    pub eq_names: Vec<String>,
    pub ineq_names: Vec<String>,
    /// `[constraint][example][scope]`, example ids are training-split ids.
    pub lambda_eq: Vec<Vec<Vec<f64>>>,
    pub lambda_ineq: Vec<Vec<Vec<f64>>>,
    pub outer_iter: usize,
    pub violation_history: Vec<f64>,
}

impl KalState {
    pub fn new(set: &ConstraintSet, n_examples: usize, context_len: usize, mu0: f64, mu_mult: f64) -> Self {
        let dims = |form: Form| -> (Vec<String>, Vec<Vec<Vec<f64>>>) {
            set.iter()
                .filter(|c| c.form() == form)
                .map(|c| (c.name.clone(), vec![vec![0.0; c.scope_count(context_len)]; n_examples]))
                .unzip()
        };
        let (eq_names, lambda_eq) = dims(Form::Equality);
        let (ineq_names, lambda_ineq) = dims(Form::Inequality);
        Self { mu: mu0, mu_mult, eq_names, ineq_names, lambda_eq, lambda_ineq, outer_iter: 0, violation_history: Vec::new() }
    }

    pub fn n_examples(&self) -> usize {
        self.lambda_eq.first().or(self.lambda_ineq.first()).map_or(0, Vec::len)
    }

    /// One dual step from residuals measured at the current model.
    pub fn update_multipliers(&mut self, r: &Residuals, mean_violation: f64) -> Result<()> {
        let same_shape = |a: &Vec<Vec<Vec<f64>>>, b: &Vec<Vec<Vec<f64>>>| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.len() == q.len()))
        };
        if !same_shape(&self.lambda_eq, &r.eq) || !same_shape(&self.lambda_ineq, &r.ineq) {
            return Err(Error::Shape("residuals do not match the multiplier layout".into()));
        }
        let mu_old = self.mu;
        for (lam, res) in self.lambda_eq.iter_mut().zip(&r.eq) {
            for (l, v) in lam.iter_mut().flatten().zip(res.iter().flatten()) {
                *l += 2.0 * mu_old * v;
            }
        }
        for (lam, res) in self.lambda_ineq.iter_mut().zip(&r.ineq) {
            for (l, v) in lam.iter_mut().flatten().zip(res.iter().flatten()) {
                *l = (*l + 2.0 * mu_old * v).max(0.0);
            }
        }
        self.mu = mu_old * self.mu_mult;
        self.outer_iter += 1;
        self.violation_history.push(mean_violation);
        Ok(())
    }
}

/// Penalty part of the augmented loss for one example, with its gradient
/// with respect to the physical output.
fn penalty(
    set: &ConstraintSet,
    out: &[f64],
    ex: &WindowExample,
    lambdas: Option<(&KalState, usize)>,
    mu: f64,
    smoothing: Smoothing,
) -> Result<(f64, Vec<f64>)> {
    let ctx = EvalContext::new(&ex.input, &ex.scalars, ex.target.domain);
    let mut loss = 0.0;
    let mut grad = vec![0.0; out.len()];
    let (mut k, mut h) = (0, 0);
    for c in set {
        let res = eval_smooth(c, out, &ctx, smoothing)?;
        let form = c.form();
        for (j, r) in res.iter().enumerate() {
            if !r.active {
                continue;
            }
            let v = r.value / r.scale;
            let (l, coef) = match form {
                Form::Equality => {
                    let lam = lambdas.map_or(0.0, |(s, i)| s.lambda_eq[k][i][j]);
                    (mu * v * v + lam * v, 2.0 * mu * v + lam)
                }
                Form::Inequality => {
                    let lam = lambdas.map_or(0.0, |(s, i)| s.lambda_ineq[h][i][j]);
                    // the gate is evaluated, not differentiated
                    let gate = if lam > 0.0 || v > 0.0 { 1.0 } else { 0.0 };
                    (lam * v + gate * mu * v * v, lam + gate * 2.0 * mu * v)
                }
            };
            loss += l;
            if coef != 0.0 {
                for (g, d) in grad[r.start..r.start + r.grad.len()].iter_mut().zip(&r.grad) {
                    *g += coef * d / r.scale;
                }
            }
        }
        match form {
            Form::Equality => k += 1,
            Form::Inequality => h += 1,
        }
    }
    Ok((loss, grad))
}

/// Options for evaluating the augmented loss outside training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugOptions {
    pub emd_weight: f64,
    pub smoothing: Smoothing,
}

/// Augmented loss of a physical output for training example `i` and its gradient.
pub fn l_aug_grad(
    out: &[f64],
    ex: &WindowExample,
    i: usize,
    set: &ConstraintSet,
    kal: &KalState,
    opts: AugOptions,
) -> Result<(f64, Vec<f64>)> {
    if i >= kal.n_examples() && !set.is_empty() {
        return Err(Error::Invalid(format!("example {i} outside the multiplier range {}", kal.n_examples())));
    }
    let (base, mut grad) = crate::model::l_combine_grad(out, &ex.target.values, opts.emd_weight)?;
    let (pen, pg) = penalty(set, out, ex, Some((kal, i)), kal.mu, opts.smoothing)?;
    grad.iter_mut().zip(&pg).for_each(|(g, p)| *g += p);
    Ok((base + pen, grad))
}

pub fn l_aug(out: &[f64], ex: &WindowExample, i: usize, set: &ConstraintSet, kal: &KalState, opts: AugOptions) -> Result<f64> {
    Ok(l_aug_grad(out, ex, i, set, kal, opts)?.0)
}

/// Smoothed, scale-normalized residuals for every example.
pub fn smooth_residuals(set: &ConstraintSet, windows: &[WindowExample], outputs: &[Vec<f64>], smoothing: Smoothing) -> Result<Residuals> {
    let per_example: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = windows
        .par_iter()
        .zip(outputs)
        .map(|(w, out)| {
            let ctx = EvalContext::new(&w.input, &w.scalars, w.target.domain);
            let (mut eq, mut ineq) = (Vec::new(), Vec::new());
            for c in set {
                let vals: Vec<f64> = eval_smooth(c, out, &ctx, smoothing)?.iter().map(|r| r.value / r.scale).collect();
                match c.form() {
                    Form::Equality => eq.push(vals),
                    Form::Inequality => ineq.push(vals),
                }
            }
            Ok((eq, ineq))
        })
        .collect::<Result<_>>()?;
    let mut r = Residuals {
        eq: vec![Vec::with_capacity(windows.len()); set.equality_count()],
        ineq: vec![Vec::with_capacity(windows.len()); set.inequality_count()],
    };
    for (eq, ineq) in per_example {
        for (k, v) in eq.into_iter().enumerate() {
            r.eq[k].push(v);
        }
        for (h, v) in ineq.into_iter().enumerate() {
            r.ineq[h].push(v);
        }
    }
    Ok(r)
}

/// Mean exact violation over all constraints, examples and scopes, each
/// divided by its constraint scale.
pub fn mean_violation(set: &ConstraintSet, windows: &[WindowExample], outputs: &[Vec<f64>]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = windows
        .par_iter()
        .zip(outputs)
        .map(|(w, out)| {
            let ctx = EvalContext::new(&w.input, &w.scalars, w.target.domain);
            let (mut s, mut n) = (0.0, 0);
            for c in set {
                for r in eval_exact_detailed(c, out, &ctx)? {
                    s += r.violation(c.form()) / r.scale;
                    n += 1;
                }
            }
            Ok((s, n))
        })
        .collect::<Result<_>>()?;
    let (s, n) = parts.iter().fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

struct KalObjective<'a> {
    set: &'a ConstraintSet,
    state: &'a KalState,
    train: &'a [WindowExample],
    val: &'a [WindowExample],
    targets: Vec<Vec<Vec<f64>>>,
    val_targets: Vec<Vec<f64>>,
    emd_weight: f64,
    scale: f64,
    /// Training-set size; penalties are summed over the training set while
    /// the base loss is averaged.
    weight: f64,
    smoothing: Smoothing,
}

impl KalObjective<'_> {
    fn term(&self, ex: &WindowExample, targets: &[Vec<f64>], lambdas: Option<(&KalState, usize)>, out: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (base, mut grad) = class_loss_grad(out, targets, self.emd_weight)?;
        let phys: Vec<f64> = out.iter().map(|v| v * self.scale).collect();
        let (pen, pg) = penalty(self.set, &phys, ex, lambdas, self.state.mu, self.smoothing)?;
        grad.iter_mut().zip(&pg).for_each(|(g, p)| *g += self.weight * p * self.scale);
        Ok((base + self.weight * pen, grad))
    }
}

impl crate::model::Objective for KalObjective<'_> {
    fn train_term(&self, i: usize, out: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.term(&self.train[i], &self.targets[i], Some((self.state, i)), out)
    }

    fn val_term(&self, i: usize, out: &[f64]) -> Result<f64> {
        Ok(self.term(&self.val[i], std::slice::from_ref(&self.val_targets[i]), None, out)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer_iter: usize,
    pub mu: f64,
    pub epochs: usize,
    pub best_val_loss: f64,
    /// Mean normalized exact violation on the validation split.
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalLog {
    pub outer: Vec<OuterRecord>,
    /// Index into `outer` of the kept parameters.
    pub best_outer: usize,
    pub state: KalState,
}

impl KalLog {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("outer_iter,mu,epochs,best_val_loss,violation\n");
        for r in &self.outer {
            s.push_str(&format!("{},{},{},{},{}\n", r.outer_iter, r.mu, r.epochs, r.best_val_loss, r.violation));
        }
        s
    }
}

/// Train `model` with the augmented loss.
///
/// `targets` optionally gives several acceptable targets per training example
/// (refined classes); by default each example's own target is used. With an
/// empty constraint set this is exactly the plain training path.
pub fn fit(
    model: &mut Model,
    train: &[WindowExample],
    val: &[WindowExample],
    targets: Option<&[Vec<Vec<f64>>]>,
    set: &ConstraintSet,
    train_cfg: &TrainConfig,
    cfg: &KalConfig,
) -> Result<KalLog> {
    cfg.validate()?;
    let own: Vec<Vec<Vec<f64>>>;
    let targets = match targets {
        Some(t) => t,
        None => {
            own = train.iter().map(|w| vec![w.target.values.clone()]).collect();
            &own
        }
    };
    if targets.len() != train.len() {
        return Err(Error::Shape("one target set per training example is required".into()));
    }
    let mut state = KalState::new(set, train.len(), model.io.context_len, cfg.mu0, cfg.mu_mult);
    if set.is_empty() {
        fit_targets(model, train, targets, val, train_cfg)?;
        model.meta.mode = TrainMode::Kal;
        return Ok(KalLog { outer: Vec::new(), best_outer: 0, state });
    }
    let scalar_names: BTreeSet<String> = train.iter().flat_map(|w| w.scalars.keys().cloned()).collect();
    set.check_layout(&model.io.layout, &scalar_names)?;

    let smoothing = Smoothing { sharpness: cfg.sharpness, unit: model.norm.target_scale };
    let scale = model.norm.target_scale;
    let norm_targets: Vec<Vec<Vec<f64>>> = targets.iter().map(|s| s.iter().map(|t| normalized(model, t)).collect()).collect();
    let val_targets: Vec<Vec<f64>> = val.iter().map(|w| normalized(model, &w.target.values)).collect();
    let refined = targets.iter().any(|t| t.len() > 1);
    let report_set = if val.is_empty() { train } else { val };

    let mut session = Session::new(model, train, val, train_cfg)?;
    let mut outer = Vec::new();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for it in 0..cfg.max_outer {
        let obj = KalObjective {
            set,
            state: &state,
            train,
            val,
            targets: norm_targets.clone(),
            val_targets: val_targets.clone(),
            emd_weight: train_cfg.emd_weight,
            scale,
            weight: train.len() as f64,
            smoothing,
        };
        let log = session.train_until_converged(&obj, it)?;
        let phys = |outs: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            outs.into_iter().map(|o| o.into_iter().map(|v| v * scale).collect()).collect()
        };
        let train_out = phys(session.train_outputs());
        let report_out = if val.is_empty() { train_out.clone() } else { phys(session.val_outputs()) };
        let violation = mean_violation(set, report_set, &report_out)?;
        if !violation.is_finite() {
            return Err(Error::Training { outer_iter: it, msg: "non-finite constraint violation".into() });
        }
        outer.push(OuterRecord { outer_iter: it, mu: state.mu, epochs: log.epochs.len(), best_val_loss: log.best_val, violation });
        if best.as_ref().is_none_or(|(b, _, _)| violation < *b) {
            best = Some((violation, session.model.params.clone(), it));
        }
        let residuals = smooth_residuals(set, train, &train_out, smoothing)?;
        state.update_multipliers(&residuals, violation)?;
        log::info!("outer iteration {it}: mean violation {violation:.6}, mu {:.3e}", state.mu);

        let prev = state.violation_history.len().checked_sub(2).map(|k| state.violation_history[k]);
        if violation == 0.0 {
            break;
        }
        if let Some(p) = prev {
            if (p - violation) / p < cfg.saturation_tol {
                break;
            }
        }
    }
    let epochs = session.epochs_run();
    let (_, params, best_outer) = best.expect("at least one outer iteration");
    model.params = params;
    model.meta.mode = TrainMode::Kal;
    model.meta.refined = refined;
    model.meta.epochs = epochs;
    model.meta.emd_weight = train_cfg.emd_weight;
    model.meta.kal = Some(state.clone());
    Ok(KalLog { outer, best_outer, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::library::queue_constraints;

    fn state() -> KalState {
        let set = queue_constraints("qlen", "sent").unwrap();
        KalState::new(&set, 2, 1, 1e-3, 1.5)
    }

    #[test]
    fn update_rules() {
        let mut s = state();
        assert_eq!((s.eq_names.len(), s.ineq_names.len()), (2, 1));
        s.lambda_ineq[0][1][0] = 0.001;
        let r = Residuals {
            eq: vec![vec![vec![2.0], vec![0.0]], vec![vec![0.0], vec![-1.0]]],
            ineq: vec![vec![vec![3.0], vec![-10.0]]],
        };
        s.update_multipliers(&r, 0.5).unwrap();
        assert_eq!(s.mu, 1e-3 * 1.5);
        assert_eq!(s.lambda_eq[0][0][0], 0.004);
        assert_eq!(s.lambda_eq[1][1][0], -0.002);
        assert_eq!(s.lambda_ineq[0][0][0], 2.0 * 1e-3 * 3.0);
        assert_eq!(s.lambda_ineq[0][1][0], 0.0);
        assert_eq!((s.outer_iter, s.violation_history.clone()), (1, vec![0.5]));
    }

    #[test]
    fn mu_grows_geometrically() {
        let mut s = state();
        let r = Residuals { eq: vec![vec![vec![0.0]; 2]; 2], ineq: vec![vec![vec![0.0]; 2]] };
        for _ in 0..4 {
            s.update_multipliers(&r, 0.0).unwrap();
        }
        assert!((s.mu - 1e-3 * 1.5f64.powi(4)).abs() < 1e-18);
    }

    #[test]
    fn mismatched_residuals_rejected() {
        let mut s = state();
        assert!(s.update_multipliers(&Residuals::default(), 0.0).is_err());
    }
}
