//! Built-in constraints for queue, link-utilization and transport telemetry.
//!
//! | name | class       | statement (per coarse interval)                        |
//! |------|-------------|--------------------------------------------------------|
//! | C1   | measurement | `max(x) == m_max`                                      |
//! | C2   | measurement | `at(x, offset) == m_len`                               |
//! | C3   | operational | `count_pos(x) <= m_out` (work-conserving scheduler)    |
//! | C4   | measurement | `sum(x) == m_sum`                                      |
//! | C5   | operational | `sum(x) >= retransmit_sum`                             |
//! | C6   | operational | `sum(x) >= congestion_sum`                             |
//! | C7   | operational | `congestion_sum > 0 -> max(x) >= 0.5 * bandwidth`      |
//! | C8   | operational | `elapsed_time <= rtt -> sum(x) <= mss * snd_cwnd`      |
//! | C9   | operational | `elapsed_time <= rwnd_limited -> sum(x) == 0`          |
//!
//! The logical names on the right are bound to concrete measurement
//! (`m[...]`) or scalar (`s[...]`) references through [`Bindings`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Aggregate, CmpOp, Constraint, ConstraintClass, ConstraintSet, Expr, Guard, Relation};
use crate::{Error, Result};

pub const ALL: [&str; 9] = ["C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8", "C9"];

/// Logical names that refer to coarse measurements; the rest are scalars.
const MEASUREMENT_NAMES: [&str; 6] = ["m_max", "m_len", "m_out", "m_sum", "retransmit_sum", "congestion_sum"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryConfig {
    /// Logical name -> measurement or scalar name.
    pub bindings: BTreeMap<String, String>,
    /// Index of the periodic sample within each interval (C2).
    #[serde(default)]
    pub periodic_offset: usize,
    /// Fraction of the bandwidth that counts as a burst (C7).
    #[serde(default = "default_burst_fraction")]
    pub burst_fraction: f64,
}

fn default_burst_fraction() -> f64 {
    0.5
}

pub type Bindings = BTreeMap<String, String>;

impl LibraryConfig {
    pub fn new(bindings: Bindings) -> Self {
        Self { bindings, periodic_offset: 0, burst_fraction: default_burst_fraction() }
    }

    /// Bindings for the simulated queue: `qlen` target plus `sent` counters.
    pub fn queue(target: &str, sent: &str) -> Self {
        Self::new(BTreeMap::from([
            ("m_max".into(), format!("{target}.max")),
            ("m_len".into(), format!("{target}.periodic")),
            ("m_out".into(), format!("{sent}.sum")),
        ]))
    }

    /// Bindings for link-utilization telemetry.
    pub fn link(target: &str) -> Self {
        Self::new(BTreeMap::from([
            ("m_sum".into(), format!("{target}.sum")),
            ("retransmit_sum".into(), "retransmit.sum".into()),
            ("congestion_sum".into(), "congestion.sum".into()),
            ("bandwidth".into(), "bandwidth".into()),
        ]))
    }

    /// Bindings for per-connection transport statistics.
    pub fn transport() -> Self {
        Self::new(BTreeMap::from([
            ("elapsed_time".into(), "elapsed_time".into()),
            ("rtt".into(), "rtt".into()),
            ("mss".into(), "mss".into()),
            ("snd_cwnd".into(), "snd_cwnd".into()),
            ("rwnd_limited".into(), "rwnd_limited".into()),
        ]))
    }

    fn bind(&self, logical: &str) -> Result<Expr> {
        let target = self
            .bindings
            .get(logical)
            .ok_or_else(|| Error::UnboundMeasurement(logical.to_string()))?;
        Ok(if MEASUREMENT_NAMES.contains(&logical) {
            Expr::Measurement(target.clone())
        } else {
            Expr::Scalar(target.clone())
        })
    }
}

/// Build one named library constraint.
pub fn builtin(name: &str, cfg: &LibraryConfig) -> Result<Constraint> {
    use Aggregate::*;
    use ConstraintClass::{Measurement, Operational};
    let agg = Expr::agg;
    match name {
        "C1" => Constraint::new(name, Measurement, agg(Max), Relation::Eq, cfg.bind("m_max")?),
        "C2" => Constraint::new(name, Measurement, agg(At(cfg.periodic_offset)), Relation::Eq, cfg.bind("m_len")?),
        "C3" => Constraint::new(name, Operational, agg(CountPositive), Relation::Le, cfg.bind("m_out")?),
        "C4" => Constraint::new(name, Measurement, agg(Sum), Relation::Eq, cfg.bind("m_sum")?),
        "C5" => Constraint::new(name, Operational, agg(Sum), Relation::Ge, cfg.bind("retransmit_sum")?),
        "C6" => Constraint::new(name, Operational, agg(Sum), Relation::Ge, cfg.bind("congestion_sum")?),
        "C7" => Constraint::new(
            name,
            Operational,
            agg(Max),
            Relation::Ge,
            Expr::mul(Expr::c(cfg.burst_fraction), cfg.bind("bandwidth")?),
        )?
        .when(Guard::new(cfg.bind("congestion_sum")?, CmpOp::Gt, Expr::c(0.0))),
        "C8" => Constraint::new(
            name,
            Operational,
            agg(Sum),
            Relation::Le,
            Expr::mul(cfg.bind("mss")?, cfg.bind("snd_cwnd")?),
        )?
        .when(Guard::new(cfg.bind("elapsed_time")?, CmpOp::Le, cfg.bind("rtt")?)),
        "C9" => Constraint::new(name, Operational, agg(Sum), Relation::Eq, Expr::c(0.0))?
            .when(Guard::new(cfg.bind("elapsed_time")?, CmpOp::Le, cfg.bind("rwnd_limited")?)),
        other => Err(Error::Invalid(format!("no built-in constraint `{other}`"))),
    }
}

/// Build a set of library constraints in the given order.
pub fn builtin_library(names: &[&str], cfg: &LibraryConfig) -> Result<ConstraintSet> {
    ConstraintSet::new(names.iter().map(|n| builtin(n, cfg)).collect::<Result<_>>()?)
}

/// C1-C3 over the simulated queue.
pub fn queue_constraints(target: &str, sent: &str) -> Result<ConstraintSet> {
    builtin_library(&["C1", "C2", "C3"], &LibraryConfig::queue(target, sent))
}
