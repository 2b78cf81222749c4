//! Target refinement for coarse-grained collisions.
//!
//! Two training examples collide when their targets are far apart while a
//! basic model (trained on `l_combine` alone) produces nearly the same output
//! for both: the coarse input cannot tell them apart. Colliding examples are
//! grouped by transitive closure, and each member is then trained against the
//! nearest target of its class instead of its own.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{l_combine, Model};
use crate::series::{CoarseBundle, FineSeries, WindowExample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Targets further apart than this (RMSE, in target std units) are "far".
    pub theta_far: f64,
    /// Basic outputs closer than this (RMSE, in target std units) are "close".
    pub theta_close: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { theta_far: 0.5, theta_close: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceClass {
    /// Sorted training-split ids.
    pub members: Vec<usize>,
    pub representative_input: CoarseBundle,
    pub targets: Vec<FineSeries>,
}

/// Whether the RMSE between `a` and `b` is strictly below `limit`.
fn rmse_below(a: &[f64], b: &[f64], limit: f64) -> bool {
    let budget = limit * limit * a.len() as f64;
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
        if s >= budget {
            return false;
        }
    }
    true
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

fn target_std(windows: &[WindowExample]) -> f64 {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in windows.iter().flat_map(|w| w.target.values.iter()) {
        n += 1.0;
        s += v;
        s2 += v * v;
    }
    if n == 0.0 {
        return 0.0;
    }
    let m = s / n;
    (s2 / n - m * m).max(0.0).sqrt()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // the smaller root wins so the result does not depend on pair order
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Connected components (size >= 2) of the pair relation, sorted.
fn closure(n: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind((0..n).collect());
    for &(a, b) in pairs {
        uf.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().filter(|g| g.len() >= 2).collect()
}

/// Pairs `(i, j)`, `i < j`, whose targets are far while `outputs` are close.
pub fn colliding_pairs(targets: &[&[f64]], outputs: &[Vec<f64>], sigma: f64, cfg: &RefineConfig) -> Vec<(usize, usize)> {
    let (far, close) = (cfg.theta_far * sigma, cfg.theta_close * sigma);
    (0..targets.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..targets.len())
                .filter(move |&j| rmse_below(&outputs[i], &outputs[j], close) && rmse(targets[i], targets[j]) > far)
                .map(move |j| (i, j))
        })
        .collect()
}

fn classes_from_groups(train: &[WindowExample], groups: Vec<Vec<usize>>) -> Vec<EquivalenceClass> {
    groups
        .into_iter()
        .map(|members| EquivalenceClass {
            representative_input: train[members[0]].input.clone(),
            targets: members.iter().map(|&i| train[i].target.clone()).collect(),
            members,
        })
        .collect()
}

/// Group colliding training examples. `basic` must be a trained model.
pub fn equivalence_test(train: &[WindowExample], basic: &Model, cfg: &RefineConfig) -> Result<Vec<EquivalenceClass>> {
    if !basic.meta.trained() {
        return Err(Error::Checkpoint("the basic model for the equivalence test has not been trained".into()));
    }
    if !(cfg.theta_far > 0.0) || !(cfg.theta_close > 0.0) {
        return Err(Error::Config("refinement thresholds must be positive".into()));
    }
    let outputs: Vec<Vec<f64>> = basic.predict(train)?.into_iter().map(|s| s.values).collect();
    let targets: Vec<&[f64]> = train.iter().map(|w| w.target.values.as_slice()).collect();
    let sigma = target_std(train);
    let pairs = colliding_pairs(&targets, &outputs, sigma, cfg);
    Ok(classes_from_groups(train, closure(train.len(), &pairs)))
}

/// `l_combine` against the nearest target of the class.
pub fn l_class(out: &[f64], cls: &EquivalenceClass, emd_weight: f64) -> Result<f64> {
    let mut best: Option<f64> = None;
    for t in &cls.targets {
        let l = l_combine(out, &t.values, emd_weight)?;
        best = Some(best.map_or(l, |b| b.min(l)));
    }
    best.ok_or_else(|| Error::Invalid("empty equivalence class".into()))
}

/// Training targets after refinement: one target set per example.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedTargets {
    pub sets: Vec<Vec<Vec<f64>>>,
    /// Class index per example, `None` for untouched examples.
    pub class_of: Vec<Option<usize>>,
    pub classes: Vec<Vec<usize>>,
}

impl RefinedTargets {
    pub fn refined_count(&self) -> usize {
        self.class_of.iter().filter(|c| c.is_some()).count()
    }
}

/// Replace every class member's target by the class target set. Overlapping
/// classes are merged first.
pub fn refine_dataset(train: &[WindowExample], classes: &[Vec<usize>]) -> Result<RefinedTargets> {
    let n = train.len();
    let mut pairs = Vec::new();
    for c in classes {
        if let Some(&bad) = c.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!("class member {bad} outside the training set of {n}")));
        }
        pairs.extend(c.windows(2).map(|w| (w[0], w[1])));
    }
    let merged = closure(n, &pairs);
    let mut sets: Vec<Vec<Vec<f64>>> = train.iter().map(|w| vec![w.target.values.clone()]).collect();
    let mut class_of = vec![None; n];
    for (k, members) in merged.iter().enumerate() {
        let targets: Vec<Vec<f64>> = members.iter().map(|&i| train[i].target.values.clone()).collect();
        for &i in members {
            sets[i] = targets.clone();
            class_of[i] = Some(k);
        }
    }
    Ok(RefinedTargets { sets, class_of, classes: merged })
}

/// Sidecar file listing the classes by training-split id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFile {
    pub theta_far: f64,
    pub theta_close: f64,
    pub train_size: usize,
    pub classes: Vec<Vec<usize>>,
}

impl ClassFile {
    pub fn new(cfg: &RefineConfig, train_size: usize, classes: &[EquivalenceClass]) -> Self {
        Self {
            theta_far: cfg.theta_far,
            theta_close: cfg.theta_close,
            train_size,
            classes: classes.iter().map(|c| c.members.clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        crate::io::write_atomic(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{l_combine, ModelConfig, TrainMode};
    use crate::series::{CoarseEntry, CoarsenerKind, CoarsenerSpec, ValueDomain};

    fn example(id: usize, burst_at: usize) -> WindowExample {
        let mut v = vec![0.0; 10];
        v[burst_at] = 8.0;
        v[burst_at + 1] = 8.0;
        let e = CoarseEntry { channel: "q".into(), spec: CoarsenerSpec::new(CoarsenerKind::Max, 10).unwrap(), values: vec![8.0] };
        WindowExample {
            id,
            source: "t".into(),
            start: 0,
            input: CoarseBundle::new(vec![e], 1, 10).unwrap(),
            target: FineSeries::new("q", v, 1.0, ValueDomain::NonnegInt).unwrap(),
            scalars: Default::default(),
        }
    }

    fn trained(train: &[WindowExample]) -> Model {
        let mut m = Model::new(ModelConfig::small(0), train).unwrap();
        m.meta.mode = TrainMode::Plain;
        m
    }

    #[test]
    fn untrained_model_rejected() {
        let train = vec![example(0, 1), example(1, 6)];
        let m = Model::new(ModelConfig::small(0), &train).unwrap();
        assert!(matches!(equivalence_test(&train, &m, &RefineConfig::default()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn duplicates_do_not_collide_but_shifts_do() {
        let dup = vec![example(0, 3), example(1, 3)];
        assert!(equivalence_test(&dup, &trained(&dup), &RefineConfig::default()).unwrap().is_empty());
        let shifted = vec![example(0, 1), example(1, 6), example(2, 3)];
        let classes = equivalence_test(&shifted, &trained(&shifted), &RefineConfig::default()).unwrap();
        assert_eq!(classes.len(), 1);
        assert_eq!(classes[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn closure_is_order_independent() {
        let a = closure(6, &[(4, 5), (0, 4), (2, 3)]);
        let b = closure(6, &[(2, 3), (0, 4), (5, 4)]);
        assert_eq!(a, b);
        assert_eq!(a, vec![vec![0, 4, 5], vec![2, 3]]);
    }

    #[test]
    fn class_loss_properties() {
        let train = vec![example(0, 1), example(1, 6)];
        let cls = classes_from_groups(&train, vec![vec![0, 1]]).remove(0);
        let a = train[0].target.values.clone();
        assert_eq!(l_class(&a, &cls, 1.0).unwrap(), 0.0);
        let single = classes_from_groups(&train, vec![vec![1]]).remove(0);
        assert_eq!(l_class(&a, &single, 1.0).unwrap(), l_combine(&a, &train[1].target.values, 1.0).unwrap());
    }

    #[test]
    fn refine_merges_overlaps_and_keeps_size() {
        let train: Vec<WindowExample> = (0..5).map(|i| example(i, i)).collect();
        let r = refine_dataset(&train, &[vec![0, 1], vec![1, 2]]).unwrap();
        assert_eq!(r.sets.len(), 5);
        assert_eq!(r.classes, vec![vec![0, 1, 2]]);
        assert_eq!(r.sets[2].len(), 3);
        assert_eq!(r.sets[4], vec![train[4].target.values.clone()]);
        assert_eq!(refine_dataset(&train, &[]).unwrap().refined_count(), 0);
    }
}
