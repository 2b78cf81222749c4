//! Synthetic single-queue telemetry.
//!
//! Each millisecond a drop-tail queue with a fixed buffer receives Poisson
//! background traffic plus ON/OFF bursts and serves up to `service_rate`
//! packets. The emitted channels are the queue length at the start of the
//! step (`qlen`), packets sent (`sent`) and packets dropped (`drop`).

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::series::{make_windows, CoarsenerKind, CoarsenerSpec, EntrySpec, FineSeries, ValueDomain, WindowExample};
use crate::{Error, Result};

pub const QLEN: &str = "qlen";
pub const SENT: &str = "sent";
pub const DROP: &str = "drop";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstProcess {
    /// Extra arrival rate while a burst is on, packets/ms.
    pub rate: f64,
    /// Inclusive range of burst lengths, ms.
    pub duration_ms: (u32, u32),
    /// Inclusive range of quiet gaps between bursts, ms.
    pub gap_ms: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub name: String,
    pub duration_ms: usize,
    /// Packets served per ms.
    pub service_rate: u32,
    /// Buffer size in packets.
    pub capacity: u32,
    /// Background arrivals as a fraction of the service rate.
    pub background_load: f64,
    pub bursts: Option<BurstProcess>,
    #[serde(default)]
    pub seed: u64,
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("traffic config `{}`: {m}", self.name)));
        if !(0.0..=1.0).contains(&self.background_load) {
            return bad("background_load must lie in [0, 1]");
        }
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        if self.service_rate == 0 {
            return bad("service_rate must be positive");
        }
        if self.duration_ms == 0 {
            return bad("duration must be positive");
        }
        if let Some(b) = &self.bursts {
            if !(b.rate > self.service_rate as f64) {
                return bad("burst rate must exceed the service rate");
            }
            if b.duration_ms.0 == 0 || b.duration_ms.0 > b.duration_ms.1 || b.gap_ms.0 > b.gap_ms.1 {
                return bad("burst duration/gap ranges must be non-empty and durations >= 1");
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Microbursts over a lightly loaded queue: a few ms of incast that
    /// drains within a few more.
    pub fn bursty() -> Self {
        Self {
            name: "bursty".into(),
            duration_ms: 20_000,
            service_rate: 50,
            capacity: 400,
            background_load: 0.3,
            bursts: Some(BurstProcess { rate: 120.0, duration_ms: (1, 5), gap_ms: (20, 120) }),
            seed: 1,
        }
    }

    /// Longer, milder bursts on a busy queue.
    pub fn persistent() -> Self {
        Self {
            name: "persistent".into(),
            duration_ms: 20_000,
            service_rate: 50,
            capacity: 400,
            background_load: 0.7,
            bursts: Some(BurstProcess { rate: 55.0, duration_ms: (5, 20), gap_ms: (40, 160) }),
            seed: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Vec<TrafficConfig>> {
        match name {
            "bursty" => Ok(vec![Self::bursty()]),
            "persistent" => Ok(vec![Self::persistent()]),
            "mixed" => Ok(mixed_configs()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected bursty, persistent or mixed)"
            ))),
        }
    }
}

/// Load variations of both presets. The last one is held out for testing.
pub fn mixed_configs() -> Vec<TrafficConfig> {
    let mut out = Vec::new();
    for (i, load) in [0.2, 0.4].into_iter().enumerate() {
        let mut c = TrafficConfig::bursty();
        c.name = format!("bursty-{load}");
        c.background_load = load;
        c.seed = 10 + i as u64;
        out.push(c);
    }
    for (i, load) in [0.6, 0.75].into_iter().enumerate() {
        let mut c = TrafficConfig::persistent();
        c.name = format!("persistent-{load}");
        c.background_load = load;
        c.seed = 20 + i as u64;
        out.push(c);
    }
    let mut unseen = TrafficConfig::bursty();
    unseen.name = "bursty-unseen".into();
    unseen.background_load = 0.5;
    if let Some(b) = unseen.bursts.as_mut() {
        b.rate = 100.0;
        b.duration_ms = (2, 8);
    }
    unseen.seed = 30;
    out.push(unseen);
    out
}

/// A simulated trace: the fine channels and the true burst intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub channels: BTreeMap<String, FineSeries>,
    /// Burst ON intervals as half-open `[start, end)` ranges in ms.
    pub bursts: Vec<(usize, usize)>,
    /// Arrivals per ms.
    pub arrivals: Vec<f64>,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    // mean > 0 so construction cannot fail
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Run the queue model.
pub fn simulate(cfg: &TrafficConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.duration_ms;
    let mu = cfg.service_rate as u64;
    let cap = cfg.capacity as u64;

    // burst schedule first so it does not depend on arrival draws
    let mut bursts = Vec::new();
    if let Some(b) = &cfg.bursts {
        let mut t = rng.random_range(b.gap_ms.0..=b.gap_ms.1) as usize;
        while t < n {
            let d = rng.random_range(b.duration_ms.0..=b.duration_ms.1) as usize;
            bursts.push((t, (t + d).min(n)));
            t += d + rng.random_range(b.gap_ms.0..=b.gap_ms.1) as usize;
        }
    }
    let mut on = vec![false; n];
    for &(s, e) in &bursts {
        on[s..e].iter_mut().for_each(|v| *v = true);
    }

    let bg_mean = cfg.background_load * cfg.service_rate as f64;
    let burst_rate = cfg.bursts.as_ref().map_or(0.0, |b| b.rate);
    let (mut qlen, mut sent, mut drop, mut arrivals) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut q: u64 = 0;
    for &burst_on in &on {
        let mut a = poisson(&mut rng, bg_mean);
        if burst_on {
            a += poisson(&mut rng, burst_rate);
        }
        let backlog = q + a;
        // work-conserving: serve whatever is present up to the rate
        let s = backlog.min(mu);
        let d = (backlog - s).saturating_sub(cap);
        qlen.push(q as f64);
        sent.push(s as f64);
        drop.push(d as f64);
        arrivals.push(a as f64);
        q = backlog - s - d;
    }

    let mk = |name: &str, v| FineSeries::new(name, v, 1.0, ValueDomain::NonnegInt);
    let channels = BTreeMap::from([
        (QLEN.to_string(), mk(QLEN, qlen)?),
        (SENT.to_string(), mk(SENT, sent)?),
        (DROP.to_string(), mk(DROP, drop)?),
    ]);
    Ok(Trace { channels, bursts, arrivals })
}

/// Link-level channels derived from a queue trace: utilization in bytes/ms,
/// retransmitted bytes (last step's drops resent) and bytes sent while the
/// link was saturated with a backlog.
pub fn derive_link_channels(trace: &Trace, cfg: &TrafficConfig, packet_bytes: f64) -> Result<BTreeMap<String, FineSeries>> {
    let q = &trace.channels[QLEN].values;
    let sent = &trace.channels[SENT].values;
    let drop = &trace.channels[DROP].values;
    let mu = cfg.service_rate as f64;
    let util: Vec<f64> = sent.iter().map(|s| s * packet_bytes).collect();
    let retransmit: Vec<f64> = (0..sent.len())
        .map(|t| if t == 0 { 0.0 } else { drop[t - 1].min(sent[t]) * packet_bytes })
        .collect();
    let congestion: Vec<f64> = (0..sent.len())
        .map(|t| if q[t] > 0.0 && sent[t] >= mu { util[t] } else { 0.0 })
        .collect();
    let mk = |name: &str, v| FineSeries::new(name, v, 1.0, ValueDomain::NonnegReal);
    Ok(BTreeMap::from([
        ("util".to_string(), mk("util", util)?),
        ("retransmit".to_string(), mk("retransmit", retransmit)?),
        ("congestion".to_string(), mk("congestion", congestion)?),
    ]))
}

/// The monitoring setup for the queue: max, periodic sample, sent and drop counters.
pub fn queue_entries(zoom: usize, periodic_offset: usize) -> Result<Vec<EntrySpec>> {
    Ok(vec![
        EntrySpec::new(QLEN, CoarsenerSpec::new(CoarsenerKind::Max, zoom)?),
        EntrySpec::new(QLEN, CoarsenerSpec::periodic(zoom, periodic_offset)?),
        EntrySpec::new(SENT, CoarsenerSpec::new(CoarsenerKind::Sum, zoom)?),
        EntrySpec::new(DROP, CoarsenerSpec::new(CoarsenerKind::Sum, zoom)?),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub zoom: usize,
    pub context_len: usize,
    /// Defaults to non-overlapping windows.
    #[serde(default)]
    pub stride: Option<usize>,
    pub traces_per_config: usize,
    pub periodic_offset: usize,
    pub seed: u64,
}

impl DatasetPlan {
    pub fn new(zoom: usize, context_len: usize, seed: u64) -> Self {
        Self { zoom, context_len, stride: None, traces_per_config: 8, periodic_offset: 0, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub target: String,
    pub domain: ValueDomain,
    pub zoom: usize,
    pub context_len: usize,
    pub layout: Vec<String>,
    pub train: Vec<WindowExample>,
    pub val: Vec<WindowExample>,
    pub test: Vec<WindowExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic per-trace seed from the master seed and trace index.
pub fn trace_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
    Test,
}

/// Simulate every config, window the traces and split them by trace.
///
/// With two or more configs the last one is held out: all its traces go to
/// the test split. The remaining traces are split 80/10/10.
pub fn build_dataset(cfgs: &[TrafficConfig], plan: &DatasetPlan) -> Result<Dataset> {
    if cfgs.is_empty() {
        return Err(Error::Config("at least one traffic config is required".into()));
    }
    if plan.traces_per_config == 0 {
        return Err(Error::Config("traces_per_config must be positive".into()));
    }
    let entries = queue_entries(plan.zoom, plan.periodic_offset)?;
    let span = plan.zoom * plan.context_len;
    let stride = plan.stride.unwrap_or(span);

    let jobs: Vec<(usize, usize)> = (0..cfgs.len())
        .flat_map(|c| (0..plan.traces_per_config).map(move |r| (c, r)))
        .collect();
    let traces: Vec<Vec<WindowExample>> = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(c, r))| {
            let cfg = cfgs[c].clone().with_seed(trace_seed(plan.seed, idx as u64));
            let trace = simulate(&cfg)?;
            let len = cfg.duration_ms;
            if len % plan.zoom != 0 {
                warn!(
                    "trace {}#{r}: {} trailing steps do not fill a coarse interval and are dropped",
                    cfg.name,
                    len % plan.zoom
                );
            }
            let mut windows = make_windows(&trace.channels, &entries, QLEN, plan.context_len, stride)?;
            for w in &mut windows {
                w.source = format!("{}#{r}", cfg.name);
            }
            Ok(windows)
        })
        .collect::<Result<_>>()?;

    let held_out = if cfgs.len() >= 2 { Some(cfgs.len() - 1) } else { None };
    let mut pool: Vec<usize> = (0..jobs.len()).filter(|&i| Some(jobs[i].0) != held_out).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    // Fisher-Yates so the assignment is independent of config order
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let mut assignment = vec![Split::Test; jobs.len()];
    let n = pool.len();
    let (n_val, n_test) = if n >= 3 {
        let v = ((n as f64) * 0.1).round().max(1.0) as usize;
        let t = if held_out.is_some() { ((n as f64) * 0.1).round() as usize } else { v };
        (v, t.max(if held_out.is_some() { 0 } else { 1 }))
    } else {
        (0, 0)
    };
    for (k, &i) in pool.iter().enumerate() {
        assignment[i] = if k < n - n_val - n_test {
            Split::Train
        } else if k < n - n_test {
            Split::Val
        } else {
            Split::Test
        };
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, windows) in traces.into_iter().enumerate() {
        match assignment[i] {
            Split::Train => train.extend(windows),
            Split::Val => val.extend(windows),
            Split::Test => test.extend(windows),
        }
    }
    for split in [&mut train, &mut val, &mut test] {
        for (id, w) in split.iter_mut().enumerate() {
            w.id = id;
        }
    }
    Ok(Dataset {
        target: QLEN.to_string(),
        domain: ValueDomain::NonnegInt,
        zoom: plan.zoom,
        context_len: plan.context_len,
        layout: entries.iter().map(EntrySpec::name).collect(),
        train,
        val,
        test,
    })
}

/// Column layout of an external fine-grained CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub granularity_ms: f64,
    pub channels: Vec<CsvChannel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvChannel {
    pub name: String,
    pub column: String,
    pub domain: ValueDomain,
}

impl CsvSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Read external fine-grained telemetry (e.g. per-ms link utilization).
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<BTreeMap<String, FineSeries>> {
    crate::io::read_fine_csv(path, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::coarsen;

    #[test]
    fn silent_queue_stays_empty() {
        let cfg = TrafficConfig {
            name: "idle".into(),
            duration_ms: 500,
            service_rate: 10,
            capacity: 50,
            background_load: 0.0,
            bursts: None,
            seed: 3,
        };
        let t = simulate(&cfg).unwrap();
        for ch in [QLEN, SENT, DROP] {
            assert!(t.channels[ch].values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn overload_fills_buffer_and_drops() {
        let cfg = TrafficConfig {
            name: "overload".into(),
            duration_ms: 2_000,
            service_rate: 10,
            capacity: 50,
            background_load: 0.0,
            bursts: Some(BurstProcess { rate: 20.0, duration_ms: (5_000, 5_000), gap_ms: (0, 0) }),
            seed: 4,
        };
        let t = simulate(&cfg).unwrap();
        let q = &t.channels[QLEN].values;
        assert!(q.iter().any(|&v| v == 50.0));
        assert!(q.iter().all(|&v| v <= 50.0));
        assert!(t.channels[DROP].values.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn conservation_and_work_conservation_hold() {
        let mut cfg = TrafficConfig::bursty();
        cfg.duration_ms = 100_000;
        cfg.seed = 99;
        let t = simulate(&cfg).unwrap();
        let q = &t.channels[QLEN].values;
        let s = &t.channels[SENT].values;
        let d = &t.channels[DROP].values;
        for i in 0..q.len() - 1 {
            assert_eq!(q[i + 1] - q[i], t.arrivals[i] - s[i] - d[i], "step {i}");
            if q[i] + t.arrivals[i] >= 1.0 {
                assert!(s[i] >= 1.0);
            }
        }
        // NE <= packets sent, per coarse interval
        let cnt = CoarsenerSpec::new(CoarsenerKind::CountPositive, 50).unwrap();
        let sum = CoarsenerSpec::new(CoarsenerKind::Sum, 50).unwrap();
        let ne = coarsen(&t.channels[QLEN], &cnt).unwrap();
        let out = coarsen(&t.channels[SENT], &sum).unwrap();
        assert!(ne.iter().zip(&out).all(|(a, b)| a <= b));
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = TrafficConfig::persistent();
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let other = simulate(&cfg.clone().with_seed(77)).unwrap();
        assert_ne!(simulate(&cfg).unwrap().channels[QLEN], other.channels[QLEN]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrafficConfig::bursty();
        c.background_load = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrafficConfig::bursty();
        c.bursts.as_mut().unwrap().rate = 5.0;
        assert!(c.validate().is_err());
        assert!(TrafficConfig::preset("nope").is_err());
    }

    #[test]
    fn empty_config_list_rejected() {
        assert!(build_dataset(&[], &DatasetPlan::new(50, 5, 1)).is_err());
    }

    #[test]
    fn splits_disjoint_and_holdout_in_test() {
        let mut cfgs = mixed_configs();
        for c in &mut cfgs {
            c.duration_ms = 2_500;
        }
        let mut plan = DatasetPlan::new(50, 5, 5);
        plan.traces_per_config = 3;
        let ds = build_dataset(&cfgs, &plan).unwrap();
        let sources = |s: &[WindowExample]| s.iter().map(|w| w.source.clone()).collect::<std::collections::BTreeSet<_>>();
        let (tr, va, te) = (sources(&ds.train), sources(&ds.val), sources(&ds.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert!(te.iter().any(|s| s.starts_with("bursty-unseen")));
        assert!(!tr.iter().any(|s| s.starts_with("bursty-unseen")));
        assert_eq!(ds.len(), cfgs.len() * 3 * 10);
    }

    #[test]
    fn link_channels_satisfy_meta_constraints() {
        use crate::constraints::library::{builtin_library, LibraryConfig};
        use crate::constraints::{eval_exact, EvalContext};
        use crate::series::make_windows;
        let cfg = TrafficConfig::persistent();
        let trace = simulate(&cfg).unwrap();
        let link = derive_link_channels(&trace, &cfg, 1500.0).unwrap();
        let sum = |ch: &str| EntrySpec::new(ch, CoarsenerSpec::new(CoarsenerKind::Sum, 50).unwrap());
        let entries = vec![sum("util"), sum("retransmit"), sum("congestion")];
        let windows = make_windows(&link, &entries, "util", 5, 250).unwrap();
        let set = builtin_library(&["C4", "C5", "C6", "C7"], &LibraryConfig::link("util")).unwrap();
        let scalars = BTreeMap::from([("bandwidth".to_string(), cfg.service_rate as f64 * 1500.0)]);
        let mut congested = 0;
        for w in &windows {
            let ctx = EvalContext::new(&w.input, &scalars, ValueDomain::NonnegReal);
            congested += w.input.entry("congestion.sum").unwrap().values.iter().filter(|v| **v > 0.0).count();
            for c in &set {
                for r in eval_exact(c, &w.target.values, &ctx).unwrap() {
                    match c.form() {
                        crate::constraints::Form::Equality => assert_eq!(r, 0.0),
                        crate::constraints::Form::Inequality => assert!(r <= 0.0),
                    }
                }
            }
        }
        assert!(congested > 0);
    }
}
