//! Imputation metrics, burst analysis, baselines and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{emd, fit_plain, mse, Model, ModelConfig, TrainConfig, TrainLog};
use crate::series::{CoarseBundle, CoarsenerKind, FineSeries, ValueDomain, WindowExample};
use crate::{Error, Result};

pub const DEFAULT_BURST_FRACTION: f64 = 0.5;

/// A maximal run of values at or above the detection threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstRecord {
    pub start: usize,
    pub duration: usize,
    pub height: f64,
    pub volume: f64,
}

/// Bursts of `x` at `frac` of its maximum, ordered by start.
pub fn detect_bursts(x: &[f64], frac: f64) -> Result<Vec<BurstRecord>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Invalid(format!("burst threshold fraction {frac} is outside (0, 1)")));
    }
    let peak = x.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let thr = frac * peak;
    let mut out = Vec::new();
    let mut t = 0;
    while t < x.len() {
        if x[t] < thr {
            t += 1;
            continue;
        }
        let start = t;
        while t < x.len() && x[t] >= thr {
            t += 1;
        }
        let run = &x[start..t];
        out.push(BurstRecord {
            start,
            duration: t - start,
            height: run.iter().copied().fold(0.0, f64::max),
            volume: run.iter().sum(),
        });
    }
    Ok(out)
}

pub const BURST_PROPERTIES: [&str; 6] = ["position", "height", "frequency", "inter_arrival", "duration", "volume"];

/// Per-window burst summary. Means over the window's bursts; all zero when
/// there are none. `inter_arrival` is `None` with fewer than two bursts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstProperties {
    pub position: f64,
    pub height: f64,
    pub frequency: f64,
    pub inter_arrival: Option<f64>,
    pub duration: f64,
    pub volume: f64,
}

impl BurstProperties {
    pub fn of(bursts: &[BurstRecord]) -> Self {
        let n = bursts.len() as f64;
        let mean = |f: &dyn Fn(&BurstRecord) -> f64| if bursts.is_empty() { 0.0 } else { bursts.iter().map(f).sum::<f64>() / n };
        let inter_arrival = (bursts.len() >= 2).then(|| {
            let gaps: Vec<f64> = bursts.windows(2).map(|w| (w[1].start - w[0].start) as f64).collect();
            gaps.iter().sum::<f64>() / gaps.len() as f64
        });
        Self {
            position: mean(&|b| b.start as f64),
            height: mean(&|b| b.height),
            frequency: n,
            inter_arrival,
            duration: mean(&|b| b.duration as f64),
            volume: mean(&|b| b.volume),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "position" => Some(self.position),
            "height" => Some(self.height),
            "frequency" => Some(self.frequency),
            "inter_arrival" => self.inter_arrival,
            "duration" => Some(self.duration),
            "volume" => Some(self.volume),
            _ => None,
        }
    }
}

/// `|t - t_real| / t_real`, or the absolute error flagged when `t_real = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelError {
    pub value: f64,
    /// True when `t_real` was zero and `value` is an absolute error.
    pub absolute: bool,
}

pub fn relative_error(t: f64, t_real: f64) -> RelError {
    if t_real == 0.0 {
        RelError { value: t.abs(), absolute: true }
    } else {
        RelError { value: (t - t_real).abs() / t_real.abs(), absolute: false }
    }
}

/// Lag-1 autocorrelation coefficient; 0 for a constant series.
pub fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    if var == 0.0 || x.len() < 2 {
        return 0.0;
    }
    x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / var
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = q * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationMetrics {
    pub mse: f64,
    pub emd: f64,
    pub autocorr_err: RelError,
    pub p99_err: RelError,
}

pub fn imputation_metrics(imputed: &[f64], truth: &[f64]) -> Result<ImputationMetrics> {
    Ok(ImputationMetrics {
        mse: mse(imputed, truth)?,
        emd: emd(imputed, truth)?,
        autocorr_err: relative_error(lag1_autocorrelation(imputed), lag1_autocorrelation(truth)),
        p99_err: relative_error(percentile(imputed, 0.99), percentile(truth, 0.99)),
    })
}

/// Metric columns of a report, in order.
pub fn metric_names() -> Vec<String> {
    let mut v: Vec<String> = ["mse", "emd", "autocorr", "p99"].map(String::from).to_vec();
    v.extend(BURST_PROPERTIES.iter().map(|p| format!("burst_{p}")));
    v
}

/// One method's errors averaged over windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// Mean error per metric over windows with a nonzero reference value.
    /// NaN when no window qualifies.
    pub errors: BTreeMap<String, f64>,
    /// Windows whose reference value was zero, per metric.
    pub flagged: BTreeMap<String, usize>,
    /// Mean absolute error over the flagged windows.
    pub flagged_abs: BTreeMap<String, f64>,
    pub windows: usize,
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
    abs_sum: f64,
    abs_n: usize,
}

impl Acc {
    fn push(&mut self, e: RelError) {
        if e.absolute {
            self.abs_sum += e.value;
            self.abs_n += 1;
        } else {
            self.sum += e.value;
            self.n += 1;
        }
    }
}

fn window_errors(imputed: &[f64], truth: &[f64], frac: f64) -> Result<Vec<(String, Option<RelError>)>> {
    let m = imputation_metrics(imputed, truth)?;
    let plain = |v| Some(RelError { value: v, absolute: false });
    let mut out = vec![
        ("mse".to_string(), plain(m.mse)),
        ("emd".to_string(), plain(m.emd)),
        ("autocorr".to_string(), Some(m.autocorr_err)),
        ("p99".to_string(), Some(m.p99_err)),
    ];
    let truth_bursts = detect_bursts(truth, frac)?;
    let (bt, bi) = (BurstProperties::of(&truth_bursts), BurstProperties::of(&detect_bursts(imputed, frac)?));
    for p in BURST_PROPERTIES {
        // burst properties only exist where the truth has bursts
        let e = match (truth_bursts.is_empty(), bt.get(p)) {
            (false, Some(real)) => Some(relative_error(bi.get(p).unwrap_or(0.0), real)),
            _ => None,
        };
        out.push((format!("burst_{p}"), e));
    }
    Ok(out)
}

/// Score one method's imputations against the truth, window by window.
pub fn evaluate_method(method: &str, imputed: &[FineSeries], truth: &[FineSeries], frac: f64) -> Result<MethodReport> {
    if imputed.len() != truth.len() {
        return Err(Error::Shape(format!("{method}: {} imputed windows for {} truth windows", imputed.len(), truth.len())));
    }
    if let Some(i) = (0..truth.len()).find(|&i| imputed[i].values.len() != truth[i].values.len()) {
        return Err(Error::Shape(format!(
            "{method}: window {i} has {} imputed values for {} truth values",
            imputed[i].values.len(),
            truth[i].values.len()
        )));
    }
    let per_window: Vec<Vec<(String, Option<RelError>)>> = imputed
        .par_iter()
        .zip(truth)
        .map(|(a, b)| window_errors(&a.values, &b.values, frac))
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<String, Acc> = metric_names().into_iter().map(|n| (n, Acc::default())).collect();
    for w in per_window {
        for (name, e) in w {
            if let Some(e) = e {
                acc.get_mut(&name).expect("known metric").push(e);
            }
        }
    }
    let mut report = MethodReport {
        method: method.to_string(),
        errors: BTreeMap::new(),
        flagged: BTreeMap::new(),
        flagged_abs: BTreeMap::new(),
        windows: truth.len(),
    };
    for (name, a) in acc {
        report.errors.insert(name.clone(), if a.n == 0 { f64::NAN } else { a.sum / a.n as f64 });
        if a.abs_n > 0 {
            report.flagged.insert(name.clone(), a.abs_n);
            report.flagged_abs.insert(name, a.abs_sum / a.abs_n as f64);
        }
    }
    Ok(report)
}

/// Affine min-max map of one metric's errors onto `[0.1, 0.9]`. All-equal
/// inputs map to 0.5. NaN entries stay NaN and do not affect the range.
pub fn normalize_errors(errors: &[f64]) -> Vec<f64> {
    let finite = errors.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    errors
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                f64::NAN
            } else if hi == lo {
                0.5
            } else {
                (0.1 + 0.8 * (v - lo) / (hi - lo)).clamp(0.1, 0.9)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<String>,
    pub methods: Vec<MethodReport>,
    /// Per metric, normalized errors in method order. Empty with one method.
    pub normalized: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvalReport {
    pub fn new(methods: Vec<MethodReport>) -> Self {
        let metrics = metric_names();
        let mut normalized = BTreeMap::new();
        let mut note = None;
        if methods.len() >= 2 {
            for m in &metrics {
                let col: Vec<f64> = methods.iter().map(|r| r.errors[m]).collect();
                normalized.insert(m.clone(), normalize_errors(&col));
            }
        } else {
            note = Some("normalization needs at least two methods; raw errors only".to_string());
        }
        Self { metrics, methods, normalized, note }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    fn table(&self, value: impl Fn(usize, &str) -> f64) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header)?;
        for (i, m) in self.methods.iter().enumerate() {
            let mut rec = vec![m.method.clone()];
            rec.extend(self.metrics.iter().map(|k| format!("{:.6}", value(i, k))));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Raw errors, one row per method.
    pub fn raw_csv(&self) -> Result<String> {
        self.table(|i, k| self.methods[i].errors[k])
    }

    /// Normalized errors, or `None` with fewer than two methods.
    pub fn normalized_csv(&self) -> Result<Option<String>> {
        if self.normalized.is_empty() {
            return Ok(None);
        }
        self.table(|i, k| self.normalized[k][i]).map(Some)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Grouped bar chart of the normalized table (raw errors with one method).
    pub fn bars_svg(&self) -> String {
        let values = |i: usize, k: &str| {
            if self.normalized.is_empty() {
                self.methods[i].errors[k]
            } else {
                self.normalized[k][i]
            }
        };
        let vmax = self
            .metrics
            .iter()
            .flat_map(|k| (0..self.methods.len()).map(move |i| (i, k)))
            .map(|(i, k)| values(i, k))
            .filter(|v| v.is_finite())
            .fold(1e-12, f64::max);
        let (group_w, bar_w, h) = (24.0 + 14.0 * self.methods.len() as f64, 12.0, 200.0);
        let width = 60.0 + group_w * self.metrics.len() as f64;
        let mut s = svg_open(width, h + 80.0);
        for (g, k) in self.metrics.iter().enumerate() {
            let x0 = 50.0 + g as f64 * group_w;
            for i in 0..self.methods.len() {
                let v = values(i, k);
                let bh = if v.is_finite() { h * v / vmax } else { 0.0 };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{bh:.1}" fill="{}"/>"#,
                    x0 + i as f64 * 14.0,
                    20.0 + h - bh,
                    COLORS[i % COLORS.len()]
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{x0:.1}" y="{:.1}" font-size="9" transform="rotate(30 {x0:.1} {:.1})">{k}</text>"#,
                h + 34.0,
                h + 34.0
            );
        }
        legend(&mut s, self.methods.iter().map(|m| m.method.as_str()), width - 120.0);
        s.push_str("</svg>\n");
        s
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn legend<'a>(s: &mut String, names: impl Iterator<Item = &'a str>, x: f64) {
    for (i, n) in names.enumerate() {
        let y = 14.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-size="11">{n}</text>"#, x + 14.0);
    }
}

/// Line plot of one window: the truth (black) and each method's imputation.
pub fn overlay_svg(truth: &[f64], methods: &[(&str, &[f64])]) -> String {
    let (w, h) = (640.0, 240.0);
    let vmax = methods
        .iter()
        .flat_map(|(_, v)| v.iter())
        .chain(truth)
        .copied()
        .fold(1e-12, f64::max);
    let n = truth.len().max(2) as f64 - 1.0;
    let path = |v: &[f64]| -> String {
        v.iter()
            .enumerate()
            .map(|(t, y)| format!("{:.1},{:.1}", 40.0 + (w - 60.0) * t as f64 / n, 20.0 + (h - 40.0) * (1.0 - y / vmax)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = svg_open(w, h);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="1.5" points="{}"/>"#, path(truth));
    for (i, (_, v)) in methods.iter().enumerate() {
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" points="{}"/>"#, COLORS[i % COLORS.len()], path(v));
    }
    legend(&mut s, methods.iter().map(|(m, _)| *m), w - 140.0);
    s.push_str("</svg>\n");
    s
}

/// Nearest neighbors in standardized, flattened coarse-input space.
#[derive(Debug, Clone)]
pub struct KnnBaseline {
    mean: Vec<f64>,
    std: Vec<f64>,
    features: Vec<Vec<f64>>,
    targets: Vec<FineSeries>,
}

fn flatten(b: &CoarseBundle) -> Vec<f64> {
    b.entries.iter().flat_map(|e| e.values.iter().copied()).collect()
}

impl KnnBaseline {
    pub fn fit(train: &[WindowExample]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::Invalid("k-NN needs a non-empty training set".into()))?;
        let raw: Vec<Vec<f64>> = train.iter().map(|w| flatten(&w.input)).collect();
        let d = raw[0].len();
        if let Some(w) = train.iter().find(|w| w.input.layout() != first.input.layout()) {
            return Err(Error::Shape(format!("training window {} has a different input layout", w.id)));
        }
        let n = raw.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| raw.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|k| {
                let s = (raw.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        let features = raw.iter().map(|r| standardize(r, &mean, &std)).collect();
        Ok(Self { mean, std, features, targets: train.iter().map(|w| w.target.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Pointwise mean of the `k` nearest training targets; ties go to the
    /// earlier training example.
    pub fn predict(&self, query: &CoarseBundle, k: usize) -> Result<FineSeries> {
        if k == 0 || k > self.len() {
            return Err(Error::Invalid(format!("k = {k} must be in 1..={}", self.len())));
        }
        let q = flatten(query);
        if q.len() != self.mean.len() {
            return Err(Error::Shape(format!("query has {} coarse values, training inputs {}", q.len(), self.mean.len())));
        }
        let q = standardize(&q, &self.mean, &self.std);
        let mut dist: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let len = self.targets[0].values.len();
        let mut out = vec![0.0; len];
        for &(_, i) in &dist[..k] {
            for (o, v) in out.iter_mut().zip(&self.targets[i].values) {
                *o += v / k as f64;
            }
        }
        let t = &self.targets[0];
        FineSeries::relaxed(t.channel.clone(), out, t.granularity_ms, t.domain)
    }

    pub fn predict_all(&self, windows: &[WindowExample], k: usize) -> Result<Vec<FineSeries>> {
        windows.par_iter().map(|w| self.predict(&w.input, k)).collect()
    }

    /// The `k` from `grid` with the lowest mean validation MSE (smaller `k`
    /// on ties). Values above the training size are skipped.
    pub fn select_k(&self, val: &[WindowExample], grid: &[usize]) -> Result<usize> {
        let mut best: Option<(f64, usize)> = None;
        for &k in grid.iter().filter(|&&k| k >= 1 && k <= self.len()) {
            let preds = self.predict_all(val, k)?;
            let mut total = 0.0;
            for (p, w) in preds.iter().zip(val) {
                total += mse(&p.values, &w.target.values)?;
            }
            let score = total / val.len().max(1) as f64;
            if best.is_none_or(|(b, _)| score < b) {
                best = Some((score, k));
            }
        }
        best.map(|(_, k)| k).ok_or_else(|| Error::Invalid("no usable k in the grid".into()))
    }
}

fn standardize(r: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    r.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

pub const KNN_GRID: [usize; 4] = [1, 3, 5, 10];

/// Interpolation baseline: keep the periodic samples, place each interval's
/// max at the interval midpoint, interpolate linearly in between and hold the
/// end values constant outside the known points.
pub fn linear_baseline(bundle: &CoarseBundle, channel: &str, granularity_ms: f64, domain: ValueDomain) -> Result<FineSeries> {
    let periodic = bundle
        .entries
        .iter()
        .find(|e| e.channel == channel && e.spec.kind == CoarsenerKind::Periodic)
        .ok_or_else(|| Error::Invalid(format!("linear baseline needs a periodic entry for `{channel}`")))?;
    let z = bundle.zoom;
    let mut known: BTreeMap<usize, f64> = BTreeMap::new();
    if let Some(mx) = bundle.entries.iter().find(|e| e.channel == channel && e.spec.kind == CoarsenerKind::Max) {
        for (j, &v) in mx.values.iter().enumerate() {
            known.insert(j * z + z / 2, v);
        }
    }
    // periodic samples win over a max placed at the same index
    for (j, &v) in periodic.values.iter().enumerate() {
        known.insert(j * z + periodic.spec.offset, v);
    }
    let n = bundle.fine_len();
    let pts: Vec<(usize, f64)> = known.into_iter().collect();
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate() {
        let after = pts.partition_point(|&(i, _)| i < t);
        *o = match (after.checked_sub(1).map(|i| pts[i]), pts.get(after)) {
            (_, Some(&(i, v))) if i == t => v,
            (Some((i0, v0)), Some(&(i1, v1))) => v0 + (v1 - v0) * (t - i0) as f64 / (i1 - i0) as f64,
            (Some((_, v)), None) | (None, Some(&(_, v))) => v,
            (None, None) => 0.0,
        };
    }
    FineSeries::relaxed(channel, out, granularity_ms, domain)
}

/// The plain transformer: same protocol as the full method, MSE only.
pub fn plain_baseline(
    model_cfg: ModelConfig,
    train: &[WindowExample],
    val: &[WindowExample],
    train_cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    let mut model = Model::new(model_cfg, train)?;
    let cfg = TrainConfig { emd_weight: 0.0, ..train_cfg.clone() };
    let log = fit_plain(&mut model, train, val, &cfg)?;
    Ok((model, log))
}
