//! Fine and coarse time series, coarsening operators and windowing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Positivity threshold for real-valued channels.
pub const REAL_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    NonnegReal,
    NonnegInt,
}

impl ValueDomain {
    /// Smallest value that counts as "strictly positive" in this domain.
    pub fn epsilon(self) -> f64 {
        match self {
            ValueDomain::NonnegReal => REAL_EPSILON,
            ValueDomain::NonnegInt => 1.0,
        }
    }

    pub fn is_positive(self, v: f64) -> bool {
        v >= self.epsilon()
    }
}

impl FromStr for ValueDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonneg_real" | "real" => Ok(ValueDomain::NonnegReal),
            "nonneg_int" | "int" => Ok(ValueDomain::NonnegInt),
            other => Err(Error::Invalid(format!("unknown value domain `{other}`"))),
        }
    }
}

/// One fine-grained channel: ground truth or an imputed series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineSeries {
    pub channel: String,
    pub values: Vec<f64>,
    pub granularity_ms: f64,
    pub domain: ValueDomain,
}

impl FineSeries {
    pub fn new(
        channel: impl Into<String>,
        values: Vec<f64>,
        granularity_ms: f64,
        domain: ValueDomain,
    ) -> Result<Self> {
        let s = Self::relaxed(channel, values, granularity_ms, domain)?;
        if domain == ValueDomain::NonnegInt {
            if let Some((i, v)) = s.values.iter().enumerate().find(|(_, v)| v.fract() != 0.0) {
                return Err(Error::Invalid(format!(
                    "channel `{}`: value {v} at index {i} is not an integer",
                    s.channel
                )));
            }
        }
        Ok(s)
    }

    /// Like [`FineSeries::new`] but skips the integrality check. Model outputs
    /// for integer channels stay real-valued until the repair step rounds them.
    pub fn relaxed(
        channel: impl Into<String>,
        values: Vec<f64>,
        granularity_ms: f64,
        domain: ValueDomain,
    ) -> Result<Self> {
        let channel = channel.into();
        if values.is_empty() {
            return Err(Error::Invalid(format!("channel `{channel}` is empty")));
        }
        if !(granularity_ms > 0.0) {
            return Err(Error::Invalid(format!(
                "channel `{channel}`: granularity must be positive"
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "channel `{channel}`: value {v} at index {i} is negative or not finite"
            )));
        }
        Ok(Self { channel, values, granularity_ms, domain })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> FineSeries {
        FineSeries {
            channel: self.channel.clone(),
            values: self.values[start..start + len].to_vec(),
            granularity_ms: self.granularity_ms,
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarsenerKind {
    Max,
    Min,
    Mean,
    Sum,
    Periodic,
    CountPositive,
}

impl CoarsenerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CoarsenerKind::Max => "max",
            CoarsenerKind::Min => "min",
            CoarsenerKind::Mean => "mean",
            CoarsenerKind::Sum => "sum",
            CoarsenerKind::Periodic => "periodic",
            CoarsenerKind::CountPositive => "count_positive",
        }
    }
}

impl fmt::Display for CoarsenerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoarsenerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "max" => CoarsenerKind::Max,
            "min" => CoarsenerKind::Min,
            "mean" => CoarsenerKind::Mean,
            "sum" => CoarsenerKind::Sum,
            "periodic" => CoarsenerKind::Periodic,
            "count_positive" => CoarsenerKind::CountPositive,
            other => return Err(Error::Invalid(format!("unknown coarsener `{other}`"))),
        })
    }
}

/// A monitoring operator: how `window` fine steps collapse into one coarse value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoarsenerSpec {
    pub kind: CoarsenerKind,
    pub window: usize,
    #[serde(default)]
    pub offset: usize,
}

impl CoarsenerSpec {
    pub fn new(kind: CoarsenerKind, window: usize) -> Result<Self> {
        Self::with_offset(kind, window, 0)
    }

    pub fn periodic(window: usize, offset: usize) -> Result<Self> {
        Self::with_offset(CoarsenerKind::Periodic, window, offset)
    }

    pub fn with_offset(kind: CoarsenerKind, window: usize, offset: usize) -> Result<Self> {
        let spec = Self { kind, window, offset };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Invalid(format!("zoom factor must be >= 2, got {}", self.window)));
        }
        if self.kind == CoarsenerKind::Periodic && self.offset >= self.window {
            return Err(Error::Invalid(format!(
                "periodic offset {} outside 0..{}",
                self.offset, self.window
            )));
        }
        if self.kind != CoarsenerKind::Periodic && self.offset != 0 {
            return Err(Error::Invalid("offset is only meaningful for periodic sampling".into()));
        }
        Ok(())
    }

    /// Apply the operator to one coarse interval.
    pub fn reduce(&self, interval: &[f64], domain: ValueDomain) -> f64 {
        match self.kind {
            CoarsenerKind::Max => interval.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            CoarsenerKind::Min => interval.iter().copied().fold(f64::INFINITY, f64::min),
            CoarsenerKind::Sum => interval.iter().sum(),
            CoarsenerKind::Mean => interval.iter().sum::<f64>() / interval.len() as f64,
            CoarsenerKind::Periodic => interval[self.offset],
            CoarsenerKind::CountPositive => {
                interval.iter().filter(|v| domain.is_positive(**v)).count() as f64
            }
        }
    }
}

/// Apply a coarsener to a whole series.
pub fn coarsen(series: &FineSeries, spec: &CoarsenerSpec) -> Result<Vec<f64>> {
    coarsen_values(&series.values, spec, series.domain)
}

pub fn coarsen_values(values: &[f64], spec: &CoarsenerSpec, domain: ValueDomain) -> Result<Vec<f64>> {
    spec.validate()?;
    if values.len() % spec.window != 0 {
        return Err(Error::Shape(format!(
            "series length {} is not a multiple of zoom {}",
            values.len(),
            spec.window
        )));
    }
    Ok(values.chunks(spec.window).map(|c| spec.reduce(c, domain)).collect())
}

/// Repeat every coarse value `zoom` times.
pub fn upsample_repeat(coarse: &[f64], zoom: usize) -> Vec<f64> {
    coarse.iter().flat_map(|&v| std::iter::repeat(v).take(zoom)).collect()
}

/// Which fine channel an entry measures and with what operator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntrySpec {
    pub channel: String,
    pub spec: CoarsenerSpec,
}

impl EntrySpec {
    pub fn new(channel: impl Into<String>, spec: CoarsenerSpec) -> Self {
        Self { channel: channel.into(), spec }
    }

    /// Measurement name used by constraint expressions, e.g. `qlen.max`.
    pub fn name(&self) -> String {
        format!("{}.{}", self.channel, self.spec.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseEntry {
    pub channel: String,
    pub spec: CoarsenerSpec,
    pub values: Vec<f64>,
}

impl CoarseEntry {
    pub fn name(&self) -> String {
        format!("{}.{}", self.channel, self.spec.kind)
    }
}

/// Aligned coarse measurements over one context window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseBundle {
    pub entries: Vec<CoarseEntry>,
    pub context_len: usize,
    pub zoom: usize,
}

impl CoarseBundle {
    pub fn new(entries: Vec<CoarseEntry>, context_len: usize, zoom: usize) -> Result<Self> {
        let b = Self { entries, context_len, zoom };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::Shape("context length must be positive".into()));
        }
        for e in &self.entries {
            e.spec.validate()?;
            if e.spec.window != self.zoom {
                return Err(Error::Shape(format!(
                    "entry `{}` has zoom {} but bundle zoom is {}",
                    e.name(),
                    e.spec.window,
                    self.zoom
                )));
            }
            if e.values.len() != self.context_len {
                return Err(Error::Shape(format!(
                    "entry `{}` has {} coarse values, expected {}",
                    e.name(),
                    e.values.len(),
                    self.context_len
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&CoarseEntry> {
        self.entries.iter().find(|e| e.name() == name)
    }

    /// Names of all entries in layout order.
    pub fn layout(&self) -> Vec<String> {
        self.entries.iter().map(CoarseEntry::name).collect()
    }

    pub fn fine_len(&self) -> usize {
        self.context_len * self.zoom
    }
}

/// One training/evaluation pair: coarse input plus the fine target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowExample {
    pub id: usize,
    /// Identifier of the trace the window was cut from.
    pub source: String,
    /// Offset of the window in the source trace, in fine steps.
    pub start: usize,
    pub input: CoarseBundle,
    pub target: FineSeries,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

impl WindowExample {
    /// Check that the target length matches the bundle shape.
    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        if self.target.len() != self.input.fine_len() {
            return Err(Error::Shape(format!(
                "window {}: target length {} != context {} x zoom {}",
                self.id,
                self.target.len(),
                self.input.context_len,
                self.input.zoom
            )));
        }
        Ok(())
    }
}

/// Number of windows `make_windows` produces for a trace of `len` fine steps.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Cut aligned fine channels into windows of `context_len` coarse intervals.
///
/// Every entry of every window is computed by coarsening the matching ground
/// truth channel, so the windows are self-consistent by construction.
pub fn make_windows(
    channels: &BTreeMap<String, FineSeries>,
    specs: &[EntrySpec],
    target: &str,
    context_len: usize,
    stride: usize,
) -> Result<Vec<WindowExample>> {
    let target_series = channels
        .get(target)
        .ok_or_else(|| Error::Invalid(format!("target channel `{target}` not present")))?;
    let len = target_series.len();
    let granularity = target_series.granularity_ms;
    for (name, s) in channels {
        if s.len() != len {
            return Err(Error::Shape(format!(
                "channel `{name}` has length {} but `{target}` has {len}",
                s.len()
            )));
        }
        if s.granularity_ms != granularity {
            return Err(Error::Shape(format!("channel `{name}` has a different granularity")));
        }
    }
    let zoom = match specs.first() {
        Some(e) => e.spec.window,
        None => return Err(Error::Invalid("at least one coarse entry is required".into())),
    };
    for e in specs {
        e.spec.validate()?;
        if e.spec.window != zoom {
            return Err(Error::Shape("all entries must share one zoom factor".into()));
        }
        if !channels.contains_key(&e.channel) {
            return Err(Error::Invalid(format!("entry refers to unknown channel `{}`", e.channel)));
        }
    }
    if context_len == 0 || stride == 0 {
        return Err(Error::Invalid("context length and stride must be positive".into()));
    }
    let span = context_len * zoom;
    let n = window_count(len, span, stride);
    let mut out = Vec::with_capacity(n);
    for w in 0..n {
        let start = w * stride;
        let mut entries = Vec::with_capacity(specs.len());
        for e in specs {
            let s = &channels[&e.channel];
            let values = coarsen_values(&s.values[start..start + span], &e.spec, s.domain)?;
            entries.push(CoarseEntry { channel: e.channel.clone(), spec: e.spec, values });
        }
        out.push(WindowExample {
            id: w,
            source: String::new(),
            start,
            input: CoarseBundle { entries, context_len, zoom },
            target: target_series.slice(start, span),
            scalars: BTreeMap::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn int_series(v: &[f64]) -> FineSeries {
        FineSeries::new("q", v.to_vec(), 1.0, ValueDomain::NonnegInt).unwrap()
    }

    #[test]
    fn coarsen_basic_kinds() {
        let s = int_series(&[1., 3., 2., 5.]);
        let max = CoarsenerSpec::new(CoarsenerKind::Max, 4).unwrap();
        assert_eq!(coarsen(&s, &max).unwrap(), vec![5.0]);

        let s = int_series(&[7., 9., 3., 4.]);
        let per = CoarsenerSpec::periodic(2, 0).unwrap();
        assert_eq!(coarsen(&s, &per).unwrap(), vec![7.0, 3.0]);

        let s = int_series(&[2., 0., 1., 0.]);
        let cnt = CoarsenerSpec::new(CoarsenerKind::CountPositive, 4).unwrap();
        assert_eq!(coarsen(&s, &cnt).unwrap(), vec![2.0]);

        let s = int_series(&[2., 0., 1., 1.]);
        let min = CoarsenerSpec::new(CoarsenerKind::Min, 2).unwrap();
        let mean = CoarsenerSpec::new(CoarsenerKind::Mean, 2).unwrap();
        let sum = CoarsenerSpec::new(CoarsenerKind::Sum, 2).unwrap();
        assert_eq!(coarsen(&s, &min).unwrap(), vec![0.0, 1.0]);
        assert_eq!(coarsen(&s, &mean).unwrap(), vec![1.0, 1.0]);
        assert_eq!(coarsen(&s, &sum).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn coarsen_rejects_ragged_length() {
        let s = int_series(&[1., 2., 3.]);
        let max = CoarsenerSpec::new(CoarsenerKind::Max, 2).unwrap();
        assert!(matches!(coarsen(&s, &max), Err(Error::Shape(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(CoarsenerSpec::new(CoarsenerKind::Max, 1).is_err());
        assert!(CoarsenerSpec::periodic(4, 4).is_err());
        assert!(CoarsenerSpec::periodic(4, 3).is_ok());
    }

    #[test]
    fn series_invariants() {
        assert!(FineSeries::new("q", vec![], 1.0, ValueDomain::NonnegReal).is_err());
        assert!(FineSeries::new("q", vec![-1.0], 1.0, ValueDomain::NonnegReal).is_err());
        assert!(FineSeries::new("q", vec![0.5], 1.0, ValueDomain::NonnegInt).is_err());
        assert!(FineSeries::relaxed("q", vec![0.5], 1.0, ValueDomain::NonnegInt).is_ok());
        assert!(FineSeries::new("q", vec![f64::NAN], 1.0, ValueDomain::NonnegReal).is_err());
    }

    #[test]
    fn real_positivity_uses_epsilon() {
        let s = FineSeries::new("u", vec![1e-9, 2e-6, 0.0, 3.0], 1.0, ValueDomain::NonnegReal).unwrap();
        let cnt = CoarsenerSpec::new(CoarsenerKind::CountPositive, 4).unwrap();
        assert_eq!(coarsen(&s, &cnt).unwrap(), vec![2.0]);
    }

    fn channels(len: usize) -> BTreeMap<String, FineSeries> {
        let q = int_series(&(0..len).map(|i| (i % 7) as f64).collect::<Vec<_>>());
        BTreeMap::from([("q".to_string(), q)])
    }

    #[test]
    fn window_counts() {
        let ch = channels(100);
        let specs = vec![EntrySpec::new("q", CoarsenerSpec::new(CoarsenerKind::Max, 50).unwrap())];
        let w = make_windows(&ch, &specs, "q", 1, 50).unwrap();
        assert_eq!(w.len(), 2);

        let w = make_windows(&ch, &specs, "q", 1, 20).unwrap();
        assert_eq!(w.len(), (100 - 50) / 20 + 1);
        assert_eq!(w.len(), window_count(100, 50, 20));
        assert_eq!(w[1].start, 20);
        for ex in &w {
            ex.validate().unwrap();
        }
    }

    #[test]
    fn unequal_channels_rejected() {
        let mut ch = channels(100);
        ch.insert("r".into(), int_series(&[1.0; 90]));
        let specs = vec![EntrySpec::new("q", CoarsenerSpec::new(CoarsenerKind::Max, 50).unwrap())];
        assert!(matches!(make_windows(&ch, &specs, "q", 1, 50), Err(Error::Shape(_))));
    }

    #[test]
    fn bundle_validation_catches_length() {
        let spec = CoarsenerSpec::new(CoarsenerKind::Max, 4).unwrap();
        let entry = CoarseEntry { channel: "q".into(), spec, values: vec![1.0, 2.0] };
        assert!(CoarseBundle::new(vec![entry.clone()], 2, 4).is_ok());
        assert!(CoarseBundle::new(vec![entry], 3, 4).is_err());
    }
}
