//! File-based pipeline: generate, train, impute, evaluate and sweep.
//!
//! Every step reads and writes plain files and records a [`Manifest`] whose
//! `config` is the full [`Invocation`], so a run can be replayed from its
//! manifest alone.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cem::{enforce_batch, reports_to_csv, CemConfig, RepairStatus};
use crate::constraints::library::queue_constraints;
use crate::constraints::{parse_constraint_set, violation_summary, ConstraintSet};
use crate::datagen::{build_dataset, DatasetPlan, TrafficConfig, SENT};
use crate::eval::{
    evaluate_method, linear_baseline, overlay_svg, plain_baseline, EvalReport, KnnBaseline, DEFAULT_BURST_FRACTION,
    KNN_GRID,
};
use crate::io::{read_windows, write_atomic, write_windows, WindowFileHeader};
use crate::kal::{self, KalConfig, KalLog};
use crate::manifest::Manifest;
use crate::model::{fit_plain, Model, ModelConfig, TrainConfig};
use crate::refine::{equivalence_test, refine_dataset, ClassFile, RefineConfig};
use crate::series::{FineSeries, WindowExample};
use crate::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_ZOOMS: [usize; 3] = [25, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; model initialization and batch order derive from it.
    pub seed: u64,
    /// Generator preset: bursty, persistent or mixed.
    pub preset: String,
    /// Explicit traffic configs; replace the preset when non-empty.
    pub traffic: Vec<TrafficConfig>,
    /// Overrides the trace length of every traffic config.
    pub duration_ms: Option<usize>,
    pub zoom: usize,
    /// Coarse intervals per window.
    pub context_len: usize,
    pub traces_per_config: usize,
    pub periodic_offset: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kal: KalConfig,
    pub refine: RefineConfig,
    /// Constraint file; the built-in queue constraints C1-C3 by default.
    pub constraints: Option<PathBuf>,
    pub cem: CemConfig,
    pub burst_fraction: f64,
    /// Neighbors for the k-NN baseline; chosen on the validation split if unset.
    pub knn_k: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            preset: "mixed".into(),
            traffic: Vec::new(),
            duration_ms: None,
            zoom: 50,
            context_len: 5,
            traces_per_config: 8,
            periodic_offset: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kal: KalConfig::default(),
            refine: RefineConfig::default(),
            constraints: None,
            cem: CemConfig::default(),
            burst_fraction: DEFAULT_BURST_FRACTION,
            knn_k: None,
        }
    }
}

impl RunConfig {
    /// Propagate the master seed into the model and trainer.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn traffic_configs(&self) -> Result<Vec<TrafficConfig>> {
        let mut cfgs = if self.traffic.is_empty() { TrafficConfig::preset(&self.preset)? } else { self.traffic.clone() };
        if let Some(d) = self.duration_ms {
            for c in &mut cfgs {
                c.duration_ms = d;
            }
        }
        for c in &cfgs {
            c.validate()?;
        }
        Ok(cfgs)
    }

    pub fn plan(&self) -> DatasetPlan {
        DatasetPlan {
            traces_per_config: self.traces_per_config,
            periodic_offset: self.periodic_offset,
            ..DatasetPlan::new(self.zoom, self.context_len, self.seed)
        }
    }

    /// The constraint file, or C1-C3 bound to the target channel.
    pub fn constraint_set(&self, target: &str) -> Result<ConstraintSet> {
        match &self.constraints {
            Some(p) => parse_constraint_set(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => queue_constraints(target, SENT),
        }
    }

    /// Constraint set checked against a window file's layout and scalars.
    fn checked_constraints(&self, header: &WindowFileHeader, windows: &[WindowExample]) -> Result<ConstraintSet> {
        let set = self.constraint_set(&header.target)?;
        let scalars: BTreeSet<String> = windows.iter().flat_map(|w| w.scalars.keys().cloned()).collect();
        set.check_layout(&header.layout, &scalars)?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Plain,
    Kal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMethod {
    Model,
    Knn,
    Linear,
}

/// One command with its arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Generate { out_dir: PathBuf },
    Train { data_dir: PathBuf, mode: TrainMethod, refine: bool, checkpoint: PathBuf },
    Impute {
        method: ImputeMethod,
        input: PathBuf,
        output: PathBuf,
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        /// Training split for k-NN; its sibling val split picks `k`.
        #[serde(default)]
        train: Option<PathBuf>,
        enforce: bool,
    },
    Evaluate { truth: PathBuf, methods: Vec<(String, PathBuf)>, out_dir: PathBuf, plots: bool },
    Sweep { zooms: Vec<usize>, refine: bool, out_dir: PathBuf },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Generate { .. } => "generate",
            Job::Train { .. } => "train",
            Job::Impute { .. } => "impute",
            Job::Evaluate { .. } => "evaluate",
            Job::Sweep { .. } => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    #[serde(flatten)]
    pub job: Job,
    pub config: RunConfig,
}

impl Invocation {
    pub fn new(job: Job, config: RunConfig) -> Self {
        Self { job, config: config.resolved() }
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::new(self.job.name(), self.config.seed, self)
    }

    /// Re-create the invocation recorded in a manifest.
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        serde_json::from_value(m.config.clone())
            .map_err(|e| Error::Config(format!("manifest does not describe a replayable run: {e}")))
    }

    /// Execute and return the saved manifest.
    pub fn run(&self) -> Result<Manifest> {
        let cfg = &self.config;
        Ok(match &self.job {
            Job::Generate { out_dir } => generate(cfg, out_dir)?,
            Job::Train { data_dir, mode, refine, checkpoint } => train(cfg, data_dir, *mode, *refine, checkpoint)?.manifest,
            Job::Impute { method, input, output, checkpoint, train, enforce } => impute(
                cfg,
                &ImputeArgs {
                    method: *method,
                    input: input.clone(),
                    output: output.clone(),
                    checkpoint: checkpoint.clone(),
                    train: train.clone(),
                    enforce: *enforce,
                },
            )?
            .manifest,
            Job::Evaluate { truth, methods, out_dir, plots } => evaluate(cfg, truth, methods, out_dir, *plots)?.manifest,
            Job::Sweep { zooms, refine, out_dir } => sweep(cfg, zooms, *refine, out_dir)?.manifest,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Simulate the configured traffic and write the three splits.
pub fn generate(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    let inv = Invocation::new(Job::Generate { out_dir: out_dir.into() }, cfg.clone());
    let cfg = &inv.config;
    let ds = build_dataset(&cfg.traffic_configs()?, &cfg.plan())?;
    log::info!("generated {} train / {} val / {} test windows", ds.train.len(), ds.val.len(), ds.test.len());
    create_dir(out_dir)?;
    let header = WindowFileHeader::for_dataset(&ds);
    let mut manifest = inv.manifest()?;
    for (name, split) in [(TRAIN_FILE, &ds.train), (VAL_FILE, &ds.val), (TEST_FILE, &ds.test)] {
        let path = out_dir.join(name);
        write_windows(&path, &header, split)?;
        manifest.add_output(&path)?;
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub struct TrainOutcome {
    pub model: Model,
    pub kal_log: Option<KalLog>,
    /// Training-split ids per refined class.
    pub classes: Vec<Vec<usize>>,
    pub manifest: Manifest,
}

/// Train a plain (MSE) or KAL model on `data_dir`'s train/val splits.
pub fn train(cfg: &RunConfig, data_dir: &Path, mode: TrainMethod, refine: bool, checkpoint: &Path) -> Result<TrainOutcome> {
    let inv = Invocation::new(
        Job::Train { data_dir: data_dir.into(), mode, refine, checkpoint: checkpoint.into() },
        cfg.clone(),
    );
    let cfg = &inv.config;
    let (train_path, val_path) = (data_dir.join(TRAIN_FILE), data_dir.join(VAL_FILE));
    let (header, train) = read_windows(&train_path)?;
    let (_, val) = read_windows(&val_path)?;
    if train.is_empty() {
        return Err(Error::Data { path: train_path, row: 1, msg: "no training windows".into() });
    }
    let mut manifest = inv.manifest()?;
    manifest.add_input(&train_path)?;
    manifest.add_input(&val_path)?;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }

    let mut classes = Vec::new();
    let mut kal_log = None;
    let model = match mode {
        TrainMethod::Plain => {
            if cfg.constraints.is_some() {
                log::warn!("plain training ignores the constraint file");
            }
            if refine {
                log::warn!("refinement only applies to KAL training; ignored");
            }
            plain_baseline(cfg.model.clone(), &train, &val, &cfg.train)?.0
        }
        TrainMethod::Kal => {
            let set = cfg.checked_constraints(&header, &train)?;
            if let Some(p) = &cfg.constraints {
                manifest.add_input(p)?;
            }
            let targets = if refine {
                let mut basic = Model::new(cfg.model.clone(), &train)?;
                fit_plain(&mut basic, &train, &val, &cfg.train)?;
                let found = equivalence_test(&train, &basic, &cfg.refine)?;
                log::info!("refinement: {} classes over {} examples", found.len(), found.iter().map(|c| c.members.len()).sum::<usize>());
                let sidecar = sibling(checkpoint, ".classes.json");
                ClassFile::new(&cfg.refine, train.len(), &found).save(&sidecar)?;
                manifest.add_output(&sidecar)?;
                let ids: Vec<Vec<usize>> = found.into_iter().map(|c| c.members).collect();
                let refined = refine_dataset(&train, &ids)?;
                classes = refined.classes.clone();
                Some(refined.sets)
            } else {
                None
            };
            let mut model = Model::new(cfg.model.clone(), &train)?;
            let log = kal::fit(&mut model, &train, &val, targets.as_deref(), &set, &cfg.train, &cfg.kal)?;
            let history = sibling(checkpoint, ".history.csv");
            write_atomic(&history, log.history_csv().as_bytes())?;
            manifest.add_output(&history)?;
            kal_log = Some(log);
            model
        }
    };
    model.save(checkpoint)?;
    manifest.add_output(checkpoint)?;
    manifest.save(&sibling(checkpoint, ".manifest.json"))?;
    Ok(TrainOutcome { model, kal_log, classes, manifest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputeArgs {
    pub method: ImputeMethod,
    pub input: PathBuf,
    pub output: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub enforce: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RepairTally {
    pub windows: usize,
    pub already_feasible: usize,
    pub repaired: usize,
    pub relaxed: usize,
    pub infeasible: usize,
}

impl RepairTally {
    pub fn infeasible_rate(&self) -> f64 {
        self.infeasible as f64 / self.windows.max(1) as f64
    }
}

pub struct ImputeOutcome {
    pub imputed: Vec<FineSeries>,
    pub tally: Option<RepairTally>,
    pub manifest: Manifest,
}

/// Impute every window of `input`. The output is a window file whose targets
/// hold the imputations.
pub fn impute(cfg: &RunConfig, args: &ImputeArgs) -> Result<ImputeOutcome> {
    let inv = Invocation::new(
        Job::Impute {
            method: args.method,
            input: args.input.clone(),
            output: args.output.clone(),
            checkpoint: args.checkpoint.clone(),
            train: args.train.clone(),
            enforce: args.enforce,
        },
        cfg.clone(),
    );
    let cfg = &inv.config;
    let (header, windows) = read_windows(&args.input)?;
    if windows.is_empty() {
        return Err(Error::Data { path: args.input.clone(), row: 1, msg: "no windows to impute".into() });
    }
    let mut manifest = inv.manifest()?;
    manifest.add_input(&args.input)?;
    let mut imputed = match args.method {
        ImputeMethod::Model => {
            let path = args.checkpoint.as_ref().ok_or_else(|| Error::Config("model imputation needs a checkpoint".into()))?;
            let model = Model::load(path)?;
            manifest.add_input(path)?;
            if model.io.layout != header.layout || model.io.zoom != header.zoom || model.io.context_len != header.context_len {
                return Err(Error::Data {
                    path: args.input.clone(),
                    row: 1,
                    msg: format!(
                        "layout {:?} at zoom {} x {} does not match the checkpoint's {:?} at zoom {} x {}",
                        header.layout, header.zoom, header.context_len, model.io.layout, model.io.zoom, model.io.context_len
                    ),
                });
            }
            model.predict(&windows)?
        }
        ImputeMethod::Knn => {
            let path = args.train.as_ref().ok_or_else(|| Error::Config("k-NN imputation needs a training split".into()))?;
            let (_, train) = read_windows(path)?;
            manifest.add_input(path)?;
            let knn = KnnBaseline::fit(&train)?;
            let k = match cfg.knn_k {
                Some(k) => k,
                None => {
                    let val_path = path.with_file_name(VAL_FILE);
                    let val = if val_path.exists() { read_windows(&val_path)?.1 } else { Vec::new() };
                    if val.is_empty() {
                        1
                    } else {
                        manifest.add_input(&val_path)?;
                        knn.select_k(&val, &KNN_GRID)?
                    }
                }
            };
            log::info!("k-NN with k = {k}");
            knn.predict_all(&windows, k)?
        }
        ImputeMethod::Linear => windows
            .iter()
            .map(|w| linear_baseline(&w.input, &header.target, header.granularity_ms, header.domain))
            .collect::<Result<_>>()?,
    };
    let mut tally = None;
    if args.enforce {
        let set = cfg.checked_constraints(&header, &windows)?;
        let repairs = enforce_batch(&set, &windows, &imputed, &cfg.cem)?;
        let reports: Vec<_> = repairs.iter().map(|r| r.report.clone()).collect();
        let mut t = RepairTally { windows: reports.len(), ..RepairTally::default() };
        for r in &reports {
            match r.status {
                RepairStatus::AlreadyFeasible => t.already_feasible += 1,
                RepairStatus::Repaired => t.repaired += 1,
                RepairStatus::Relaxed => t.relaxed += 1,
                RepairStatus::Infeasible => t.infeasible += 1,
            }
        }
        if t.relaxed + t.infeasible > 0 {
            log::warn!("{} windows relaxed, {} infeasible", t.relaxed, t.infeasible);
        }
        imputed = repairs.into_iter().map(|r| r.series).collect();
        let report_path = sibling(&args.output, ".repair.csv");
        if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_atomic(&report_path, reports_to_csv(&reports)?.as_bytes())?;
        tally = Some(t);
    }
    let out: Vec<WindowExample> = windows
        .iter()
        .zip(&imputed)
        .map(|(w, s)| WindowExample { target: s.clone(), ..w.clone() })
        .collect();
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_windows(&args.output, &header, &out)?;
    manifest.add_output(&args.output)?;
    if args.enforce {
        manifest.add_output(&sibling(&args.output, ".repair.csv"))?;
    }
    manifest.save(&sibling(&args.output, ".manifest.json"))?;
    Ok(ImputeOutcome { imputed, tally, manifest })
}

pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub manifest: Manifest,
}

fn aligned(truth_path: &Path, truth: &[WindowExample], path: &Path, other: &[WindowExample]) -> Result<()> {
    if truth.len() != other.len() {
        return Err(Error::Data {
            path: path.into(),
            row: 1,
            msg: format!("{} windows, but {} has {}", other.len(), truth_path.display(), truth.len()),
        });
    }
    for (i, (a, b)) in truth.iter().zip(other).enumerate() {
        if a.id != b.id || a.target.values.len() != b.target.values.len() {
            return Err(Error::Data {
                path: path.into(),
                row: i + 2,
                msg: format!(
                    "window id {} ({} values) does not line up with truth window id {} ({} values)",
                    b.id,
                    b.target.values.len(),
                    a.id,
                    a.target.values.len()
                ),
            });
        }
    }
    Ok(())
}

/// Score each method's imputation file against the truth file.
pub fn evaluate(
    cfg: &RunConfig,
    truth_path: &Path,
    methods: &[(String, PathBuf)],
    out_dir: &Path,
    plots: bool,
) -> Result<EvaluateOutcome> {
    let inv = Invocation::new(
        Job::Evaluate { truth: truth_path.into(), methods: methods.to_vec(), out_dir: out_dir.into(), plots },
        cfg.clone(),
    );
    let cfg = &inv.config;
    if methods.is_empty() {
        return Err(Error::Config("at least one method is required".into()));
    }
    let (header, truth) = read_windows(truth_path)?;
    let mut manifest = inv.manifest()?;
    manifest.add_input(truth_path)?;
    let set = cfg.checked_constraints(&header, &truth)?;
    let truth_series: Vec<FineSeries> = truth.iter().map(|w| w.target.clone()).collect();
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    let mut violations = String::from("method,constraint,mean_abs,mean_normalized,violated,scopes\n");
    for (name, path) in methods {
        let (_, imputed) = read_windows(path)?;
        aligned(truth_path, &truth, path, &imputed)?;
        manifest.add_input(path)?;
        let series: Vec<FineSeries> = imputed.into_iter().map(|w| w.target).collect();
        reports.push(evaluate_method(name, &series, &truth_series, cfg.burst_fraction)?);
        let values: Vec<Vec<f64>> = series.iter().map(|s| s.values.clone()).collect();
        for v in violation_summary(&set, &truth, &values, 1e-6)? {
            violations.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                v.name, v.mean_abs, v.mean_normalized, v.violated, v.scopes
            ));
        }
        outputs.push((name.clone(), series));
    }
    let report = EvalReport::new(reports);
    if let Some(note) = &report.note {
        log::warn!("{note}");
    }
    create_dir(out_dir)?;
    let mut files = vec![
        (out_dir.join("metrics_raw.csv"), report.raw_csv()?),
        (out_dir.join("report.json"), report.to_json()?),
        (out_dir.join("violations.csv"), violations),
    ];
    if let Some(norm) = report.normalized_csv()? {
        files.push((out_dir.join("metrics_normalized.csv"), norm));
    }
    if plots {
        files.push((out_dir.join("metrics.svg"), report.bars_svg()));
        // the window with the largest true peak makes the clearest overlay
        let peak = |w: &WindowExample| w.target.values.iter().copied().fold(0.0, f64::max);
        if let Some(i) = (0..truth.len()).max_by(|&a, &b| peak(&truth[a]).total_cmp(&peak(&truth[b])).then(b.cmp(&a))) {
            let lines: Vec<(&str, &[f64])> = outputs.iter().map(|(n, s)| (n.as_str(), s[i].values.as_slice())).collect();
            files.push((out_dir.join(format!("overlay_{}.svg", truth[i].id)), overlay_svg(&truth[i].target.values, &lines)));
        }
    }
    for (path, text) in &files {
        write_atomic(path, text.as_bytes())?;
        manifest.add_output(path)?;
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(EvaluateOutcome { report, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub zoom: usize,
    pub report: EvalReport,
    /// CEM outcome of the KAL model on the test split.
    pub repairs: RepairTally,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub manifest: Manifest,
}

pub const SWEEP_METHODS: [&str; 4] = ["kal_cem", "plain", "knn", "linear"];

/// Generate, train, impute and evaluate end to end for every zoom factor.
pub fn sweep(cfg: &RunConfig, zooms: &[usize], refine: bool, out_dir: &Path) -> Result<SweepOutcome> {
    let inv = Invocation::new(Job::Sweep { zooms: zooms.to_vec(), refine, out_dir: out_dir.into() }, cfg.clone());
    if zooms.is_empty() {
        return Err(Error::Config("sweep needs at least one zoom factor".into()));
    }
    let mut manifest = inv.manifest()?;
    let mut rows = Vec::new();
    for &z in zooms {
        let cfg = RunConfig { zoom: z, ..inv.config.clone() };
        let dir = out_dir.join(format!("z{z}"));
        let data = dir.join("data");
        log::info!("sweep: zoom {z}");
        generate(&cfg, &data)?;
        let test = data.join(TEST_FILE);
        let kal_ckpt = dir.join("kal.ckpt");
        let plain_ckpt = dir.join("plain.ckpt");
        train(&cfg, &data, TrainMethod::Kal, refine, &kal_ckpt)?;
        train(&cfg, &data, TrainMethod::Plain, false, &plain_ckpt)?;
        let imp = |method, checkpoint: Option<&Path>, enforce, name: &str| -> Result<ImputeOutcome> {
            impute(
                &cfg,
                &ImputeArgs {
                    method,
                    input: test.clone(),
                    output: dir.join(format!("{name}.jsonl")),
                    checkpoint: checkpoint.map(Path::to_path_buf),
                    train: Some(data.join(TRAIN_FILE)),
                    enforce,
                },
            )
        };
        let kal_out = imp(ImputeMethod::Model, Some(&kal_ckpt), true, "kal_cem")?;
        imp(ImputeMethod::Model, Some(&plain_ckpt), false, "plain")?;
        imp(ImputeMethod::Knn, None, false, "knn")?;
        imp(ImputeMethod::Linear, None, false, "linear")?;
        let methods: Vec<(String, PathBuf)> =
            SWEEP_METHODS.iter().map(|m| (m.to_string(), dir.join(format!("{m}.jsonl")))).collect();
        let eval = evaluate(&cfg, &test, &methods, &dir.join("eval"), false)?;
        manifest.add_output(&dir.join("eval").join("metrics_raw.csv"))?;
        rows.push(SweepRow { zoom: z, report: eval.report, repairs: kal_out.tally.unwrap_or_default() });
    }
    let mut table = String::from("zoom,method");
    let metrics = rows[0].report.metrics.clone();
    for m in &metrics {
        table.push(',');
        table.push_str(m);
    }
    table.push_str(",infeasible_rate\n");
    for row in &rows {
        for m in &row.report.methods {
            table.push_str(&format!("{},{}", row.zoom, m.method));
            for k in &metrics {
                table.push_str(&format!(",{:.6}", m.errors[k]));
            }
            let rate = if m.method == "kal_cem" { format!("{:.6}", row.repairs.infeasible_rate()) } else { String::new() };
            table.push_str(&format!(",{rate}\n"));
        }
    }
    create_dir(out_dir)?;
    let path = out_dir.join("sweep.csv");
    write_atomic(&path, table.as_bytes())?;
    manifest.add_output(&path)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(SweepOutcome { rows, manifest })
}
