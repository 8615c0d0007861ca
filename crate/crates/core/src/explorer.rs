//! Staged grid exploration, Pareto fronts and feature-extractor selection.
//!
//! Stage one trains every single-frame spec; the extractors of its Pareto-optimal
//! members seed the multi-frame families. Multi-channel models run independently.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cost::{cost_report, CostReport, Precision};
use crate::dataset::{fold_data, make_folds, Fold, Normalization, SessionRecord};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateMetrics, FoldMetrics};
use crate::modelfile::config_digest;
use crate::quant::export_int8;
use crate::trainer::{evaluate, evaluate_int, train, TrainConfig, TrainHistory};
use crate::zoo::{
    build_model, enumerate_family, ExtractorSpec, Family, GridConfig, Model, ModelSpec,
};

/// Model seed derived from the master seed and the spec string alone.
pub fn model_seed(master: u64, spec: &ModelSpec) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(spec.render().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Trained in float only; the family has no int8 form.
    FloatOnly,
    Failed,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::FloatOnly => "float-only",
            Status::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(Status::Ok),
            "float-only" => Ok(Status::FloatOnly),
            "failed" => Ok(Status::Failed),
            _ => Err(Error::Invalid(format!("unknown status '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub test_session: u32,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub spec: ModelSpec,
    pub precision: Precision,
    pub status: Status,
    pub error: String,
    pub seed: u64,
    pub cost: CostReport,
    pub folds: Vec<FoldResult>,
    pub aggregate: Option<AggregateMetrics>,
    pub config_digest: String,
    /// Wall-clock seconds; kept out of the results CSV so it stays reproducible.
    pub seconds: f64,
}

impl ResultRecord {
    pub fn is_ok(&self) -> bool {
        self.status != Status::Failed && self.aggregate.is_some()
    }

    pub fn bal_acc(&self) -> f64 {
        self.aggregate.map_or(f64::NAN, |a| a.bal_acc.0)
    }

    pub fn cost(&self, axis: Axis) -> u64 {
        match axis {
            Axis::Macs => self.cost.macs,
            Axis::Params => self.cost.params,
        }
    }

    fn key(&self) -> (String, Precision) {
        (self.spec.render(), self.precision)
    }

    fn failed(
        spec: &ModelSpec,
        precision: Precision,
        seed: u64,
        digest: &str,
        error: String,
    ) -> Self {
        Self {
            spec: spec.clone(),
            precision,
            status: Status::Failed,
            error,
            seed,
            cost: cost_report(spec, precision).unwrap_or(CostReport {
                params: 0,
                macs: 0,
                size_bytes: 0,
            }),
            folds: Vec::new(),
            aggregate: None,
            config_digest: digest.to_string(),
            seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Macs,
    Params,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Macs => "macs",
            Axis::Params => "params",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(Axis::Macs),
            "params" => Ok(Axis::Params),
            _ => Err(Error::Invalid(format!("unknown axis '{s}' (macs, params)"))),
        }
    }
}

/// Which single-frame fronts supply feature extractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorRule {
    Macs,
    Params,
    Union,
}

impl std::str::FromStr for ExtractorRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(ExtractorRule::Macs),
            "params" => Ok(ExtractorRule::Params),
            "union" => Ok(ExtractorRule::Union),
            _ => Err(Error::Invalid(format!(
                "unknown extractor rule '{s}' (macs, params, union)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoFront {
    pub axis: Axis,
    pub members: Vec<ResultRecord>,
}

/// Indices of the Pareto-optimal points (minimize cost, maximize accuracy), by increasing cost.
///
/// Equal points keep only the lexicographically smallest name.
pub fn pareto_indices(points: &[(u64, f64, &str)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        pa.0.cmp(&pb.0)
            .then(pb.1.total_cmp(&pa.1))
            .then(pa.2.cmp(pb.2))
    });
    let mut best = f64::NEG_INFINITY;
    let mut front = Vec::new();
    for i in order {
        if points[i].1 > best {
            best = points[i].1;
            front.push(i);
        }
    }
    front
}

/// Quadratic reference: non-dominated points with exact duplicates collapsed.
fn brute_force_front(points: &[(u64, f64, &str)]) -> BTreeSet<usize> {
    let dominated = |i: usize| {
        let (c, a, name) = points[i];
        points.iter().enumerate().any(|(j, &(cj, aj, nj))| {
            j != i && cj <= c && aj >= a && (cj < c || aj > a || (cj == c && aj == a && nj < name))
        })
    };
    (0..points.len()).filter(|&i| !dominated(i)).collect()
}

/// Front of the successful records along one cost axis.
pub fn pareto_front(records: &[ResultRecord], axis: Axis) -> Result<ParetoFront> {
    let ok: Vec<&ResultRecord> = records.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::Empty(
            "no successful records for a Pareto front".into(),
        ));
    }
    let names: Vec<String> = ok.iter().map(|r| r.spec.render()).collect();
    let points: Vec<(u64, f64, &str)> = ok
        .iter()
        .zip(&names)
        .map(|(r, n)| (r.cost(axis), r.bal_acc(), n.as_str()))
        .collect();
    let idx = pareto_indices(&points);
    assert_eq!(
        idx.iter().copied().collect::<BTreeSet<_>>(),
        brute_force_front(&points),
        "sweep and brute-force fronts disagree"
    );
    Ok(ParetoFront {
        axis,
        members: idx.into_iter().map(|i| ok[i].clone()).collect(),
    })
}

fn sf_front_specs(sf_records: &[ResultRecord], rule: ExtractorRule) -> Result<Vec<ModelSpec>> {
    let sf: Vec<ResultRecord> = sf_records
        .iter()
        .filter(|r| r.spec.family == Family::Sf && r.precision == Precision::Float)
        .cloned()
        .collect();
    if sf.is_empty() {
        return Err(Error::Empty("single-frame float results".into()));
    }
    let axes: &[Axis] = match rule {
        ExtractorRule::Macs => &[Axis::Macs],
        ExtractorRule::Params => &[Axis::Params],
        ExtractorRule::Union => &[Axis::Macs, Axis::Params],
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &axis in axes {
        for m in pareto_front(&sf, axis)?.members {
            if seen.insert(m.spec.render()) {
                out.push(m.spec);
            }
        }
    }
    Ok(out)
}

/// Conv/pool prefixes of the Pareto-optimal single-frame models, deduplicated.
pub fn select_extractors(
    sf_records: &[ResultRecord],
    rule: ExtractorRule,
) -> Result<Vec<ExtractorSpec>> {
    let mut seen = BTreeSet::new();
    Ok(sf_front_specs(sf_records, rule)?
        .into_iter()
        .map(|s| s.extractor())
        .filter(|e| seen.insert(e.render()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreConfig {
    pub master_seed: u64,
    pub jobs: usize,
    pub grid: GridConfig,
    pub float: TrainConfig,
    pub qat: TrainConfig,
    /// Also train and evaluate int8 twins of every quantizable spec.
    pub quantize: bool,
    pub rule: ExtractorRule,
}

impl ExploreConfig {
    /// Everything that affects results; the worker count does not.
    pub fn canonical(&self) -> String {
        let rule = match self.rule {
            ExtractorRule::Macs => "macs",
            ExtractorRule::Params => "params",
            ExtractorRule::Union => "union",
        };
        let g = &self.grid;
        format!(
            "master_seed={};channels={:?};windows={:?};heads={:?};preset={:?};quantize={};rule={rule};float[{}];qat[{}]",
            self.master_seed,
            g.channels,
            g.windows,
            g.heads,
            g.preset,
            self.quantize,
            self.float.canonical(),
            self.qat.canonical()
        )
    }
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            jobs: 1,
            grid: GridConfig::default(),
            float: TrainConfig::float(),
            qat: TrainConfig::qat(),
            quantize: true,
            rule: ExtractorRule::Union,
        }
    }
}

const HEADER: [&str; 22] = [
    "spec",
    "family",
    "window",
    "precision",
    "status",
    "error",
    "seed",
    "params",
    "macs",
    "size_bytes",
    "bal_acc_mean",
    "bal_acc_std",
    "acc_mean",
    "acc_std",
    "f1_mean",
    "f1_std",
    "mae_mean",
    "mae_std",
    "mse_mean",
    "mse_std",
    "folds",
    "config_digest",
];

fn pack_folds(folds: &[FoldResult]) -> String {
    folds
        .iter()
        .map(|f| {
            let m = &f.metrics;
            format!(
                "{}:{}:{}:{}:{}:{}:{}",
                f.test_session, m.bal_acc, m.acc, m.f1_weighted, m.mae, m.mse, m.n_test
            )
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn unpack_folds(text: &str) -> Result<Vec<FoldResult>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let bad = |s: &str| Error::Invalid(format!("malformed fold entry '{s}'"));
    text.split(';')
        .map(|entry| {
            let p: Vec<&str> = entry.split(':').collect();
            if p.len() != 7 {
                return Err(bad(entry));
            }
            let f = |i: usize| p[i].parse::<f64>().map_err(|_| bad(entry));
            Ok(FoldResult {
                test_session: p[0].parse().map_err(|_| bad(entry))?,
                metrics: FoldMetrics {
                    bal_acc: f(1)?,
                    acc: f(2)?,
                    f1_weighted: f(3)?,
                    mae: f(4)?,
                    mse: f(5)?,
                    n_test: p[6].parse().map_err(|_| bad(entry))?,
                },
            })
        })
        .collect()
}

fn record_row(r: &ResultRecord) -> Vec<String> {
    let pair = |v: Option<(f64, f64)>| match v {
        Some((m, s)) => [m.to_string(), s.to_string()],
        None => [String::new(), String::new()],
    };
    let a = r.aggregate;
    let mut row = vec![
        r.spec.render(),
        r.spec.family.name().to_string(),
        r.spec.window.to_string(),
        r.precision.name().to_string(),
        r.status.name().to_string(),
        r.error.clone(),
        r.seed.to_string(),
        r.cost.params.to_string(),
        r.cost.macs.to_string(),
        r.cost.size_bytes.to_string(),
    ];
    row.extend(pair(a.map(|a| a.bal_acc)));
    row.extend(pair(a.map(|a| a.acc)));
    row.extend(pair(a.map(|a| a.f1_weighted)));
    row.extend(pair(a.map(|a| a.mae)));
    row.extend(pair(a.map(|a| a.mse)));
    row.push(pack_folds(&r.folds));
    row.push(r.config_digest.clone());
    row
}

pub fn write_records<W: Write>(writer: W, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a results CSV. Aggregates are recomputed from the fold entries and
/// must agree with the stored columns.
pub fn read_records<R: std::io::Read>(reader: R) -> Result<Vec<ResultRecord>> {
    let mut rd = csv::Reader::from_reader(reader);
    if rd.headers()?.iter().ne(HEADER) {
        return Err(Error::Data {
            line: 1,
            reason: "unexpected results header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let err = |reason: String| Error::Data { line, reason };
        let num = |c: usize| -> Result<u64> {
            row[c]
                .parse()
                .map_err(|_| err(format!("bad {} '{}'", HEADER[c], &row[c])))
        };
        let spec = ModelSpec::parse(&row[0])?;
        let precision: Precision = row[3].parse()?;
        let status = Status::parse(&row[4])?;
        let folds = unpack_folds(&row[20]).map_err(|e| err(e.to_string()))?;
        let agg = if folds.is_empty() {
            None
        } else {
            let m: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics).collect();
            Some(aggregate(&m)?)
        };
        if let Some(a) = agg {
            let stored: f64 = row[10]
                .parse()
                .map_err(|_| err("bad bal_acc_mean".into()))?;
            if (stored - a.bal_acc.0).abs() > 1e-12 {
                return Err(err("aggregate disagrees with fold entries".into()));
            }
        }
        out.push(ResultRecord {
            spec,
            precision,
            status,
            error: row[5].to_string(),
            seed: num(6)?,
            cost: CostReport {
                params: num(7)?,
                macs: num(8)?,
                size_bytes: num(9)?,
            },
            folds,
            aggregate: agg,
            config_digest: row[21].to_string(),
            seconds: 0.0,
        });
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<ResultRecord>> {
    read_records(File::open(path)?)
}

/// Timing side file next to the results CSV.
pub fn timing_path(results: &Path) -> PathBuf {
    results.with_extension("timing.csv")
}

struct Sink {
    results: Option<csv::Writer<File>>,
    timing: Option<File>,
}

impl Sink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                results: None,
                timing: None,
            });
        };
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            w.write_record(HEADER)?;
            w.flush()?;
        }
        let tp = timing_path(path);
        let fresh_t = !tp.exists();
        let mut t = OpenOptions::new().create(true).append(true).open(&tp)?;
        if fresh_t {
            writeln!(t, "spec,precision,seconds")?;
        }
        Ok(Self {
            results: Some(w),
            timing: Some(t),
        })
    }

    fn write(&mut self, r: &ResultRecord) -> Result<()> {
        if let Some(w) = &mut self.results {
            w.write_record(record_row(r))?;
            w.flush()?;
        }
        if let Some(t) = &mut self.timing {
            writeln!(t, "{},{},{:.3}", r.spec.render(), r.precision, r.seconds)?;
        }
        Ok(())
    }
}

/// Models trained on one fold.
#[derive(Debug)]
pub struct FoldTraining {
    pub float: Model<f32>,
    pub float_history: TrainHistory,
    /// Quantization-aware continuation of `float`, when requested.
    pub qat: Option<Result<(Model<f32>, TrainHistory)>>,
    pub norm: Normalization,
}

impl FoldTraining {
    fn duplicate(&self) -> Self {
        Self {
            float: self.float.clone(),
            float_history: self.float_history.clone(),
            qat: self.qat.as_ref().map(|r| match r {
                Ok(m) => Ok(m.clone()),
                Err(e) => Err(Error::Invalid(e.to_string())),
            }),
            norm: self.norm,
        }
    }

    fn relabel(mut self, spec: &ModelSpec) -> Self {
        self.float.spec = spec.clone();
        if let Some(Ok((m, _))) = &mut self.qat {
            m.spec = spec.clone();
        }
        self
    }
}

/// Float training on one fold, optionally followed by quantization-aware training.
///
/// Majority-voting specs train their per-frame network on single frames; the
/// returned models carry the original spec.
pub fn train_on_fold(
    spec: &ModelSpec,
    sessions: &[SessionRecord],
    fold: &Fold,
    seed: u64,
    float_cfg: &TrainConfig,
    qat_cfg: Option<&TrainConfig>,
) -> Result<FoldTraining> {
    let base = if spec.family == Family::Mv {
        spec.per_frame_spec()
    } else {
        spec.clone()
    };
    let data = fold_data(sessions, fold, base.window)?;
    let model = build_model::<f32>(&base, seed)?;
    let float_cfg = TrainConfig {
        seed,
        ..float_cfg.clone()
    };
    let (float, float_history) =
        train(&model, &data.train, &data.class_weights, &float_cfg, false)?;
    let qat = qat_cfg.map(|c| {
        let c = TrainConfig { seed, ..c.clone() };
        train(&float, &data.train, &data.class_weights, &c, true)
    });
    Ok(FoldTraining {
        float,
        float_history,
        qat,
        norm: data.norm,
    }
    .relabel(spec))
}

struct Context<'a> {
    sessions: &'a [SessionRecord],
    folds: Vec<Fold>,
    cfg: &'a ExploreConfig,
    /// Per-frame training by (single-frame spec, test session), shared with majority voting.
    cache: Mutex<HashMap<(String, u32), FoldTraining>>,
    digest: String,
}

impl Context<'_> {
    fn trained(&self, spec: &ModelSpec, fold: &Fold) -> Result<FoldTraining> {
        let base = if spec.family == Family::Mv {
            spec.per_frame_spec()
        } else {
            spec.clone()
        };
        let key = (base.render(), fold.test_session);
        let shared = base.family == Family::Sf;
        if shared {
            if let Some(t) = self.cache.lock().expect("cache lock").get(&key) {
                return Ok(t.duplicate().relabel(spec));
            }
        }
        let seed = model_seed(self.cfg.master_seed, &base);
        let qat = (self.cfg.quantize && base.family.supports_int8()).then_some(&self.cfg.qat);
        let t = train_on_fold(&base, self.sessions, fold, seed, &self.cfg.float, qat)?;
        if shared {
            self.cache
                .lock()
                .expect("cache lock")
                .insert(key, t.duplicate());
        }
        Ok(t.relabel(spec))
    }

    /// Float record plus the int8 twin (or nothing for float-only families).
    fn run_spec(&self, spec: &ModelSpec) -> Vec<ResultRecord> {
        let start = Instant::now();
        let base = if spec.family == Family::Mv {
            spec.per_frame_spec()
        } else {
            spec.clone()
        };
        let seed = model_seed(self.cfg.master_seed, &base);
        let want_int = self.cfg.quantize && spec.family.supports_int8();
        let mut float_folds = Vec::new();
        let mut int_folds: Result<Vec<FoldResult>> = Ok(Vec::new());
        for fold in &self.folds {
            let outcome = (|| -> Result<()> {
                let t = self.trained(spec, fold)?;
                let data = fold_data(self.sessions, fold, spec.window)?;
                float_folds.push(FoldResult {
                    test_session: fold.test_session,
                    metrics: evaluate(&t.float, &data.test)?,
                });
                if let (true, Some(q)) = (int_folds.is_ok(), t.qat) {
                    let m = q
                        .and_then(|(q, _)| export_int8(&q))
                        .and_then(|qm| evaluate_int(&qm, &data.test));
                    match m {
                        Ok(metrics) => int_folds.as_mut().expect("ok").push(FoldResult {
                            test_session: fold.test_session,
                            metrics,
                        }),
                        Err(e) => int_folds = Err(e),
                    }
                }
                Ok(())
            })();
            if let Err(e) = outcome {
                log::warn!("{spec}: {e}");
                let mut out = vec![ResultRecord::failed(
                    spec,
                    Precision::Float,
                    seed,
                    &self.digest,
                    e.to_string(),
                )];
                if want_int {
                    out.push(ResultRecord::failed(
                        spec,
                        Precision::Int8,
                        seed,
                        &self.digest,
                        e.to_string(),
                    ));
                }
                return out;
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let finish = |precision: Precision, status: Status, folds: Vec<FoldResult>| {
            let metrics: Vec<FoldMetrics> = folds.iter().map(|f| f.metrics).collect();
            match (cost_report(spec, precision), aggregate(&metrics)) {
                (Ok(cost), Ok(agg)) => ResultRecord {
                    spec: spec.clone(),
                    precision,
                    status,
                    error: String::new(),
                    seed,
                    cost,
                    folds,
                    aggregate: Some(agg),
                    config_digest: self.digest.clone(),
                    seconds,
                },
                (Err(e), _) | (_, Err(e)) => {
                    ResultRecord::failed(spec, precision, seed, &self.digest, e.to_string())
                }
            }
        };
        let float_status = if spec.family.supports_int8() {
            Status::Ok
        } else {
            Status::FloatOnly
        };
        let mut out = vec![finish(Precision::Float, float_status, float_folds)];
        if want_int {
            out.push(match int_folds {
                Ok(f) => finish(Precision::Int8, Status::Ok, f),
                Err(e) => {
                    ResultRecord::failed(spec, Precision::Int8, seed, &self.digest, e.to_string())
                }
            });
        }
        out
    }
}

fn expected_precisions(spec: &ModelSpec, cfg: &ExploreConfig) -> Vec<Precision> {
    if cfg.quantize && spec.family.supports_int8() {
        vec![Precision::Float, Precision::Int8]
    } else {
        vec![Precision::Float]
    }
}

/// Trains and evaluates every spec of the requested families on all folds.
///
/// Dependent families (mv, cat, lstm, tcn) imply the single-frame stage. With a
/// results path, rows are appended as soon as a spec finishes and specs already
/// present are not retrained. Returned records follow enumeration order.
pub fn run_grid(
    families: &[Family],
    sessions: &[SessionRecord],
    cfg: &ExploreConfig,
    results: Option<&Path>,
) -> Result<Vec<ResultRecord>> {
    if cfg.jobs == 0 {
        return Err(Error::Invalid("jobs must be at least 1".into()));
    }
    let folds = make_folds(sessions)?;
    let mut existing: HashMap<(String, Precision), ResultRecord> = HashMap::new();
    if let Some(p) = results {
        if p.exists() && std::fs::metadata(p)?.len() > 0 {
            for r in load_records(p)? {
                existing.insert(r.key(), r);
            }
        }
    }
    let sink = Mutex::new(Sink::open(results)?);
    let ctx = Context {
        sessions,
        folds,
        cfg,
        cache: Mutex::new(HashMap::new()),
        digest: config_digest(&cfg.canonical()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;

    let requested: BTreeSet<Family> = families.iter().copied().collect();
    let dependent = [Family::Mv, Family::Cat, Family::Lstm, Family::Tcn];
    let needs_sf =
        requested.contains(&Family::Sf) || dependent.iter().any(|f| requested.contains(f));
    let mut all = Vec::new();

    let mut run_stage = |specs: Vec<ModelSpec>, all: &mut Vec<ResultRecord>| -> Result<()> {
        let todo: Vec<&ModelSpec> = specs
            .iter()
            .filter(|s| {
                expected_precisions(s, cfg)
                    .into_iter()
                    .any(|p| !existing.contains_key(&(s.render(), p)))
            })
            .collect();
        log::info!("{} specs, {} to train", specs.len(), todo.len());
        let fresh: Vec<ResultRecord> = pool
            .install(|| {
                todo.par_iter()
                    .map(|s| {
                        let recs = ctx.run_spec(s);
                        let mut sink = sink.lock().expect("sink lock");
                        for r in &recs {
                            if !existing.contains_key(&r.key()) {
                                sink.write(r)?;
                            }
                        }
                        Ok(recs)
                    })
                    .collect::<Result<Vec<_>>>()
            })?
            .into_iter()
            .flatten()
            .collect();
        for r in fresh {
            existing.entry(r.key()).or_insert(r);
        }
        for s in &specs {
            for p in expected_precisions(s, cfg) {
                if let Some(r) = existing.get(&(s.render(), p)) {
                    all.push(r.clone());
                }
            }
        }
        Ok(())
    };

    let mut sf_records = Vec::new();
    if needs_sf {
        run_stage(
            enumerate_family(Family::Sf, &cfg.grid, &[])?,
            &mut sf_records,
        )?;
        if requested.contains(&Family::Sf) {
            all.extend(sf_records.iter().cloned());
        }
    }
    if requested.contains(&Family::Mc) {
        run_stage(enumerate_family(Family::Mc, &cfg.grid, &[])?, &mut all)?;
    }
    if dependent.iter().any(|f| requested.contains(f)) {
        let bases = sf_front_specs(&sf_records, cfg.rule)?;
        log::info!(
            "{} Pareto single-frame models, {} extractors",
            bases.len(),
            select_extractors(&sf_records, cfg.rule)?.len()
        );
        for fam in dependent.into_iter().filter(|f| requested.contains(f)) {
            run_stage(enumerate_family(fam, &cfg.grid, &bases)?, &mut all)?;
        }
    }
    Ok(all)
}
