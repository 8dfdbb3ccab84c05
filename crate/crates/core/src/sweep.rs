//! Scaling-study orchestration: sweep definitions, the append-only run
//! registry, and CSV/SVG reports with monotone-trend summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetManifest, Sample};
use crate::error::{bail, Error, Result};
use crate::eval::{eval_splits, evaluate, EvalConfig, ExtractorConfig, FeatureExtractor, MetricsRecord, ReferenceExtractor};
use crate::genharness::{train_and_score, DatasetSource, DiTConfig, SampleSource};
use crate::model::{count_params, EncoderTier, ModelConfig};
use crate::trainer::{pretrain_step_flops, Objectives, TrainConfig, Trainer};

pub const SWEEP_SCHEMA_VERSION: u32 = 1;
pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Pre-training FLOPs budget.
    Compute,
    /// Synthetic dataset size.
    Data,
    /// Encoder tier (`S`, `B`, `L`).
    Encoder,
    /// Decoder block count.
    Decoder,
    /// Objective set such as `clip+ssl+ae`.
    Objective,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Compute => "compute",
            Axis::Data => "data",
            Axis::Encoder => "encoder",
            Axis::Decoder => "decoder",
            Axis::Objective => "objective",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| Error::Config(format!("unknown sweep axis {s:?}")))
    }

    fn is_numeric(self) -> bool {
        matches!(self, Axis::Compute | Axis::Data | Axis::Decoder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Text(String),
}

impl AxisValue {
    fn number(&self) -> Result<f64> {
        match self {
            AxisValue::Number(v) => Ok(*v),
            AxisValue::Text(s) => s.parse().map_err(|_| Error::Config(format!("axis value {s:?} is not a number"))),
        }
    }

    fn count(&self) -> Result<usize> {
        let v = self.number()?;
        if v < 1.0 || v.fract() != 0.0 {
            bail!(Config, "axis value {v} must be a positive integer");
        }
        Ok(v as usize)
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Number(v) if v.fract() == 0.0 && v.abs() < 1e15 => write!(f, "{}", *v as i64),
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Text(s) => f.write_str(s),
        }
    }
}

/// Fixed measurement protocol shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSpec {
    pub dit: DiTConfig,
    pub extractor: ExtractorConfig,
    pub eval: EvalConfig,
    /// Data for the extractor, the DiT training latents and the real
    /// reference images; independent of the swept dataset.
    pub dataset: DatasetManifest,
}

impl Default for HarnessSpec {
    fn default() -> Self {
        Self {
            dit: DiTConfig::default(),
            extractor: ExtractorConfig::default(),
            eval: EvalConfig::default(),
            dataset: DatasetManifest::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub name: String,
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
    pub harness: HarnessSpec,
    pub seeds: Vec<u64>,
    /// Pre-training FLOPs per point; overrides `train.total_samples` so that
    /// every point spends the same compute. Set by the compute axis itself.
    pub flops_budget: Option<u64>,
    /// Concurrent points; 1 runs sequentially.
    pub jobs: usize,
    pub save_checkpoints: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            schema_version: SWEEP_SCHEMA_VERSION,
            name: "objective-ablation".into(),
            axis: Axis::Objective,
            values: ["ae", "clip+ae", "ssl+ae", "clip+ssl+ae"].iter().map(|s| AxisValue::Text(s.to_string())).collect(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetManifest::default(),
            harness: HarnessSpec::default(),
            seeds: vec![0, 1, 2],
            flops_budget: None,
            jobs: 1,
            save_checkpoints: false,
        }
    }
}

/// One resolved grid point × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub point_id: String,
    pub axis: Axis,
    pub axis_value: String,
    pub axis_position: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SWEEP_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                expected: SWEEP_SCHEMA_VERSION,
            });
        }
        if self.values.is_empty() || self.seeds.is_empty() {
            bail!(Config, "sweep needs at least one axis value and one seed");
        }
        if self.jobs == 0 {
            bail!(Config, "jobs must be at least 1");
        }
        let labels: BTreeSet<String> = self.values.iter().map(|v| v.to_string()).collect();
        if labels.len() != self.values.len() {
            bail!(Config, "duplicate axis values");
        }
        self.harness.dit.validate()?;
        for p in self.points()? {
            let dit = &self.harness.dit;
            if p.model.latent_dim != dit.latent_channels || p.model.grid_side() != dit.latent_grid {
                bail!(
                    Config,
                    "point {} latents [{}, {g}, {g}] do not match the DiT harness [{}, {h}, {h}]",
                    p.axis_value,
                    p.model.latent_dim,
                    dit.latent_channels,
                    g = p.model.grid_side(),
                    h = dit.latent_grid
                );
            }
        }
        Ok(())
    }

    fn resolve(&self, value: &AxisValue, position: usize, seed: u64) -> Result<SweepPoint> {
        let mut model = self.model.clone();
        let mut train = self.train.clone();
        let mut dataset = self.dataset.clone();
        let mut budget = self.flops_budget;
        train.seed = seed;
        match self.axis {
            Axis::Compute => budget = Some(value.number()? as u64),
            Axis::Data => dataset = dataset.with_size(value.count()?)?,
            Axis::Encoder => model = model.with_encoder_tier(EncoderTier::parse(&value.to_string())?),
            Axis::Decoder => model.decoder_blocks = value.count()?,
            Axis::Objective => train.objectives = Objectives::parse(&value.to_string())?,
        }
        if let Some(b) = budget {
            let steps = (b / pretrain_step_flops(&model, &train).max(1)).max(1);
            train.total_samples = steps * train.batch as u64;
        }
        model.validate()?;
        train.validate()?;
        let id_doc = serde_json::json!({
            "schema": SWEEP_SCHEMA_VERSION,
            "axis": self.axis,
            "value": value.to_string(),
            "seed": seed,
            "model": model,
            "train": train,
            "dataset": dataset,
            "harness": self.harness,
        });
        let point_id = hex::encode(Sha256::digest(serde_json::to_vec(&id_doc)?))[..16].to_string();
        Ok(SweepPoint {
            point_id,
            axis: self.axis,
            axis_value: value.to_string(),
            axis_position: position,
            seed,
            model,
            train,
            dataset,
        })
    }

    /// Every grid point × seed, in axis-major order.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let mut out = Vec::new();
        for (i, v) in self.values.iter().enumerate() {
            for &s in &self.seeds {
                out.push(self.resolve(v, i, s)?);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Records and registry

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub point_id: String,
    pub sweep: String,
    pub axis: Axis,
    pub axis_value: String,
    pub axis_position: usize,
    pub seed: u64,
    pub objectives: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
    pub dit: DiTConfig,
    pub dit_hash: String,
    pub extractor_hash: String,
    pub tokenizer_hash: Option<String>,
    /// Cumulative tokenizer pre-training FLOPs.
    pub flops: u64,
    pub params: u64,
    pub status: RunStatus,
    pub metrics: Option<MetricsRecord>,
    pub rf_loss_init: Option<f64>,
    pub rf_loss_final: Option<f64>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok && self.metrics.is_some()
    }

    fn metric(&self, m: Metric) -> Option<f64> {
        let r = self.metrics.as_ref()?;
        match m {
            Metric::FrechetGen => r.frechet_gen,
            Metric::Linprobe => Some(r.linprobe_acc),
            Metric::Psnr => Some(r.psnr_mean),
            Metric::FrechetRec => Some(r.frechet_rec),
            Metric::Zeroshot => Some(r.zeroshot_acc),
        }
    }
}

pub const RECORDS_DIR: &str = "records";
pub const FAILED_DIR: &str = "failed";
pub const LOCK_FILE: &str = "registry.lock";
const LOCK_TIMEOUT: Duration = Duration::from_secs(300);

/// Append-only directory of JSON run records. Successful records live in
/// `records/<point_id>.json`; failures go to `failed/` so a later run may retry.
#[derive(Debug, Clone)]
pub struct Registry {
    pub root: PathBuf,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

impl Registry {
    /// Read-only handle; nothing is created until a record is written.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn lock(&self) -> Result<LockGuard> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(LOCK_FILE);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = write!(f, "{}", std::process::id());
                    return Ok(LockGuard(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_TIMEOUT {
                        bail!(Registry, "timed out waiting for {}", path.display());
                    }
                    std::thread::sleep(Duration::from_millis(25));
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.root.join(RECORDS_DIR).join(format!("{id}.json"))
    }

    pub fn contains(&self, point_id: &str) -> bool {
        self.record_path(point_id).exists()
    }

    /// Writes a new record. An existing id is never overwritten: the call
    /// fails unless `force_new_id`, which stores the record under the first
    /// free `<id>-rN`. Failed runs are kept apart from completed ones.
    pub fn insert(&self, record: &mut RunRecord, force_new_id: bool) -> Result<PathBuf> {
        let _guard = self.lock()?;
        let dir = self.root.join(if record.is_ok() { RECORDS_DIR } else { FAILED_DIR });
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let base = record.point_id.clone();
        let mut id = base.clone();
        let mut k = 1;
        while dir.join(format!("{id}.json")).exists() {
            if record.is_ok() && !force_new_id {
                bail!(Registry, "record {id} already exists; pass --force-new-id to store a repaired run under a new id");
            }
            id = format!("{base}-r{k}");
            k += 1;
        }
        record.point_id = id.clone();
        let path = dir.join(format!("{id}.json"));
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(serde_json::to_string_pretty(record)?.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Completed records, ordered by id.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let dir = self.root.join(RECORDS_DIR);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort_by(|a, b| a.file_stem().cmp(&b.file_stem()));
        paths
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let r: RunRecord = serde_json::from_str(&text)?;
                if r.schema_version != RECORD_SCHEMA_VERSION {
                    return Err(Error::Version {
                        found: r.schema_version,
                        expected: RECORD_SCHEMA_VERSION,
                    });
                }
                Ok(r)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Running

/// Pinned measurement state built once per sweep.
pub struct Harness {
    pub spec: HarnessSpec,
    pub extractor: Box<dyn FeatureExtractor + Send + Sync>,
    pub dataset: Dataset,
    pub real: Vec<Sample>,
}

impl Harness {
    /// Loads the cached reference extractor (training it on a miss) and the
    /// real reference images.
    pub fn prepare(spec: &HarnessSpec, cache_dir: &Path) -> Result<Self> {
        let dataset = spec.dataset.open()?;
        let key = serde_json::to_string(&spec.dataset)?;
        let extractor = ReferenceExtractor::load_or_train(cache_dir, &spec.extractor, &key, &dataset)?;
        Self::with_extractor(spec, Box::new(extractor))
    }

    pub fn with_extractor(spec: &HarnessSpec, extractor: Box<dyn FeatureExtractor + Send + Sync>) -> Result<Self> {
        let dataset = spec.dataset.open()?;
        if dataset.num_classes() != spec.dit.num_classes {
            bail!(Config, "harness dataset has {} classes, DiT expects {}", dataset.num_classes(), spec.dit.num_classes);
        }
        let (real, _, _) = eval_splits(&dataset, &spec.eval)?;
        Ok(Self {
            spec: spec.clone(),
            extractor,
            dataset,
            real,
        })
    }

    /// Scores a trained tokenizer; fills the generation fields of `metrics`.
    pub fn score(&self, trainer: &Trainer, metrics: &mut MetricsRecord) -> Result<(f64, f64)> {
        let train = DatasetSource::prefix(&self.dataset, self.spec.dit.train_images);
        let rec = train_and_score(&trainer.model, &train, &SampleSource(&self.real), &self.spec.dit, self.extractor.as_ref())?;
        metrics.frechet_gen = Some(rec.frechet_gen);
        metrics.frechet_gen_samples = Some(rec.num_samples);
        metrics.dit_hash = Some(rec.dit_hash);
        Ok((rec.rf_loss_init, rec.rf_loss_final))
    }
}

/// Pre-trains, evaluates and scores one point.
pub fn run_point(spec: &SweepSpec, point: &SweepPoint, harness: &Harness, checkpoint_dir: Option<&Path>) -> RunRecord {
    let start = Instant::now();
    let mut record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        point_id: point.point_id.clone(),
        sweep: spec.name.clone(),
        axis: point.axis,
        axis_value: point.axis_value.clone(),
        axis_position: point.axis_position,
        seed: point.seed,
        objectives: point.train.objectives.label(),
        model: point.model.clone(),
        train: point.train.clone(),
        dataset: point.dataset.clone(),
        dit: harness.spec.dit.clone(),
        dit_hash: harness.spec.dit.hash(),
        extractor_hash: harness.extractor.hash(),
        tokenizer_hash: None,
        flops: 0,
        params: count_params(&point.model),
        status: RunStatus::Ok,
        metrics: None,
        rf_loss_init: None,
        rf_loss_final: None,
        wall_clock_s: 0.0,
    };
    let outcome = (|| -> Result<()> {
        let mut trainer = Trainer::new(point.model.clone(), point.train.clone(), point.dataset.clone())?;
        let total = trainer.total_steps();
        trainer.run(total, None, None)?;
        record.flops = trainer.state.flops_cum;
        if let Some(dir) = checkpoint_dir {
            trainer.save(&dir.join(&point.point_id))?;
        }
        let mut metrics = evaluate(&trainer.model, &trainer.vocab, &trainer.dataset, harness.extractor.as_ref(), &harness.spec.eval)?;
        let (init, fin) = harness.score(&trainer, &mut metrics)?;
        record.tokenizer_hash = Some(metrics.tokenizer_hash.clone());
        record.rf_loss_init = Some(init);
        record.rf_loss_final = Some(fin);
        record.metrics = Some(metrics);
        Ok(())
    })();
    if let Err(e) = outcome {
        log::error!("point {} ({}={}, seed {}) failed: {e}", point.point_id, point.axis.name(), point.axis_value, point.seed);
        record.status = RunStatus::Failed { error: e.to_string() };
        record.metrics = None;
    }
    record.wall_clock_s = start.elapsed().as_secs_f64();
    record
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannedJob {
    pub point_id: String,
    pub axis_value: String,
    pub seed: u64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub dry_run: bool,
    pub force_new_id: bool,
    /// Overrides `SweepSpec::jobs`.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub plan: Vec<PlannedJob>,
    /// Records written by this invocation, failures included.
    pub new_records: Vec<RunRecord>,
}

/// Job list against the registry's current contents; performs no writes.
pub fn plan_sweep(spec: &SweepSpec, registry: &Registry) -> Result<Vec<PlannedJob>> {
    spec.validate()?;
    Ok(spec
        .points()?
        .into_iter()
        .map(|p| PlannedJob {
            done: registry.contains(&p.point_id),
            point_id: p.point_id,
            axis_value: p.axis_value,
            seed: p.seed,
        })
        .collect())
}

/// Runs every point not yet in the registry (every point with
/// `force_new_id`). Failed points are recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, registry: &Registry, opts: &SweepOptions) -> Result<SweepOutcome> {
    let plan = plan_sweep(spec, registry)?;
    if opts.dry_run {
        return Ok(SweepOutcome { plan, new_records: Vec::new() });
    }
    let harness = Harness::prepare(&spec.harness, &registry.root.join("cache"))?;
    run_sweep_with(spec, registry, opts, &harness).map(|new_records| SweepOutcome { plan, new_records })
}

/// As [`run_sweep`] with a prepared harness.
pub fn run_sweep_with(spec: &SweepSpec, registry: &Registry, opts: &SweepOptions, harness: &Harness) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    if harness.spec != spec.harness {
        bail!(Incomparable, "prepared harness differs from the sweep's harness");
    }
    let points: Vec<SweepPoint> = spec.points()?.into_iter().filter(|p| opts.force_new_id || !registry.contains(&p.point_id)).collect();
    let ckpt = spec.save_checkpoints.then(|| registry.root.join("checkpoints"));
    let jobs = opts.jobs.unwrap_or(spec.jobs).max(1).min(points.len().max(1));
    let queue = Mutex::new(points.iter());
    let written = Mutex::new(Vec::new());
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let Some(p) = queue.lock().expect("queue lock").next() else { break };
                log::info!("sweep {}: {}={} seed {} ({})", spec.name, p.axis.name(), p.axis_value, p.seed, p.point_id);
                let mut rec = run_point(spec, p, harness, ckpt.as_deref());
                match registry.insert(&mut rec, opts.force_new_id) {
                    Ok(_) => written.lock().expect("records lock").push(rec),
                    Err(e) => {
                        first_err.lock().expect("error lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut out = written.into_inner().expect("records lock");
    out.sort_by(|a, b| (a.axis_position, a.seed).cmp(&(b.axis_position, b.seed)));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reporting

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FrechetGen,
    Linprobe,
    Psnr,
    FrechetRec,
    Zeroshot,
}

impl Metric {
    pub const PLOTTED: [Metric; 3] = [Metric::FrechetGen, Metric::Linprobe, Metric::Psnr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::FrechetGen => "frechet_gen",
            Metric::Linprobe => "linprobe",
            Metric::Psnr => "psnr",
            Metric::FrechetRec => "frechet_rec",
            Metric::Zeroshot => "zeroshot",
        }
    }
}

/// Ranks with ties sharing their mean rank (1-based).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` with fewer than 3 points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

/// Refuses a record set spanning more than one (DiT, extractor) hash pair.
pub fn check_hashes(records: &[RunRecord]) -> Result<(String, String)> {
    let Some(first) = records.first() else {
        bail!(InvalidArgument, "no records");
    };
    let mut dit: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut ex: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        let d = r.metrics.as_ref().and_then(|m| m.dit_hash.as_deref()).unwrap_or(&r.dit_hash);
        dit.entry(d).or_default().push(&r.point_id);
        ex.entry(&r.extractor_hash).or_default().push(&r.point_id);
    }
    let describe = |kind: &str, m: &BTreeMap<&str, Vec<&str>>| {
        let parts: Vec<String> = m.iter().map(|(h, ids)| format!("{h} ← [{}]", ids.join(", "))).collect();
        format!("mixed {kind} hashes: {}", parts.join("; "))
    };
    let mut problems = Vec::new();
    if dit.len() > 1 {
        problems.push(describe("DiT", &dit));
    }
    if ex.len() > 1 {
        problems.push(describe("extractor", &ex));
    }
    if !problems.is_empty() {
        return Err(Error::Incomparable(problems.join(" | ")));
    }
    Ok((first.dit_hash.clone(), first.extractor_hash.clone()))
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Correlation {
    Value(f64),
    NotApplicable(&'static str),
}

impl From<Option<f64>> for Correlation {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Correlation::NotApplicable("n/a"), Correlation::Value)
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Value(v) => write!(f, "{v:.3}"),
            Correlation::NotApplicable(s) => f.write_str(s),
        }
    }
}

/// Seed-median values at one axis position.
#[derive(Debug, Clone, Serialize)]
pub struct LinePoint {
    pub x: f64,
    pub axis_value: String,
    pub seeds: usize,
    pub values: BTreeMap<&'static str, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Line {
    pub label: String,
    pub points: Vec<LinePoint>,
    pub spearman: BTreeMap<&'static str, Correlation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub axis: Axis,
    pub dit_hash: String,
    pub extractor_hash: String,
    pub records: usize,
    pub lines: Vec<Line>,
    pub files: Vec<PathBuf>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "point_id",
    "axis_value",
    "objectives",
    "flops",
    "params",
    "psnr",
    "frechet_rec",
    "linprobe",
    "zeroshot",
    "frechet_gen",
    "seed",
];

fn axis_x(r: &RunRecord) -> f64 {
    if r.axis.is_numeric() {
        AxisValue::Text(r.axis_value.clone()).number().unwrap_or(r.axis_position as f64)
    } else {
        r.axis_position as f64
    }
}

/// Groups records into lines (one per objective set; a single line on the
/// objective axis) with seed medians and per-metric Spearman correlations
/// against the axis.
pub fn summarize(records: &[RunRecord]) -> Vec<Line> {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let label = if r.axis == Axis::Objective { "objectives".to_string() } else { r.objectives.clone() };
        groups.entry(label).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(label, rs)| {
            let mut by_x: BTreeMap<(u64, String), Vec<&RunRecord>> = BTreeMap::new();
            for r in rs {
                by_x.entry((axis_x(r).to_bits(), r.axis_value.clone())).or_default().push(r);
            }
            let mut points: Vec<LinePoint> = by_x
                .into_iter()
                .map(|((xb, value), rs)| {
                    let mut values = BTreeMap::new();
                    for m in [Metric::FrechetGen, Metric::Linprobe, Metric::Psnr, Metric::FrechetRec, Metric::Zeroshot] {
                        let v: Vec<f64> = rs.iter().filter_map(|r| r.metric(m)).collect();
                        if let Some(med) = median(&v) {
                            values.insert(m.name(), med);
                        }
                    }
                    LinePoint {
                        x: f64::from_bits(xb),
                        axis_value: value,
                        seeds: rs.len(),
                        values,
                    }
                })
                .collect();
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            let spearman = Metric::PLOTTED
                .iter()
                .map(|&m| {
                    let pairs: Vec<(f64, f64)> = points.iter().filter_map(|p| p.values.get(m.name()).map(|&v| (p.x, v))).collect();
                    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                    (m.name(), Correlation::from(spearman(&x, &y)))
                })
                .collect();
            Line { label, points, spearman }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn write_csv(path: &Path, records: &[RunRecord], hashes: &(String, String)) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# dit_hash={} extractor_hash={}", hashes.0, hashes.1).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.point_id.clone(),
            r.axis_value.clone(),
            r.objectives.clone(),
            r.flops.to_string(),
            r.params.to_string(),
            fmt_opt(r.metric(Metric::Psnr)),
            fmt_opt(r.metric(Metric::FrechetRec)),
            fmt_opt(r.metric(Metric::Linprobe)),
            fmt_opt(r.metric(Metric::Zeroshot)),
            fmt_opt(r.metric(Metric::FrechetGen)),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn plot(path: &Path, axis: Axis, metric: Metric, lines: &[Line], hashes: &(String, String)) -> Result<()> {
    use plotters::prelude::*;
    let plot_err = |e: &dyn fmt::Display| Error::Plot(e.to_string());
    let pts: Vec<(f64, f64)> = lines
        .iter()
        .flat_map(|l| l.points.iter().filter_map(|p| p.values.get(metric.name()).map(|&v| (p.x, v))))
        .collect();
    if pts.is_empty() {
        bail!(Plot, "no {} values to plot", metric.name());
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { (hi - lo) * 0.08 } else { lo.abs().max(1.0) * 0.1 };
        (lo - d)..(hi + d)
    };
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let caption = format!("{} vs {} (dit {}, extractor {})", metric.name(), axis.name(), &hashes.0[..8.min(hashes.0.len())], &hashes.1[..8.min(hashes.1.len())]);
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(pad(xmin, xmax), pad(ymin, ymax))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc(axis.name())
        .y_desc(metric.name())
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, line) in lines.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let data: Vec<(f64, f64)> = line.points.iter().filter_map(|p| p.values.get(metric.name()).map(|&v| (p.x, v))).collect();
        let label = format!("{} (ρ={})", line.label, line.spearman.get(metric.name()).map(|c| c.to_string()).unwrap_or_else(|| "n/a".into()));
        chart
            .draw_series(LineSeries::new(data.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(data.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Writes `<axis>.csv`, one SVG per plotted metric and `<axis>-summary.json`
/// for the completed records on `axis`.
pub fn report(records: &[RunRecord], axis: Axis, out_dir: &Path) -> Result<ReportSummary> {
    let on_axis: Vec<RunRecord> = records.iter().filter(|r| r.axis == axis && r.is_ok()).cloned().collect();
    if on_axis.len() < 2 {
        bail!(InvalidArgument, "report on the {} axis needs at least 2 completed records, found {}", axis.name(), on_axis.len());
    }
    let hashes = check_hashes(&on_axis)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let lines = summarize(&on_axis);
    let mut files = Vec::new();
    let csv_path = out_dir.join(format!("{}.csv", axis.name()));
    write_csv(&csv_path, &on_axis, &hashes)?;
    files.push(csv_path);
    for m in Metric::PLOTTED {
        if on_axis.iter().any(|r| r.metric(m).is_some()) {
            let p = out_dir.join(format!("{}-{}.svg", axis.name(), m.name()));
            plot(&p, axis, m, &lines, &hashes)?;
            files.push(p);
        }
    }
    let summary_path = out_dir.join(format!("{}-summary.json", axis.name()));
    files.push(summary_path.clone());
    let summary = ReportSummary {
        axis,
        dit_hash: hashes.0,
        extractor_hash: hashes.1,
        records: on_axis.len(),
        lines,
        files,
    };
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}
