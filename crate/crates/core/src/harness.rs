//! Experiment plumbing: the JSON configuration, the four commands
//! (generate-data, train, evaluate, sweep) and their CSV / JSON-lines
//! outputs.
//!
//! Every command is deterministic given its configuration; only the timing
//! columns (`ms_per_step`, plan latency) vary between runs. When
//! `evaluation.ms_per_step` pins a method's step cost, the diffusion step
//! count derived from the time budget is deterministic as well.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{self, DemoSet, ExpertParams, GenerationStats, Style};
use crate::diffusion::schedule::COSINE_OFFSET;
use crate::diffusion::{
    train, Architecture, Model, NoiseSchedule, Normalizer, Optimizer, ScheduleParams, ScoreNetwork, TrainConfig,
    TrainSample,
};
use crate::error::{Error, Result};
use crate::kinematics::ArmSpec;
use crate::sampling::{self, Condition, Method, SampleDiagnostics, SamplerConfig};
use crate::sim::{self, DiffusionPlanner, EpisodeOptions, EpisodeResult, Planner, PuckState, TableSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// z-score of a two-sided 95% interval.
const Z95: f64 = 1.959_963_984_540_054;

/// Sub-seed tags; each consumer gets an independent seed derived from the
/// configured master seed.
mod tag {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EPISODES: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const CALIBRATION: u64 = 6;
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).rotate_left(17)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub dataset_path: PathBuf,
    pub model_path: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub arm: ArmSpec,
    #[serde(default)]
    pub table: TableSpec,
    #[serde(default)]
    pub episode: EpisodeOptions,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub demos_per_style: usize,
    pub expert: ExpertParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            demos_per_style: 50,
            expert: ExpertParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub diffusion_steps: usize,
    pub hidden_width: usize,
    pub blocks: usize,
    pub time_embedding: usize,
    pub condition_embedding: usize,
    /// Extra headroom around the data range when fitting the normalizer.
    pub normalizer_margin: f64,
    /// Train on the first `n` demonstrations only.
    pub demo_limit: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub cosine_decay: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = Architecture::new(1, &[]);
        TrainSection {
            diffusion_steps: 100,
            hidden_width: a.hidden_width,
            blocks: a.blocks,
            time_embedding: a.time_embedding,
            condition_embedding: a.condition_embedding,
            normalizer_margin: 0.05,
            demo_limit: None,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            cosine_decay: t.cosine_decay,
            optimizer: t.optimizer,
        }
    }
}

/// One row of an evaluation: a sampler method plus its filter and
/// guidance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub method: Method,
    #[serde(default = "yes")]
    pub batch_filter: bool,
    #[serde(default = "unit")]
    pub guidance_scale: f64,
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

impl MethodSpec {
    pub fn new(name: &str, method: Method, batch_filter: bool) -> Self {
        MethodSpec {
            name: name.into(),
            method,
            batch_filter,
            guidance_scale: if method.is_guided() { 1.0 } else { 0.0 },
        }
    }

    /// The four rows of the defend comparison.
    pub fn standard() -> Vec<MethodSpec> {
        vec![
            MethodSpec::new("unconstrained_no_filter", Method::Unconstrained, false),
            MethodSpec::new("unconstrained", Method::Unconstrained, true),
            MethodSpec::new("projection", Method::Projection, true),
            MethodSpec::new("kcgg", Method::Kcgg, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub budget_ms: f64,
    pub batch_size: usize,
    /// Style label to condition on, or `"none"` for the label marginal.
    pub condition: String,
    pub clip_denoised: bool,
    pub methods: Vec<MethodSpec>,
    /// Pinned per-step cost (ms) by method row name. Rows without an entry
    /// are calibrated by timing a few warm-up plans.
    pub ms_per_step: BTreeMap<String, f64>,
    pub calibration_episodes: usize,
    /// Steps used while calibrating.
    pub calibration_steps: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            episodes: 200,
            budget_ms: 200.0,
            batch_size: 8,
            condition: sampling::UNCONDITIONED.into(),
            clip_denoised: true,
            methods: MethodSpec::standard(),
            ms_per_step: BTreeMap::new(),
            calibration_episodes: 8,
            calibration_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub budgets_ms: Vec<f64>,
    /// Evaluation rows (by name) included in the sweep.
    pub methods: Vec<String>,
    /// Episode count; defaults to the evaluation's.
    pub episodes: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            budgets_ms: vec![50.0, 100.0, 150.0, 200.0, 300.0],
            methods: vec!["unconstrained".into(), "projection".into(), "kcgg".into()],
            episodes: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for everything but the paths.
    pub fn with_paths(dataset: impl Into<PathBuf>, model: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset_path: dataset.into(),
            model_path: model.into(),
            output_dir: output.into(),
            arm: ArmSpec::default(),
            table: TableSpec::default(),
            episode: EpisodeOptions::default(),
            data: DataConfig::default(),
            train: TrainSection::default(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset_path, &mut cfg.model_path, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.arm.validate()?;
        self.table.validate()?;
        if self.episode.horizon == 0 || !(self.episode.dt > 0.0) || !(self.episode.constraint_weight >= 0.0) {
            return Err(Error::Config("episode horizon, dt and constraint weight must be positive".into()));
        }
        if self.data.demos_per_style == 0 {
            return Err(Error::Config("data.demos_per_style must be positive".into()));
        }
        let t = &self.train;
        if t.diffusion_steps < 2 || t.epochs == 0 || t.batch_size == 0 || !(t.learning_rate > 0.0) {
            return Err(Error::Config(
                "train needs ≥2 diffusion steps and positive epochs, batch size and learning rate".into(),
            ));
        }
        if t.demo_limit == Some(0) {
            return Err(Error::Config("train.demo_limit must be positive".into()));
        }
        let e = &self.evaluation;
        if e.episodes == 0 || e.batch_size == 0 || !(e.budget_ms > 0.0) {
            return Err(Error::Config("evaluation needs positive episodes, batch size and budget".into()));
        }
        if e.calibration_steps < 2 {
            return Err(Error::Config("evaluation.calibration_steps must be at least 2".into()));
        }
        if e.methods.is_empty() {
            return Err(Error::Config("evaluation.methods is empty".into()));
        }
        for (k, m) in e.methods.iter().enumerate() {
            if e.methods[..k].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("method row {:?} repeated", m.name)));
            }
            if !(m.guidance_scale >= 0.0) {
                return Err(Error::Config(format!("method {:?}: guidance scale must be ≥ 0", m.name)));
            }
        }
        for (name, ms) in &e.ms_per_step {
            if !e.methods.iter().any(|m| &m.name == name) {
                return Err(Error::Config(format!("ms_per_step names unknown method {name:?}")));
            }
            if !(*ms > 0.0) {
                return Err(Error::Config(format!("ms_per_step for {name:?} must be positive")));
            }
        }
        if self.sweep.budgets_ms.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("sweep budgets must be positive".into()));
        }
        for name in &self.sweep.methods {
            if !e.methods.iter().any(|m| &m.name == name) {
                return Err(Error::Config(format!("sweep names unknown method {name:?}")));
            }
        }
        if self.sweep.episodes == Some(0) {
            return Err(Error::Config("sweep.episodes must be positive".into()));
        }
        Ok(())
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Wilson score interval for `successes` out of `trials` at 95%.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // exact at the boundaries, where rounding can leave p just outside
    ((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0))
}

// ---------------------------------------------------------------- generate

pub fn cmd_generate_data(cfg: &ExperimentConfig) -> Result<(DemoSet, GenerationStats)> {
    cfg.validate()?;
    let (set, stats) = demos::generate_dataset(
        &cfg.table,
        &cfg.arm,
        &cfg.data.expert,
        &cfg.episode,
        cfg.data.demos_per_style,
        derive_seed(cfg.seed, tag::DATA),
    )?;
    create_parent(&cfg.dataset_path)?;
    set.save(&cfg.dataset_path)?;
    info!(
        "wrote {} demos to {} ({} of {} launches rejected)",
        set.demos.len(),
        cfg.dataset_path.display(),
        stats.rejected,
        stats.attempts
    );
    Ok((set, stats))
}

// ------------------------------------------------------------------- train

pub struct TrainOutput {
    pub model: Model,
    pub curve: Vec<f64>,
    pub loss_csv: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    require_file(&cfg.dataset_path, "dataset")?;
    let set = DemoSet::load(&cfg.dataset_path)?;
    if set.arm != cfg.arm || set.horizon != cfg.episode.horizon || set.dt != cfg.episode.dt {
        return Err(Error::Config(
            "dataset was generated for a different arm, horizon or dt than the config".into(),
        ));
    }
    let demos = match cfg.train.demo_limit {
        Some(n) => &set.demos[..n.min(set.demos.len())],
        None => &set.demos[..],
    };
    let trajectories: Vec<_> = demos.iter().map(|d| d.trajectory.clone()).collect();
    let normalizer = Normalizer::fit(&trajectories, cfg.train.normalizer_margin)?;
    let samples: Vec<TrainSample> = demos
        .iter()
        .map(|d| TrainSample {
            data: normalizer.encode(&d.trajectory),
            condition: d.style.label() as usize,
        })
        .collect();

    let t = &cfg.train;
    let rows = set.horizon + 1;
    let arch = Architecture {
        hidden_width: t.hidden_width,
        blocks: t.blocks,
        time_embedding: t.time_embedding,
        condition_embedding: t.condition_embedding,
        ..Architecture::new(rows * normalizer.state_dim(), &Style::vocabulary())
    };
    let mut network = ScoreNetwork::init(arch, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag::INIT)))?;
    let schedule = ScheduleParams {
        steps: t.diffusion_steps,
        offset: COSINE_OFFSET,
    };
    let train_cfg = TrainConfig {
        epochs: t.epochs,
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        batch_size: t.batch_size,
        seed: derive_seed(cfg.seed, tag::TRAIN),
        cosine_decay: t.cosine_decay,
        optimizer: t.optimizer,
    };
    info!(
        "training on {} demos, {} parameters, {} epochs",
        samples.len(),
        network.architecture().parameter_count(),
        t.epochs
    );
    let curve = train(&mut network, &samples, &schedule.build()?, &train_cfg)?;
    let model = Model {
        network,
        normalizer,
        schedule,
        rows,
        dt: set.dt,
    };
    create_parent(&cfg.model_path)?;
    model.save(&cfg.model_path)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let loss_csv = cfg.output_dir.join("loss.csv");
    let mut w = csv::Writer::from_path(&loss_csv).map_err(csv_error)?;
    w.write_record(["epoch", "loss"]).map_err(csv_error)?;
    for (epoch, loss) in curve.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    info!("final loss {:.5}; model at {}", curve.last().unwrap_or(&f64::NAN), cfg.model_path.display());
    Ok(TrainOutput { model, curve, loss_csv })
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

// ---------------------------------------------------------------- evaluate

/// One method's aggregate over a shared episode set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub sampler: Method,
    pub batch_filter: bool,
    pub guidance_scale: f64,
    pub budget_ms: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub episodes: usize,
    pub feasible: usize,
    pub blocked: usize,
    pub block_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_cost: f64,
    /// Median over episodes, first (warm-up) episode excluded.
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn row(&self, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        if self.rows.is_empty() {
            w.write_record(METRICS_HEADER).map_err(csv_error)?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers().map_err(csv_error)?.clone();
        if headers.iter().ne(METRICS_HEADER.iter().copied()) {
            return Err(Error::Format(format!("unexpected metrics header {headers:?}")));
        }
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(csv_error)?;
        Ok(MetricsReport { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        self.write_csv(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }
}

const METRICS_HEADER: [&str; 15] = [
    "method",
    "sampler",
    "batch_filter",
    "guidance_scale",
    "budget_ms",
    "steps",
    "batch_size",
    "episodes",
    "feasible",
    "blocked",
    "block_rate",
    "ci_low",
    "ci_high",
    "mean_cost",
    "ms_per_step",
];

/// One JSON-lines record per planner call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: String,
    pub budget_ms: f64,
    pub episode: usize,
    pub feasible: bool,
    pub blocked: bool,
    pub contact_time: Option<f64>,
    pub min_distance: f64,
    pub plan_latency_ms: f64,
    pub sample: Option<SampleDiagnostics>,
}

impl EpisodeRecord {
    fn new(method: &str, budget_ms: f64, r: &EpisodeResult) -> Self {
        EpisodeRecord {
            method: method.into(),
            budget_ms,
            episode: r.index,
            feasible: r.feasible,
            blocked: r.blocked,
            contact_time: r.contact_time,
            min_distance: r.min_distance,
            plan_latency_ms: r.plan_latency_ms,
            sample: r.diagnostics.clone(),
        }
    }

    /// The record with its timing fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.plan_latency_ms = 0.0;
        if let Some(s) = r.sample.as_mut() {
            s.ms_per_step = 0.0;
        }
        r
    }
}

pub struct EvaluationOutput {
    pub report: MetricsReport,
    pub records: Vec<EpisodeRecord>,
    pub metrics_csv: PathBuf,
    pub diagnostics_jsonl: PathBuf,
}

/// Loaded model plus everything shared by the rows of one evaluation.
struct Bench<'a> {
    cfg: &'a ExperimentConfig,
    model: Model,
    schedule: NoiseSchedule,
    condition: Condition,
    parallel: usize,
}

impl<'a> Bench<'a> {
    fn open(cfg: &'a ExperimentConfig, parallel: usize) -> Result<Self> {
        cfg.validate()?;
        require_file(&cfg.model_path, "model")?;
        let model = Model::load(&cfg.model_path)?;
        if model.rows != cfg.episode.horizon + 1 || model.state_dim() != 2 * cfg.arm.joints() {
            return Err(Error::Config(format!(
                "model plans {} states of width {}, config needs {} of width {}",
                model.rows,
                model.state_dim(),
                cfg.episode.horizon + 1,
                2 * cfg.arm.joints()
            )));
        }
        let vocabulary = &model.network.architecture().condition_vocabulary;
        let condition = Condition::parse(Some(&cfg.evaluation.condition), vocabulary)?;
        let schedule = model.noise_schedule()?;
        Ok(Bench {
            cfg,
            model,
            schedule,
            condition,
            parallel: parallel.max(1),
        })
    }

    fn planner(&self, spec: &MethodSpec, steps: usize) -> DiffusionPlanner<'_> {
        DiffusionPlanner {
            model: &self.model,
            schedule: &self.schedule,
            config: SamplerConfig {
                guidance_scale: spec.guidance_scale,
                batch_filter: spec.batch_filter,
                clip_denoised: self.cfg.evaluation.clip_denoised,
                ..SamplerConfig::new(spec.method, steps, self.cfg.evaluation.batch_size)
            },
            condition: self.condition,
        }
    }

    /// Per-step cost of a method row: pinned, or the median over warm-up
    /// plans on launches outside the evaluated set (first plan discarded).
    fn ms_per_step(&self, spec: &MethodSpec) -> Result<f64> {
        let e = &self.cfg.evaluation;
        if let Some(&ms) = e.ms_per_step.get(&spec.name) {
            return Ok(ms);
        }
        let steps = e.calibration_steps.min(self.schedule.steps());
        let launches = sim::standard_episodes(
            &self.cfg.table,
            e.calibration_episodes + 1,
            derive_seed(self.cfg.seed, tag::CALIBRATION),
        );
        let planner = self.planner(spec, steps);
        let results = run_episodes(self.cfg, &planner, &launches, derive_seed(self.cfg.seed, tag::CALIBRATION), 1)?;
        let ms = sim::summarize(&results).median_ms_per_step;
        info!("{}: calibrated {ms:.3} ms/step", spec.name);
        Ok(ms.max(1e-6))
    }

    fn steps_for(&self, ms_per_step: f64, budget_ms: f64) -> usize {
        sampling::time_budget_steps(budget_ms, ms_per_step).min(self.schedule.steps())
    }

    fn run_row(
        &self,
        spec: &MethodSpec,
        steps: usize,
        budget_ms: f64,
        launches: &[PuckState],
    ) -> Result<(MetricsRow, Vec<EpisodeRecord>)> {
        let planner = self.planner(spec, steps);
        let results = run_episodes(
            self.cfg,
            &planner,
            launches,
            derive_seed(self.cfg.seed, tag::SAMPLER),
            self.parallel,
        )?;
        let summary = sim::summarize(&results);
        let (ci_low, ci_high) = wilson_interval(summary.blocked, summary.feasible);
        let row = MetricsRow {
            method: spec.name.clone(),
            sampler: spec.method,
            batch_filter: spec.batch_filter,
            guidance_scale: spec.guidance_scale,
            budget_ms,
            steps,
            batch_size: self.cfg.evaluation.batch_size,
            episodes: summary.episodes,
            feasible: summary.feasible,
            blocked: summary.blocked,
            block_rate: summary.block_rate,
            ci_low,
            ci_high,
            mean_cost: summary.mean_cost,
            ms_per_step: summary.median_ms_per_step,
        };
        info!(
            "{} @ {budget_ms} ms: T={steps} block rate {:.3} [{:.3}, {:.3}] ({:.2} ms/step)",
            spec.name, row.block_rate, ci_low, ci_high, row.ms_per_step
        );
        let records = results.iter().map(|r| EpisodeRecord::new(&spec.name, budget_ms, r)).collect();
        Ok((row, records))
    }
}

/// Runs every launch, optionally across `parallel` threads. Results come
/// back in launch order regardless of scheduling.
fn run_episodes<P: Planner + Sync>(
    cfg: &ExperimentConfig,
    planner: &P,
    launches: &[PuckState],
    seed: u64,
    parallel: usize,
) -> Result<Vec<EpisodeResult>> {
    let one = |k: usize| {
        sim::run_episode(
            &cfg.table,
            &cfg.arm,
            planner,
            launches[k],
            &cfg.episode,
            k,
            sim::episode_seed(seed, k),
        )
    };
    if parallel <= 1 || launches.len() < 2 {
        return (0..launches.len()).map(one).collect();
    }
    let threads = parallel.min(launches.len());
    let mut slots: Vec<Option<Result<EpisodeResult>>> = (0..launches.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let one = &one;
                s.spawn(move || {
                    (w..launches.len())
                        .step_by(threads)
                        .map(|k| (k, one(k)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("episode worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every episode ran")).collect()
}

fn write_jsonl(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpisodeRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Runs every configured method on one shared set of launches at the
/// configured budget. Writes `metrics.csv` and `diagnostics.jsonl`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, parallel: usize) -> Result<EvaluationOutput> {
    let bench = Bench::open(cfg, parallel)?;
    let e = &cfg.evaluation;
    let launches = sim::standard_episodes(&cfg.table, e.episodes, derive_seed(cfg.seed, tag::EPISODES));
    let mut report = MetricsReport::default();
    let mut records = Vec::new();
    for spec in &e.methods {
        let steps = bench.steps_for(bench.ms_per_step(spec)?, e.budget_ms);
        let (row, recs) = bench.run_row(spec, steps, e.budget_ms, &launches)?;
        report.rows.push(row);
        records.extend(recs);
    }
    let metrics_csv = cfg.output_dir.join("metrics.csv");
    let diagnostics_jsonl = cfg.output_dir.join("diagnostics.jsonl");
    report.save(&metrics_csv)?;
    write_jsonl(&diagnostics_jsonl, &records)?;
    Ok(EvaluationOutput {
        report,
        records,
        metrics_csv,
        diagnostics_jsonl,
    })
}

/// Block rate per (method, budget). Each method's step cost is measured
/// (or read) once and converted to a step count per budget. Writes
/// `sweep.csv` and `sweep_diagnostics.jsonl`.
pub fn cmd_sweep(cfg: &ExperimentConfig, parallel: usize) -> Result<EvaluationOutput> {
    let bench = Bench::open(cfg, parallel)?;
    let n = cfg.sweep.episodes.unwrap_or(cfg.evaluation.episodes);
    let launches = sim::standard_episodes(&cfg.table, n, derive_seed(cfg.seed, tag::EPISODES));
    let mut report = MetricsReport::default();
    let mut records = Vec::new();
    for name in &cfg.sweep.methods {
        let spec = cfg
            .evaluation
            .methods
            .iter()
            .find(|m| &m.name == name)
            .expect("validated sweep method");
        let ms = bench.ms_per_step(spec)?;
        for &budget in &cfg.sweep.budgets_ms {
            let (row, recs) = bench.run_row(spec, bench.steps_for(ms, budget), budget, &launches)?;
            report.rows.push(row);
            records.extend(recs);
        }
    }
    let metrics_csv = cfg.output_dir.join("sweep.csv");
    let diagnostics_jsonl = cfg.output_dir.join("sweep_diagnostics.jsonl");
    report.save(&metrics_csv)?;
    write_jsonl(&diagnostics_jsonl, &records)?;
    Ok(EvaluationOutput {
        report,
        records,
        metrics_csv,
        diagnostics_jsonl,
    })
}
