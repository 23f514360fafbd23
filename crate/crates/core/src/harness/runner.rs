//! The six run kinds and the shared training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{
    load_checkpoint, restore_distiller, restore_trainer, save_checkpoint, save_distiller,
    save_trainer,
};
use super::config::Config;
use super::export::{export_samples, ExportFormat};
use super::metrics::{MetricsRecord, MetricsWriter};
use crate::data::{
    draw_samples, frechet_gaussian_distance, make_dataset, sliced_wasserstein, Dataset, DatasetKind,
};
use crate::diffusion::{generate, Denoiser, LossMode, NoiseSchedule, SamplerKind, ScheduleKind};
use crate::distill::{
    synthesize_dataset, CountingDenoiser, DataTrainer, DistillConfig, Distiller, StepRecord,
    Strategy,
};
use crate::engine::{AdamConfig, Tensor};
use crate::error::{Error, Result};
use crate::models::{Arch, DenoiserModel, DenoiserSpec};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    TrainTeacher,
    Distill,
    Synthesize,
    Sample,
    Eval,
    Ablate,
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub iterations: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub points: u64,
    pub samples: usize,
    /// Sampling steps; `T` when the config leaves it at 0.
    pub steps: usize,
    pub sampler: SamplerKind,
    pub projections: usize,
}

/// A parsed and validated experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: Config,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub resume: bool,
    pub data_kind: DatasetKind,
    pub data_n: usize,
    pub schedule: ScheduleKind,
    pub horizon: usize,
    pub teacher_spec: DenoiserSpec,
    pub student_spec: DenoiserSpec,
    pub train: TrainSettings,
    pub distill: DistillConfig,
    pub distill_checkpoint_every: u64,
    pub eval: EvalSettings,
    pub wall_clock: bool,
}

fn default_hidden(arch: Arch, teacher: bool) -> Vec<usize> {
    match (arch, teacher) {
        (Arch::Mlp, true) => vec![128, 128, 128],
        (Arch::Mlp, false) => vec![64, 64, 64],
        (Arch::Cnn, true) => vec![16, 16, 16],
        (Arch::Cnn, false) => vec![8, 8, 8],
    }
}

fn parse_as<T: std::str::FromStr<Err = Error>>(cfg: &Config, key: &str) -> Result<T> {
    cfg.str(key).parse().map_err(|e| cfg.error_at(key, e))
}

fn model_spec(
    cfg: &Config,
    role: &str,
    kind: &DatasetKind,
    horizon: usize,
) -> Result<DenoiserSpec> {
    let arch_key = format!("{role}.arch");
    let arch: Arch = parse_as(cfg, &arch_key)?;
    let hidden_key = format!("{role}.hidden");
    let mut hidden: Vec<usize> = cfg.list(&hidden_key)?;
    if hidden.is_empty() {
        hidden = default_hidden(arch, role == "teacher");
    }
    let input_dims = match arch {
        Arch::Mlp => vec![kind.row_len()],
        Arch::Cnn => {
            let d = kind.dims();
            if d.len() != 3 {
                return Err(cfg.error_at(
                    &arch_key,
                    format!("cnn needs image data, `{}` is flat", kind.name()),
                ));
            }
            d
        }
    };
    let time_key = format!("{role}.time_dim");
    let spec = DenoiserSpec {
        arch,
        input_dims,
        hidden,
        time_dim: cfg.get(&time_key)?,
        horizon,
    };
    spec.validate().map_err(|e| cfg.error_at(&hidden_key, e))?;
    Ok(spec)
}

impl Experiment {
    pub fn from_config(cfg: Config) -> Result<Self> {
        let mean: Vec<f64> = cfg.list("data.mean")?;
        if mean.len() != 2 {
            return Err(cfg.error_at("data.mean", "expected two comma-separated values"));
        }
        let data_kind = DatasetKind::parse(
            cfg.str("data.kind"),
            [mean[0], mean[1]],
            cfg.get("data.std")?,
        )
        .map_err(|e| cfg.error_at("data.kind", e))?;
        let horizon: usize = cfg.get("schedule.steps")?;
        if horizon == 0 {
            return Err(cfg.error_at("schedule.steps", "must be >= 1"));
        }
        let schedule: ScheduleKind = parse_as(&cfg, "schedule.kind")?;
        let teacher_spec = model_spec(&cfg, "teacher", &data_kind, horizon)?;
        let student_spec = model_spec(&cfg, "student", &data_kind, horizon)?;
        let train = TrainSettings {
            iterations: cfg.get("train.iterations")?,
            batch: cfg.get("train.batch")?,
            adam: AdamConfig {
                lr: cfg.get("train.lr")?,
                ..AdamConfig::default()
            },
            lambda: cfg.get("train.lambda")?,
            loss_mode: parse_as(&cfg, "train.loss_mode")?,
            checkpoint_every: cfg.get("train.checkpoint_every")?,
        };
        if train.iterations == 0 || train.batch == 0 {
            return Err(cfg.error_at("train.iterations", "iterations and batch must be >= 1"));
        }
        let distill = DistillConfig {
            strategy: parse_as(&cfg, "distill.strategy")?,
            rho: cfg.get("distill.rho")?,
            b: cfg.get("distill.b")?,
            lambda: cfg.get("distill.lambda")?,
            loss_mode: parse_as(&cfg, "distill.loss_mode")?,
            iterations: cfg.get("distill.iterations")?,
            adam: AdamConfig {
                lr: cfg.get("distill.lr")?,
                ..AdamConfig::default()
            },
            synth_n: cfg.get("synth.n")?,
            synth_steps: cfg.get("synth.steps")?,
            synth_sampler: parse_as(&cfg, "synth.sampler")?,
        };
        distill
            .validate()
            .map_err(|e| cfg.error_at("distill.strategy", e))?;
        if distill.synth_steps == 0 || distill.synth_steps > horizon {
            return Err(cfg.error_at("synth.steps", format!("must lie in [1, {horizon}]")));
        }
        let eval_steps: usize = cfg.get("eval.steps")?;
        if eval_steps > horizon {
            return Err(cfg.error_at("eval.steps", format!("must lie in [0, {horizon}]")));
        }
        let eval = EvalSettings {
            points: cfg.get("eval.points")?,
            samples: cfg.get("eval.samples")?,
            steps: if eval_steps == 0 { horizon } else { eval_steps },
            sampler: parse_as(&cfg, "eval.sampler")?,
            projections: cfg.get("eval.projections")?,
        };
        if eval.samples < 2 || eval.projections == 0 {
            return Err(cfg.error_at("eval.samples", "need >= 2 samples and >= 1 projection"));
        }
        Ok(Self {
            seed: cfg.get("run.seed")?,
            out_dir: cfg.path("run.out_dir").expect("defaulted"),
            resume: cfg.get("run.resume")?,
            data_n: cfg.get("data.n")?,
            data_kind,
            schedule,
            horizon,
            teacher_spec,
            student_spec,
            train,
            distill,
            distill_checkpoint_every: cfg.get("distill.checkpoint_every")?,
            eval,
            wall_clock: cfg.get("log.wall_clock")?,
            cfg,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(Config::load(path)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule, self.horizon)
    }

    /// The training set: `data.file` when given, else generated.
    pub fn dataset(&self) -> Result<Dataset> {
        match self.cfg.path("data.file") {
            Some(p) => {
                let ds = Dataset::load(&p)?;
                if ds.kind.row_len() != self.data_kind.row_len() {
                    return Err(self
                        .cfg
                        .error_at("data.file", "sample dims differ from data.kind"));
                }
                Ok(ds)
            }
            None => make_dataset(self.data_kind.clone(), self.data_n, self.seed),
        }
    }

    /// Fresh held-out samples from the data distribution.
    pub fn reference(&self, n: usize) -> Result<Tensor<f32>> {
        draw_samples(
            &self.data_kind,
            n,
            &mut SeedStream::derive(self.seed, "reference"),
        )
    }

    fn teacher(&self) -> Result<DenoiserModel<f32>> {
        let path = self.cfg.path("teacher.checkpoint").ok_or_else(|| {
            self.cfg
                .error_at("teacher.checkpoint", "required for this run kind")
        })?;
        let (model, _) = load_checkpoint(&path)?;
        if model.spec().horizon != self.horizon
            || model.spec().row_len() != self.data_kind.row_len()
        {
            return Err(Error::SpecMismatch(format!(
                "teacher at {} has horizon {} and rows of {}; the config wants {} and {}",
                path.display(),
                model.spec().horizon,
                model.spec().row_len(),
                self.horizon,
                self.data_kind.row_len()
            )));
        }
        Ok(model)
    }

    fn with_out_dir(&self, dir: PathBuf) -> Self {
        let mut e = self.clone();
        e.out_dir = dir;
        e
    }
}

/// Both distances between `count` model samples and held-out data.
pub fn evaluate_model<M: Denoiser<f32> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    exp: &Experiment,
    reference: &Tensor<f32>,
) -> Result<Vec<(String, f64)>> {
    let mut rng = SeedStream::derive(exp.seed, "eval");
    let samples = generate(
        model,
        sched,
        exp.eval.steps,
        exp.eval.sampler,
        &mut rng,
        exp.eval.samples,
    )?;
    let sw = sliced_wasserstein(&samples, reference, exp.eval.projections, exp.seed)?;
    let fd = frechet_gaussian_distance(&samples, reference)?;
    Ok(vec![
        (sw.name.to_string(), sw.value),
        (fd.name.to_string(), fd.value),
    ])
}

/// Final metrics of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub iterations: u64,
    pub metrics: Vec<(String, f64)>,
    /// Teacher evaluations including warmup or synthesis.
    pub teacher_fwd: u64,
}

impl RunSummary {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

enum Job<'a> {
    Data {
        tr: DataTrainer<f32>,
        data: &'a Tensor<f32>,
    },
    Pool {
        d: Box<Distiller<f32>>,
        teacher: &'a DenoiserModel<f32>,
    },
}

impl Job<'_> {
    fn step(&mut self) -> Result<StepRecord> {
        match self {
            Job::Data { tr, data } => tr.step(data),
            Job::Pool { d, teacher } => d.step(*teacher),
        }
    }

    fn model(&self) -> &DenoiserModel<f32> {
        match self {
            Job::Data { tr, .. } => &tr.model,
            Job::Pool { d, .. } => &d.student,
        }
    }

    fn iteration(&self) -> u64 {
        match self {
            Job::Data { tr, .. } => tr.iteration,
            Job::Pool { d, .. } => d.iteration,
        }
    }

    fn save_state(&self, sched: ScheduleKind, dir: &Path) -> Result<()> {
        match self {
            Job::Data { tr, .. } => save_trainer(tr, sched, dir),
            Job::Pool { d, .. } => save_distiller(d, sched, dir),
        }
    }
}

const METRICS_FILE: &str = "metrics.csv";
const STATE_DIR: &str = "state";

/// Runs `job` to `total` iterations, writing metrics, periodic state
/// checkpoints and the final model under `model_dir`.
fn drive(
    exp: &Experiment,
    mut job: Job<'_>,
    total: u64,
    checkpoint_every: u64,
    model_dir: &str,
    extra_fwd: u64,
) -> Result<RunSummary> {
    let sched = exp.schedule()?;
    let reference = exp.reference(exp.eval.samples)?;
    let metrics_path = exp.out_dir.join(METRICS_FILE);
    let mut writer = if job.iteration() > 0 {
        MetricsWriter::resume(&metrics_path, job.iteration())?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let every = (total / exp.eval.points.max(1)).max(1);
    let start = Instant::now();
    let mut last_metrics = Vec::new();
    let mut teacher_fwd = extra_fwd;
    while job.iteration() < total {
        let rec = job.step()?;
        teacher_fwd += rec.teacher_fwd;
        let i = rec.iteration;
        let metrics = if i % every == 0 || i == total {
            let m = evaluate_model(job.model(), &sched, exp, &reference)?;
            log::info!("iter {i}: loss {:.5} metrics {m:?}", rec.parts.total);
            last_metrics = m.clone();
            m
        } else {
            Vec::new()
        };
        writer.append(&MetricsRecord {
            iteration: i,
            parts: rec.parts,
            teacher_fwd: rec.teacher_fwd,
            wall_ms: exp.wall_clock.then(|| start.elapsed().as_millis()),
            metrics,
        })?;
        if checkpoint_every > 0 && i % checkpoint_every == 0 && i < total {
            job.save_state(exp.schedule, &exp.out_dir.join(STATE_DIR))?;
        }
    }
    if last_metrics.is_empty() {
        last_metrics = evaluate_model(job.model(), &sched, exp, &reference)?;
    }
    save_checkpoint(job.model(), exp.schedule, &exp.out_dir.join(model_dir))?;
    Ok(RunSummary {
        out_dir: exp.out_dir.clone(),
        iterations: job.iteration(),
        metrics: last_metrics,
        teacher_fwd,
    })
}

fn state_to_resume(exp: &Experiment) -> Option<PathBuf> {
    let dir = exp.out_dir.join(STATE_DIR);
    (exp.resume && dir.join("manifest.txt").exists()).then_some(dir)
}

/// Data-based teacher training; the model lands in `<out>/teacher`.
pub fn train_teacher(exp: &Experiment) -> Result<RunSummary> {
    std::fs::create_dir_all(&exp.out_dir)?;
    let sched = exp.schedule()?;
    let data = exp.dataset()?;
    let t = &exp.train;
    let mut tr = DataTrainer::new(
        sched,
        exp.teacher_spec.clone(),
        t.adam,
        t.batch,
        t.lambda,
        t.loss_mode,
        exp.seed,
    )?;
    if let Some(dir) = state_to_resume(exp) {
        restore_trainer(&mut tr, &dir)?;
        log::info!("resuming teacher training at iteration {}", tr.iteration);
    }
    drive(
        exp,
        Job::Data {
            tr,
            data: &data.samples,
        },
        t.iterations,
        t.checkpoint_every,
        "teacher",
        0,
    )
}

/// One distillation run; the student lands in `<out>/student`.
pub fn distill(exp: &Experiment) -> Result<RunSummary> {
    std::fs::create_dir_all(&exp.out_dir)?;
    let teacher = exp.teacher()?;
    let sched = exp.schedule()?;
    let c = &exp.distill;
    match c.strategy {
        Strategy::SyntheticDataset => {
            let synth_path = exp.out_dir.join("synthetic.dkds");
            let (ds, fwd) = if exp.resume && synth_path.exists() {
                (Dataset::load(&synth_path)?, 0)
            } else {
                let counted = CountingDenoiser::new(&teacher);
                let ds = synthesize_dataset(
                    &counted,
                    &sched,
                    exp.data_kind.clone(),
                    c.synth_n,
                    c.synth_sampler,
                    c.synth_steps,
                    exp.seed,
                )?;
                ds.save(&synth_path)?;
                (ds, counted.count())
            };
            let mut tr = DataTrainer::new(
                sched,
                exp.student_spec.clone(),
                c.adam,
                c.b,
                c.lambda,
                c.loss_mode,
                exp.seed,
            )?;
            if let Some(dir) = state_to_resume(exp) {
                restore_trainer(&mut tr, &dir)?;
            }
            drive(
                exp,
                Job::Data {
                    tr,
                    data: &ds.samples,
                },
                c.iterations,
                exp.distill_checkpoint_every,
                "student",
                fwd,
            )
        }
        _ => {
            let d = match state_to_resume(exp) {
                Some(dir) => restore_distiller(&dir, c.clone(), sched, &exp.student_spec)?,
                None => Distiller::new(
                    c.clone(),
                    &teacher,
                    sched,
                    exp.student_spec.clone(),
                    exp.seed,
                )?,
            };
            let warmup = d.warmup_fwd;
            let job = Job::Pool {
                d: Box::new(d),
                teacher: &teacher,
            };
            drive(
                exp,
                job,
                c.iterations,
                exp.distill_checkpoint_every,
                "student",
                warmup,
            )
        }
    }
}

/// Writes `<out>/synthetic.dkds`.
pub fn synthesize(exp: &Experiment) -> Result<PathBuf> {
    std::fs::create_dir_all(&exp.out_dir)?;
    let teacher = exp.teacher()?;
    let c = &exp.distill;
    let ds = synthesize_dataset(
        &teacher,
        &exp.schedule()?,
        exp.data_kind.clone(),
        c.synth_n,
        c.synth_sampler,
        c.synth_steps,
        exp.seed,
    )?;
    let path = exp.out_dir.join("synthetic.dkds");
    ds.save(&path)?;
    Ok(path)
}

fn checkpoint_or(exp: &Experiment, key: &str) -> PathBuf {
    exp.cfg
        .path(key)
        .unwrap_or_else(|| exp.out_dir.join("student"))
}

/// Exports samples of `sample.checkpoint` (default `<out>/student`).
pub fn sample(exp: &Experiment) -> Result<PathBuf> {
    std::fs::create_dir_all(&exp.out_dir)?;
    let (model, sched) = load_checkpoint(&checkpoint_or(exp, "sample.checkpoint"))?;
    let dims = model.spec().input_dims.clone();
    let flat = model.spec().row_len();
    let format: ExportFormat = match exp.cfg.str("sample.format") {
        "" if flat == 2 => ExportFormat::CsvPoints,
        "" => ExportFormat::PgmGrid,
        other => other
            .parse()
            .map_err(|e| exp.cfg.error_at("sample.format", e))?,
    };
    let dims = if dims.len() == 1 && flat != 2 {
        exp.data_kind.dims()
    } else {
        dims
    };
    let steps: usize = exp.cfg.get("sample.steps")?;
    let steps = if steps == 0 { sched.horizon() } else { steps };
    let sampler: SamplerKind = parse_as(&exp.cfg, "sample.sampler")?;
    let mut rng = SeedStream::derive(exp.seed, "sample");
    let batch = generate(
        &model,
        &sched,
        steps,
        sampler,
        &mut rng,
        exp.cfg.get("sample.n")?,
    )?;
    let path = exp.out_dir.join(match format {
        ExportFormat::PgmGrid => "samples.pgm",
        ExportFormat::CsvPoints => "samples.csv",
    });
    export_samples(&batch, &dims, &path, format)?;
    Ok(path)
}

/// Scores `eval.checkpoint` (default `<out>/student`) into `<out>/eval.txt`.
pub fn eval(exp: &Experiment) -> Result<Vec<(String, f64)>> {
    std::fs::create_dir_all(&exp.out_dir)?;
    let (model, sched) = load_checkpoint(&checkpoint_or(exp, "eval.checkpoint"))?;
    let reference = exp.reference(exp.eval.samples)?;
    let metrics = evaluate_model(&model, &sched, exp, &reference)?;
    let mut text = format!(
        "samples = {}\nsteps = {}\nprojections = {}\nseed = {}\n",
        exp.eval.samples, exp.eval.steps, exp.eval.projections, exp.seed
    );
    for (k, v) in &metrics {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(exp.out_dir.join("eval.txt"), text)?;
    Ok(metrics)
}

/// Strategy comparison (one sub-run per strategy) or, when `ablate.rhos`
/// is set, a ρ sweep of dynamic distillation. Every sub-run shares the
/// master seed.
pub fn ablate(exp: &Experiment) -> Result<Vec<(String, RunSummary)>> {
    let rhos: Vec<f64> = exp.cfg.list("ablate.rhos")?;
    let mut runs = Vec::new();
    if rhos.is_empty() {
        let strategies: Vec<String> = exp.cfg.list("ablate.strategies")?;
        for s in strategies {
            let strategy: Strategy = s
                .parse()
                .map_err(|e| exp.cfg.error_at("ablate.strategies", e))?;
            let mut sub = exp.with_out_dir(exp.out_dir.join(&s));
            sub.distill.strategy = strategy;
            runs.push((s, distill(&sub)?));
        }
    } else {
        for rho in rhos {
            let label = format!("rho_{rho}");
            let mut sub = exp.with_out_dir(exp.out_dir.join(&label));
            sub.distill.strategy = Strategy::Dynamic;
            sub.distill.rho = rho;
            sub.distill
                .validate()
                .map_err(|e| exp.cfg.error_at("ablate.rhos", e))?;
            runs.push((label, distill(&sub)?));
        }
    }
    Ok(runs)
}

/// Dispatches one run kind.
pub fn run(kind: RunKind, config_path: &Path) -> Result<()> {
    let exp = Experiment::load(config_path)?;
    match kind {
        RunKind::TrainTeacher => {
            let s = train_teacher(&exp)?;
            log::info!("teacher done: {:?}", s.metrics);
        }
        RunKind::Distill => {
            let s = distill(&exp)?;
            log::info!("distillation done: {:?}", s.metrics);
        }
        RunKind::Synthesize => {
            let p = synthesize(&exp)?;
            log::info!("wrote {}", p.display());
        }
        RunKind::Sample => {
            let p = sample(&exp)?;
            log::info!("wrote {}", p.display());
        }
        RunKind::Eval => {
            let m = eval(&exp)?;
            log::info!("eval: {m:?}");
        }
        RunKind::Ablate => {
            for (label, s) in ablate(&exp)? {
                log::info!("{label}: {:?}", s.metrics);
            }
        }
    }
    Ok(())
}
