use crate::data::{Dataset, DatasetKind};
use crate::diffusion::{
    generate, q_sample, Denoiser, LossMode, LossParts, NoiseSchedule, ObjectiveInputs, SamplerKind,
};
use crate::engine::{AdamConfig, AdamState, Element, Tensor};
use crate::error::{Error, Result};
use crate::models::{DenoiserModel, DenoiserSpec};
use crate::rng::SeedStream;

use super::pool::{pool_capacity, select_subset, KnowledgeBatchSet};
use super::teacher::{teacher_step, CountingDenoiser};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    SyntheticDataset,
    Iterative,
    Shuffled,
    Dynamic,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic_dataset" => Ok(Self::SyntheticDataset),
            "iterative" => Ok(Self::Iterative),
            "shuffled" => Ok(Self::Shuffled),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::arg(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SyntheticDataset => "synthetic_dataset",
            Self::Iterative => "iterative",
            Self::Shuffled => "shuffled",
            Self::Dynamic => "dynamic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub strategy: Strategy,
    pub rho: f64,
    pub b: usize,
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub iterations: u64,
    pub adam: AdamConfig,
    /// Synthetic-dataset size and sampling steps for the baseline.
    pub synth_n: usize,
    pub synth_steps: usize,
    pub synth_sampler: SamplerKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dynamic,
            rho: 0.4,
            b: 64,
            lambda: 0.001,
            loss_mode: LossMode::Hybrid,
            iterations: 20_000,
            adam: AdamConfig::default(),
            synth_n: 5_000,
            synth_steps: 50,
            synth_sampler: SamplerKind::Ancestral,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.iterations == 0 {
            return Err(Error::arg("b and iterations must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::arg(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.strategy == Strategy::Dynamic && !(self.rho > 0.0) {
            return Err(Error::arg(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.strategy == Strategy::SyntheticDataset && self.synth_n == 0 {
            return Err(Error::arg("synthetic dataset size must be >= 1"));
        }
        Ok(())
    }
}

/// Loss and teacher cost of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub parts: LossParts,
    pub teacher_fwd: u64,
}

/// Pool-based distillation (iterative, shuffled and dynamic strategies).
#[derive(Clone, Debug)]
pub struct Distiller<E> {
    pub config: DistillConfig,
    pub sched: NoiseSchedule,
    pub student: DenoiserModel<E>,
    pub opt: AdamState<E>,
    pub pool: KnowledgeBatchSet<E>,
    pub select_rng: SeedStream,
    pub noise_rng: SeedStream,
    pub iteration: u64,
    /// Teacher evaluations spent building the initial pool.
    pub warmup_fwd: u64,
}

impl<E: Element> Distiller<E> {
    /// Fresh run. Randomness comes from the `init`, `noise` and `select`
    /// streams of `seed`.
    pub fn new<M: Denoiser<E> + ?Sized>(
        config: DistillConfig,
        teacher: &M,
        sched: NoiseSchedule,
        student_spec: DenoiserSpec,
        seed: u64,
    ) -> Result<Self> {
        let student = DenoiserModel::init(student_spec, &mut SeedStream::derive(seed, "init"))?;
        Self::with_student(config, teacher, sched, student, seed)
    }

    /// Like [`Distiller::new`] with a given initial student.
    pub fn with_student<M: Denoiser<E> + ?Sized>(
        config: DistillConfig,
        teacher: &M,
        sched: NoiseSchedule,
        student: DenoiserModel<E>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if teacher.row_len() != student.spec().row_len() {
            return Err(Error::SpecMismatch(format!(
                "teacher rows of {} vs student rows of {}",
                teacher.row_len(),
                student.spec().row_len()
            )));
        }
        if student.spec().horizon != sched.horizon() {
            return Err(Error::SpecMismatch(format!(
                "student horizon {} vs schedule horizon {}",
                student.spec().horizon,
                sched.horizon()
            )));
        }
        let mut noise_rng = SeedStream::derive(seed, "noise");
        let counted = CountingDenoiser::new(teacher);
        let (d, b, horizon) = (teacher.row_len(), config.b, sched.horizon());
        let pool = match config.strategy {
            Strategy::Iterative => KnowledgeBatchSet::fresh(b, d, horizon, &mut noise_rng),
            Strategy::Shuffled => {
                KnowledgeBatchSet::shuffled(b, b, &counted, &sched, &mut noise_rng)?
            }
            Strategy::Dynamic => {
                let cap = pool_capacity(config.rho, horizon, b)?;
                log::info!("building pool of {cap} items by shuffle denoise");
                KnowledgeBatchSet::shuffled(cap, b, &counted, &sched, &mut noise_rng)?
            }
            Strategy::SyntheticDataset => {
                return Err(Error::arg(
                    "the synthetic-dataset strategy trains on data; use DataTrainer",
                ))
            }
        };
        let opt = AdamState::new(config.adam, student.params());
        Ok(Self {
            config,
            sched,
            opt,
            student,
            pool,
            select_rng: SeedStream::derive(seed, "select"),
            noise_rng,
            iteration: 0,
            warmup_fwd: counted.count(),
        })
    }

    /// Select, distill on the teacher's one-step targets, then replace the
    /// selected items by their denoised successors.
    pub fn step<M: Denoiser<E> + ?Sized>(&mut self, teacher: &M) -> Result<StepRecord> {
        let b = self.config.b;
        let idx = select_subset(self.pool.capacity(), b, &mut self.select_rng)?;
        let (xt, ts) = self.pool.gather(&idx);
        let z: Tensor<E> = self.noise_rng.normal_tensor(xt.dims());
        let counted = CountingDenoiser::new(teacher);
        let (next, tout) = teacher_step(&counted, &xt, &ts, &self.sched, Some(&z))?;
        let targets = ObjectiveInputs::from_teacher(&tout, &xt, &ts, &self.sched)?;
        let parts = self.student.train_step(
            &mut self.opt,
            &xt,
            &ts,
            &targets,
            self.config.loss_mode,
            self.config.lambda,
        )?;
        self.pool.advance(&idx, &next, &mut self.noise_rng);
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            parts,
            teacher_fwd: counted.count(),
        })
    }

    /// Levels of the items the next [`Distiller::step`] would select,
    /// without advancing anything.
    pub fn peek_levels(&self) -> Result<Vec<usize>> {
        let mut r = self.select_rng.clone();
        let idx = select_subset(self.pool.capacity(), self.config.b, &mut r)?;
        Ok(idx.iter().map(|&i| self.pool.levels()[i]).collect())
    }
}

/// Standard data-based training on a fixed sample set: teacher training
/// and the synthetic-dataset baseline.
#[derive(Clone, Debug)]
pub struct DataTrainer<E> {
    pub sched: NoiseSchedule,
    pub model: DenoiserModel<E>,
    pub opt: AdamState<E>,
    pub b: usize,
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub select_rng: SeedStream,
    pub noise_rng: SeedStream,
    pub iteration: u64,
}

impl<E: Element> DataTrainer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sched: NoiseSchedule,
        spec: DenoiserSpec,
        adam: AdamConfig,
        b: usize,
        lambda: f64,
        loss_mode: LossMode,
        seed: u64,
    ) -> Result<Self> {
        if b == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        if spec.horizon != sched.horizon() {
            return Err(Error::SpecMismatch(format!(
                "model horizon {} vs schedule horizon {}",
                spec.horizon,
                sched.horizon()
            )));
        }
        let model = DenoiserModel::init(spec, &mut SeedStream::derive(seed, "init"))?;
        Ok(Self {
            opt: AdamState::new(adam, model.params()),
            sched,
            model,
            b,
            lambda,
            loss_mode,
            select_rng: SeedStream::derive(seed, "select"),
            noise_rng: SeedStream::derive(seed, "noise"),
            iteration: 0,
        })
    }

    /// One step on `b` rows of `data` drawn with replacement, each at a
    /// uniform level with fresh noise.
    pub fn step(&mut self, data: &Tensor<E>) -> Result<StepRecord> {
        let n = data.rows();
        if n == 0 {
            return Err(Error::arg("empty training set"));
        }
        if data.row_len() != self.model.spec().row_len() {
            return Err(Error::shape(format!(
                "data rows of {} vs model rows of {}",
                data.row_len(),
                self.model.spec().row_len()
            )));
        }
        let idx: Vec<usize> = (0..self.b)
            .map(|_| self.select_rng.below(n as u64) as usize)
            .collect();
        let x0 = data.gather_rows(&idx);
        let horizon = self.sched.horizon();
        let ts: Vec<usize> = (0..self.b)
            .map(|_| self.noise_rng.range_inclusive(1, horizon))
            .collect();
        let eps: Tensor<E> = self.noise_rng.normal_tensor(x0.dims());
        let xt = q_sample(&x0, &ts, &eps, &self.sched)?;
        let targets = ObjectiveInputs::from_data(&x0, &xt, &eps, &ts, &self.sched)?;
        let parts = self.model.train_step(
            &mut self.opt,
            &xt,
            &ts,
            &targets,
            self.loss_mode,
            self.lambda,
        )?;
        self.iteration += 1;
        Ok(StepRecord {
            iteration: self.iteration,
            parts,
            teacher_fwd: 0,
        })
    }
}

/// `n` teacher samples persisted as a dataset of `kind`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset<M: Denoiser<f32> + ?Sized>(
    teacher: &M,
    sched: &NoiseSchedule,
    kind: DatasetKind,
    n: usize,
    sampler: SamplerKind,
    n_steps: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::arg("dataset size must be >= 1"));
    }
    if teacher.row_len() != kind.row_len() {
        return Err(Error::shape(format!(
            "teacher rows of {} vs {} rows of {}",
            teacher.row_len(),
            kind.name(),
            kind.row_len()
        )));
    }
    let mut rng = SeedStream::derive(seed, "synthesize");
    let samples = generate(teacher, sched, n_steps, sampler, &mut rng, n)?;
    Ok(Dataset {
        kind,
        samples,
        seed,
    })
}

/// A dataset the size of `synthetic` holding `round(p·size)` real rows and
/// synthetic rows for the rest, shuffled.
pub fn mix_dataset(
    real: &Dataset,
    synthetic: &Dataset,
    p: f64,
    rng: &mut SeedStream,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("real fraction {p} outside [0, 1]")));
    }
    if real.kind.row_len() != synthetic.kind.row_len() {
        return Err(Error::shape("real and synthetic samples differ in dims"));
    }
    let size = synthetic.len();
    let k = (p * size as f64).round() as usize;
    if k > real.len() {
        return Err(Error::arg(format!(
            "{k} real samples requested, only {} available",
            real.len()
        )));
    }
    let real_idx = select_subset(real.len(), k, rng)?;
    let mut rows: Vec<&[f32]> = real_idx.iter().map(|&i| real.samples.row(i)).collect();
    rows.extend((0..size - k).map(|i| synthetic.samples.row(i)));
    for i in (1..rows.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        rows.swap(i, j);
    }
    let d = synthetic.samples.row_len();
    Ok(Dataset {
        kind: synthetic.kind.clone(),
        samples: Tensor::stack_rows(rows, &[d]),
        seed: synthetic.seed,
    })
}

/// Runs `config.strategy` for the full budget, calling `observe` after
/// every iteration with the current student.
pub fn run_distillation<M, F>(
    config: &DistillConfig,
    teacher: &M,
    sched: &NoiseSchedule,
    student_spec: DenoiserSpec,
    kind: DatasetKind,
    seed: u64,
    mut observe: F,
) -> Result<DenoiserModel<f32>>
where
    M: Denoiser<f32> + ?Sized,
    F: FnMut(&StepRecord, &DenoiserModel<f32>) -> Result<()>,
{
    config.validate()?;
    match config.strategy {
        Strategy::SyntheticDataset => {
            let counted = CountingDenoiser::new(teacher);
            let ds = synthesize_dataset(
                &counted,
                sched,
                kind,
                config.synth_n,
                config.synth_sampler,
                config.synth_steps,
                seed,
            )?;
            log::info!(
                "synthesized {} samples with {} teacher forwards",
                ds.len(),
                counted.count()
            );
            let mut tr = DataTrainer::new(
                sched.clone(),
                student_spec,
                config.adam,
                config.b,
                config.lambda,
                config.loss_mode,
                seed,
            )?;
            for _ in 0..config.iterations {
                let rec = tr.step(&ds.samples)?;
                observe(&rec, &tr.model)?;
            }
            Ok(tr.model)
        }
        _ => {
            let mut d = Distiller::new(config.clone(), teacher, sched.clone(), student_spec, seed)?;
            for _ in 0..config.iterations {
                let rec = d.step(teacher)?;
                observe(&rec, &d.student)?;
            }
            Ok(d.student)
        }
    }
}
