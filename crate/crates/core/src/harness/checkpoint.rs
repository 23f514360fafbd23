//! Checkpoint directories: `manifest.txt` plus one tensor blob per
//! parameter under `params/`. Training checkpoints add optimizer moments
//! under `optim/` and, for pool-based runs, the pool under `pool/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::distill::{DataTrainer, DistillConfig, Distiller, KnowledgeBatchSet};
use crate::engine::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::models::{DenoiserModel, DenoiserSpec};
use crate::rng::{SeedStream, StreamPosition};

pub const CHECKPOINT_FORMAT: &str = "dkdm-checkpoint 1";
const MANIFEST: &str = "manifest.txt";

pub type Manifest = BTreeMap<String, String>;

fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = format!("format = {CHECKPOINT_FORMAT}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)?;
    let mut map = Manifest::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("line {} is not `key = value`", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    match map.get("format") {
        Some(f) if f == CHECKPOINT_FORMAT => Ok(map),
        Some(f) => Err(Error::format(
            &path,
            format!("format `{f}`, expected `{CHECKPOINT_FORMAT}`"),
        )),
        None => Err(Error::format(&path, "missing format line")),
    }
}

fn write_store(dir: &Path, store: &ParamStore<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, t) in store {
        t.write_blob(&dir.join(format!("{name}.dkt1")))?;
    }
    Ok(())
}

fn read_store(dir: &Path, names: &[String]) -> Result<ParamStore<f32>> {
    names
        .iter()
        .map(|n| {
            Ok((
                n.clone(),
                Tensor::read_blob(&dir.join(format!("{n}.dkt1")))?,
            ))
        })
        .collect()
}

/// Writes into a sibling temp directory, then swaps it into place.
fn write_dir(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = dir.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    fill(&tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn model_entries(model: &DenoiserModel<f32>, sched: ScheduleKind) -> Vec<(String, String)> {
    let mut e = model.spec().to_manifest();
    e.push(("schedule.kind".into(), sched.to_string()));
    e.push(("schedule.steps".into(), model.spec().horizon.to_string()));
    e
}

/// Saves parameters and spec only.
pub fn save_checkpoint(model: &DenoiserModel<f32>, sched: ScheduleKind, dir: &Path) -> Result<()> {
    write_dir(dir, |tmp| {
        let mut e = model_entries(model, sched);
        e.push(("iteration".into(), "0".into()));
        write_manifest(&tmp.join(MANIFEST), &e)?;
        write_store(&tmp.join("params"), model.params())
    })
}

/// Loads a model checkpoint and its schedule.
pub fn load_checkpoint(dir: &Path) -> Result<(DenoiserModel<f32>, NoiseSchedule)> {
    let m = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    let spec = DenoiserSpec::from_manifest(&m).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let names: Vec<String> = spec.inventory().into_iter().map(|(n, _)| n).collect();
    let params = read_store(&dir.join("params"), &names)?;
    let model = DenoiserModel::from_params(spec, params)?;
    let kind: ScheduleKind = m
        .get("schedule.kind")
        .ok_or_else(|| Error::format(&mpath, "missing schedule.kind"))?
        .parse()
        .map_err(|e: Error| Error::format(&mpath, e.to_string()))?;
    let sched = NoiseSchedule::build(kind, model.spec().horizon)?;
    Ok((model, sched))
}

/// Loads a checkpoint that must match `expected` exactly.
pub fn load_checkpoint_as(
    dir: &Path,
    expected: &DenoiserSpec,
) -> Result<(DenoiserModel<f32>, NoiseSchedule)> {
    let m = read_manifest(dir)?;
    let found = DenoiserSpec::from_manifest(&m)
        .map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    if &found != expected {
        return Err(Error::SpecMismatch(format!(
            "{} holds a {} model with input {:?} and stages {:?}; expected {} with input {:?} and stages {:?}",
            dir.display(),
            found.arch,
            found.input_dims,
            found.hidden,
            expected.arch,
            expected.input_dims,
            expected.hidden
        )));
    }
    load_checkpoint(dir)
}

fn get<'a>(m: &'a Manifest, dir: &Path, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("missing `{key}`")))
}

fn get_num<T: std::str::FromStr>(m: &Manifest, dir: &Path, key: &str) -> Result<T> {
    get(m, dir, key)?
        .parse()
        .map_err(|_| Error::format(dir.join(MANIFEST), format!("bad value for `{key}`")))
}

fn get_stream(m: &Manifest, dir: &Path, key: &str) -> Result<SeedStream> {
    let pos = StreamPosition::decode(get(m, dir, key)?)
        .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("bad stream position `{key}`")))?;
    Ok(SeedStream::restore(&pos))
}

fn optim_entries(opt: &AdamState<f32>) -> Vec<(String, String)> {
    vec![("adam.step".into(), opt.step.to_string())]
}

fn read_optim(
    dir: &Path,
    m: &Manifest,
    model: &DenoiserModel<f32>,
    config: AdamConfig,
) -> Result<AdamState<f32>> {
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut opt = AdamState::new(config, model.params());
    opt.step = get_num(m, dir, "adam.step")?;
    opt.m = read_store(&dir.join("optim").join("m"), &names)?;
    opt.v = read_store(&dir.join("optim").join("v"), &names)?;
    Ok(opt)
}

fn write_optim(dir: &Path, opt: &AdamState<f32>) -> Result<()> {
    write_store(&dir.join("optim").join("m"), &opt.m)?;
    write_store(&dir.join("optim").join("v"), &opt.v)
}

/// Full state of a data-based training run.
pub fn save_trainer(tr: &DataTrainer<f32>, sched: ScheduleKind, dir: &Path) -> Result<()> {
    write_dir(dir, |tmp| {
        let mut e = model_entries(&tr.model, sched);
        e.push(("iteration".into(), tr.iteration.to_string()));
        e.extend(optim_entries(&tr.opt));
        e.push(("rng.select".into(), tr.select_rng.position().encode()));
        e.push(("rng.noise".into(), tr.noise_rng.position().encode()));
        write_manifest(&tmp.join(MANIFEST), &e)?;
        write_store(&tmp.join("params"), tr.model.params())?;
        write_optim(tmp, &tr.opt)
    })
}

/// Replaces the state of `tr` with the saved one; the saved spec must
/// match the trainer's.
pub fn restore_trainer(tr: &mut DataTrainer<f32>, dir: &Path) -> Result<()> {
    let (model, _) = load_checkpoint_as(dir, tr.model.spec())?;
    let m = read_manifest(dir)?;
    tr.opt = read_optim(dir, &m, &model, tr.opt.config)?;
    tr.model = model;
    tr.iteration = get_num(&m, dir, "iteration")?;
    tr.select_rng = get_stream(&m, dir, "rng.select")?;
    tr.noise_rng = get_stream(&m, dir, "rng.noise")?;
    Ok(())
}

/// Full state of a pool-based distillation run.
pub fn save_distiller(d: &Distiller<f32>, sched: ScheduleKind, dir: &Path) -> Result<()> {
    write_dir(dir, |tmp| {
        let mut e = model_entries(&d.student, sched);
        e.push(("iteration".into(), d.iteration.to_string()));
        e.extend(optim_entries(&d.opt));
        e.push(("rng.select".into(), d.select_rng.position().encode()));
        e.push(("rng.noise".into(), d.noise_rng.position().encode()));
        e.push(("pool.generation".into(), d.pool.generation.to_string()));
        e.push(("pool.warmup_fwd".into(), d.warmup_fwd.to_string()));
        write_manifest(&tmp.join(MANIFEST), &e)?;
        write_store(&tmp.join("params"), d.student.params())?;
        write_optim(tmp, &d.opt)?;
        let pool = tmp.join("pool");
        std::fs::create_dir_all(&pool)?;
        d.pool.states().write_blob(&pool.join("states.dkt1"))?;
        let levels: Vec<f64> = d.pool.levels().iter().map(|&t| t as f64).collect();
        Tensor::<f64>::from_f64(&[levels.len()], &levels)?.write_blob(&pool.join("levels.dkt1"))
    })
}

/// Rebuilds a distillation run from a checkpoint without repeating the
/// pool warmup.
pub fn restore_distiller(
    dir: &Path,
    config: DistillConfig,
    sched: NoiseSchedule,
    student_spec: &DenoiserSpec,
) -> Result<Distiller<f32>> {
    let (student, _) = load_checkpoint_as(dir, student_spec)?;
    let m = read_manifest(dir)?;
    let opt = read_optim(dir, &m, &student, config.adam)?;
    let states = Tensor::<f32>::read_blob(&dir.join("pool").join("states.dkt1"))?;
    let levels_path = dir.join("pool").join("levels.dkt1");
    let levels: Vec<usize> = Tensor::<f64>::read_blob(&levels_path)?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    let pool = KnowledgeBatchSet::from_parts(
        states,
        levels,
        sched.horizon(),
        get_num(&m, dir, "pool.generation")?,
    )
    .map_err(|e| Error::format(&levels_path, e.to_string()))?;
    Ok(Distiller {
        config,
        sched,
        student,
        opt,
        pool,
        select_rng: get_stream(&m, dir, "rng.select")?,
        noise_rng: get_stream(&m, dir, "rng.noise")?,
        iteration: get_num(&m, dir, "iteration")?,
        warmup_fwd: get_num(&m, dir, "pool.warmup_fwd")?,
    })
}
