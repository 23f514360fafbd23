//! Flat `key = value` experiment configs with dotted section prefixes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every key the harness reads, with its default (empty = none).
pub const SCHEMA: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.out_dir", "out"),
    ("run.resume", "false"),
    ("data.kind", "gauss2d"),
    ("data.n", "50000"),
    ("data.mean", "1,-1"),
    ("data.std", "0.5"),
    ("data.file", ""),
    ("schedule.kind", "linear"),
    ("schedule.steps", "100"),
    ("teacher.arch", "mlp"),
    ("teacher.hidden", ""),
    ("teacher.time_dim", "32"),
    ("teacher.checkpoint", ""),
    ("student.arch", "mlp"),
    ("student.hidden", ""),
    ("student.time_dim", "32"),
    ("train.iterations", "20000"),
    ("train.batch", "64"),
    ("train.lr", "0.001"),
    ("train.lambda", "0.001"),
    ("train.loss_mode", "hybrid"),
    ("train.checkpoint_every", "0"),
    ("distill.strategy", "dynamic"),
    ("distill.rho", "0.4"),
    ("distill.b", "64"),
    ("distill.iterations", "20000"),
    ("distill.lr", "0.001"),
    ("distill.lambda", "0.001"),
    ("distill.loss_mode", "hybrid"),
    ("distill.checkpoint_every", "0"),
    ("synth.n", "5000"),
    ("synth.steps", "50"),
    ("synth.sampler", "ancestral"),
    ("eval.points", "20"),
    ("eval.samples", "1000"),
    ("eval.steps", "0"),
    ("eval.sampler", "ancestral"),
    ("eval.projections", "128"),
    ("eval.checkpoint", ""),
    ("sample.checkpoint", ""),
    ("sample.n", "64"),
    ("sample.steps", "0"),
    ("sample.sampler", "ancestral"),
    ("sample.format", ""),
    ("ablate.strategies", "iterative,shuffled,dynamic"),
    ("ablate.rhos", ""),
    ("log.wall_clock", "true"),
];

#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    base: PathBuf,
}

impl Config {
    /// Parses config text. `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if !SCHEMA.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("unknown key `{key}`"),
                });
            }
            if let Some((_, prev)) =
                entries.insert(key.to_string(), (value.trim().to_string(), line_no))
            {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("`{key}` already set on line {prev}"),
                });
            }
        }
        Ok(Self {
            entries,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Overrides one key in place; used by sweeps.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let line = self.entries.get(key).map_or(0, |e| e.1);
        self.entries.insert(key.to_string(), (value.into(), line));
    }

    fn default_of(key: &str) -> &'static str {
        SCHEMA
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
            .unwrap_or_else(|| panic!("`{key}` missing from schema"))
    }

    fn raw(&self, key: &str) -> (&str, usize) {
        match self.entries.get(key) {
            Some((v, l)) => (v.as_str(), *l),
            None => (Self::default_of(key), 0),
        }
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key).0
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (v, line) = self.raw(key);
        v.parse().map_err(|e: T::Err| Error::Config {
            line,
            msg: format!("`{key}`: cannot parse `{v}`: {e}"),
        })
    }

    /// Comma-separated list; empty text gives an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let (v, line) = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim().parse().map_err(|e: T::Err| Error::Config {
                    line,
                    msg: format!("`{key}`: cannot parse `{x}`: {e}"),
                })
            })
            .collect()
    }

    /// A path relative to the config file, or `None` when unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| self.base.join(v))
    }

    /// Line of `key`, 0 when defaulted.
    pub fn line_of(&self, key: &str) -> usize {
        self.raw(key).1
    }

    /// Wraps a domain error as a config error on `key`'s line.
    pub fn error_at(&self, key: &str, err: impl std::fmt::Display) -> Error {
        Error::Config {
            line: self.line_of(key),
            msg: format!("`{key}`: {err}"),
        }
    }
}
