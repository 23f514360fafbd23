use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

use super::teacher::shuffle_denoise;

/// `round(ρ·T·b)`; an error when that falls below `b`.
pub fn pool_capacity(rho: f64, horizon: usize, b: usize) -> Result<usize> {
    if !(rho > 0.0) || b == 0 {
        return Err(Error::arg(format!(
            "need rho > 0 and b >= 1, got rho={rho}, b={b}"
        )));
    }
    let cap = (rho * horizon as f64 * b as f64).round();
    if cap < b as f64 {
        return Err(Error::arg(format!(
            "pool capacity round({rho}·{horizon}·{b}) = {cap} is below b = {b}"
        )));
    }
    Ok(cap as usize)
}

/// `b` distinct indices below `capacity`, uniformly without replacement
/// (a partial Fisher–Yates shuffle). Taking everything returns `0..capacity`
/// and consumes no randomness.
pub fn select_subset(capacity: usize, b: usize, rng: &mut SeedStream) -> Result<Vec<usize>> {
    if b > capacity {
        return Err(Error::arg(format!("cannot select {b} of {capacity} items")));
    }
    let mut idx: Vec<usize> = (0..capacity).collect();
    if b == capacity {
        return Ok(idx);
    }
    for i in 0..b {
        let j = i + rng.below((capacity - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(b);
    Ok(idx)
}

/// Noisy samples at mixed levels, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBatchSet<E> {
    states: Tensor<E>,
    ts: Vec<usize>,
    horizon: usize,
    /// Number of completed replacement rounds.
    pub generation: u64,
}

impl<E: Element> KnowledgeBatchSet<E> {
    /// Every item is fresh noise at `t = T`.
    pub fn fresh(capacity: usize, row_len: usize, horizon: usize, rng: &mut SeedStream) -> Self {
        Self {
            states: rng.normal_tensor(&[capacity, row_len]),
            ts: vec![horizon; capacity],
            horizon,
            generation: 0,
        }
    }

    /// Items spread uniformly over levels by shuffle denoising, built in
    /// chunks of `chunk` rows.
    pub fn shuffled<M: Denoiser<E> + ?Sized>(
        capacity: usize,
        chunk: usize,
        teacher: &M,
        sched: &NoiseSchedule,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::arg("chunk size must be >= 1"));
        }
        let d = teacher.row_len();
        let mut states = Vec::with_capacity(capacity * d);
        let mut ts = Vec::with_capacity(capacity);
        let mut done = 0;
        while done < capacity {
            let n = chunk.min(capacity - done);
            let noise = rng.normal_tensor(&[n, d]);
            let (s, t) = shuffle_denoise(noise, teacher, sched, rng)?;
            states.extend_from_slice(s.data());
            ts.extend(t);
            done += n;
            log::debug!("shuffle denoise: {done}/{capacity} items");
        }
        Ok(Self {
            states: Tensor::new(vec![capacity, d], states)?,
            ts,
            horizon: sched.horizon(),
            generation: 0,
        })
    }

    /// Restores a saved pool.
    pub fn from_parts(
        states: Tensor<E>,
        ts: Vec<usize>,
        horizon: usize,
        generation: u64,
    ) -> Result<Self> {
        if states.dims().len() != 2 || states.rows() != ts.len() || ts.is_empty() {
            return Err(Error::shape(format!(
                "pool states {:?} with {} levels",
                states.dims(),
                ts.len()
            )));
        }
        if let Some(t) = ts.iter().find(|&&t| t < 1 || t > horizon) {
            return Err(Error::arg(format!("pool level {t} outside [1, {horizon}]")));
        }
        Ok(Self {
            states,
            ts,
            horizon,
            generation,
        })
    }

    pub fn capacity(&self) -> usize {
        self.ts.len()
    }

    pub fn states(&self) -> &Tensor<E> {
        &self.states
    }

    pub fn levels(&self) -> &[usize] {
        &self.ts
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gather(&self, idx: &[usize]) -> (Tensor<E>, Vec<usize>) {
        (
            self.states.gather_rows(idx),
            idx.iter().map(|&i| self.ts[i]).collect(),
        )
    }

    /// Item `idx[k]` takes row `k` of `next` one level lower; items leaving
    /// `t = 1` restart as fresh noise at `t = T`, drawn in `idx` order.
    pub fn advance(&mut self, idx: &[usize], next: &Tensor<E>, rng: &mut SeedStream) {
        for (k, &i) in idx.iter().enumerate() {
            if self.ts[i] == 1 {
                for v in self.states.row_mut(i) {
                    *v = E::from_f64(rng.normal());
                }
                self.ts[i] = self.horizon;
            } else {
                self.states.row_mut(i).copy_from_slice(next.row(k));
                self.ts[i] -= 1;
            }
        }
        self.generation += 1;
    }
}
