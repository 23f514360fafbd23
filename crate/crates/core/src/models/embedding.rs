use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal features of step `t`: `dim/2` sines then `dim/2` cosines at
/// frequencies `MAX_PERIOD^(−k/(dim/2))`, `k = 0..dim/2`.
pub fn time_embedding(t: usize, dim: usize, horizon: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "time-embedding dim {dim} must be positive and even"
        )));
    }
    if t > horizon {
        return Err(Error::arg(format!("step {t} outside [0, {horizon}]")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
        let phase = t as f64 * freq;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
    }
    Ok(out)
}

/// `[B, dim]` embeddings for one step per row (or one shared step).
pub fn embed_steps<E: Element>(
    ts: &[usize],
    rows: usize,
    dim: usize,
    horizon: usize,
) -> Result<Tensor<E>> {
    let mut data = Vec::with_capacity(rows * dim);
    if ts.len() == 1 {
        let row = time_embedding(ts[0], dim, horizon)?;
        for _ in 0..rows {
            data.extend(row.iter().map(|&v| E::from_f64(v)));
        }
    } else {
        for &t in ts {
            data.extend(
                time_embedding(t, dim, horizon)?
                    .into_iter()
                    .map(E::from_f64),
            );
        }
    }
    Tensor::new(vec![rows, dim], data)
}
