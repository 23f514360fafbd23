//! Reverse-process steps and sample generation.

use super::process::{check_steps, mean_from_eps, sigma_from_v, step_for_row, ModelOut};
use super::schedule::NoiseSchedule;
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Anything that predicts `(ε, v)` for a batch of flat states.
pub trait Denoiser<E: Element> {
    /// Flat length of one state.
    fn row_len(&self) -> usize;

    /// `x: [B, row_len]`; one step per row or one shared step.
    fn predict(&self, x: &Tensor<E>, ts: &[usize]) -> Result<ModelOut<E>>;
}

impl<E: Element, D: Denoiser<E> + ?Sized> Denoiser<E> for &D {
    fn row_len(&self) -> usize {
        (**self).row_len()
    }

    fn predict(&self, x: &Tensor<E>, ts: &[usize]) -> Result<ModelOut<E>> {
        (**self).predict(x, ts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ancestral,
    /// Deterministic DDIM (η = 0).
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::arg(format!("unknown sampler `{other}`"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ancestral => "ancestral",
            Self::Ddim => "ddim",
        })
    }
}

/// Applies one reverse step to `xt` given the model output at `ts`.
/// Rows at `t = 1` take the mean with no injected noise.
pub fn step_from_output<E: Element>(
    out: &ModelOut<E>,
    xt: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
    sampler: SamplerKind,
    z: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let rows = xt.rows();
    check_steps(sched, ts, rows)?;
    match sampler {
        SamplerKind::Ancestral => {
            let needs_noise = (0..rows).any(|i| step_for_row(ts, rows, i) > 1);
            if needs_noise && z.is_none() {
                return Err(Error::arg("ancestral step needs z for t > 1"));
            }
            if let Some(z) = z {
                if z.dims() != xt.dims() {
                    return Err(Error::shape(format!(
                        "z dims {:?} vs state dims {:?}",
                        z.dims(),
                        xt.dims()
                    )));
                }
            }
            let mut x = mean_from_eps(xt, ts, &out.eps, sched)?;
            let var = sigma_from_v(&out.v_raw, ts, sched)?;
            if let Some(z) = z {
                for i in 0..rows {
                    if step_for_row(ts, rows, i) == 1 {
                        continue;
                    }
                    let (vr, zr) = (var.row(i), z.row(i));
                    for ((x, &v), &zz) in x.row_mut(i).iter_mut().zip(vr).zip(zr) {
                        *x = *x + v.sqrt() * zz;
                    }
                }
            }
            Ok(x)
        }
        SamplerKind::Ddim => {
            let mut x = Tensor::zeros(xt.dims());
            for i in 0..rows {
                let t = step_for_row(ts, rows, i);
                let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
                let (sa, s1a) = (E::from_f64(ab.sqrt()), E::from_f64((1.0 - ab).sqrt()));
                let (sp, s1p) = (
                    E::from_f64(ab_prev.sqrt()),
                    E::from_f64((1.0 - ab_prev).sqrt()),
                );
                let (xr, er) = (xt.row(i), out.eps.row(i));
                for ((o, &xv), &e) in x.row_mut(i).iter_mut().zip(xr).zip(er) {
                    let x0 = (xv - s1a * e) / sa;
                    *o = sp * x0 + s1p * e;
                }
            }
            Ok(x)
        }
    }
}

/// One reverse step under `model`.
pub fn denoise_step<E: Element, M: Denoiser<E> + ?Sized>(
    model: &M,
    xt: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
    sampler: SamplerKind,
    z: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    check_steps(sched, ts, xt.rows())?;
    let out = model.predict(xt, ts)?;
    step_from_output(&out, xt, ts, sched, sampler, z)
}

/// Evenly spaced descending subsequence of `1..=T` with `n` entries.
///
/// With `stride = ⌊T/n⌋`, the steps are `T, T−stride, …, T−(n−2)·stride`
/// followed by `1`; `n = 1` gives `[T]`. For `T = 1000, n = 50` that is
/// `1000, 980, …, 40, 1`.
pub fn respaced_steps(horizon: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 1 || n_steps > horizon {
        return Err(Error::arg(format!(
            "n_steps {n_steps} outside [1, {horizon}]"
        )));
    }
    if n_steps == 1 {
        return Ok(vec![horizon]);
    }
    let stride = horizon / n_steps;
    let mut steps: Vec<usize> = (0..n_steps - 1).map(|k| horizon - k * stride).collect();
    steps.push(1);
    Ok(steps)
}

/// Rows generated per model call inside [`generate`].
pub const GENERATE_CHUNK: usize = 512;

/// Draws `count` samples from pure noise in chunks of [`GENERATE_CHUNK`].
///
/// Per chunk the stream supplies the initial noise first, then one `z`
/// tensor for every step above `t = 1`. When `n_steps == T` the original
/// schedule is used directly; otherwise the respaced schedule supplies the
/// coefficients while the model still sees original step indices.
pub fn generate<E: Element, M: Denoiser<E> + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    n_steps: usize,
    sampler: SamplerKind,
    rng: &mut SeedStream,
    count: usize,
) -> Result<Tensor<E>> {
    let d = model.row_len();
    let desc = respaced_steps(sched.horizon(), n_steps)?;
    if count == 0 {
        return Ok(Tensor::zeros(&[0, d]));
    }
    let respaced;
    let coef_sched = if n_steps == sched.horizon() {
        sched
    } else {
        let asc: Vec<usize> = desc.iter().rev().copied().collect();
        respaced = sched.respaced(&asc)?;
        &respaced
    };

    let mut out = Vec::with_capacity(count * d);
    let mut done = 0;
    while done < count {
        let n = GENERATE_CHUNK.min(count - done);
        let mut x: Tensor<E> = rng.normal_tensor(&[n, d]);
        for (k, &t_model) in desc.iter().enumerate() {
            let t_coef = n_steps - k;
            let pred = model.predict(&x, &[t_model])?;
            let z = (sampler == SamplerKind::Ancestral && t_coef > 1)
                .then(|| rng.normal_tensor::<E>(&[n, d]));
            x = step_from_output(&pred, &x, &[t_coef], coef_sched, sampler, z.as_ref())?;
        }
        out.extend_from_slice(x.data());
        done += n;
    }
    Tensor::new(vec![count, d], out)
}
