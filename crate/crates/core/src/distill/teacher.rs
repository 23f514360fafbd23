use std::cell::Cell;

use crate::diffusion::{
    step_from_output, Denoiser, LossMode, LossParts, ModelOut, NoiseSchedule, ObjectiveInputs,
    SamplerKind,
};
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Wraps a denoiser and counts per-sample forward evaluations.
pub struct CountingDenoiser<M> {
    inner: M,
    count: Cell<u64>,
}

impl<M> CountingDenoiser<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            count: Cell::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.get()
    }

    pub fn reset(&self) {
        self.count.set(0);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<E: Element, M: Denoiser<E>> Denoiser<E> for CountingDenoiser<M> {
    fn row_len(&self) -> usize {
        self.inner.row_len()
    }

    fn predict(&self, x: &Tensor<E>, ts: &[usize]) -> Result<ModelOut<E>> {
        let out = self.inner.predict(x, ts)?;
        self.count.set(self.count.get() + x.rows() as u64);
        Ok(out)
    }
}

/// Teacher–student loss on fixed head outputs: ε regression onto the
/// teacher plus the KL from the teacher's reverse Gaussian to the
/// student's, with the student mean frozen inside the KL.
#[allow(clippy::too_many_arguments)]
pub fn dkdm_loss<E: Element>(
    teacher_out: &ModelOut<E>,
    student_out: &ModelOut<E>,
    xt: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
    lambda: f64,
    mode: LossMode,
) -> Result<LossParts> {
    let targets = ObjectiveInputs::from_teacher(teacher_out, xt, ts, sched)?;
    Ok(crate::diffusion::evaluate_on_heads(student_out, &targets, mode, lambda, false)?.parts)
}

/// One stochastic reverse step under the teacher. The teacher output from
/// the same forward pass is returned for use as the distillation target.
pub fn teacher_step<E: Element, M: Denoiser<E> + ?Sized>(
    teacher: &M,
    xt: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
    z: Option<&Tensor<E>>,
) -> Result<(Tensor<E>, ModelOut<E>)> {
    for &t in ts {
        sched.check_step(t)?;
    }
    let out = teacher.predict(xt, ts)?;
    let next = step_from_output(&out, xt, ts, sched, SamplerKind::Ancestral, z)?;
    Ok((next, out))
}

/// `count` chains of `k` teacher steps from fresh noise: `x̂^{T−k}`.
/// The stream supplies the initial noise, then one `z` per step above 1.
pub fn generate_chain<E: Element, M: Denoiser<E> + ?Sized>(
    teacher: &M,
    sched: &NoiseSchedule,
    k: usize,
    rng: &mut SeedStream,
    count: usize,
) -> Result<Tensor<E>> {
    let horizon = sched.horizon();
    if k > horizon {
        return Err(Error::arg(format!(
            "chain length {k} exceeds horizon {horizon}"
        )));
    }
    let d = teacher.row_len();
    let mut x: Tensor<E> = rng.normal_tensor(&[count, d]);
    for j in 0..k {
        let t = horizon - j;
        let z = (t > 1).then(|| rng.normal_tensor::<E>(&[count, d]));
        x = teacher_step(teacher, &x, &[t], sched, z.as_ref())?.0;
    }
    Ok(x)
}

/// Assigns each noise row a level `t_i ~ U{1..T}` and denoises it
/// `T − t_i` times. Rows sharing a level are stepped together, so the
/// teacher sees `Σ (T − t_i)` samples in total.
pub fn shuffle_denoise<E: Element, M: Denoiser<E> + ?Sized>(
    noise: Tensor<E>,
    teacher: &M,
    sched: &NoiseSchedule,
    rng: &mut SeedStream,
) -> Result<(Tensor<E>, Vec<usize>)> {
    let horizon = sched.horizon();
    let n = noise.rows();
    let d = noise.row_len();
    let ts: Vec<usize> = (0..n).map(|_| rng.range_inclusive(1, horizon)).collect();
    let mut states = noise;
    for level in (2..=horizon).rev() {
        let active: Vec<usize> = (0..n).filter(|&i| ts[i] < level).collect();
        if active.is_empty() {
            continue;
        }
        let x = states.gather_rows(&active);
        let z: Tensor<E> = rng.normal_tensor(&[active.len(), d]);
        let (next, _) = teacher_step(teacher, &x, &[level], sched, Some(&z))?;
        for (k, &i) in active.iter().enumerate() {
            states.row_mut(i).copy_from_slice(next.row(k));
        }
    }
    Ok((states, ts))
}
