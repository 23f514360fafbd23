use crate::diffusion::{Denoiser, ModelOut, NoiseSchedule};
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// `E[ε | xt]` when `x0 ~ N(m, s²I)`:
/// `√(1−ᾱ)·(xt − √ᾱ·m) / (ᾱ·s² + 1 − ᾱ)`.
pub fn analytic_teacher_eps<E: Element>(
    xt: &Tensor<E>,
    ts: &[usize],
    m: &[f64],
    s2: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if !(s2 > 0.0) {
        return Err(Error::arg(format!("s2 must be > 0, got {s2}")));
    }
    if xt.dims().len() != 2 || xt.row_len() != m.len() {
        return Err(Error::shape(format!(
            "state dims {:?} vs mean of length {}",
            xt.dims(),
            m.len()
        )));
    }
    let rows = xt.rows();
    if ts.is_empty() || (ts.len() != 1 && ts.len() != rows) {
        return Err(Error::shape(format!("{} steps for {rows} rows", ts.len())));
    }
    let mut out = Tensor::zeros(xt.dims());
    for i in 0..rows {
        let t = if ts.len() == 1 { ts[0] } else { ts[i] };
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let scale = (1.0 - ab).sqrt() / (ab * s2 + 1.0 - ab);
        let sa = ab.sqrt();
        for ((o, &x), &mk) in out.row_mut(i).iter_mut().zip(xt.row(i)).zip(m) {
            *o = E::from_f64(scale * (x.as_f64() - sa * mk));
        }
    }
    Ok(out)
}

/// The exact ε predictor for Gaussian data, usable wherever a trained
/// model is. Its variance head sits at the midpoint of the log-range.
#[derive(Clone, Debug)]
pub struct AnalyticTeacher {
    pub m: Vec<f64>,
    pub s2: f64,
    pub sched: NoiseSchedule,
}

impl<E: Element> Denoiser<E> for AnalyticTeacher {
    fn row_len(&self) -> usize {
        self.m.len()
    }

    fn predict(&self, x: &Tensor<E>, ts: &[usize]) -> Result<ModelOut<E>> {
        Ok(ModelOut {
            eps: analytic_teacher_eps(x, ts, &self.m, self.s2, &self.sched)?,
            v_raw: Tensor::zeros(x.dims()),
        })
    }
}
