//! Forward process, posterior, and the ε / v parameterizations.
//!
//! Batch operations take one diffusion step per row (`ts.len() == rows`) or
//! a single step shared by every row (`ts.len() == 1`).

use super::schedule::NoiseSchedule;
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// Network output: ε prediction and the raw variance signal `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOut<E> {
    pub eps: Tensor<E>,
    pub v_raw: Tensor<E>,
}

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<E> {
    pub mean: Tensor<E>,
    pub variance: Tensor<E>,
}

pub(crate) fn step_for_row(ts: &[usize], rows: usize, i: usize) -> usize {
    if ts.len() == 1 || rows == 0 {
        ts[0]
    } else {
        ts[i]
    }
}

pub(crate) fn check_steps(sched: &NoiseSchedule, ts: &[usize], rows: usize) -> Result<()> {
    if ts.is_empty() || (ts.len() != 1 && ts.len() != rows) {
        return Err(Error::shape(format!(
            "{} diffusion steps for {rows} rows",
            ts.len()
        )));
    }
    ts.iter().try_for_each(|&t| sched.check_step(t))
}

fn same_dims<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Applies `f(row_step, a, b)` elementwise, row by row.
fn rowwise<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    ts: &[usize],
    f: impl Fn(usize, E, E) -> E,
) -> Tensor<E> {
    let mut out = Tensor::zeros(a.dims());
    let rows = a.rows();
    let w = a.row_len();
    for i in 0..rows {
        let t = step_for_row(ts, rows, i);
        let (ra, rb) = (&a.data()[i * w..(i + 1) * w], &b.data()[i * w..(i + 1) * w]);
        for ((o, &x), &y) in out.row_mut(i).iter_mut().zip(ra).zip(rb) {
            *o = f(t, x, y);
        }
    }
    out
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample<E: Element>(
    x0: &Tensor<E>,
    ts: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    same_dims(x0, eps)?;
    check_steps(sched, ts, x0.rows())?;
    Ok(rowwise(x0, eps, ts, |t, x, e| {
        let ab = sched.alpha_bar(t);
        E::from_f64(ab.sqrt()) * x + E::from_f64((1.0 - ab).sqrt()) * e
    }))
}

/// Coefficients of the posterior mean on `x0` and `xt`.
pub fn posterior_coefs(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, ct)
}

/// `q(x^{t−1} | x^t, x^0)`: mean and variance `β̃_t`.
pub fn posterior_params<E: Element>(
    x0: &Tensor<E>,
    xt: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<GaussianParams<E>> {
    same_dims(x0, xt)?;
    check_steps(sched, ts, x0.rows())?;
    let mean = rowwise(x0, xt, ts, |t, a, b| {
        let (c0, ct) = posterior_coefs(sched, t);
        E::from_f64(c0) * a + E::from_f64(ct) * b
    });
    let variance = rowwise(x0, xt, ts, |t, _, _| E::from_f64(sched.beta_tilde(t)));
    Ok(GaussianParams { mean, variance })
}

/// `(1/√α_t, −β_t/(√α_t·√(1−ᾱ_t)))`: the mean is `c_x·xt + c_e·eps`.
pub fn mean_coefs(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let sa = sched.alpha(t).sqrt();
    let c_x = 1.0 / sa;
    let c_e = -sched.beta(t) / (sa * (1.0 - sched.alpha_bar(t)).sqrt());
    (c_x, c_e)
}

/// Elementwise mean from an ε prediction. The objective graph evaluates
/// the same expression, so both paths agree bit for bit.
#[inline]
pub(crate) fn mean_elem<E: Element>(c_x: E, c_e: E, x: E, e: E) -> E {
    c_x * x + c_e * e
}

/// `(1/√α_t)·(xt − β_t/√(1−ᾱ_t)·eps_pred)`.
pub fn mean_from_eps<E: Element>(
    xt: &Tensor<E>,
    ts: &[usize],
    eps_pred: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    same_dims(xt, eps_pred)?;
    check_steps(sched, ts, xt.rows())?;
    Ok(rowwise(xt, eps_pred, ts, |t, x, e| {
        let (c_x, c_e) = mean_coefs(sched, t);
        mean_elem(E::from_f64(c_x), E::from_f64(c_e), x, e)
    }))
}

/// `log β̃_t` (floored) and `log β_t − log β̃_t`.
pub fn log_variance_bounds(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let lbt = sched.log_beta_tilde(t);
    (lbt, sched.log_beta(t) - lbt)
}

/// Log-variance interpolation with `v = (tanh(v_raw) + 1)/2`.
#[inline]
pub(crate) fn log_variance_elem<E: Element>(v_raw: E, lbt: E, span: E) -> E {
    let half = E::from_f64(0.5);
    (half * v_raw.tanh() + half) * span + lbt
}

/// Log of [`sigma_from_v`].
pub fn log_sigma_from_v<E: Element>(
    v_raw: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    check_steps(sched, ts, v_raw.rows())?;
    Ok(rowwise(v_raw, v_raw, ts, |t, v, _| {
        let (lbt, span) = log_variance_bounds(sched, t);
        log_variance_elem(v, E::from_f64(lbt), E::from_f64(span))
    }))
}

/// `exp(v·log β_t + (1−v)·log β̃_t)`, the learned reverse variance.
pub fn sigma_from_v<E: Element>(
    v_raw: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let mut lv = log_sigma_from_v(v_raw, ts, sched)?;
    lv.data_mut().iter_mut().for_each(|x| *x = x.exp());
    Ok(lv)
}

/// `KL(p ‖ q)` summed over elements.
pub fn gaussian_kl<E: Element>(p: &GaussianParams<E>, q: &GaussianParams<E>) -> Result<f64> {
    same_dims(&p.mean, &q.mean)?;
    same_dims(&p.variance, &q.variance)?;
    same_dims(&p.mean, &p.variance)?;
    let mut total = 0.0;
    for i in 0..p.mean.numel() {
        let (vp, vq) = (p.variance.data()[i].as_f64(), q.variance.data()[i].as_f64());
        if !(vp > 0.0 && vq > 0.0) {
            return Err(Error::arg("gaussian_kl needs strictly positive variances"));
        }
        let d = p.mean.data()[i].as_f64() - q.mean.data()[i].as_f64();
        total += 0.5 * (vq.ln() - vp.ln()) + (vp + d * d) / (2.0 * vq) - 0.5;
    }
    Ok(total)
}
