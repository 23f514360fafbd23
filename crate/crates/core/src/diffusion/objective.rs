//! The training objective as graph nodes on top of a model's two heads.
//!
//! Both the data-based hybrid loss and the teacher-driven distillation loss
//! have the same shape: an MSE between the ε head and a target, plus a KL
//! from a target Gaussian to the model's reverse Gaussian. Inside the KL the
//! model mean is built from a stop-gradient copy of the ε head, so the KL
//! only trains the variance head.
//!
//! Per element, with `d = logvar_model − logvar_target`,
//! `KL = ½d + ½·exp(−d) + ½·Δμ²·exp(−logvar_model) − ½`. Writing the
//! variance ratio as `exp(−d)` keeps the KL exactly zero whenever target and
//! model agree bit for bit.

use super::process::{
    check_steps, log_variance_bounds, log_variance_elem, mean_coefs, mean_elem, posterior_coefs,
    step_for_row, ModelOut,
};
use super::schedule::NoiseSchedule;
use crate::engine::{Element, Feed, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Hybrid,
    Simple,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "simple" => Ok(Self::Simple),
            other => Err(Error::arg(format!("unknown loss mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hybrid => "hybrid",
            Self::Simple => "simple",
        })
    }
}

/// Loss values from one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub simple: f64,
    /// Absent in simple mode.
    pub vlb: Option<f64>,
    pub total: f64,
}

const IN_TARGET_EPS: &str = "obj.target_eps";
const IN_TARGET_MEAN: &str = "obj.target_mean";
const IN_TARGET_LOGVAR: &str = "obj.target_logvar";
const IN_XT: &str = "obj.xt";
const IN_C_X: &str = "obj.c_x";
const IN_C_E: &str = "obj.c_e";
const IN_LBT: &str = "obj.log_beta_tilde";
const IN_SPAN: &str = "obj.log_span";

/// Objective nodes attached to a graph.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub simple: NodeId,
    pub vlb: Option<NodeId>,
    pub total: NodeId,
}

impl Objective {
    /// Adds the objective over heads `eps` and `v_raw` whose rows have
    /// `row_len` elements.
    pub fn attach<E: Element>(
        g: &mut Graph<E>,
        eps: NodeId,
        v_raw: NodeId,
        row_len: usize,
        mode: LossMode,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::arg(format!("lambda must be >= 0, got {lambda}")));
        }
        let target_eps = g.input(IN_TARGET_EPS, false);
        let neg_target = g.affine(target_eps, -1.0, 0.0);
        let diff = g.add(eps, neg_target);
        let sq = g.mul(diff, diff);
        let simple = g.mean(sq);

        if mode == LossMode::Simple {
            return Ok(Self {
                simple,
                vlb: None,
                total: simple,
            });
        }

        let xt = g.input(IN_XT, false);
        let c_x = g.input(IN_C_X, false);
        let c_e = g.input(IN_C_E, false);
        let lbt = g.input(IN_LBT, false);
        let span = g.input(IN_SPAN, false);
        let target_mean = g.input(IN_TARGET_MEAN, false);
        let target_logvar = g.input(IN_TARGET_LOGVAR, false);

        // model mean from a frozen ε head
        let eps_frozen = g.stop_gradient(eps);
        let mx = g.mul(c_x, xt);
        let me = g.mul(c_e, eps_frozen);
        let mean = g.add(mx, me);

        // model log-variance from v
        let tv = g.tanh(v_raw);
        let frac = g.affine(tv, 0.5, 0.5);
        let scaled = g.mul(frac, span);
        let logvar = g.add(scaled, lbt);

        let neg_tlv = g.affine(target_logvar, -1.0, 0.0);
        let d = g.add(logvar, neg_tlv);
        let half_d = g.affine(d, 0.5, 0.0);
        let neg_d = g.affine(d, -1.0, 0.0);
        let ratio = g.exp(neg_d);
        let half_ratio = g.affine(ratio, 0.5, -0.5);
        let neg_mean = g.affine(mean, -1.0, 0.0);
        let dm = g.add(target_mean, neg_mean);
        let dm2 = g.mul(dm, dm);
        let neg_lv = g.affine(logvar, -1.0, 0.0);
        let inv_var = g.exp(neg_lv);
        let w = g.mul(dm2, inv_var);
        let half_w = g.affine(w, 0.5, 0.0);
        let kl_a = g.add(half_d, half_ratio);
        let kl = g.add(kl_a, half_w);
        // per-sample KL sums over the row; average over the batch
        let kl_mean = g.mean(kl);
        let vlb = g.affine(kl_mean, row_len as f64, 0.0);
        let weighted = g.affine(vlb, lambda, 0.0);
        let total = g.add(simple, weighted);
        Ok(Self {
            simple,
            vlb: Some(vlb),
            total,
        })
    }

    pub fn parts<E: Element>(&self, g: &Graph<E>) -> Result<LossParts> {
        let read = |n: NodeId| -> Result<f64> { Ok(g.value(n)?.data()[0].as_f64()) };
        Ok(LossParts {
            simple: read(self.simple)?,
            vlb: self.vlb.map(read).transpose()?,
            total: read(self.total)?,
        })
    }
}

/// Constant tensors the objective reads for one batch.
#[derive(Clone, Debug)]
pub struct ObjectiveInputs<E> {
    target_eps: Tensor<E>,
    target_mean: Tensor<E>,
    target_logvar: Tensor<E>,
    xt: Tensor<E>,
    c_x: Tensor<E>,
    c_e: Tensor<E>,
    lbt: Tensor<E>,
    span: Tensor<E>,
}

fn per_row<E: Element>(dims: &[usize], ts: &[usize], f: impl Fn(usize) -> f64) -> Tensor<E> {
    let mut out = Tensor::zeros(dims);
    let rows = out.rows();
    for i in 0..rows {
        let v = E::from_f64(f(step_for_row(ts, rows, i)));
        out.row_mut(i).iter_mut().for_each(|x| *x = v);
    }
    out
}

impl<E: Element> ObjectiveInputs<E> {
    fn coefficients(
        xt: &Tensor<E>,
        ts: &[usize],
        sched: &NoiseSchedule,
    ) -> (Tensor<E>, Tensor<E>, Tensor<E>, Tensor<E>) {
        let d = xt.dims();
        (
            per_row(d, ts, |t| mean_coefs(sched, t).0),
            per_row(d, ts, |t| mean_coefs(sched, t).1),
            per_row(d, ts, |t| log_variance_bounds(sched, t).0),
            per_row(d, ts, |t| log_variance_bounds(sched, t).1),
        )
    }

    /// Data-based targets: the injected noise and the forward posterior.
    pub fn from_data(
        x0: &Tensor<E>,
        xt: &Tensor<E>,
        eps: &Tensor<E>,
        ts: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        if x0.dims() != xt.dims() || eps.dims() != xt.dims() {
            return Err(Error::shape("x0, xt and eps must share dims"));
        }
        check_steps(sched, ts, xt.rows())?;
        let (c_x, c_e, lbt, span) = Self::coefficients(xt, ts, sched);
        let mut target_mean = Tensor::zeros(xt.dims());
        let rows = xt.rows();
        for i in 0..rows {
            let (c0, ct) = posterior_coefs(sched, step_for_row(ts, rows, i));
            let (c0, ct) = (E::from_f64(c0), E::from_f64(ct));
            let (a, b) = (x0.row(i), xt.row(i));
            for ((m, &a), &b) in target_mean.row_mut(i).iter_mut().zip(a).zip(b) {
                *m = c0 * a + ct * b;
            }
        }
        Ok(Self {
            target_eps: eps.clone(),
            target_mean,
            target_logvar: lbt.clone(),
            xt: xt.clone(),
            c_x,
            c_e,
            lbt,
            span,
        })
    }

    /// Teacher-driven targets: the teacher's ε head and its own reverse
    /// Gaussian, computed with the same arithmetic the graph uses.
    pub fn from_teacher(
        teacher: &ModelOut<E>,
        xt: &Tensor<E>,
        ts: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        if teacher.eps.dims() != xt.dims() || teacher.v_raw.dims() != xt.dims() {
            return Err(Error::shape(format!(
                "teacher heads {:?}/{:?} vs state {:?}",
                teacher.eps.dims(),
                teacher.v_raw.dims(),
                xt.dims()
            )));
        }
        check_steps(sched, ts, xt.rows())?;
        let (c_x, c_e, lbt, span) = Self::coefficients(xt, ts, sched);
        let n = xt.numel();
        let mut target_mean = Tensor::zeros(xt.dims());
        let mut target_logvar = Tensor::zeros(xt.dims());
        for i in 0..n {
            target_mean.data_mut()[i] = mean_elem(
                c_x.data()[i],
                c_e.data()[i],
                xt.data()[i],
                teacher.eps.data()[i],
            );
            target_logvar.data_mut()[i] =
                log_variance_elem(teacher.v_raw.data()[i], lbt.data()[i], span.data()[i]);
        }
        Ok(Self {
            target_eps: teacher.eps.clone(),
            target_mean,
            target_logvar,
            xt: xt.clone(),
            c_x,
            c_e,
            lbt,
            span,
        })
    }

    pub fn bind<'a>(&'a self, feed: &mut Feed<'a, E>) {
        feed.insert(IN_TARGET_EPS, &self.target_eps)
            .insert(IN_TARGET_MEAN, &self.target_mean)
            .insert(IN_TARGET_LOGVAR, &self.target_logvar)
            .insert(IN_XT, &self.xt)
            .insert(IN_C_X, &self.c_x)
            .insert(IN_C_E, &self.c_e)
            .insert(IN_LBT, &self.lbt)
            .insert(IN_SPAN, &self.span);
    }
}

/// Loss value and gradients with respect to the two heads.
#[derive(Clone, Debug)]
pub struct HeadLoss<E> {
    pub parts: LossParts,
    pub grad_eps: Tensor<E>,
    pub grad_v: Tensor<E>,
}

const HEAD_EPS: &str = "head.eps";
const HEAD_V: &str = "head.v_raw";

/// Evaluates the objective on fixed head outputs. `which` picks the term to
/// differentiate: the total, or only the KL term.
pub(crate) fn evaluate_on_heads<E: Element>(
    out: &ModelOut<E>,
    inputs: &ObjectiveInputs<E>,
    mode: LossMode,
    lambda: f64,
    vlb_only: bool,
) -> Result<HeadLoss<E>> {
    if out.eps.dims() != inputs.xt.dims() || out.v_raw.dims() != inputs.xt.dims() {
        return Err(Error::shape("head dims differ from state dims"));
    }
    let mut g = Graph::new();
    let eps = g.input(HEAD_EPS, true);
    let v = g.input(HEAD_V, true);
    let obj = Objective::attach(&mut g, eps, v, out.eps.row_len(), mode, lambda)?;
    let mut feed = Feed::new();
    feed.insert(HEAD_EPS, &out.eps).insert(HEAD_V, &out.v_raw);
    inputs.bind(&mut feed);
    g.forward(&feed)?;
    let parts = obj.parts(&g)?;
    let target = if vlb_only {
        obj.vlb
            .ok_or_else(|| Error::arg("no KL term in simple mode"))?
    } else {
        obj.total
    };
    let mut grads = g.backpropagate(target, &Tensor::scalar(E::one()))?;
    Ok(HeadLoss {
        parts,
        grad_eps: grads.remove(HEAD_EPS).expect("declared"),
        grad_v: grads.remove(HEAD_V).expect("declared"),
    })
}

/// `L_simple + λ·L_vlb` against the forward posterior for one batch.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<E: Element>(
    out: &ModelOut<E>,
    x0: &Tensor<E>,
    xt: &Tensor<E>,
    ts: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
    lambda: f64,
    mode: LossMode,
) -> Result<LossParts> {
    let inputs = ObjectiveInputs::from_data(x0, xt, eps, ts, sched)?;
    Ok(evaluate_on_heads(out, &inputs, mode, lambda, false)?.parts)
}

/// Like [`hybrid_loss`] but also returns head gradients; `vlb_only`
/// differentiates only the KL term.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss_with_grads<E: Element>(
    out: &ModelOut<E>,
    x0: &Tensor<E>,
    xt: &Tensor<E>,
    ts: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
    lambda: f64,
    vlb_only: bool,
) -> Result<HeadLoss<E>> {
    let inputs = ObjectiveInputs::from_data(x0, xt, eps, ts, sched)?;
    evaluate_on_heads(out, &inputs, LossMode::Hybrid, lambda, vlb_only)
}
