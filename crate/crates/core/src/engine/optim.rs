//! Bias-corrected Adam.

use std::collections::BTreeMap;

use super::graph::Gradients;
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
pub type ParamStore<E> = BTreeMap<String, Tensor<E>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<E>,
    pub v: ParamStore<E>,
}

impl<E: Element> AdamState<E> {
    pub fn new(config: AdamConfig, params: &ParamStore<E>) -> Self {
        let zeros = |p: &ParamStore<E>| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.dims())))
                .collect::<ParamStore<E>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One Adam step over every parameter. Parameters without a gradient
    /// entry are treated as having zero gradient.
    pub fn update(&mut self, params: &mut ParamStore<E>, grads: &Gradients<E>) -> Result<()> {
        for (name, p) in params.iter() {
            let m = self
                .m
                .get(name)
                .ok_or_else(|| Error::shape(format!("no moment for `{name}`")))?;
            if m.dims() != p.dims() {
                return Err(Error::shape(format!("moment dims differ for `{name}`")));
            }
            if let Some(g) = grads.get(name) {
                if g.dims() != p.dims() {
                    return Err(Error::shape(format!(
                        "grad dims {:?} != param dims {:?} for `{name}`",
                        g.dims(),
                        p.dims()
                    )));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (E::from_f64(c.beta1), E::from_f64(c.beta2));
        let (ob1, ob2) = (E::from_f64(1.0 - c.beta1), E::from_f64(1.0 - c.beta2));
        let step_size = E::from_f64(c.lr / bc1);
        let bc2_sqrt = E::from_f64(bc2.sqrt());
        let eps = E::from_f64(c.eps);

        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            let g = grads.get(name);
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.map_or(E::zero(), |g| g.data()[i]);
                md[i] = b1 * md[i] + ob1 * gi;
                vd[i] = b2 * vd[i] + ob2 * gi * gi;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                pd[i] = pd[i] - step_size * md[i] / denom;
            }
        }
        Ok(())
    }
}
