//! Denoiser architectures: a fully connected network and a small
//! convolutional network, both conditioned on a sinusoidal step embedding
//! and both emitting an ε head and a raw variance head.

mod cnn;
mod embedding;
mod mlp;

use std::collections::BTreeMap;

pub use embedding::{embed_steps, time_embedding};

use crate::diffusion::{Denoiser, LossMode, LossParts, ModelOut, Objective, ObjectiveInputs};
use crate::engine::{AdamState, Element, Feed, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Cnn,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "cnn" => Ok(Self::Cnn),
            other => Err(Error::arg(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Cnn => "cnn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub arch: Arch,
    /// `[D]` or `[C, H, W]`; the cnn needs the latter.
    pub input_dims: Vec<usize>,
    /// Widths (mlp) or channel counts (cnn), one per hidden stage.
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub horizon: usize,
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::arg("need at least one non-empty hidden stage"));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::arg("time-embedding dim must be positive and even"));
        }
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(Error::arg("input dims must be non-empty"));
        }
        if self.arch == Arch::Cnn && self.input_dims.len() != 3 {
            return Err(Error::arg("cnn input dims must be [C, H, W]"));
        }
        if self.horizon == 0 {
            return Err(Error::arg("horizon must be positive"));
        }
        Ok(())
    }

    /// Flat length of one state.
    pub fn row_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    /// `key = value` lines for checkpoint manifests.
    pub fn to_manifest(&self) -> Vec<(String, String)> {
        let join = |v: &[usize], sep: &str| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(sep)
        };
        vec![
            ("spec.arch".into(), self.arch.to_string()),
            ("spec.input".into(), join(&self.input_dims, "x")),
            ("spec.hidden".into(), join(&self.hidden, ",")),
            ("spec.time_dim".into(), self.time_dim.to_string()),
            ("spec.horizon".into(), self.horizon.to_string()),
        ]
    }

    pub fn from_manifest(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::arg(format!("manifest lacks `{k}`")))
        };
        let list = |s: &str, sep: char| -> Result<Vec<usize>> {
            s.split(sep)
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::arg(format!("bad integer `{x}`")))
                })
                .collect()
        };
        let num = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::arg(format!("bad integer `{s}`")))
        };
        let spec = Self {
            arch: get("spec.arch")?.parse()?,
            input_dims: list(get("spec.input")?, 'x')?,
            hidden: list(get("spec.hidden")?, ',')?,
            time_dim: num(get("spec.time_dim")?)?,
            horizon: num(get("spec.horizon")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parameter names and dims, in construction order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        match self.arch {
            Arch::Mlp => mlp::inventory(self),
            Arch::Cnn => cnn::inventory(self),
        }
    }

    pub fn param_count(&self) -> usize {
        self.inventory()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }
}

/// Graph nodes of one model instance.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub x: NodeId,
    pub eps: NodeId,
    pub v_raw: NodeId,
}

/// Graph input names for the state and the step embedding.
pub const IN_X: &str = "x";
pub const IN_TEMB: &str = "temb";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<E> {
    spec: DenoiserSpec,
    params: ParamStore<E>,
    /// Constant tensors the architecture needs besides its parameters.
    constants: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> DenoiserModel<E> {
    /// Random initialization; output heads start at zero.
    pub fn init(spec: DenoiserSpec, rng: &mut SeedStream) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        for (name, dims) in spec.inventory() {
            let zero_init = name.contains(".eps.") || name.contains(".v.") || dims.len() == 1;
            let t = if zero_init {
                Tensor::zeros(&dims)
            } else {
                let fan_in: usize = match spec.arch {
                    Arch::Mlp => dims[0],
                    Arch::Cnn if dims.len() == 4 => dims[1] * dims[2] * dims[3],
                    Arch::Cnn => dims[0],
                };
                let mut t: Tensor<E> = rng.normal_tensor(&dims);
                let scale = E::from_f64((1.0 / fan_in as f64).sqrt());
                t.data_mut().iter_mut().for_each(|v| *v = *v * scale);
                t
            };
            params.insert(name, t);
        }
        Self::from_params(spec, params)
    }

    /// Wraps existing parameters; names and dims must match the inventory.
    pub fn from_params(spec: DenoiserSpec, params: ParamStore<E>) -> Result<Self> {
        spec.validate()?;
        let inv = spec.inventory();
        if inv.len() != params.len() {
            return Err(Error::SpecMismatch(format!(
                "{} parameters for a spec with {}",
                params.len(),
                inv.len()
            )));
        }
        for (name, dims) in &inv {
            match params.get(name) {
                Some(t) if t.dims() == dims.as_slice() => {}
                Some(t) => {
                    return Err(Error::SpecMismatch(format!(
                        "`{name}` has dims {:?}, spec wants {dims:?}",
                        t.dims()
                    )))
                }
                None => return Err(Error::SpecMismatch(format!("missing parameter `{name}`"))),
            }
        }
        let constants = match spec.arch {
            Arch::Mlp => BTreeMap::new(),
            Arch::Cnn => cnn::constants(&spec),
        };
        Ok(Self {
            spec,
            params,
            constants,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds this model to `g`. Parameters are graph inputs named after the
    /// inventory; `x` and `temb` are the state and step-embedding inputs.
    pub fn build(&self, g: &mut Graph<E>, params_grad: bool, input_grad: bool) -> Heads {
        match self.spec.arch {
            Arch::Mlp => mlp::build(&self.spec, g, params_grad, input_grad),
            Arch::Cnn => cnn::build(&self.spec, g, params_grad, input_grad),
        }
    }

    /// Binds parameters and architecture constants.
    pub fn bind<'a>(&'a self, feed: &mut Feed<'a, E>) {
        feed.extend(&self.params);
        feed.extend(&self.constants);
    }

    pub fn check_batch(&self, x: &Tensor<E>, ts: &[usize]) -> Result<()> {
        let d = self.spec.row_len();
        if x.dims().len() != 2 || x.dims()[1] != d {
            return Err(Error::shape(format!(
                "state dims {:?}, model expects [B, {d}]",
                x.dims()
            )));
        }
        if ts.is_empty() || (ts.len() != 1 && ts.len() != x.rows()) {
            return Err(Error::shape(format!(
                "{} steps for {} rows",
                ts.len(),
                x.rows()
            )));
        }
        if let Some(t) = ts.iter().find(|&&t| t < 1 || t > self.spec.horizon) {
            return Err(Error::arg(format!(
                "step {t} outside [1, {}]",
                self.spec.horizon
            )));
        }
        Ok(())
    }

    pub fn embed(&self, ts: &[usize], rows: usize) -> Result<Tensor<E>> {
        embed_steps(ts, rows, self.spec.time_dim, self.spec.horizon)
    }

    /// Forward, objective, backward and one optimizer step on `(xt, ts)`.
    pub fn train_step(
        &mut self,
        opt: &mut AdamState<E>,
        xt: &Tensor<E>,
        ts: &[usize],
        targets: &ObjectiveInputs<E>,
        mode: LossMode,
        lambda: f64,
    ) -> Result<LossParts> {
        self.check_batch(xt, ts)?;
        let temb = self.embed(ts, xt.rows())?;
        let mut g = Graph::new();
        let heads = self.build(&mut g, true, false);
        let obj = Objective::attach(
            &mut g,
            heads.eps,
            heads.v_raw,
            self.spec.row_len(),
            mode,
            lambda,
        )?;
        let grads = {
            let mut feed = Feed::new();
            self.bind(&mut feed);
            feed.insert(IN_X, xt).insert(IN_TEMB, &temb);
            targets.bind(&mut feed);
            g.forward(&feed)?;
            g.backpropagate(obj.total, &Tensor::scalar(E::one()))?
        };
        let parts = obj.parts(&g)?;
        opt.update(&mut self.params, &grads)?;
        Ok(parts)
    }
}

impl<E: Element> Denoiser<E> for DenoiserModel<E> {
    fn row_len(&self) -> usize {
        self.spec.row_len()
    }

    fn predict(&self, x: &Tensor<E>, ts: &[usize]) -> Result<ModelOut<E>> {
        self.check_batch(x, ts)?;
        let temb = self.embed(ts, x.rows())?;
        let mut g = Graph::new();
        let heads = self.build(&mut g, false, false);
        let mut feed = Feed::new();
        self.bind(&mut feed);
        feed.insert(IN_X, x).insert(IN_TEMB, &temb);
        g.forward(&feed)?;
        Ok(ModelOut {
            eps: g.value(heads.eps)?.clone(),
            v_raw: g.value(heads.v_raw)?.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mlp_spec() -> DenoiserSpec {
        DenoiserSpec {
            arch: Arch::Mlp,
            input_dims: vec![3],
            hidden: vec![5, 4, 6],
            time_dim: 4,
            horizon: 20,
        }
    }

    pub(crate) fn cnn_spec() -> DenoiserSpec {
        DenoiserSpec {
            arch: Arch::Cnn,
            input_dims: vec![2, 3, 4],
            hidden: vec![3, 2],
            time_dim: 4,
            horizon: 20,
        }
    }

    /// Randomizes every parameter, heads included.
    pub(crate) fn randomized(spec: DenoiserSpec, seed: u64) -> DenoiserModel<f64> {
        let mut rng = SeedStream::from_seed(seed);
        let mut m = DenoiserModel::<f64>::init(spec, &mut rng).unwrap();
        for t in m.params_mut().values_mut() {
            for v in t.data_mut() {
                *v = 0.5 * rng.normal();
            }
        }
        m
    }

    /// Scalar probe `Σ w₁·eps + w₂·v` and its gradient via the graph.
    fn probe(
        m: &DenoiserModel<f64>,
        x: &Tensor<f64>,
        ts: &[usize],
        w: &(Tensor<f64>, Tensor<f64>),
    ) -> (f64, crate::engine::Gradients<f64>) {
        let temb = m.embed(ts, x.rows()).unwrap();
        let mut g = Graph::new();
        let h = m.build(&mut g, true, true);
        let w1 = g.input("w1", false);
        let w2 = g.input("w2", false);
        let a = g.mul(h.eps, w1);
        let b = g.mul(h.v_raw, w2);
        let sa = g.sum(a);
        let sb = g.sum(b);
        let s = g.add(sa, sb);
        let mut feed = Feed::new();
        m.bind(&mut feed);
        feed.insert(IN_X, x)
            .insert(IN_TEMB, &temb)
            .insert("w1", &w.0)
            .insert("w2", &w.1);
        g.forward(&feed).unwrap();
        let val = g.value(s).unwrap().data()[0];
        let grads = g.backpropagate(s, &Tensor::scalar(1.0)).unwrap();
        (val, grads)
    }

    fn gradient_check(spec: DenoiserSpec, seed: u64) {
        let mut m = randomized(spec.clone(), seed);
        let mut rng = SeedStream::from_seed(seed + 100);
        let d = spec.row_len();
        let x0: Tensor<f64> = rng.normal_tensor(&[2, d]);
        let ts = [3, 17];
        let w = (rng.normal_tensor(&[2, d]), rng.normal_tensor(&[2, d]));
        let (_, grads) = probe(&m, &x0, &ts, &w);
        let h = 1e-5;

        let names: Vec<String> = m.params().keys().cloned().collect();
        for name in names {
            let n = m.params()[&name].numel();
            let mut fd = vec![0.0; n];
            for i in 0..n {
                let orig = m.params()[&name].data()[i];
                m.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = probe(&m, &x0, &ts, &w).0;
                m.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = probe(&m, &x0, &ts, &w).0;
                m.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
                fd[i] = (up - down) / (2.0 * h);
            }
            let ad = grads[&name].data();
            let num: f64 = ad
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-6, "{name}: rel err {}", num / den);
        }

        // and with respect to the input state
        let mut fd = vec![0.0; x0.numel()];
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            fd[i] = (probe(&m, &xp, &ts, &w).0 - probe(&m, &xm, &ts, &w).0) / (2.0 * h);
        }
        let ad = grads[IN_X].data();
        let num: f64 = ad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "x: rel err {}", num / den);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        gradient_check(mlp_spec(), 1);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        gradient_check(cnn_spec(), 2);
    }

    #[test]
    fn zero_heads_predict_zero_noise() {
        for spec in [mlp_spec(), cnn_spec()] {
            let mut rng = SeedStream::from_seed(3);
            let m = DenoiserModel::<f64>::init(spec.clone(), &mut rng).unwrap();
            let x: Tensor<f64> = rng.normal_tensor(&[4, spec.row_len()]);
            let out = m.predict(&x, &[7]).unwrap();
            assert_eq!(out.eps.dims(), x.dims());
            assert_eq!(out.v_raw.dims(), x.dims());
            assert!(out.eps.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batching_matches_single_rows_bitwise() {
        for spec in [mlp_spec(), cnn_spec()] {
            let m = randomized(spec.clone(), 4);
            let mut rng = SeedStream::from_seed(5);
            let x: Tensor<f32> = rng.normal_tensor(&[2, spec.row_len()]);
            let m32 = DenoiserModel::<f32>::from_params(
                spec.clone(),
                m.params()
                    .iter()
                    .map(|(k, v)| (k.clone(), v.cast()))
                    .collect(),
            )
            .unwrap();
            let both = m32.predict(&x, &[4, 9]).unwrap();
            let a = m32.predict(&x.gather_rows(&[0]), &[4]).unwrap();
            let b = m32.predict(&x.gather_rows(&[1]), &[9]).unwrap();
            let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(both.eps.row(0)), bits(a.eps.data()));
            assert_eq!(bits(both.eps.row(1)), bits(b.eps.data()));
            assert_eq!(bits(both.v_raw.row(1)), bits(b.v_raw.data()));
        }
    }

    #[test]
    fn shape_and_step_errors() {
        let m = randomized(mlp_spec(), 6);
        let bad: Tensor<f64> = Tensor::zeros(&[2, 4]);
        assert!(matches!(m.predict(&bad, &[1]), Err(Error::Shape(_))));
        let ok: Tensor<f64> = Tensor::zeros(&[2, 3]);
        assert!(m.predict(&ok, &[0]).is_err());
        assert!(m.predict(&ok, &[21]).is_err());
        assert!(m.predict(&ok, &[20]).is_ok());
    }

    #[test]
    fn manifest_round_trip_and_mismatch() {
        for spec in [mlp_spec(), cnn_spec()] {
            let map: BTreeMap<String, String> = spec.to_manifest().into_iter().collect();
            assert_eq!(DenoiserSpec::from_manifest(&map).unwrap(), spec);
        }
        let cnn = randomized(cnn_spec(), 7);
        let wrong = DenoiserSpec {
            input_dims: vec![24],
            arch: Arch::Mlp,
            ..cnn_spec()
        };
        assert!(matches!(
            DenoiserModel::from_params(wrong, cnn.params().clone()),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = mlp_spec();
        s.hidden.clear();
        assert!(s.validate().is_err());
        let mut s = mlp_spec();
        s.time_dim = 3;
        assert!(s.validate().is_err());
        let mut s = cnn_spec();
        s.input_dims = vec![24];
        assert!(s.validate().is_err());
    }
}
