use super::{DenoiserSpec, Heads, IN_TEMB, IN_X};
use crate::engine::{Element, Graph};

pub(super) fn inventory(spec: &DenoiserSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.row_len();
    let mut out = Vec::new();
    let mut width = d + spec.time_dim;
    for (i, &h) in spec.hidden.iter().enumerate() {
        out.push((format!("mlp.l{i}.w"), vec![width, h]));
        out.push((format!("mlp.l{i}.b"), vec![h]));
        width = h;
    }
    for head in ["eps", "v"] {
        out.push((format!("mlp.{head}.w"), vec![width, d]));
        out.push((format!("mlp.{head}.b"), vec![d]));
    }
    out
}

pub(super) fn build<E: Element>(
    spec: &DenoiserSpec,
    g: &mut Graph<E>,
    params_grad: bool,
    input_grad: bool,
) -> Heads {
    let x = g.input(IN_X, input_grad);
    let temb = g.input(IN_TEMB, false);
    let mut h = g.concat(x, temb);
    for i in 0..spec.hidden.len() {
        h = dense(g, h, &format!("mlp.l{i}"), params_grad);
        h = g.silu(h);
    }
    let eps = dense(g, h, "mlp.eps", params_grad);
    let v_raw = dense(g, h, "mlp.v", params_grad);
    Heads { x, eps, v_raw }
}

fn dense<E: Element>(
    g: &mut Graph<E>,
    h: crate::engine::NodeId,
    prefix: &str,
    grad: bool,
) -> crate::engine::NodeId {
    let w = g.input(&format!("{prefix}.w"), grad);
    let b = g.input(&format!("{prefix}.b"), grad);
    let y = g.matmul(h, w);
    g.add(y, b)
}
