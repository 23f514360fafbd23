use std::collections::BTreeMap;

use super::{DenoiserSpec, Heads, IN_TEMB, IN_X};
use crate::engine::{Element, Graph, NodeId, Tensor};

const KERNEL: usize = 3;

fn chw(spec: &DenoiserSpec) -> (usize, usize, usize) {
    (spec.input_dims[0], spec.input_dims[1], spec.input_dims[2])
}

pub(super) fn inventory(spec: &DenoiserSpec) -> Vec<(String, Vec<usize>)> {
    let (c, _, _) = chw(spec);
    let mut out = Vec::new();
    let mut cin = c;
    for (i, &ch) in spec.hidden.iter().enumerate() {
        out.push((format!("cnn.s{i}.w"), vec![ch, cin, KERNEL, KERNEL]));
        out.push((format!("cnn.s{i}.b"), vec![ch]));
        out.push((format!("cnn.s{i}.tw"), vec![spec.time_dim, ch]));
        cin = ch;
    }
    for head in ["eps", "v"] {
        out.push((format!("cnn.{head}.w"), vec![c, cin, KERNEL, KERNEL]));
        out.push((format!("cnn.{head}.b"), vec![c]));
    }
    out
}

/// 0/1 matrices `[ch, ch·H·W]` that spread a per-channel value over its plane.
pub(super) fn constants<E: Element>(spec: &DenoiserSpec) -> BTreeMap<String, Tensor<E>> {
    let (_, h, w) = chw(spec);
    let hw = h * w;
    spec.hidden
        .iter()
        .enumerate()
        .map(|(i, &ch)| {
            let mut t = Tensor::zeros(&[ch, ch * hw]);
            for c in 0..ch {
                t.row_mut(c)[c * hw..(c + 1) * hw].fill(E::one());
            }
            (format!("cnn.s{i}.expand"), t)
        })
        .collect()
}

pub(super) fn build<E: Element>(
    spec: &DenoiserSpec,
    g: &mut Graph<E>,
    params_grad: bool,
    input_grad: bool,
) -> Heads {
    let (c, h, w) = chw(spec);
    let x = g.input(IN_X, input_grad);
    let temb = g.input(IN_TEMB, false);
    let mut z = g.reshape(x, &[c, h, w]);
    for (i, &ch) in spec.hidden.iter().enumerate() {
        z = conv(g, z, &format!("cnn.s{i}"), params_grad);
        let tw = g.input(&format!("cnn.s{i}.tw"), params_grad);
        let expand = g.input(&format!("cnn.s{i}.expand"), false);
        let tb = g.matmul(temb, tw);
        let tb = g.matmul(tb, expand);
        let tb = g.reshape(tb, &[ch, h, w]);
        z = g.add(z, tb);
        z = g.silu(z);
    }
    let eps = conv(g, z, "cnn.eps", params_grad);
    let v_raw = conv(g, z, "cnn.v", params_grad);
    let d = c * h * w;
    Heads {
        x,
        eps: g.reshape(eps, &[d]),
        v_raw: g.reshape(v_raw, &[d]),
    }
}

fn conv<E: Element>(g: &mut Graph<E>, z: NodeId, prefix: &str, grad: bool) -> NodeId {
    let w = g.input(&format!("{prefix}.w"), grad);
    let b = g.input(&format!("{prefix}.b"), grad);
    g.conv2d(z, w, b)
}
