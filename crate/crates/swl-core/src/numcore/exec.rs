//! Graph evaluation: forward pass, reverse-mode gradients, and a central
//! finite-difference checker that re-evaluates only the subgraph downstream of
//! the perturbed parameter.

use std::collections::BTreeMap;

use super::array::{matmul_acc, matmul_into, strides_of, Array};
use super::graph::{Graph, Node, NodeId, Op, SliceDim};
use super::params::ParamStore;
use super::NumError;

pub type Inputs = BTreeMap<String, Array>;
pub type Gradients = BTreeMap<String, Array>;

const LN_EPS: f64 = 1e-12;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates a graph, keeping one value buffer per node. Buffers are allocated
/// once and reused across calls, so an executor is tied to one graph's shapes.
pub struct Executor {
    values: Vec<Array>,
    grads: Vec<Array>,
    grad_seen: Vec<bool>,
}

impl Executor {
    pub fn new(graph: &Graph) -> Executor {
        let values = graph
            .nodes
            .iter()
            .map(|n| Array::zeros(&n.shape))
            .collect::<Vec<_>>();
        Executor {
            values,
            grads: Vec::new(),
            grad_seen: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id.0]
    }

    /// Forward pass over the whole graph.
    pub fn forward(
        &mut self,
        graph: &Graph,
        params: &ParamStore,
        inputs: &Inputs,
    ) -> Result<(), NumError> {
        for i in 0..graph.nodes.len() {
            let node = &graph.nodes[i];
            let (done, rest) = self.values.split_at_mut(i);
            let out = &mut rest[0];
            eval_node(node, |p: NodeId| &done[p.0], params, inputs, out)?;
            if !out.all_finite() {
                return Err(NumError::NonFinite {
                    node: node.label.clone(),
                });
            }
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar loss with respect to every trainable
    /// parameter. Parameters not reachable from the loss get zero gradients.
    pub fn backward(&mut self, graph: &Graph, loss: NodeId) -> Result<Gradients, NumError> {
        if !graph.shape_of(loss).is_empty() {
            return Err(NumError::Invalid(format!(
                "loss node {} is not scalar ({:?})",
                graph.label_of(loss),
                graph.shape_of(loss)
            )));
        }
        if self.grads.len() != self.values.len() {
            self.grads = graph
                .nodes
                .iter()
                .map(|n| Array::zeros(&n.shape))
                .collect();
            self.grad_seen = vec![false; self.values.len()];
        } else {
            for g in &mut self.grads {
                g.fill(0.0);
            }
            self.grad_seen.iter_mut().for_each(|s| *s = false);
        }
        self.grads[loss.0].data_mut()[0] = 1.0;
        self.grad_seen[loss.0] = true;

        for i in (0..graph.nodes.len()).rev() {
            if !self.grad_seen[i] {
                continue;
            }
            let node = &graph.nodes[i];
            let parents = graph.parents(NodeId(i));
            for p in &parents {
                self.grad_seen[p.0] = true;
            }
            let (gdone, grest) = self.grads.split_at_mut(i);
            let grad = &grest[0];
            backprop_node(node, &self.values, i, grad, gdone)?;
        }

        let mut out = Gradients::new();
        for (name, id) in &graph.params {
            out.insert(name.clone(), self.grads[id.0].clone());
        }
        Ok(out)
    }
}

fn eval_node<'a, F>(
    node: &Node,
    get: F,
    params: &ParamStore,
    inputs: &Inputs,
    out: &mut Array,
) -> Result<(), NumError>
where
    F: Fn(NodeId) -> &'a Array,
{
    let label = &node.label;
    match &node.op {
        Op::Input(name) => {
            let v = inputs.get(name).ok_or_else(|| {
                NumError::Invalid(format!("missing input '{name}'"))
            })?;
            if v.shape() != node.shape {
                return Err(NumError::ShapeMismatch {
                    node: label.clone(),
                    detail: format!("declared {:?}, bound {:?}", node.shape, v.shape()),
                });
            }
            out.data_mut().copy_from_slice(v.data());
        }
        Op::Param(name) => {
            let v = params.get(name).ok_or_else(|| {
                NumError::Invalid(format!("missing parameter '{name}'"))
            })?;
            if v.shape() != node.shape {
                return Err(NumError::ShapeMismatch {
                    node: label.clone(),
                    detail: format!("declared {:?}, bound {:?}", node.shape, v.shape()),
                });
            }
            out.data_mut().copy_from_slice(v.data());
        }
        Op::Const(v) => out.data_mut().copy_from_slice(v.data()),
        Op::MatMul(a, b) => matmul_into(get(*a), get(*b), out),
        Op::Add(a, b) => {
            let (a, b) = (get(*a), get(*b));
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x + y;
            }
        }
        Op::AddRow(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let w = b.len();
            for (row_o, row_a) in out
                .data_mut()
                .chunks_mut(w)
                .zip(a.data().chunks(w))
            {
                for ((o, x), y) in row_o.iter_mut().zip(row_a).zip(b.data()) {
                    *o = x + y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                *o = x * y;
            }
        }
        Op::Scale(a, c) => {
            for (o, x) in out.data_mut().iter_mut().zip(get(*a).data()) {
                *o = c * x;
            }
        }
        Op::Transpose(a) => {
            let a = get(*a);
            let (r, c) = (a.nrows(), a.ncols());
            let src = a.data();
            let dst = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        Op::Reshape(a, _) => out.data_mut().copy_from_slice(get(*a).data()),
        Op::Slice(a, dims) => {
            let a = get(*a);
            gather_slice(a, dims, out);
        }
        Op::Concat(parts, axis) => {
            let arrays: Vec<&Array> = parts.iter().map(|p| get(*p)).collect();
            concat_into(&arrays, *axis, out);
        }
        Op::Softmax(a) => {
            let a = get(*a);
            let w = *a.shape().last().unwrap_or(&1);
            for (row_o, row_a) in out.data_mut().chunks_mut(w).zip(a.data().chunks(w)) {
                let m = row_a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, x) in row_o.iter_mut().zip(row_a) {
                    *o = (x - m).exp();
                    sum += *o;
                }
                for o in row_o.iter_mut() {
                    *o /= sum;
                }
            }
        }
        Op::Gelu(a) => {
            for (o, x) in out.data_mut().iter_mut().zip(get(*a).data()) {
                *o = gelu_scalar(*x);
            }
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, gain, bias) = (get(*x), get(*gain), get(*bias));
            let w = *x.shape().last().unwrap();
            for (row_o, row_x) in out.data_mut().chunks_mut(w).zip(x.data().chunks(w)) {
                let mu = row_x.iter().sum::<f64>() / w as f64;
                let var = row_x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (j, (o, v)) in row_o.iter_mut().zip(row_x).enumerate() {
                    *o = (v - mu) * inv * gain.data()[j] + bias.data()[j];
                }
            }
        }
        Op::Sigmoid(a) => {
            for (o, x) in out.data_mut().iter_mut().zip(get(*a).data()) {
                *o = sigmoid(*x);
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let (z, t) = (get(*logits), get(*targets));
            if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(NumError::Invalid(format!(
                    "{label}: target {bad} outside [0,1]"
                )));
            }
            let n = z.len() as f64;
            let mut acc = 0.0;
            for (z, t) in z.data().iter().zip(t.data()) {
                acc += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
            }
            out.data_mut()[0] = acc / n;
        }
        Op::SumAll(a) => out.data_mut()[0] = get(*a).data().iter().sum(),
        Op::MeanAll(a) => {
            let a = get(*a);
            out.data_mut()[0] = a.data().iter().sum::<f64>() / a.len() as f64;
        }
        Op::ConvT2d {
            x,
            w,
            b,
            circular_cols,
        } => {
            let (x, w, b) = (get(*x), get(*w), get(*b));
            conv_t2d_forward(x, w, b, *circular_cols, out);
        }
        Op::ConvT1d { x, w, b, circular } => {
            let (x, w, b) = (get(*x), get(*w), get(*b));
            conv_t1d_forward(x, w, b, *circular, out);
        }
    }
    Ok(())
}

fn gather_slice(a: &Array, dims: &[SliceDim], out: &mut Array) {
    // fast path: rank-2 slice with contiguous columns is a row-block copy
    if dims.len() == 2 && dims[1].step == 1 && a.shape().len() == 2 {
        let w = a.shape()[1];
        let rows = out.shape()[0];
        let cols = out.shape()[1];
        let src = a.data();
        let dst = out.data_mut();
        for r in 0..rows {
            let so = (dims[0].start + r * dims[0].step) * w + dims[1].start;
            dst[r * cols..(r + 1) * cols].copy_from_slice(&src[so..so + cols]);
        }
        return;
    }
    let strides = a.strides();
    let out_shape = out.shape().to_vec();
    let n = out.len();
    let rank = dims.len();
    let src = a.data();
    let dst = out.data_mut();
    let mut coords = vec![0usize; rank];
    for (flat, d) in dst.iter_mut().enumerate().take(n) {
        let mut rem = flat;
        for (i, &ext) in out_shape.iter().enumerate().rev() {
            coords[i] = rem % ext;
            rem /= ext;
        }
        let mut off = 0usize;
        for i in 0..rank {
            off += (dims[i].start + coords[i] * dims[i].step) * strides[i];
        }
        *d = src[off];
    }
}

fn scatter_slice_add(ga: &mut Array, dims: &[SliceDim], g: &Array) {
    let strides = strides_of(ga.shape());
    let out_shape = g.shape().to_vec();
    let rank = dims.len();
    let dst = ga.data_mut();
    let mut coords = vec![0usize; rank];
    for (flat, v) in g.data().iter().enumerate() {
        let mut rem = flat;
        for (i, &ext) in out_shape.iter().enumerate().rev() {
            coords[i] = rem % ext;
            rem /= ext;
        }
        let mut off = 0usize;
        for i in 0..rank {
            off += (dims[i].start + coords[i] * dims[i].step) * strides[i];
        }
        dst[off] += v;
    }
}

fn concat_into(parts: &[&Array], axis: usize, out: &mut Array) {
    let out_shape = out.shape().to_vec();
    let outer: usize = out_shape[..axis].iter().product();
    let out_chunk: usize = out_shape[axis..].iter().product();
    let dst = out.data_mut();
    let mut offset = 0usize;
    for p in parts {
        let chunk: usize = p.shape()[axis..].iter().product();
        for o in 0..outer {
            let src = &p.data()[o * chunk..(o + 1) * chunk];
            dst[o * out_chunk + offset..o * out_chunk + offset + chunk].copy_from_slice(src);
        }
        offset += chunk;
    }
}

fn concat_backward(parts: &[NodeId], axis: usize, g: &Array, gdone: &mut [Array]) {
    let g_shape = g.shape().to_vec();
    let outer: usize = g_shape[..axis].iter().product();
    let g_chunk: usize = g_shape[axis..].iter().product();
    let mut offset = 0usize;
    for p in parts {
        let chunk: usize = gdone[p.0].shape()[axis..].iter().product();
        let dst = gdone[p.0].data_mut();
        for o in 0..outer {
            for j in 0..chunk {
                dst[o * chunk + j] += g.data()[o * g_chunk + offset + j];
            }
        }
        offset += chunk;
    }
}

fn conv_t2d_forward(x: &Array, w: &Array, b: &Array, circular_cols: bool, out: &mut Array) {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[3];
    let (oh, ow) = (2 * h, 2 * wd);
    out.fill(0.0);
    let xd = x.data();
    let wdta = w.data();
    let od = out.data_mut();
    for i in 0..h {
        for j in 0..wd {
            let xrow = &xd[(i * wd + j) * cin..(i * wd + j + 1) * cin];
            for ti in 0..3usize {
                let oi = (2 * i + ti) as isize - 1;
                if oi < 0 || oi >= oh as isize {
                    continue;
                }
                for tj in 0..3usize {
                    let mut oj = (2 * j + tj) as isize - 1;
                    if circular_cols {
                        oj = oj.rem_euclid(ow as isize);
                    } else if oj < 0 || oj >= ow as isize {
                        continue;
                    }
                    let obase = (oi as usize * ow + oj as usize) * cout;
                    let wbase = (ti * 3 + tj) * cin * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &wdta[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for co in 0..cout {
                            od[obase + co] += xv * wrow[co];
                        }
                    }
                }
            }
        }
    }
    for px in 0..oh * ow {
        for co in 0..cout {
            od[px * cout + co] += b.data()[co];
        }
    }
}

fn conv_t1d_forward(x: &Array, w: &Array, b: &Array, circular: bool, out: &mut Array) {
    let (wd, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[2];
    let ow = 2 * wd;
    out.fill(0.0);
    let xd = x.data();
    let wdta = w.data();
    let od = out.data_mut();
    for j in 0..wd {
        let xrow = &xd[j * cin..(j + 1) * cin];
        for t in 0..3usize {
            let mut oj = (2 * j + t) as isize - 1;
            if circular {
                oj = oj.rem_euclid(ow as isize);
            } else if oj < 0 || oj >= ow as isize {
                continue;
            }
            let obase = oj as usize * cout;
            let wbase = t * cin * cout;
            for (ci, &xv) in xrow.iter().enumerate() {
                for co in 0..cout {
                    od[obase + co] += xv * wdta[wbase + ci * cout + co];
                }
            }
        }
    }
    for px in 0..ow {
        for co in 0..cout {
            od[px * cout + co] += b.data()[co];
        }
    }
}

fn backprop_node(
    node: &Node,
    values: &[Array],
    idx: usize,
    grad: &Array,
    gdone: &mut [Array],
) -> Result<(), NumError> {
    match &node.op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&values[a.0], &values[b.0]);
            // ga += g . b^T ; gb += a^T . g
            let mut ga = std::mem::replace(&mut gdone[a.0], Array::zeros(&[]));
            matmul_acc(grad, false, vb, true, &mut ga);
            gdone[a.0] = ga;
            let mut gb = std::mem::replace(&mut gdone[b.0], Array::zeros(&[]));
            matmul_acc(va, true, grad, false, &mut gb);
            gdone[b.0] = gb;
        }
        Op::Add(a, b) => {
            for (d, g) in gdone[a.0].data_mut().iter_mut().zip(grad.data()) {
                *d += g;
            }
            for (d, g) in gdone[b.0].data_mut().iter_mut().zip(grad.data()) {
                *d += g;
            }
        }
        Op::AddRow(a, b) => {
            for (d, g) in gdone[a.0].data_mut().iter_mut().zip(grad.data()) {
                *d += g;
            }
            let w = gdone[b.0].len();
            let gb = gdone[b.0].data_mut();
            for row in grad.data().chunks(w) {
                for (d, g) in gb.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (a.0, b.0);
            for ((d, g), y) in gdone[va]
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(values[vb].data())
            {
                *d += g * y;
            }
            for ((d, g), x) in gdone[vb]
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(values[va].data())
            {
                *d += g * x;
            }
        }
        Op::Scale(a, c) => {
            for (d, g) in gdone[a.0].data_mut().iter_mut().zip(grad.data()) {
                *d += c * g;
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (grad.nrows(), grad.ncols());
            let ga = gdone[a.0].data_mut();
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] += grad.data()[i * c + j];
                }
            }
        }
        Op::Reshape(a, _) => {
            for (d, g) in gdone[a.0].data_mut().iter_mut().zip(grad.data()) {
                *d += g;
            }
        }
        Op::Slice(a, dims) => scatter_slice_add(&mut gdone[a.0], dims, grad),
        Op::Concat(parts, axis) => concat_backward(parts, *axis, grad, gdone),
        Op::Softmax(a) => {
            let y = &values[idx];
            let w = *y.shape().last().unwrap_or(&1);
            let ga = gdone[a.0].data_mut();
            for ((row_ga, row_y), row_g) in ga
                .chunks_mut(w)
                .zip(y.data().chunks(w))
                .zip(grad.data().chunks(w))
            {
                let dot: f64 = row_y.iter().zip(row_g).map(|(y, g)| y * g).sum();
                for ((d, y), g) in row_ga.iter_mut().zip(row_y).zip(row_g) {
                    *d += y * (g - dot);
                }
            }
        }
        Op::Gelu(a) => {
            let x = &values[a.0];
            for ((d, g), x) in gdone[a.0]
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(x.data())
            {
                *d += g * gelu_deriv(*x);
            }
        }
        Op::LayerNorm { x, gain, bias } => {
            let vx = &values[x.0];
            let vgain = values[gain.0].clone();
            let w = *vx.shape().last().unwrap();
            let rows = vx.len() / w;
            let mut gx_local = vec![0.0; vx.len()];
            let mut ggain_local = vec![0.0; w];
            let mut gbias_local = vec![0.0; w];
            for r in 0..rows {
                let row_x = &vx.data()[r * w..(r + 1) * w];
                let row_g = &grad.data()[r * w..(r + 1) * w];
                let mu = row_x.iter().sum::<f64>() / w as f64;
                let var = row_x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..w {
                    let xh = (row_x[j] - mu) * inv;
                    let dxh = row_g[j] * vgain.data()[j];
                    ggain_local[j] += row_g[j] * xh;
                    gbias_local[j] += row_g[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                }
                mean_dxh /= w as f64;
                mean_dxh_xh /= w as f64;
                for j in 0..w {
                    let xh = (row_x[j] - mu) * inv;
                    let dxh = row_g[j] * vgain.data()[j];
                    gx_local[r * w + j] += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                }
            }
            for (d, g) in gdone[x.0].data_mut().iter_mut().zip(&gx_local) {
                *d += g;
            }
            for (d, g) in gdone[gain.0].data_mut().iter_mut().zip(&ggain_local) {
                *d += g;
            }
            for (d, g) in gdone[bias.0].data_mut().iter_mut().zip(&gbias_local) {
                *d += g;
            }
        }
        Op::Sigmoid(a) => {
            let y = &values[idx];
            for ((d, g), y) in gdone[a.0]
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(y.data())
            {
                *d += g * y * (1.0 - y);
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let g = grad.data()[0];
            let (zi, ti) = (logits.0, targets.0);
            let n = values[zi].len() as f64;
            let zdata = values[zi].clone();
            let tdata = values[ti].clone();
            for ((d, z), t) in gdone[zi]
                .data_mut()
                .iter_mut()
                .zip(zdata.data())
                .zip(tdata.data())
            {
                *d += g * (sigmoid(*z) - t) / n;
            }
            for (d, z) in gdone[ti].data_mut().iter_mut().zip(zdata.data()) {
                *d += g * (-z) / n;
            }
        }
        Op::SumAll(a) => {
            let g = grad.data()[0];
            for d in gdone[a.0].data_mut() {
                *d += g;
            }
        }
        Op::MeanAll(a) => {
            let g = grad.data()[0] / values[a.0].len() as f64;
            for d in gdone[a.0].data_mut() {
                *d += g;
            }
        }
        Op::ConvT2d {
            x,
            w,
            b,
            circular_cols,
        } => {
            let vx = values[x.0].clone();
            let vw = values[w.0].clone();
            let (h, wd, cin) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let cout = vw.shape()[3];
            let (oh, ow) = (2 * h, 2 * wd);
            let gd = grad.data();
            {
                let gb = gdone[b.0].data_mut();
                for px in 0..oh * ow {
                    for co in 0..cout {
                        gb[co] += gd[px * cout + co];
                    }
                }
            }
            let mut gx_local = vec![0.0; vx.len()];
            let mut gw_local = vec![0.0; vw.len()];
            for i in 0..h {
                for j in 0..wd {
                    for ti in 0..3usize {
                        let oi = (2 * i + ti) as isize - 1;
                        if oi < 0 || oi >= oh as isize {
                            continue;
                        }
                        for tj in 0..3usize {
                            let mut oj = (2 * j + tj) as isize - 1;
                            if *circular_cols {
                                oj = oj.rem_euclid(ow as isize);
                            } else if oj < 0 || oj >= ow as isize {
                                continue;
                            }
                            let obase = (oi as usize * ow + oj as usize) * cout;
                            let wbase = (ti * 3 + tj) * cin * cout;
                            let xbase = (i * wd + j) * cin;
                            for ci in 0..cin {
                                let xv = vx.data()[xbase + ci];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    let gy = gd[obase + co];
                                    acc += vw.data()[wbase + ci * cout + co] * gy;
                                    gw_local[wbase + ci * cout + co] += xv * gy;
                                }
                                gx_local[xbase + ci] += acc;
                            }
                        }
                    }
                }
            }
            for (d, g) in gdone[x.0].data_mut().iter_mut().zip(&gx_local) {
                *d += g;
            }
            for (d, g) in gdone[w.0].data_mut().iter_mut().zip(&gw_local) {
                *d += g;
            }
        }
        Op::ConvT1d { x, w, b, circular } => {
            let vx = values[x.0].clone();
            let vw = values[w.0].clone();
            let (wd, cin) = (vx.shape()[0], vx.shape()[1]);
            let cout = vw.shape()[2];
            let ow = 2 * wd;
            let gd = grad.data();
            {
                let gb = gdone[b.0].data_mut();
                for px in 0..ow {
                    for co in 0..cout {
                        gb[co] += gd[px * cout + co];
                    }
                }
            }
            let mut gx_local = vec![0.0; vx.len()];
            let mut gw_local = vec![0.0; vw.len()];
            for j in 0..wd {
                for t in 0..3usize {
                    let mut oj = (2 * j + t) as isize - 1;
                    if *circular {
                        oj = oj.rem_euclid(ow as isize);
                    } else if oj < 0 || oj >= ow as isize {
                        continue;
                    }
                    let obase = oj as usize * cout;
                    let wbase = t * cin * cout;
                    for ci in 0..cin {
                        let xv = vx.data()[j * cin + ci];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            let gy = gd[obase + co];
                            acc += vw.data()[wbase + ci * cout + co] * gy;
                            gw_local[wbase + ci * cout + co] += xv * gy;
                        }
                        gx_local[j * cin + ci] += acc;
                    }
                }
            }
            for (d, g) in gdone[x.0].data_mut().iter_mut().zip(&gx_local) {
                *d += g;
            }
            for (d, g) in gdone[w.0].data_mut().iter_mut().zip(&gw_local) {
                *d += g;
            }
        }
    }
    Ok(())
}

/// Central finite-difference verification of the analytic gradients.
///
/// Returns the maximum over all parameter elements of
/// |analytic − central| / max(|analytic|, |central|, 1e-12).
/// Only the subgraph downstream of the perturbed parameter is re-evaluated,
/// which keeps full-model checks tractable.
pub fn finite_diff_check(
    graph: &Graph,
    loss: NodeId,
    params: &ParamStore,
    inputs: &Inputs,
    eps: f64,
) -> Result<f64, NumError> {
    if eps <= 0.0 {
        return Err(NumError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut exec = Executor::new(graph);
    exec.forward(graph, params, inputs)?;
    let analytic = exec.backward(graph, loss)?;
    let base_values = exec.values;

    // children adjacency for dirty-set computation
    let n = graph.nodes.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for p in graph.parents(NodeId(i)) {
            children[p.0].push(i);
        }
    }

    let mut max_rel: f64 = 0.0;
    for (name, leaf) in &graph.params {
        let base = params
            .get(name)
            .ok_or_else(|| NumError::Invalid(format!("missing parameter '{name}'")))?;
        let grad = &analytic[name];

        // topologically ordered descendants of this leaf (incl. the leaf)
        let mut dirty_mark = vec![false; n];
        dirty_mark[leaf.0] = true;
        for i in leaf.0..n {
            if dirty_mark[i] {
                for &c in &children[i] {
                    dirty_mark[c] = true;
                }
            }
        }
        let dirty: Vec<usize> = (leaf.0..n).filter(|&i| dirty_mark[i]).collect();
        let mut slot_of = vec![usize::MAX; n];
        for (s, &i) in dirty.iter().enumerate() {
            slot_of[i] = s;
        }
        let mut scratch: Vec<Array> = dirty
            .iter()
            .map(|&i| Array::zeros(&graph.nodes[i].shape))
            .collect();
        let mut changed = vec![false; dirty.len()];
        let parent_ids: Vec<Vec<NodeId>> =
            dirty.iter().map(|&i| graph.parents(NodeId(i))).collect();
        let loss_slot = slot_of[loss.0];

        let eval_perturbed = |scratch: &mut [Array],
                              changed: &mut [bool],
                              perturbed: &Array|
         -> Result<f64, NumError> {
            scratch[0].data_mut().copy_from_slice(perturbed.data());
            changed[0] = true;
            for s in 1..dirty.len() {
                let _t0 = std::time::Instant::now();
                changed[s] = eval_dirty_node(
                    graph,
                    dirty[s],
                    s,
                    &slot_of,
                    &parent_ids[s],
                    &base_values,
                    params,
                    inputs,
                    scratch,
                    changed,
                )?;
                unsafe { OP_TIME[op_kind(&graph.nodes[dirty[s]].op)] += _t0.elapsed().as_secs_f64(); }
            }
            if loss_slot == usize::MAX || !changed[loss_slot] {
                // parameter does not reach the loss, or the perturbation
                // vanished before it; value unchanged
                Ok(base_values[loss.0].item())
            } else {
                Ok(scratch[loss_slot].item())
            }
        };

        let _t_param = std::time::Instant::now();
        let mut work = base.clone();
        for e in 0..base.len() {
            let orig = base.data()[e];
            work.data_mut()[e] = orig + eps;
            let fp = eval_perturbed(&mut scratch, &mut changed, &work)?;
            work.data_mut()[e] = orig - eps;
            let fm = eval_perturbed(&mut scratch, &mut changed, &work)?;
            work.data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = grad.data()[e];
            // the 1e-4 denominator floor absorbs central-difference roundoff
            // (about 1e-11 in absolute terms for unit-scale losses)
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        if std::env::var_os("SWL_FD_PROFILE").is_some() {
            eprintln!("{name}\t{}\t{}\t{:.3}", base.len(), dirty.len(), _t_param.elapsed().as_secs_f64());
        }
    }
    Ok(max_rel)
}

static mut OP_TIME: [f64; 20] = [0.0; 20];
pub fn dump_op_time() {
    let names = ["input","param","const","matmul","add","addrow","mul","scale","transpose","reshape","slice","concat","softmax","gelu","layernorm","sigmoid","bce","sumall","meanall","conv"];
    unsafe {
        let mut v: Vec<(f64,&str)> = OP_TIME.iter().cloned().zip(names).collect();
        v.sort_by(|a,b| b.0.partial_cmp(&a.0).unwrap());
        for (t,n) in v { if t > 0.01 { eprintln!("{t:.2}\t{n}"); } }
    }
}
fn op_kind(op: &Op) -> usize {
    match op {
        Op::Input(_) => 0, Op::Param(_) => 1, Op::Const(_) => 2, Op::MatMul(..) => 3,
        Op::Add(..) => 4, Op::AddRow(..) => 5, Op::Mul(..) => 6, Op::Scale(..) => 7,
        Op::Transpose(_) => 8, Op::Reshape(..) => 9, Op::Slice(..) => 10, Op::Concat(..) => 11,
        Op::Softmax(_) => 12, Op::Gelu(_) => 13, Op::LayerNorm { .. } => 14, Op::Sigmoid(_) => 15,
        Op::BceWithLogits { .. } => 16, Op::SumAll(_) => 17, Op::MeanAll(_) => 18,
        Op::ConvT2d { .. } | Op::ConvT1d { .. } => 19,
    }
}

/// Re-evaluates one node of the dirty subgraph during a finite-difference
/// probe. A single-element perturbation usually leaves most rows, columns,
/// and attention heads bit-identical to the unperturbed pass, so each op
/// compares its inputs against the base values and recomputes only what
/// actually changed; untouched regions are copied from the base output.
/// Returns whether the node's value differs from the base pass.
#[allow(clippy::too_many_arguments)]
fn eval_dirty_node(
    graph: &Graph,
    i: usize,
    s: usize,
    slot_of: &[usize],
    parents: &[NodeId],
    base_values: &[Array],
    params: &ParamStore,
    inputs: &Inputs,
    scratch: &mut [Array],
    changed: &[bool],
) -> Result<bool, NumError> {
    let node = &graph.nodes[i];
    let (done, rest) = scratch.split_at_mut(s);
    let out = &mut rest[0];
    let is_changed = |p: NodeId| {
        let ps = slot_of[p.0];
        ps != usize::MAX && ps < s && changed[ps]
    };
    let val = |p: NodeId| -> &Array {
        let ps = slot_of[p.0];
        if ps != usize::MAX && ps < s && changed[ps] {
            &done[ps]
        } else {
            &base_values[p.0]
        }
    };
    if !parents.iter().any(|&p| is_changed(p)) {
        // inputs identical to the base pass; readers fall back to base values
        return Ok(false);
    }
    let base_out = &base_values[i];
    let ch = match &node.op {
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.nrows(), va.ncols(), vb.ncols());
            let mut ra: Vec<usize> = Vec::new();
            if is_changed(*a) {
                let bd = base_values[a.0].data();
                for (r, (x, y)) in va.data().chunks(k).zip(bd.chunks(k)).enumerate() {
                    if x != y {
                        ra.push(r);
                    }
                }
            }
            let mut cb: Vec<usize> = Vec::new();
            if is_changed(*b) {
                let bd = base_values[b.0].data();
                let mut mask = vec![false; n];
                for (row_v, row_b) in vb.data().chunks(n).zip(bd.chunks(n)) {
                    for (j, flag) in mask.iter_mut().enumerate() {
                        if row_v[j] != row_b[j] {
                            *flag = true;
                        }
                    }
                }
                cb.extend(mask.iter().enumerate().filter_map(|(j, &c)| c.then_some(j)));
            }
            // the dense kernel wins unless the touched region is small
            if 4 * (ra.len() * n + m * cb.len()) >= m * n {
                matmul_into(va, vb, out);
                true
            } else {
                out.data_mut().copy_from_slice(base_out.data());
                let (ad, bd) = (va.data(), vb.data());
                let od = out.data_mut();
                for &r in &ra {
                    let row_o = &mut od[r * n..(r + 1) * n];
                    row_o.fill(0.0);
                    for l in 0..k {
                        let c = ad[r * k + l];
                        for (o, w) in row_o.iter_mut().zip(&bd[l * n..(l + 1) * n]) {
                            *o += c * w;
                        }
                    }
                }
                let mut col = vec![0.0; k];
                for &j in &cb {
                    for (l, c) in col.iter_mut().enumerate() {
                        *c = bd[l * n + j];
                    }
                    for r in 0..m {
                        let mut acc = 0.0;
                        for (x, y) in ad[r * k..(r + 1) * k].iter().zip(&col) {
                            acc += x * y;
                        }
                        od[r * n + j] = acc;
                    }
                }
                !(ra.is_empty() && cb.is_empty())
            }
        }
        Op::Softmax(a) => {
            let va = val(*a);
            let ba = base_values[a.0].data();
            let w = *va.shape().last().unwrap_or(&1);
            let bo = base_out.data();
            let od = out.data_mut();
            let mut any = false;
            for (r, (row_a, row_b)) in va.data().chunks(w).zip(ba.chunks(w)).enumerate() {
                let row_o = &mut od[r * w..(r + 1) * w];
                if row_a == row_b {
                    row_o.copy_from_slice(&bo[r * w..(r + 1) * w]);
                } else {
                    any = true;
                    let m = row_a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (o, x) in row_o.iter_mut().zip(row_a) {
                        *o = (x - m).exp();
                        sum += *o;
                    }
                    for o in row_o.iter_mut() {
                        *o /= sum;
                    }
                }
            }
            any
        }
        Op::Gelu(a) => {
            let va = val(*a);
            let ba = base_values[a.0].data();
            let (xd, bo) = (va.data(), base_out.data());
            let od = out.data_mut();
            let mut any = false;
            for idx in 0..od.len() {
                if xd[idx] == ba[idx] {
                    od[idx] = bo[idx];
                } else {
                    od[idx] = gelu_scalar(xd[idx]);
                    any = true;
                }
            }
            any
        }
        Op::Sigmoid(a) => {
            let va = val(*a);
            let ba = base_values[a.0].data();
            let (xd, bo) = (va.data(), base_out.data());
            let od = out.data_mut();
            let mut any = false;
            for idx in 0..od.len() {
                if xd[idx] == ba[idx] {
                    od[idx] = bo[idx];
                } else {
                    od[idx] = sigmoid(xd[idx]);
                    any = true;
                }
            }
            any
        }
        Op::LayerNorm { x, gain, bias } => {
            if is_changed(*gain) || is_changed(*bias) {
                eval_node(node, val, params, inputs, out)?;
                out.data() != base_out.data()
            } else {
                let vx = val(*x);
                let bx = base_values[x.0].data();
                let (g, b) = (base_values[gain.0].data(), base_values[bias.0].data());
                let w = *vx.shape().last().unwrap();
                let bo = base_out.data();
                let od = out.data_mut();
                let mut any = false;
                for (r, (row_x, row_bx)) in vx.data().chunks(w).zip(bx.chunks(w)).enumerate() {
                    let row_o = &mut od[r * w..(r + 1) * w];
                    if row_x == row_bx {
                        row_o.copy_from_slice(&bo[r * w..(r + 1) * w]);
                    } else {
                        any = true;
                        let mu = row_x.iter().sum::<f64>() / w as f64;
                        let var =
                            row_x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        for (j, (o, v)) in row_o.iter_mut().zip(row_x).enumerate() {
                            *o = (v - mu) * inv * g[j] + b[j];
                        }
                    }
                }
                any
            }
        }
        _ => {
            eval_node(node, val, params, inputs, out)?;
            out.data() != base_out.data()
        }
    };
    Ok(ch)
}
