//! Static computation graph: nodes are primitive ops over [`Array`]s, leaves are
//! named inputs and trainable parameters. Shapes are inferred and checked at
//! build time so evaluation can reuse preallocated buffers.

use super::array::Array;
use super::NumError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// One slice range along a dimension: half-open [start, end) with a stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceDim {
    pub start: usize,
    pub end: usize,
    pub step: usize,
}

impl SliceDim {
    pub fn all(extent: usize) -> SliceDim {
        SliceDim {
            start: 0,
            end: extent,
            step: 1,
        }
    }

    pub fn range(start: usize, end: usize) -> SliceDim {
        SliceDim {
            start,
            end,
            step: 1,
        }
    }

    pub fn strided(start: usize, end: usize, step: usize) -> SliceDim {
        SliceDim { start, end, step }
    }

    pub fn out_len(&self) -> usize {
        if self.end <= self.start {
            0
        } else {
            (self.end - self.start + self.step - 1) / self.step
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    Const(Array),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (r,c) + (c,): broadcast a bias row over every row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Slice(NodeId, Vec<SliceDim>),
    Concat(Vec<NodeId>, usize),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Exact Gaussian-CDF GELU.
    Gelu(NodeId),
    /// Layer norm over the last axis with affine gain/bias of that width.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    /// Mean sigmoid binary cross entropy; scalar output.
    BceWithLogits {
        logits: NodeId,
        targets: NodeId,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Transposed 2-d convolution: x (h,w,cin), w (k,k,cin,cout), b (cout),
    /// stride 2, kernel 3, output (2h,2w,cout). Columns wrap when
    /// `circular_cols`; row taps outside the output are dropped.
    ConvT2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        circular_cols: bool,
    },
    /// Transposed 1-d convolution: x (w,cin), w (3,cin,cout), b (cout),
    /// stride 2, output (2w,cout), circularly wrapped when `circular`.
    ConvT1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        circular: bool,
    },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub label: String,
}

/// A built computation graph. Immutable once constructed.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) inputs: Vec<(String, NodeId)>,
    pub(crate) params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn label_of(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub(crate) fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Slice(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
            Op::ConvT2d { x, w, b, .. } | Op::ConvT1d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, label: String) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, label });
        id
    }

    fn mismatch(&self, label: &str, detail: String) -> NumError {
        NumError::ShapeMismatch {
            node: label.to_string(),
            detail,
        }
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(
            Op::Input(name.to_string()),
            shape.to_vec(),
            format!("input:{name}"),
        );
        self.inputs.push((name.to_string(), id));
        id
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(
            Op::Param(name.to_string()),
            shape.to_vec(),
            format!("param:{name}"),
        );
        self.params.push((name.to_string(), id));
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        let n = self.nodes.len();
        self.push(Op::Const(value), shape, format!("const#{n}"))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let label = format!("matmul#{}", self.nodes.len());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(&label, format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], label))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let label = format!("add#{}", self.nodes.len());
        if sa != sb {
            return Err(self.mismatch(&label, format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa, label))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(bias).to_vec());
        let label = format!("add_row#{}", self.nodes.len());
        if sa.is_empty() || sb.len() != 1 || *sa.last().unwrap() != sb[0] {
            return Err(self.mismatch(&label, format!("{sa:?} + row {sb:?}")));
        }
        Ok(self.push(Op::AddRow(a, bias), sa, label))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let label = format!("mul#{}", self.nodes.len());
        if sa != sb {
            return Err(self.mismatch(&label, format!("{sa:?} * {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa, label))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape_of(a).to_vec();
        let label = format!("scale#{}", self.nodes.len());
        self.push(Op::Scale(a, c), s, label)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let s = self.shape_of(a).to_vec();
        let label = format!("transpose#{}", self.nodes.len());
        if s.len() != 2 {
            return Err(self.mismatch(&label, format!("rank {} != 2", s.len())));
        }
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]], label))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumError> {
        let s = self.shape_of(a).to_vec();
        let label = format!("reshape#{}", self.nodes.len());
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(self.mismatch(&label, format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a, shape.to_vec()), shape.to_vec(), label))
    }

    pub fn slice(&mut self, a: NodeId, dims: &[SliceDim]) -> Result<NodeId, NumError> {
        let s = self.shape_of(a).to_vec();
        let label = format!("slice#{}", self.nodes.len());
        if dims.len() != s.len() {
            return Err(self.mismatch(&label, format!("{} dims for shape {s:?}", dims.len())));
        }
        let mut out = Vec::with_capacity(dims.len());
        for (d, &extent) in dims.iter().zip(&s) {
            if d.end > extent || d.start > d.end || d.step == 0 {
                return Err(self.mismatch(&label, format!("{d:?} out of {extent}")));
            }
            out.push(d.out_len());
        }
        Ok(self.push(Op::Slice(a, dims.to_vec()), out, label))
    }

    /// Slice a contiguous row range of a 2-d array.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NumError> {
        let cols = self.shape_of(a)[1];
        self.slice(a, &[SliceDim::range(start, end), SliceDim::all(cols)])
    }

    /// Slice a contiguous column range of a 2-d array.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NumError> {
        let rows = self.shape_of(a)[0];
        self.slice(a, &[SliceDim::all(rows), SliceDim::range(start, end)])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, NumError> {
        let label = format!("concat#{}", self.nodes.len());
        if parts.is_empty() {
            return Err(self.mismatch(&label, "empty concat".into()));
        }
        let mut shape = self.shape_of(parts[0]).to_vec();
        if axis >= shape.len() {
            return Err(self.mismatch(&label, format!("axis {axis} for {shape:?}")));
        }
        for &p in &parts[1..] {
            let sp = self.shape_of(p);
            if sp.len() != shape.len()
                || sp
                    .iter()
                    .zip(shape.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.mismatch(&label, format!("{shape:?} vs {sp:?} on axis {axis}")));
            }
            shape[axis] += sp[axis];
        }
        Ok(self.push(Op::Concat(parts.to_vec(), axis), shape, label))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        let label = format!("softmax#{}", self.nodes.len());
        self.push(Op::Softmax(a), s, label)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        let label = format!("gelu#{}", self.nodes.len());
        self.push(Op::Gelu(a), s, label)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumError> {
        let s = self.shape_of(x).to_vec();
        let label = format!("layer_norm#{}", self.nodes.len());
        let d = *s.last().ok_or_else(|| {
            self.mismatch(&label, "layer_norm on 0-d array".into())
        })?;
        if self.shape_of(gain) != [d] || self.shape_of(bias) != [d] {
            return Err(self.mismatch(
                &label,
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.shape_of(gain),
                    self.shape_of(bias)
                ),
            ));
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, s, label))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a).to_vec();
        let label = format!("sigmoid#{}", self.nodes.len());
        self.push(Op::Sigmoid(a), s, label)
    }

    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, NumError> {
        let label = format!("bce#{}", self.nodes.len());
        if self.shape_of(logits) != self.shape_of(targets) {
            return Err(self.mismatch(
                &label,
                format!(
                    "{:?} vs {:?}",
                    self.shape_of(logits),
                    self.shape_of(targets)
                ),
            ));
        }
        Ok(self.push(Op::BceWithLogits { logits, targets }, vec![], label))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let label = format!("sum#{}", self.nodes.len());
        self.push(Op::SumAll(a), vec![], label)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let label = format!("mean#{}", self.nodes.len());
        self.push(Op::MeanAll(a), vec![], label)
    }

    pub fn conv_t2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        circular_cols: bool,
    ) -> Result<NodeId, NumError> {
        let label = format!("conv_t2d#{}", self.nodes.len());
        let sx = self.shape_of(x).to_vec();
        let sw = self.shape_of(w).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[2] {
            return Err(self.mismatch(&label, format!("x {sx:?}, w {sw:?}")));
        }
        if sb != [sw[3]] {
            return Err(self.mismatch(&label, format!("bias {sb:?} for cout {}", sw[3])));
        }
        let shape = vec![sx[0] * 2, sx[1] * 2, sw[3]];
        Ok(self.push(
            Op::ConvT2d {
                x,
                w,
                b,
                circular_cols,
            },
            shape,
            label,
        ))
    }

    pub fn conv_t1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        circular: bool,
    ) -> Result<NodeId, NumError> {
        let label = format!("conv_t1d#{}", self.nodes.len());
        let sx = self.shape_of(x).to_vec();
        let sw = self.shape_of(w).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sw[0] != 3 || sw[1] != sx[1] {
            return Err(self.mismatch(&label, format!("x {sx:?}, w {sw:?}")));
        }
        if sb != [sw[2]] {
            return Err(self.mismatch(&label, format!("bias {sb:?} for cout {}", sw[2])));
        }
        let shape = vec![sx[0] * 2, sw[2]];
        Ok(self.push(Op::ConvT1d { x, w, b, circular }, shape, label))
    }
}
