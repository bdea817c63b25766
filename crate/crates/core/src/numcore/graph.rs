//! Symbolic computation graph over 2-D matrices with reverse-mode
//! differentiation.
//!
//! A [`Graph`] is built once (shapes are inferred as nodes are added) and
//! then evaluated any number of times through a [`Session`], which owns
//! the value and gradient buffers. Parameters live outside the graph in a
//! [`ParamStore`] so that many sessions can share them read-only.

use std::collections::HashMap;

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into};
use super::{NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `x` plus a `1 x cols` row broadcast over every row of `x`.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64, shift: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    RowSoftmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    SliceRows { x: NodeId, start: usize, len: usize },
    Transpose(NodeId),
    MeanSquare(NodeId, NodeId),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::RowSoftmax(_) => "row_softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(_) => "transpose",
            Op::MeanSquare(..) => "mean_square",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    label: Option<String>,
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a rank-2 parameter. Re-inserting a name replaces its tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.params.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.params {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

/// Input values keyed by input name.
pub type Feeds<'a> = [(&'a str, &'a Tensor)];

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
    param_shapes: Vec<(usize, usize, usize)>,
    build_error: Option<NumError>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// First shape error recorded while building, if any.
    pub fn validate(&self) -> Result<(), NumError> {
        match &self.build_error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    fn describe(&self, id: usize) -> String {
        let n = &self.nodes[id];
        match (&n.label, &n.op) {
            (Some(l), _) => format!("#{id} {} ({l})", n.op.name()),
            (None, Op::Input(name)) => format!("#{id} input '{name}'"),
            (None, op) => format!("#{id} {}", op.name()),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            label: None,
        });
        id
    }

    fn fail(&mut self, op: Op, detail: String) -> NodeId {
        let id = self.push(op, 1, 1);
        if self.build_error.is_none() {
            self.build_error = Some(NumError::Shape {
                node: self.describe(id.0),
                detail,
            });
        }
        id
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input(name.into()), rows, cols)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let Some(idx) = store.position(name) else {
            return self.fail(Op::Input(name.to_string()), format!("unknown parameter '{name}'"));
        };
        if let Some(&id) = self.params.get(&idx) {
            return id;
        }
        let t = &store.tensors()[idx];
        let (r, c) = (t.rows(), t.cols());
        let id = self.push(Op::Param(idx), r, c);
        self.nodes[id.0].label = Some(name.to_string());
        self.params.insert(idx, id);
        self.param_shapes.push((idx, r, c));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return self.fail(Op::MatMul(a, b), format!("{ar}x{ac} times {br}x{bc}"));
        }
        self.push(Op::MatMul(a, b), ar, bc)
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return self.fail(op, format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1));
        }
        self.push(op, sa.0, sa.1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xr, xc) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != xc {
            return self.fail(Op::AddRow(x, row), format!("{xr}x{xc} plus row {rr}x{rc}"));
        }
        self.push(Op::AddRow(x, row), xr, xc)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (r, c) = self.shape(x);
        self.push(Op::Affine { x, scale, shift }, r, c)
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        self.push(op, r, c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu(x), x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(x), x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh(x), x)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::RowSoftmax(x), x)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return self.fail(Op::ConcatCols(parts.to_vec()), format!("row count {r} vs {rows}"));
            }
            cols += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), rows, cols)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return self.fail(Op::ConcatRows(parts.to_vec()), format!("col count {c} vs {cols}"));
            }
            rows += r;
        }
        self.push(Op::ConcatRows(parts.to_vec()), rows, cols)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(x);
        if start + len > c {
            return self.fail(
                Op::SliceCols { x, start, len },
                format!("cols {start}..{} of {c}", start + len),
            );
        }
        self.push(Op::SliceCols { x, start, len }, r, len)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(x);
        if start + len > r {
            return self.fail(
                Op::SliceRows { x, start, len },
                format!("rows {start}..{} of {r}", start + len),
            );
        }
        self.push(Op::SliceRows { x, start, len }, len, c)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        self.push(Op::Transpose(x), c, r)
    }

    /// Mean over all entries of `(a - b)^2`, a `1 x 1` node.
    pub fn mean_square(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return self.fail(
                Op::MeanSquare(a, b),
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            );
        }
        self.push(Op::MeanSquare(a, b), 1, 1)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), 1, 1)
    }

    /// `x W + b` for a `x: n x in` node and parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
        let w = self.param(store, &format!("{prefix}.w"));
        let y = self.matmul(x, w);
        match store.position(&format!("{prefix}.b")) {
            Some(_) => {
                let b = self.param(store, &format!("{prefix}.b"));
                self.add_row(y, b)
            }
            None => y,
        }
    }

    fn input_names(&self) -> impl Iterator<Item = (usize, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Input(name) => Some((i, name.as_str())),
            _ => None,
        })
    }

    /// Ids of every relu node (used to screen gradient-check points).
    fn relu_inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .collect()
    }
}

/// Evaluation state for one graph: forward values and gradient buffers.
pub struct Session<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    evaluated: bool,
}

impl<'g> Session<'g> {
    pub fn new(graph: &'g Graph) -> Self {
        let values = graph
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(_) => Tensor::zeros(&[0]),
                _ => Tensor::zeros(&[n.rows, n.cols]),
            })
            .collect();
        let grads = graph
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(_) => Vec::new(),
                _ => vec![0.0; n.rows * n.cols],
            })
            .collect();
        Self {
            graph,
            values,
            grads,
            evaluated: false,
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Evaluates every node. Inputs must all be fed with matching shapes and
    /// every intermediate must stay finite.
    pub fn forward(&mut self, params: &ParamStore, feeds: &Feeds<'_>) -> Result<(), NumError> {
        self.evaluated = false;
        let g = self.graph;
        g.validate()?;
        for &(idx, r, c) in &g.param_shapes {
            let t = params.tensors().get(idx).ok_or_else(|| NumError::Shape {
                node: format!("param #{idx}"),
                detail: "missing from parameter store".into(),
            })?;
            if t.rows() != r || t.cols() != c {
                return Err(NumError::Shape {
                    node: format!("param '{}'", params.names()[idx]),
                    detail: format!("expected {r}x{c}, got {:?}", t.shape()),
                });
            }
        }
        for (i, name) in g.input_names() {
            let (r, c) = (g.nodes[i].rows, g.nodes[i].cols);
            let t = feeds
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| NumError::MissingInput(name.to_string()))?;
            if t.rows() != r || t.cols() != c || t.len() != r * c {
                return Err(NumError::Shape {
                    node: g.describe(i),
                    detail: format!("expected {r}x{c}, fed {:?}", t.shape()),
                });
            }
            self.values[i].data_mut().copy_from_slice(t.data());
        }
        for i in 0..g.nodes.len() {
            self.eval_node(i, params);
            if !matches!(g.nodes[i].op, Op::Param(_)) && !self.values[i].is_finite() {
                return Err(NumError::NonFinite(g.describe(i)));
            }
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize, params: &ParamStore) {
        let g = self.graph;
        let node = &g.nodes[i];
        let (before, rest) = self.values.split_at_mut(i);
        let out = rest[0].data_mut();
        let val = |id: NodeId| -> &[f64] {
            match g.nodes[id.0].op {
                Op::Param(p) => params.tensors()[p].data(),
                _ => before[id.0].data(),
            }
        };
        match &node.op {
            Op::Input(_) | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = g.shape(*a);
                let m = node.cols;
                matmul_into(val(*a), val(*b), out, n, k, m);
            }
            Op::Add(a, b) => {
                for ((o, x), y) in out.iter_mut().zip(val(*a)).zip(val(*b)) {
                    *o = x + y;
                }
            }
            Op::Sub(a, b) => {
                for ((o, x), y) in out.iter_mut().zip(val(*a)).zip(val(*b)) {
                    *o = x - y;
                }
            }
            Op::Mul(a, b) => {
                for ((o, x), y) in out.iter_mut().zip(val(*a)).zip(val(*b)) {
                    *o = x * y;
                }
            }
            Op::AddRow(x, row) => {
                let c = node.cols;
                let xv = val(*x);
                let rv = val(*row);
                for (r, orow) in out.chunks_mut(c).enumerate() {
                    for ((o, a), b) in orow.iter_mut().zip(&xv[r * c..(r + 1) * c]).zip(rv) {
                        *o = a + b;
                    }
                }
            }
            Op::Affine { x, scale, shift } => {
                for (o, v) in out.iter_mut().zip(val(*x)) {
                    *o = scale * v + shift;
                }
            }
            Op::Relu(x) => {
                for (o, v) in out.iter_mut().zip(val(*x)) {
                    *o = if *v > 0.0 { *v } else { 0.0 };
                }
            }
            Op::Sigmoid(x) => {
                for (o, v) in out.iter_mut().zip(val(*x)) {
                    *o = 1.0 / (1.0 + (-v).exp());
                }
            }
            Op::Tanh(x) => {
                for (o, v) in out.iter_mut().zip(val(*x)) {
                    *o = v.tanh();
                }
            }
            Op::RowSoftmax(x) => {
                let c = node.cols;
                let xv = val(*x);
                for (r, orow) in out.chunks_mut(c).enumerate() {
                    softmax_into(&xv[r * c..(r + 1) * c], orow);
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut offset = 0;
                for p in parts {
                    let pc = g.nodes[p.0].cols;
                    let pv = val(*p);
                    for r in 0..node.rows {
                        out[r * c + offset..r * c + offset + pc]
                            .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    out[offset..offset + pv.len()].copy_from_slice(pv);
                    offset += pv.len();
                }
            }
            Op::SliceCols { x, start, len } => {
                let xc = g.nodes[x.0].cols;
                let xv = val(*x);
                for r in 0..node.rows {
                    out[r * len..(r + 1) * len]
                        .copy_from_slice(&xv[r * xc + start..r * xc + start + len]);
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = node.cols;
                out.copy_from_slice(&val(*x)[start * c..(start + len) * c]);
            }
            Op::Transpose(x) => {
                let (xr, xc) = g.shape(*x);
                let xv = val(*x);
                for r in 0..xr {
                    for c in 0..xc {
                        out[c * xr + r] = xv[r * xc + c];
                    }
                }
            }
            Op::MeanSquare(a, b) => {
                let av = val(*a);
                let n = av.len().max(1) as f64;
                let s: f64 = av.iter().zip(val(*b)).map(|(x, y)| (x - y) * (x - y)).sum();
                out[0] = s / n;
            }
            Op::Sum(x) => {
                out[0] = val(*x).iter().sum();
            }
        }
    }

    fn ensure_evaluated(&self) -> Result<(), NumError> {
        if self.evaluated {
            Ok(())
        } else {
            Err(NumError::NotEvaluated)
        }
    }

    /// Value of a non-parameter node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor, NumError> {
        self.ensure_evaluated()?;
        Ok(&self.values[id.0])
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> Result<f64, NumError> {
        Ok(self.value(id)?.data()[0])
    }

    /// Backpropagates `seed` (shaped like `output`) and accumulates parameter
    /// gradients into `accum`. Input gradients are kept in the session.
    pub fn backward_into(
        &mut self,
        params: &ParamStore,
        output: NodeId,
        seed: &Tensor,
        accum: &mut Gradients,
    ) -> Result<(), NumError> {
        self.ensure_evaluated()?;
        let g = self.graph;
        let (r, c) = g.shape(output);
        if seed.len() != r * c {
            return Err(NumError::Shape {
                node: g.describe(output.0),
                detail: format!("seed gradient {:?} for {r}x{c} output", seed.shape()),
            });
        }
        if accum.params.len() != params.len() {
            return Err(NumError::Shape {
                node: "gradients".into(),
                detail: format!("{} buffers for {} params", accum.params.len(), params.len()),
            });
        }
        for gbuf in &mut self.grads {
            gbuf.iter_mut().for_each(|v| *v = 0.0);
        }
        self.grads[output.0].copy_from_slice(seed.data());
        for i in (0..=output.0).rev() {
            self.backprop_node(i, params, accum);
        }
        Ok(())
    }

    /// Backward pass returning fresh parameter gradients.
    pub fn backward(
        &mut self,
        params: &ParamStore,
        output: NodeId,
        seed: &Tensor,
    ) -> Result<Gradients, NumError> {
        let mut grads = Gradients::zeros_like(params);
        self.backward_into(params, output, seed, &mut grads)?;
        Ok(grads)
    }

    /// Gradient with respect to an input node from the last backward pass.
    pub fn input_grad(&self, name: &str) -> Option<Tensor> {
        let g = self.graph;
        g.input_names().find(|(_, n)| *n == name).map(|(i, _)| {
            Tensor::matrix(g.nodes[i].rows, g.nodes[i].cols, self.grads[i].clone())
        })
    }

    fn backprop_node(&mut self, i: usize, params: &ParamStore, accum: &mut Gradients) {
        let g = self.graph;
        let node = &g.nodes[i];
        if matches!(node.op, Op::Input(_) | Op::Param(_)) {
            return;
        }
        let (before, rest) = self.grads.split_at_mut(i);
        let dout = &rest[0];
        if dout.iter().all(|v| *v == 0.0) {
            return;
        }
        let values = &self.values;
        let val = |id: NodeId| -> &[f64] {
            match g.nodes[id.0].op {
                Op::Param(p) => params.tensors()[p].data(),
                _ => values[id.0].data(),
            }
        };
        let out_val = values[i].data();

        // Routes a gradient target either to a parameter accumulator or to
        // the node's own buffer.
        macro_rules! target {
            ($id:expr) => {
                match g.nodes[$id.0].op {
                    Op::Param(p) => accum.params[p].data_mut(),
                    _ => &mut before[$id.0][..],
                }
            };
        }

        match &node.op {
            Op::Input(_) | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = g.shape(*a);
                let m = node.cols;
                let av = val(*a);
                let bv = val(*b);
                if a == b {
                    let mut tmp = vec![0.0; n * k];
                    matmul_bt_acc(dout, bv, &mut tmp, n, m, k);
                    matmul_at_acc(av, dout, &mut tmp, n, k, m);
                    for (t, v) in target!(a).iter_mut().zip(tmp) {
                        *t += v;
                    }
                } else {
                    matmul_bt_acc(dout, bv, target!(a), n, m, k);
                    matmul_at_acc(av, dout, target!(b), n, k, m);
                }
            }
            Op::Add(a, b) => {
                for (t, d) in target!(a).iter_mut().zip(dout) {
                    *t += d;
                }
                for (t, d) in target!(b).iter_mut().zip(dout) {
                    *t += d;
                }
            }
            Op::Sub(a, b) => {
                for (t, d) in target!(a).iter_mut().zip(dout) {
                    *t += d;
                }
                for (t, d) in target!(b).iter_mut().zip(dout) {
                    *t -= d;
                }
            }
            Op::Mul(a, b) => {
                let bv = val(*b).to_vec();
                let av = val(*a).to_vec();
                for ((t, d), y) in target!(a).iter_mut().zip(dout).zip(&bv) {
                    *t += d * y;
                }
                for ((t, d), x) in target!(b).iter_mut().zip(dout).zip(&av) {
                    *t += d * x;
                }
            }
            Op::AddRow(x, row) => {
                let c = node.cols;
                for (t, d) in target!(x).iter_mut().zip(dout) {
                    *t += d;
                }
                let rt = target!(row);
                for drow in dout.chunks(c) {
                    for (t, d) in rt.iter_mut().zip(drow) {
                        *t += d;
                    }
                }
            }
            Op::Affine { x, scale, .. } => {
                for (t, d) in target!(x).iter_mut().zip(dout) {
                    *t += scale * d;
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).to_vec();
                for ((t, d), v) in target!(x).iter_mut().zip(dout).zip(&xv) {
                    if *v > 0.0 {
                        *t += d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                for ((t, d), y) in target!(x).iter_mut().zip(dout).zip(out_val) {
                    *t += d * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                for ((t, d), y) in target!(x).iter_mut().zip(dout).zip(out_val) {
                    *t += d * (1.0 - y * y);
                }
            }
            Op::RowSoftmax(x) => {
                let c = node.cols;
                let tx = target!(x);
                for r in 0..node.rows {
                    let y = &out_val[r * c..(r + 1) * c];
                    let d = &dout[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        tx[r * c + j] += y[j] * (d[j] - dot);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut offset = 0;
                for p in parts {
                    let pc = g.nodes[p.0].cols;
                    let tp = target!(p);
                    for r in 0..node.rows {
                        for j in 0..pc {
                            tp[r * pc + j] += dout[r * c + offset + j];
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = target!(p);
                    let n = tp.len();
                    for (t, d) in tp.iter_mut().zip(&dout[offset..offset + n]) {
                        *t += d;
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xc = g.nodes[x.0].cols;
                let tx = target!(x);
                for r in 0..node.rows {
                    for j in 0..*len {
                        tx[r * xc + start + j] += dout[r * len + j];
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = node.cols;
                let tx = target!(x);
                for (t, d) in tx[start * c..(start + len) * c].iter_mut().zip(dout) {
                    *t += d;
                }
            }
            Op::Transpose(x) => {
                let (xr, xc) = g.shape(*x);
                let tx = target!(x);
                for r in 0..xr {
                    for c in 0..xc {
                        tx[r * xc + c] += dout[c * xr + r];
                    }
                }
            }
            Op::MeanSquare(a, b) => {
                let av = val(*a).to_vec();
                let bv = val(*b).to_vec();
                let n = av.len().max(1) as f64;
                let k = 2.0 * dout[0] / n;
                for ((t, x), y) in target!(a).iter_mut().zip(&av).zip(&bv) {
                    *t += k * (x - y);
                }
                for ((t, x), y) in target!(b).iter_mut().zip(&av).zip(&bv) {
                    *t -= k * (x - y);
                }
            }
            Op::Sum(x) => {
                let d = dout[0];
                target!(x).iter_mut().for_each(|t| *t += d);
            }
        }
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a relu.
    pub skipped_kinks: usize,
}

/// Denominator floor for relative errors, so that near-zero gradients are
/// judged on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares analytic gradients of the scalar `output` against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every parameter coordinate and
/// every coordinate of the inputs named in `wrt_inputs`.
pub fn check_gradients(
    graph: &Graph,
    params: &ParamStore,
    feeds: &Feeds<'_>,
    output: NodeId,
    wrt_inputs: &[&str],
    h: f64,
) -> Result<GradCheck, NumError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumError::InvalidArgument(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    if graph.shape(output) != (1, 1) {
        return Err(NumError::Shape {
            node: graph.describe(output.0),
            detail: "gradient check needs a scalar output".into(),
        });
    }
    let relus = graph.relu_inputs();
    let mut session = Session::new(graph);
    session.forward(params, feeds)?;
    for &r in &relus {
        if session.values[r.0].data().iter().any(|v| v.abs() <= h) {
            return Err(NumError::InvalidArgument(format!(
                "relu input at {} lies within h of zero",
                graph.describe(r.0)
            )));
        }
    }
    let masks = relu_masks(&session, &relus);
    let analytic = session.backward(params, output, &Tensor::scalar(1.0))?;
    let input_grads: Vec<Tensor> = wrt_inputs
        .iter()
        .map(|n| {
            session
                .input_grad(n)
                .ok_or_else(|| NumError::MissingInput(n.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = Session::new(graph);
    let mut eval = |p: &ParamStore, f: &Feeds<'_>| -> Result<(f64, bool), NumError> {
        probe.forward(p, f)?;
        let v = probe.scalar(output)?;
        if !v.is_finite() {
            return Err(NumError::NonFinite(graph.describe(output.0)));
        }
        Ok((v, relu_masks(&probe, &relus) == masks))
    };
    let record = |a: f64, n: f64, report: &mut GradCheck| {
        let denom = a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
        report.max_rel_error = report.max_rel_error.max((a - n).abs() / denom);
        report.checked += 1;
    };

    let mut shifted = params.clone();
    for (pi, tensor) in params.tensors().iter().enumerate() {
        for j in 0..tensor.len() {
            let x = tensor.data()[j];
            shifted.tensors_mut()[pi].data_mut()[j] = x + h;
            let (fp, okp) = eval(&shifted, feeds)?;
            shifted.tensors_mut()[pi].data_mut()[j] = x - h;
            let (fm, okm) = eval(&shifted, feeds)?;
            shifted.tensors_mut()[pi].data_mut()[j] = x;
            if !(okp && okm) {
                report.skipped_kinks += 1;
                continue;
            }
            record(analytic.params[pi].data()[j], (fp - fm) / (2.0 * h), &mut report);
        }
    }
    for (name, grad) in wrt_inputs.iter().zip(&input_grads) {
        let base = feeds
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| (*t).clone())
            .ok_or_else(|| NumError::MissingInput(name.to_string()))?;
        let mut moved = base.clone();
        for j in 0..base.len() {
            let x = base.data()[j];
            let mut run = |v: f64, moved: &mut Tensor| -> Result<(f64, bool), NumError> {
                moved.data_mut()[j] = v;
                let f: Vec<(&str, &Tensor)> = feeds
                    .iter()
                    .map(|&(n, t)| if n == *name { (n, &*moved) } else { (n, t) })
                    .collect();
                eval(params, &f)
            };
            let (fp, okp) = run(x + h, &mut moved)?;
            let (fm, okm) = run(x - h, &mut moved)?;
            moved.data_mut()[j] = x;
            if !(okp && okm) {
                report.skipped_kinks += 1;
                continue;
            }
            record(grad.data()[j], (fp - fm) / (2.0 * h), &mut report);
        }
    }
    Ok(report)
}

fn relu_masks(session: &Session<'_>, relus: &[NodeId]) -> Vec<bool> {
    relus
        .iter()
        .flat_map(|r| session.values[r.0].data().iter().map(|v| *v > 0.0))
        .collect()
}
