//! Tape-based reverse-mode differentiation over dense row-major matrices,
//! plus the adaptive-moment optimizer and a finite-difference checker.
//!
//! Every value is a `rows x cols` matrix; batched quantities put the batch
//! on the rows, scalars are `1 x 1`. Nodes are appended in evaluation order,
//! so the tape itself is a topological order.

use std::collections::BTreeMap;

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward needs a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(1, 1, vec![x])
    }

    /// Column vector `len x 1`.
    pub fn column(values: Vec<f64>) -> Self {
        Tensor::new(values.len(), 1, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(rows.len(), cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The single entry of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Concat(Var, Var),
    DotRows(Var, Var),
    SquaredNormRows(Var),
    Sqrt(Var),
    Abs(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x * s` with `s` a `1 x 1` node broadcast over `x`.
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Row-wise max; `argmax[r]` is the winning column.
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanCols(Var),
    Mean(Var),
    StopGradient,
    ClampMin {
        x: Var,
        c: f64,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    /// Per row and component: merged segments as `(start_col, end_col)`
    /// pairs; the segment length is `b[end] - a[start]`.
    IntervalUnion {
        a: Var,
        b: Var,
        k: usize,
        segments: Vec<Vec<Vec<(usize, usize)>>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Tensor>,
    /// Nodes whose adjoint was propagated to their inputs.
    pub visited: usize,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }
}

/// Records one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Lower clamp applied to the radicand when differentiating `sqrt`.
pub const SQRT_GRAD_FLOOR: f64 = 1e-24;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Param(name.to_string()), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Shape {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    /// `x W + b` with `x: B x in`, `W: in x out`, `b: 1 x out`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var, GradError> {
        let (batch, inp) = self.shape(x);
        let (w_in, out) = self.shape(w);
        if inp != w_in {
            return Err(GradError::Shape {
                op: "affine",
                left: (batch, inp),
                right: (w_in, out),
            });
        }
        if self.shape(b) != (1, out) {
            return Err(GradError::Shape {
                op: "affine bias",
                left: (1, out),
                right: self.shape(b),
            });
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut data = Vec::with_capacity(batch * out);
        for r in 0..batch {
            let mut row = bv.data.clone();
            for (i, &xi) in xv.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (o, &wio) in row.iter_mut().zip(wv.row(i)) {
                    *o += xi * wio;
                }
            }
            data.extend(row);
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(batch, out, data), Op::Affine { x, w, b }, needs))
    }

    pub fn rectified_linear(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z.max(0.0));
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    /// Column-wise concatenation of two tensors with equal row counts.
    pub fn concatenate(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        if ra != rb {
            return Err(GradError::Shape {
                op: "concatenate",
                left: (ra, ca),
                right: (rb, cb),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(ra, ca + cb, data), Op::Concat(a, b), needs))
    }

    /// Row-wise inner products, `B x 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..av.rows)
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::column(data), Op::DotRows(a, b), needs))
    }

    /// Row-wise squared norms, `B x 1`.
    pub fn squared_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().map(|v| v * v).sum()).collect();
        let needs = self.needs(x);
        self.push(Tensor::column(data), Op::SquaredNormRows(x), needs)
    }

    /// `sqrt(max(x, 0))`; the derivative uses `max(x, SQRT_GRAD_FLOOR)`.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z.max(0.0).sqrt());
        let needs = self.needs(x);
        self.push(v, Op::Sqrt(x), needs)
    }

    pub fn absolute(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let needs = self.needs(x);
        self.push(v, Op::Abs(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| 1.0 / (1.0 + (-z).exp()));
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn subtract(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.elementwise("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.elementwise("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x * s` for a `1 x 1` node `s`.
    pub fn multiply_broadcast(&mut self, x: Var, s: Var) -> Result<Var, GradError> {
        if self.shape(s) != (1, 1) {
            return Err(GradError::Shape {
                op: "multiply_broadcast",
                left: self.shape(x),
                right: self.shape(s),
            });
        }
        let k = self.value(s).item();
        let v = self.value(x).map(|z| z * k);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(v, Op::MulBroadcast(x, s), needs))
    }

    pub fn scalar_multiply(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|z| z * c);
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|z| z + c);
        let needs = self.needs(x);
        self.push(v, Op::AddScalar(x), needs)
    }

    /// Row-wise max, `B x 1`; ties go to the lowest column.
    pub fn max_over_axis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut argmax = Vec::with_capacity(xv.rows);
        let mut data = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let needs = self.needs(x);
        self.push(Tensor::column(data), Op::MaxCols { x, argmax }, needs)
    }

    /// Row-wise mean, `B x 1`.
    pub fn mean_over_axis(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows)
            .map(|r| xv.row(r).iter().sum::<f64>() / xv.cols as f64)
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::column(data), Op::MeanCols(x), needs)
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.data.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Identity on values; blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|z| z.max(c));
        let needs = self.needs(x);
        self.push(v, Op::ClampMin { x, c }, needs)
    }

    /// `out[r] = x[index[r]]`; the one-hot linear map of a row lookup.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, GradError> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows) {
            return Err(GradError::Shape {
                op: "gather_rows",
                left: xv.shape(),
                right: (bad, 0),
            });
        }
        let mut data = Vec::with_capacity(index.len() * xv.cols);
        for &i in index {
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(index.len(), xv.cols, data);
        let needs = self.needs(x);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Interval-union lengths per component: for each row and each of the `k`
    /// groups of `l` columns, `|union_j [a_j, max(a_j, b_j)]|`. Output `B x k`.
    pub fn interval_union(&mut self, a: Var, b: Var, k: usize, l: usize) -> Result<Var, GradError> {
        self.same_shape("interval_union", a, b)?;
        let (rows, cols) = self.shape(a);
        if cols != k * l {
            return Err(GradError::Shape {
                op: "interval_union",
                left: (rows, cols),
                right: (k, l),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(rows * k);
        let mut segments = Vec::with_capacity(rows);
        let mut order: Vec<usize> = Vec::with_capacity(l);
        for r in 0..rows {
            let (ar, br) = (av.row(r), bv.row(r));
            let mut row_segments = Vec::with_capacity(k);
            for comp in 0..k {
                order.clear();
                // only intervals with b > a are non-degenerate
                order.extend((comp * l..(comp + 1) * l).filter(|&j| br[j] > ar[j]));
                order.sort_by(|&x, &y| ar[x].partial_cmp(&ar[y]).expect("finite").then(x.cmp(&y)));
                let mut segs: Vec<(usize, usize)> = Vec::new();
                for &j in &order {
                    match segs.last_mut() {
                        Some((_, end)) if ar[j] <= br[*end] => {
                            if br[j] > br[*end] {
                                *end = j;
                            }
                        }
                        _ => segs.push((j, j)),
                    }
                }
                data.push(segs.iter().map(|&(s, e)| br[e] - ar[s]).sum());
                row_segments.push(segs);
            }
            segments.push(row_segments);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(rows, k, data),
            Op::IntervalUnion { a, b, k, segments },
            needs,
        ))
    }

    /// `sqrt(|a|^2 + |b|^2 - a.b)` row-wise, `B x 1`.
    pub fn d_hat(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let na = self.squared_norm(a);
        let nb = self.squared_norm(b);
        let ab = self.dot(a, b)?;
        let s = self.add(na, nb)?;
        let radicand = self.subtract(s, ab)?;
        Ok(self.sqrt(radicand))
    }

    /// Reverse sweep from a `1 x 1` root. A tape can be swept once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, GradError> {
        if self.consumed {
            return Err(GradError::AlreadyBackpropagated);
        }
        if self.shape(root) != (1, 1) {
            return Err(GradError::NonScalarRoot(self.shape(root)));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            out.visited += 1;
            let send = |v: Var, t: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let value = &node.value;
            match &node.op {
                Op::Constant | Op::StopGradient => {}
                Op::Param(name) => match out.by_name.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                },
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (batch, inp) = xv.shape();
                    let out_dim = wv.cols;
                    if self.nodes[x.0].needs_grad {
                        let mut gx = Tensor::zeros(batch, inp);
                        for r in 0..batch {
                            let gr = g.row(r);
                            for i in 0..inp {
                                gx.data[r * inp + i] = wv.row(i).iter().zip(gr).map(|(w, g)| w * g).sum();
                            }
                        }
                        send(*x, gx, &mut adj);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut gw = Tensor::zeros(inp, out_dim);
                        for r in 0..batch {
                            let gr = g.row(r);
                            for (i, &xi) in xv.row(r).iter().enumerate() {
                                if xi == 0.0 {
                                    continue;
                                }
                                for (acc, &gv) in gw.data[i * out_dim..(i + 1) * out_dim].iter_mut().zip(gr) {
                                    *acc += xi * gv;
                                }
                            }
                        }
                        send(*w, gw, &mut adj);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut gb = Tensor::zeros(1, out_dim);
                        for r in 0..batch {
                            for (acc, &gv) in gb.data.iter_mut().zip(g.row(r)) {
                                *acc += gv;
                            }
                        }
                        send(*b, gb, &mut adj);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &z)| if z > 0.0 { gv } else { 0.0 })
                        .collect();
                    send(*x, Tensor::new(g.rows, g.cols, data), &mut adj);
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[a.0].value.cols;
                    let cb = self.nodes[b.0].value.cols;
                    let mut ga = Vec::with_capacity(g.rows * ca);
                    let mut gb = Vec::with_capacity(g.rows * cb);
                    for r in 0..g.rows {
                        ga.extend_from_slice(&g.row(r)[..ca]);
                        gb.extend_from_slice(&g.row(r)[ca..]);
                    }
                    send(*a, Tensor::new(g.rows, ca, ga), &mut adj);
                    send(*b, Tensor::new(g.rows, cb, gb), &mut adj);
                }
                Op::DotRows(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let scale_rows = |src: &Tensor| {
                        let mut t = src.clone();
                        for r in 0..t.rows {
                            let gr = g.data[r];
                            for v in &mut t.data[r * t.cols..(r + 1) * t.cols] {
                                *v *= gr;
                            }
                        }
                        t
                    };
                    send(*a, scale_rows(bv), &mut adj);
                    send(*b, scale_rows(av), &mut adj);
                }
                Op::SquaredNormRows(x) => {
                    let mut t = self.nodes[x.0].value.clone();
                    for r in 0..t.rows {
                        let gr = 2.0 * g.data[r];
                        for v in &mut t.data[r * t.cols..(r + 1) * t.cols] {
                            *v *= gr;
                        }
                    }
                    send(*x, t, &mut adj);
                }
                Op::Sqrt(x) => {
                    let xv = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &z)| gv * 0.5 / z.max(SQRT_GRAD_FLOOR).sqrt())
                        .collect();
                    send(*x, Tensor::new(g.rows, g.cols, data), &mut adj);
                }
                Op::Abs(x) => {
                    let xv = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &z)| {
                            if z > 0.0 {
                                gv
                            } else if z < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    send(*x, Tensor::new(g.rows, g.cols, data), &mut adj);
                }
                Op::Sigmoid(x) => {
                    let data = g
                        .data
                        .iter()
                        .zip(&value.data)
                        .map(|(&gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    send(*x, Tensor::new(g.rows, g.cols, data), &mut adj);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    let neg = g.map(|v| -v);
                    send(*a, g, &mut adj);
                    send(*b, neg, &mut adj);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let gb = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    send(*a, Tensor::new(g.rows, g.cols, ga), &mut adj);
                    send(*b, Tensor::new(g.rows, g.cols, gb), &mut adj);
                }
                Op::MulBroadcast(x, s) => {
                    let k = self.nodes[s.0].value.item();
                    let xv = &self.nodes[x.0].value;
                    let gs: f64 = g.data.iter().zip(&xv.data).map(|(a, b)| a * b).sum();
                    send(*x, g.map(|v| v * k), &mut adj);
                    send(*s, Tensor::scalar(gs), &mut adj);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(*x, g.map(|v| v * c), &mut adj);
                }
                Op::AddScalar(x) => send(*x, g, &mut adj),
                Op::MaxCols { x, argmax } => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut t = Tensor::zeros(rows, cols);
                    for (r, &c) in argmax.iter().enumerate() {
                        t.data[r * cols + c] = g.data[r];
                    }
                    send(*x, t, &mut adj);
                }
                Op::MeanCols(x) => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut t = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let share = g.data[r] / cols as f64;
                        t.data[r * cols..(r + 1) * cols].fill(share);
                    }
                    send(*x, t, &mut adj);
                }
                Op::Mean(x) => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let share = g.item() / (rows * cols) as f64;
                    send(*x, Tensor::new(rows, cols, vec![share; rows * cols]), &mut adj);
                }
                Op::ClampMin { x, c } => {
                    let xv = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &z)| if z > *c { gv } else { 0.0 })
                        .collect();
                    send(*x, Tensor::new(g.rows, g.cols, data), &mut adj);
                }
                Op::GatherRows { x, index } => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut t = Tensor::zeros(rows, cols);
                    for (r, &i) in index.iter().enumerate() {
                        for (acc, &gv) in t.data[i * cols..(i + 1) * cols].iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    send(*x, t, &mut adj);
                }
                Op::IntervalUnion { a, b, k, segments } => {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    let mut gb = Tensor::zeros(rows, cols);
                    for (r, row) in segments.iter().enumerate() {
                        for (comp, segs) in row.iter().enumerate() {
                            let gv = g.data[r * k + comp];
                            for &(s, e) in segs {
                                ga.data[r * cols + s] -= gv;
                                gb.data[r * cols + e] += gv;
                            }
                        }
                    }
                    send(*a, ga, &mut adj);
                    send(*b, gb, &mut adj);
                }
            }
        }
        Ok(out)
    }
}

/// Trainable arrays with adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamEntry {
    value: Tensor,
    first: Tensor,
    second: Tensor,
}

/// Adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = value.shape();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                first: Tensor::zeros(r, c),
                second: Tensor::zeros(r, c),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Registers every parameter on `tape`.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(name, e)| (name.clone(), tape.param(name, e.value.clone())))
            .collect()
    }

    fn check_grads(&self, grads: &BTreeMap<String, Tensor>) -> Result<(), GradError> {
        for (name, g) in grads {
            let e = self
                .entries
                .get(name)
                .ok_or_else(|| GradError::UnknownParam(name.clone()))?;
            if e.value.shape() != g.shape() {
                return Err(GradError::Shape {
                    op: "optimizer",
                    left: e.value.shape(),
                    right: g.shape(),
                });
            }
        }
        Ok(())
    }

    /// One bias-corrected adaptive-moment update. Parameters without a
    /// gradient entry are treated as having zero gradient.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<(), GradError> {
        self.check_grads(grads)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, e) in &mut self.entries {
            let g = grads.get(name);
            for i in 0..e.value.data.len() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                let m = cfg.beta1 * e.first.data[i] + (1.0 - cfg.beta1) * gi;
                let v = cfg.beta2 * e.second.data[i] + (1.0 - cfg.beta2) * gi * gi;
                e.first.data[i] = m;
                e.second.data[i] = v;
                e.value.data[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Plain gradient descent.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<(), GradError> {
        self.check_grads(grads)?;
        self.step += 1;
        for (name, g) in grads {
            let e = self.entries.get_mut(name).expect("checked");
            for (p, gv) in e.value.data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }

    /// `{name: nested arrays}`.
    pub fn to_checkpoint(&self) -> Value {
        let mut map = Map::new();
        for (name, e) in &self.entries {
            map.insert(
                name.clone(),
                serde_json::to_value(e.value.to_nested()).expect("finite arrays"),
            );
        }
        Value::Object(map)
    }

    pub fn from_checkpoint(value: &Value) -> Result<Self, GradError> {
        let obj = value
            .as_object()
            .ok_or_else(|| GradError::Checkpoint("expected an object".into()))?;
        let mut store = ParamStore::new();
        for (name, v) in obj {
            let rows: Vec<Vec<f64>> =
                serde_json::from_value(v.clone()).map_err(|e| GradError::Checkpoint(format!("{name}: {e}")))?;
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(GradError::Checkpoint(format!("{name}: ragged rows")));
            }
            store.insert(name, Tensor::from_rows(&rows));
        }
        Ok(store)
    }
}

/// Result of comparing analytic gradients to central differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates skipped because a kink lies within the step.
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Compares `analytic` with central differences of `loss` around `params`.
///
/// A coordinate is skipped when the forward and backward one-sided slopes
/// disagree by more than `kink_tol` (relative), which flags a kink within
/// `h` of the point. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradCheck {
    const KINK_TOL: f64 = 1e-3;
    const FLOOR: f64 = 1e-6;
    let mut report = GradCheck::default();
    let base = loss(params);
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).expect("listed").data.len();
        for i in 0..len {
            let x0 = params.get(&name).expect("listed").data[i];
            probe.get_mut(&name).expect("listed").data[i] = x0 + h;
            let up = loss(&probe);
            probe.get_mut(&name).expect("listed").data[i] = x0 - h;
            let down = loss(&probe);
            probe.get_mut(&name).expect("listed").data[i] = x0;
            let forward = (up - base) / h;
            let backward = (base - down) / h;
            let central = (up - down) / (2.0 * h);
            if (forward - backward).abs() > KINK_TOL * central.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
            let a = analytic.get(&name).map_or(0.0, |g| g.data[i]);
            let err = (a - central).abs() / a.abs().max(central.abs()).max(FLOOR);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    report
}
