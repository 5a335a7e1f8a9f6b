//! Recorded computation with reverse-mode differentiation.
//!
//! Every primitive is evaluated eagerly and appended to the tape together
//! with its input ids, so the tape is topologically ordered by construction.
//! Backward walks the tape in reverse and accumulates vector-Jacobian
//! products. All reductions run sequentially in row-major order, which
//! makes forward values and gradients bit-reproducible.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed primitive set. Index-carrying primitives own their indices.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Subtract,
    Mul,
    MatMul,
    Concat { axis: usize },
    GatherRows { index: Vec<usize> },
    ScatterAddRows { index: Vec<usize>, rows: usize },
    /// Softmax over entries of a column vector sharing a segment key.
    SegmentSoftmax { segments: Vec<usize>, num_segments: usize },
    /// `[r, c] -> [r, 1]`, remembering the argmax of every row.
    RowMax,
    Sum,
    Sigmoid,
    Tanh,
    Relu,
    Scale(f64),
    AddScalar(f64),
    /// One-element tensor times a tensor; the only broadcast allowed.
    ScalarMul,
    /// Inverted dropout with a fixed keep mask of zeros and ones.
    Dropout { mask: Vec<f64>, rate: f64 },
    Reshape { shape: Vec<usize> },
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Mul => "elementwise-multiply",
            Primitive::MatMul => "matrix-multiply",
            Primitive::Concat { .. } => "concatenate",
            Primitive::GatherRows { .. } => "gather-rows",
            Primitive::ScatterAddRows { .. } => "scatter-add-rows",
            Primitive::SegmentSoftmax { .. } => "segment-softmax",
            Primitive::RowMax => "row-max",
            Primitive::Sum => "sum",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add-scalar",
            Primitive::ScalarMul => "scalar-multiply",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
        }
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Constant,
    Param(ParamId),
    Op { prim: Primitive, inputs: Vec<Var> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    /// Saved argmax for `RowMax`.
    aux: Vec<usize>,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    param_vars: HashMap<ParamId, Var>,
    negate_param_grads: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::F64)
    }
}

fn dims2(prim: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(prim, format!("expected a matrix, got shape {:?}", t.shape())))
}

fn same_shape(prim: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            prim.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Evaluates a primitive on concrete inputs. Returns the result data, its
/// shape, and auxiliary indices saved for backward.
fn evaluate(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    let arity = match prim {
        Primitive::Add
        | Primitive::Subtract
        | Primitive::Mul
        | Primitive::MatMul
        | Primitive::ScalarMul => Some(2),
        Primitive::Concat { .. } => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if inputs.len() != n {
            return Err(Error::shape(
                prim.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    let unary = |f: &dyn Fn(f64) -> f64| -> (Vec<usize>, Vec<f64>, Vec<usize>) {
        let x = inputs[0];
        (x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect(), vec![])
    };
    let out = match prim {
        Primitive::Add | Primitive::Subtract | Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(prim, a, b)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| match prim {
                    Primitive::Add => x + y,
                    Primitive::Subtract => x - y,
                    _ => x * y,
                })
                .collect();
            (a.shape().to_vec(), data, vec![])
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = dims2("matrix-multiply", a)?;
            let (k2, n) = dims2("matrix-multiply", b)?;
            if k != k2 {
                return Err(Error::shape(
                    "matrix-multiply",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            (vec![m, n], out, vec![])
        }
        Primitive::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::shape("concatenate", "no inputs"));
            }
            let dims = inputs
                .iter()
                .map(|t| dims2("concatenate", t))
                .collect::<Result<Vec<_>>>()?;
            match axis {
                0 => {
                    let cols = dims[0].1;
                    if dims.iter().any(|d| d.1 != cols) {
                        return Err(Error::shape("concatenate", format!("axis 0 with {dims:?}")));
                    }
                    let rows = dims.iter().map(|d| d.0).sum();
                    let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
                    (vec![rows, cols], data, vec![])
                }
                1 => {
                    let rows = dims[0].0;
                    if dims.iter().any(|d| d.0 != rows) {
                        return Err(Error::shape("concatenate", format!("axis 1 with {dims:?}")));
                    }
                    let cols: usize = dims.iter().map(|d| d.1).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for t in inputs {
                            data.extend_from_slice(t.row_slice(r));
                        }
                    }
                    (vec![rows, cols], data, vec![])
                }
                _ => return Err(Error::shape("concatenate", format!("axis {axis} out of range"))),
            }
        }
        Primitive::GatherRows { index } => {
            let x = inputs[0];
            let (rows, cols) = dims2("gather-rows", x)?;
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index {
                if i >= rows {
                    return Err(Error::shape("gather-rows", format!("row {i} of {rows}")));
                }
                data.extend_from_slice(x.row_slice(i));
            }
            (vec![index.len(), cols], data, vec![])
        }
        Primitive::ScatterAddRows { index, rows } => {
            let x = inputs[0];
            let (m, cols) = dims2("scatter-add-rows", x)?;
            if index.len() != m {
                return Err(Error::shape(
                    "scatter-add-rows",
                    format!("{} indices for {m} rows", index.len()),
                ));
            }
            let mut data = vec![0.0; rows * cols];
            for (r, &dst) in index.iter().enumerate() {
                if dst >= *rows {
                    return Err(Error::shape("scatter-add-rows", format!("row {dst} of {rows}")));
                }
                for (o, &v) in data[dst * cols..(dst + 1) * cols].iter_mut().zip(x.row_slice(r)) {
                    *o += v;
                }
            }
            (vec![*rows, cols], data, vec![])
        }
        Primitive::SegmentSoftmax {
            segments,
            num_segments,
        } => {
            let x = inputs[0];
            if x.numel() != segments.len() {
                return Err(Error::shape(
                    "segment-softmax",
                    format!("{} values, {} segment keys", x.numel(), segments.len()),
                ));
            }
            if let Some(&key) = segments.iter().find(|&&s| s >= *num_segments) {
                return Err(Error::UnknownSegment {
                    key,
                    num_segments: *num_segments,
                });
            }
            let mut seg_max = vec![f64::NEG_INFINITY; *num_segments];
            for (&v, &s) in x.data().iter().zip(segments) {
                seg_max[s] = seg_max[s].max(v);
            }
            let exps: Vec<f64> = x
                .data()
                .iter()
                .zip(segments)
                .map(|(&v, &s)| (v - seg_max[s]).exp())
                .collect();
            let mut seg_sum = vec![0.0; *num_segments];
            for (&e, &s) in exps.iter().zip(segments) {
                seg_sum[s] += e;
            }
            let data = exps.iter().zip(segments).map(|(&e, &s)| e / seg_sum[s]).collect();
            (x.shape().to_vec(), data, vec![])
        }
        Primitive::RowMax => {
            let x = inputs[0];
            let (rows, cols) = dims2("row-max", x)?;
            if cols == 0 {
                return Err(Error::shape("row-max", "zero columns"));
            }
            let mut data = Vec::with_capacity(rows);
            let mut argmax = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = x.row_slice(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                data.push(row[best]);
                argmax.push(best);
            }
            (vec![rows, 1], data, argmax)
        }
        Primitive::Sum => {
            let total = inputs[0].data().iter().fold(0.0, |acc, &v| acc + v);
            (vec![1, 1], vec![total], vec![])
        }
        Primitive::Sigmoid => unary(&sigmoid),
        Primitive::Tanh => unary(&f64::tanh),
        Primitive::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Scale(c) => unary(&|v| v * c),
        Primitive::AddScalar(c) => unary(&|v| v + c),
        Primitive::ScalarMul => {
            let (s, t) = (inputs[0], inputs[1]);
            let s = s.item().ok_or_else(|| {
                Error::shape("scalar-multiply", format!("scalar operand has shape {:?}", s.shape()))
            })?;
            (t.shape().to_vec(), t.data().iter().map(|&v| s * v).collect(), vec![])
        }
        Primitive::Dropout { mask, rate } => {
            let x = inputs[0];
            if mask.len() != x.numel() {
                return Err(Error::shape(
                    "dropout",
                    format!("mask of {} for {} values", mask.len(), x.numel()),
                ));
            }
            if !(0.0..1.0).contains(rate) {
                return Err(Error::InvalidInput(format!("dropout rate {rate} outside [0, 1)")));
            }
            let keep = 1.0 / (1.0 - rate);
            let data = x
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| v * m * keep)
                .collect();
            (x.shape().to_vec(), data, vec![])
        }
        Primitive::Reshape { shape } => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
            }
            (shape.clone(), x.data().to_vec(), vec![])
        }
        Primitive::Transpose => {
            let x = inputs[0];
            let (rows, cols) = dims2("transpose", x)?;
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = x.get(r, c);
                }
            }
            (vec![cols, rows], data, vec![])
        }
    };
    Ok(out)
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = acc.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            param_vars: HashMap::new(),
            negate_param_grads: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negative control for gradient checking: flips the sign of every
    /// parameter gradient produced by [`Tape::backward`].
    pub fn corrupt_backward(&mut self, on: bool) {
        self.negate_param_grads = on;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Indices saved by a `RowMax` application.
    pub fn argmax(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].aux
    }

    fn push(&mut self, value: Tensor, origin: Origin, aux: Vec<usize>) -> Var {
        self.nodes.push(Node { value, origin, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = if t.precision() != self.precision {
            t.with_precision(self.precision)
        } else {
            t
        };
        self.push(t, Origin::Constant, vec![])
    }

    /// Leaf for a stored parameter; repeated requests return the same var.
    /// A tape records parameters of a single store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let mut t = store.tensor(id).clone();
        if t.precision() != self.precision {
            t = t.with_precision(self.precision);
        }
        let v = self.push(t, Origin::Param(id), vec![]);
        self.param_vars.insert(id, v);
        v
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (shape, data, aux) = evaluate(&prim, &values)?;
        let value = Tensor::from_parts(shape, data, self.precision);
        Ok(self.push(
            value,
            Origin::Op {
                prim,
                inputs: inputs.to_vec(),
            },
            aux,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows { index }, &[x])
    }

    pub fn scatter_add_rows(&mut self, x: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        self.apply(Primitive::ScatterAddRows { index, rows }, &[x])
    }

    pub fn segment_softmax(
        &mut self,
        x: Var,
        segments: Vec<usize>,
        num_segments: usize,
    ) -> Result<Var> {
        self.apply(
            Primitive::SegmentSoftmax {
                segments,
                num_segments,
            },
            &[x],
        )
    }

    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::RowMax, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[x])
    }

    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::ScalarMul, &[s, x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    /// Dropout with an explicit keep-mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>, rate: f64) -> Result<Var> {
        self.apply(Primitive::Dropout { mask, rate }, &[x])
    }

    /// Samples a Bernoulli(1 - rate) keep-mask and applies inverted dropout.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
            .collect();
        self.dropout_with_mask(x, mask, rate)
    }

    /// Re-evaluates every recorded primitive from the leaves and returns the
    /// recomputed values in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.origin {
                Origin::Constant | Origin::Param(_) => node.value.clone(),
                Origin::Op { prim, inputs } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| &values[v.0]).collect();
                    let (shape, data, _) = evaluate(prim, &ins)?;
                    Tensor::from_parts(shape, data, self.precision)
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Origin::Op { prim, inputs } = &node.origin {
                self.propagate(prim, inputs, node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes[..=root.0].iter().enumerate() {
            let Origin::Param(id) = node.origin else { continue };
            let value = &node.value;
            let data = match grads[idx].clone() {
                Some(mut g) => {
                    if self.negate_param_grads {
                        g.iter_mut().for_each(|x| *x = -*x);
                    }
                    g
                }
                None => vec![0.0; value.numel()],
            };
            params.insert(id, Tensor::from_parts(value.shape().to_vec(), data, Precision::F64));
        }
        Ok(Gradients {
            nodes: grads,
            shapes: self.nodes[..=root.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params,
        })
    }

    fn propagate(
        &self,
        prim: &Primitive,
        inputs: &[Var],
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        match prim {
            Primitive::Add | Primitive::Subtract => {
                let sign = if *prim == Primitive::Add { 1.0 } else { -1.0 };
                add_into(&mut grads[inputs[0].0], g.len(), |a| {
                    a.iter_mut().zip(g).for_each(|(a, &d)| *a += d)
                });
                add_into(&mut grads[inputs[1].0], g.len(), |b| {
                    b.iter_mut().zip(g).for_each(|(b, &d)| *b += sign * d)
                });
            }
            Primitive::Mul => {
                let (a, b) = (val(inputs[0]).data(), val(inputs[1]).data());
                add_into(&mut grads[inputs[0].0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * b[i];
                    }
                });
                add_into(&mut grads[inputs[1].0], g.len(), |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * a[i];
                    }
                });
            }
            Primitive::MatMul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                let (m, k) = a.dims2().expect("checked in forward");
                let n = b.shape()[1];
                let (ad, bd) = (a.data(), b.data());
                // dA = G B^T
                add_into(&mut grads[inputs[0].0], m * k, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T G
                add_into(&mut grads[inputs[1].0], k * n, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += aip * grow[j];
                            }
                        }
                    }
                });
            }
            Primitive::Concat { axis } => {
                let (rows, cols) = node.value.dims2().expect("matrix");
                if *axis == 0 {
                    let mut offset = 0;
                    for &inp in inputs {
                        let n = val(inp).numel();
                        let part = &g[offset..offset + n];
                        add_into(&mut grads[inp.0], n, |gi| {
                            gi.iter_mut().zip(part).for_each(|(a, &d)| *a += d)
                        });
                        offset += n;
                    }
                } else {
                    let mut col_off = 0;
                    for &inp in inputs {
                        let c = val(inp).shape()[1];
                        add_into(&mut grads[inp.0], rows * c, |gi| {
                            for r in 0..rows {
                                for j in 0..c {
                                    gi[r * c + j] += g[r * cols + col_off + j];
                                }
                            }
                        });
                        col_off += c;
                    }
                }
            }
            Primitive::GatherRows { index } => {
                let x = val(inputs[0]);
                let cols = x.shape()[1];
                add_into(&mut grads[inputs[0].0], x.numel(), |gx| {
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..cols {
                            gx[src * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Primitive::ScatterAddRows { index, .. } => {
                let x = val(inputs[0]);
                let cols = x.shape()[1];
                add_into(&mut grads[inputs[0].0], x.numel(), |gx| {
                    for (r, &dst) in index.iter().enumerate() {
                        for j in 0..cols {
                            gx[r * cols + j] += g[dst * cols + j];
                        }
                    }
                });
            }
            Primitive::SegmentSoftmax {
                segments,
                num_segments,
            } => {
                let mut dot = vec![0.0; *num_segments];
                for i in 0..y.len() {
                    dot[segments[i]] += y[i] * g[i];
                }
                add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                    for i in 0..y.len() {
                        gx[i] += y[i] * (g[i] - dot[segments[i]]);
                    }
                });
            }
            Primitive::RowMax => {
                let x = val(inputs[0]);
                let cols = x.shape()[1];
                add_into(&mut grads[inputs[0].0], x.numel(), |gx| {
                    for (r, &c) in node.aux.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                });
            }
            Primitive::Sum => {
                let n = val(inputs[0]).numel();
                add_into(&mut grads[inputs[0].0], n, |gx| {
                    gx.iter_mut().for_each(|a| *a += g[0])
                });
            }
            Primitive::Sigmoid => add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                for i in 0..y.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Primitive::Tanh => add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                for i in 0..y.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Primitive::Relu => {
                let x = val(inputs[0]).data();
                add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                    for i in 0..y.len() {
                        if x[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Primitive::Scale(c) => add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                gx.iter_mut().zip(g).for_each(|(a, &d)| *a += c * d)
            }),
            Primitive::AddScalar(_) | Primitive::Reshape { .. } => {
                add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d)
                })
            }
            Primitive::ScalarMul => {
                let s = val(inputs[0]).data()[0];
                let t = val(inputs[1]).data();
                let mut ds = 0.0;
                for i in 0..t.len() {
                    ds += g[i] * t[i];
                }
                add_into(&mut grads[inputs[0].0], 1, |gs| gs[0] += ds);
                add_into(&mut grads[inputs[1].0], t.len(), |gt| {
                    for i in 0..t.len() {
                        gt[i] += g[i] * s;
                    }
                });
            }
            Primitive::Dropout { mask, rate } => {
                let keep = 1.0 / (1.0 - rate);
                add_into(&mut grads[inputs[0].0], y.len(), |gx| {
                    for i in 0..y.len() {
                        gx[i] += g[i] * mask[i] * keep;
                    }
                })
            }
            Primitive::Transpose => {
                let (rows, cols) = val(inputs[0]).dims2().expect("matrix");
                add_into(&mut grads[inputs[0].0], rows * cols, |gx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                })
            }
        }
        Ok(())
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded value (zeros if unreached).
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes.get(v.0).cloned().unwrap_or_default();
        match self.nodes.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone(), Precision::F64),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Parameters that appeared on the tape, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&id, t)| (id, t))
    }

    /// One gradient per stored parameter; parameters absent from the tape get zeros.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, p)| {
                self.params
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
            })
            .collect()
    }
}
