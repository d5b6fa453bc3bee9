//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its value and the operands it was built from, so node ids are already a
//! topological order. [`Graph::grad`] walks the tape backwards and expresses
//! each backward rule with the same recorded operations, which makes the
//! returned gradients ordinary graph values: they can be fed into further
//! computation and differentiated again.
//!
//! Broadcasting is restricted to the leading (batch) dimension: a binary
//! operation accepts equal shapes, or one operand whose shape equals the
//! other's with the first dimension removed.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index sentinel for [`Var::gather`]: the output element is zero.
pub const ZERO_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs shape equals lhs shape without its leading dimension
    Rhs,
    /// lhs shape equals rhs shape without its leading dimension
    Lhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    LeakyRelu(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    /// scalar broadcast to the node's shape
    Fill(usize),
    SumBatch(usize),
    Expand(usize),
    Reshape(usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _) | AddScalar(a) | Square(a) | Sqrt(a) | Abs(a) | LeakyRelu(a, _)
            | Transpose(a) | Sum(a) | Fill(a) | SumBatch(a) | Expand(a) | Reshape(a)
            | Gather(a, _) | Scatter(a, _) => [Some(a), None],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Square(..) => "square",
            Sqrt(..) => "sqrt",
            Abs(..) => "abs",
            LeakyRelu(..) => "leaky_relu",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Sum(..) => "sum",
            Fill(..) => "fill",
            SumBatch(..) => "sum_batch",
            Expand(..) => "expand",
            Reshape(..) => "reshape",
            Gather(..) => "gather",
            Scatter(..) => "scatter",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Append-only computation tape. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves are the differentiable inputs of the graph.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Graph::leaf`]; the name documents intent at call sites.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `inputs`.
    ///
    /// The results are recorded on this graph, so they may appear in a
    /// further expression that is itself differentiated. An input that
    /// `output` does not depend on gets a zero gradient.
    pub fn grad<'g>(&'g self, output: Var<'g>, inputs: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let out_value = output.value();
        if out_value.numel() != 1 {
            return Err(Error::contract(format!(
                "grad needs a scalar output, got shape {:?}",
                out_value.shape()
            )));
        }
        let out = output.id;
        let mut relevant = vec![false; out + 1];
        for v in inputs {
            if v.id <= out {
                relevant[v.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..=out {
                if !relevant[id] {
                    relevant[id] = nodes[id].op.parents().iter().flatten().any(|&p| relevant[p]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; out + 1];
        if relevant[out] {
            grads[out] = Some(self.constant(Tensor::ones(out_value.shape().to_vec())));
        }
        for id in (0..=out).rev() {
            let Some(g) = grads[id] else { continue };
            if !relevant[id] {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            for (parent, contribution) in self.backward_rule(id, &op, g, &relevant)? {
                if !relevant[parent] {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc.add(contribution)?,
                    None => contribution,
                });
            }
        }

        Ok(inputs
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(v.shape())),
            })
            .collect())
    }

    fn backward_rule<'g>(
        &'g self,
        id: usize,
        op: &Op,
        g: Var<'g>,
        need: &[bool],
    ) -> Result<Vec<(usize, Var<'g>)>> {
        let v = |i| self.var(i);
        let reduce = |operand: usize, grad: Var<'g>| -> Result<Var<'g>> {
            if v(operand).shape() == grad.shape() {
                Ok(grad)
            } else {
                grad.sum_batch()
            }
        };
        // binary rules only build the contributions that lead to a requested input
        let pair = |a: usize,
                    b: usize,
                    da: &dyn Fn() -> Result<Var<'g>>,
                    db: &dyn Fn() -> Result<Var<'g>>|
         -> Result<Vec<(usize, Var<'g>)>> {
            let mut out = Vec::with_capacity(2);
            if need[a] {
                out.push((a, da()?));
            }
            if need[b] {
                out.push((b, db()?));
            }
            Ok(out)
        };
        Ok(match *op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => pair(a, b, &|| reduce(a, g), &|| reduce(b, g))?,
            Op::Sub(a, b) => pair(a, b, &|| reduce(a, g), &|| reduce(b, g.scale(-1.0)))?,
            Op::Mul(a, b) => pair(
                a,
                b,
                &|| reduce(a, g.mul(v(b))?),
                &|| reduce(b, g.mul(v(a))?),
            )?,
            Op::Div(a, b) => pair(
                a,
                b,
                &|| reduce(a, g.div(v(b))?),
                &|| reduce(b, g.mul(v(id))?.div(v(b))?.scale(-1.0)),
            )?,
            Op::MatMul(a, b) => pair(
                a,
                b,
                &|| g.matmul(v(b).transpose()?),
                &|| v(a).transpose()?.matmul(g),
            )?,
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Square(a) => vec![(a, g.mul(v(a).scale(2.0))?)],
            Op::Sqrt(a) => vec![(a, g.scale(0.5).div(v(id))?)],
            Op::Abs(a) => {
                let sign = v(a).value().map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                vec![(a, g.mul(self.constant(sign))?)]
            }
            Op::LeakyRelu(a, slope) => {
                let d = v(a).value().map(|x| if x >= 0.0 { 1.0 } else { slope });
                vec![(a, g.mul(self.constant(d))?)]
            }
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::Sum(a) => vec![(a, g.fill(v(a).shape()))],
            Op::Fill(a) => vec![(a, g.sum())],
            Op::SumBatch(a) => vec![(a, g.expand(v(a).shape()[0]))],
            Op::Expand(a) => vec![(a, g.sum_batch()?)],
            Op::Reshape(a) => vec![(a, g.reshape(v(a).shape())?)],
            Op::Gather(a, ref idx) => vec![(a, g.scatter_rc(Rc::clone(idx), v(a).shape())?)],
            Op::Scatter(a, ref idx) => vec![(a, g.gather_rc(Rc::clone(idx), v(a).shape())?)],
        })
    }

    /// DOT rendering of the tape, for debugging.
    pub fn to_dot(&self) -> String {
        let nodes = self.nodes.borrow();
        let mut s = String::from("digraph tape {\n");
        for (id, node) in nodes.iter().enumerate() {
            let _ = writeln!(s, "  n{id} [label=\"{id}: {} {:?}\"];", node.op.name(), node.value.shape());
            for p in node.op.parents().iter().flatten() {
                let _ = writeln!(s, "  n{p} -> n{id};");
            }
        }
        s.push_str("}\n");
        s
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if !a.is_empty() && b == &a[1..] {
        Ok(Bcast::Rhs)
    } else if !b.is_empty() && a == &b[1..] {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    match kind {
        Bcast::Same => Tensor::from_parts(
            a.shape().to_vec(),
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::Rhs => {
            let w = bd.len().max(1);
            let data = ad.chunks(w).flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect::<Vec<_>>();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Bcast::Lhs => {
            let w = ad.len().max(1);
            let data = bd.chunks(w).flat_map(|row| ad.iter().zip(row).map(|(&x, &y)| f(x, y))).collect::<Vec<_>>();
            Tensor::from_parts(b.shape().to_vec(), data)
        }
    }
}

/// Row-major `out = a · b` with `a: [m, k]`, `b: [k, n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different graphs"))
        }
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize) -> Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let kind = broadcast_kind(name, a.shape(), b.shape())?;
        let out = zip_broadcast(&a, &b, kind, f);
        Ok(self.graph.push(out, make(self.id, other.id)))
    }

    fn unary(self, out: Tensor, op: Op) -> Var<'g> {
        self.graph.push(out, op)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let out = self.value().map(|x| x * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let out = self.value().map(|x| x + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let out = self.value().map(|x| x * x);
        self.unary(out, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = self.value().map(f64::sqrt);
        self.unary(out, Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Var<'g> {
        let out = self.value().map(f64::abs);
        self.unary(out, Op::Abs(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let out = self.value().map(|x| if x >= 0.0 { x } else { slope * x });
        self.unary(out, Op::LeakyRelu(self.id, slope))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean of all elements, shape `[]`.
    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean norm of all elements, shape `[]`.
    pub fn l2_norm(self) -> Var<'g> {
        self.square().sum().sqrt()
    }

    /// One-element var broadcast to `shape`.
    pub fn fill(self, shape: Vec<usize>) -> Var<'g> {
        let x = self.value().item();
        self.unary(Tensor::full(shape, x), Op::Fill(self.id))
    }

    /// Sum over the leading dimension: `[b, ...] -> [...]`.
    pub fn sum_batch(self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::Shape {
                op: "sum_batch",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let rest = shape[1..].to_vec();
        let w: usize = rest.iter().product();
        let mut out = vec![0.0; w];
        for row in x.data().chunks(w.max(1)) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        Ok(self.unary(Tensor::from_parts(rest, out), Op::SumBatch(self.id)))
    }

    /// Mean over the leading dimension.
    pub fn mean_batch(self) -> Result<Var<'g>> {
        let b = self.shape().first().copied().unwrap_or(1).max(1);
        Ok(self.sum_batch()?.scale(1.0 / b as f64))
    }

    /// Repeats the value `batch` times along a new leading dimension.
    pub fn expand(self, batch: usize) -> Var<'g> {
        let x = self.value();
        let mut shape = vec![batch];
        shape.extend_from_slice(x.shape());
        let data = x.data().repeat(batch);
        self.unary(Tensor::from_parts(shape, data), Op::Expand(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let x = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(x, Op::Reshape(self.id)))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.unary(Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = x.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.unary(Tensor::from_parts(vec![c, r], out), Op::Transpose(self.id)))
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    pub fn gather(self, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        self.gather_rc(index.into(), shape)
    }

    fn gather_rc(self, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let shape = shape.into();
        let x = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let d = x.data();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == ZERO_INDEX {
                out.push(0.0);
            } else if i < d.len() {
                out.push(d[i]);
            } else {
                return Err(Error::contract(format!("gather index {i} out of range {}", d.len())));
            }
        }
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Gather(self.id, index)))
    }

    /// Adjoint of [`Var::gather`]: `out[index[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter(self, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        self.scatter_rc(index.into(), shape)
    }

    fn scatter_rc(self, index: Rc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let shape = shape.into();
        let x = self.value();
        if x.numel() != index.len() {
            return Err(Error::Shape {
                op: "scatter",
                lhs: x.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(x.data()) {
            if i == ZERO_INDEX {
                continue;
            }
            if i >= n {
                return Err(Error::contract(format!("scatter index {i} out of range {n}")));
            }
            out[i] += v;
        }
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Scatter(self.id, index)))
    }

    /// Column slice `[.., start..end]` of a 2-D var.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, end],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let w = end - start;
        let index = (0..rows)
            .flat_map(|r| (start..end).map(move |c| r * cols + c))
            .collect();
        self.gather(index, vec![rows, w])
    }

    /// Concatenation of two 2-D vars along columns.
    pub fn concat_cols(self, other: Var<'g>) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let w = ca + cb;
        let ia = (0..rows).flat_map(|r| (0..ca).map(move |c| r * w + c)).collect();
        let ib = (0..rows).flat_map(|r| (0..cb).map(move |c| r * w + ca + c)).collect();
        self.scatter(ia, vec![rows, w])?
            .add(other.scatter(ib, vec![rows, w])?)
    }

    /// Row sums of a 2-D var, shape `[rows, 1]`.
    pub fn sum_cols(self) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "sum_cols",
                lhs: s,
                rhs: vec![],
            });
        }
        let ones = self.graph.constant(Tensor::ones(vec![s[1], 1]));
        self.matmul(ones)
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst checked coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink).
    pub excluded: Vec<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    /// One-sided slope disagreement, relative to `1 + |central|`, that marks a kink.
    pub kink_tol: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-3,
            kink_tol: 1e-3,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Checks the gradients of the scalar built by `f` at `point` against
/// central finite differences.
pub fn gradcheck<F>(f: F, point: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = pt.iter().map(|t| g.leaf(t.clone())).collect();
        let v = f(&g, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric("non-finite value in gradcheck evaluation"))
        }
    };

    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<_> = point.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        g.grad(out, &vars)?
            .into_iter()
            .map(|v| (*v.value()).clone())
            .collect()
    };
    for a in &analytic {
        if !a.is_finite() {
            return Err(Error::numeric("non-finite analytic gradient"));
        }
    }

    let f0 = eval(point)?;
    let h = opts.step;
    let mut pt: Vec<Tensor> = point.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tol: opts.tol,
        passed: true,
    };
    for t in 0..point.len() {
        for e in 0..point[t].numel() {
            let x = point[t].data()[e];
            pt[t].data_mut()[e] = x + h;
            let fp = eval(&pt)?;
            pt[t].data_mut()[e] = x - h;
            let fm = eval(&pt)?;
            pt[t].data_mut()[e] = x;

            let central = (fp - fm) / (2.0 * h);
            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            if (forward - backward).abs() > opts.kink_tol * (1.0 + central.abs()) {
                report.excluded.push((t, e));
                continue;
            }
            let a = analytic[t].data()[e];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((t, e));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
