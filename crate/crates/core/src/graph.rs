//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution order, so the
//! tape is topologically sorted by construction. [`Graph::backward`] walks it once in
//! reverse, visiting each node at most once.
//!
//! ```
//! use espt::graph::Graph;
//! use espt::tensor::Tensor;
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = (x * x).sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::tensor::{kernels, Tensor};

const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    StopGrad,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    ScaleBy { x: usize, s: usize },
    AddRowBroadcast { x: usize, b: usize },
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    RowNorms(usize),
    Reshape(usize),
    Gather { x: usize, index: Rc<[usize]> },
    Concat(Vec<usize>),
    LogSoftmaxRows(usize),
    LeakyRelu { x: usize, slope: f64 },
    Conv2d { x: usize, w: usize },
    BatchNorm { x: usize, inv_std: Vec<f64> },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    SolveSpd { a: usize, b: usize, chol: Cholesky },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The operation tape. Confined to one thread; build one per training step or task.
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
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a variable; `None` when no gradient reached it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
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

    /// Hash of every piecewise choice recorded so far: the side of zero each leaky-rectifier
    /// input fell on and the element each max-pool window selected. Evaluations with equal
    /// patterns lie on the same smooth piece of the function.
    pub fn activation_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            match &node.op {
                Op::LeakyRelu { x, .. } => nodes[*x].value.data().iter().for_each(|&v| eat((v > 0.0) as u64)),
                Op::MaxPool2 { argmax, .. } => argmax.iter().for_each(|&i| eat(i as u64)),
                _ => {}
            }
        }
        h
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Concatenate along the leading axis.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            assert_eq!(&v.shape()[1..], &first[1..], "concat trailing shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first.clone();
        shape[0] = rows;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        self.push(Tensor::from_parts(shape, data), Op::Concat(ids), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |pid: usize, contrib: Tensor| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |pid: usize| -> &Tensor { &nodes[pid].value };
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                    let gb: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                        .collect();
                    acc(*b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
                Op::Neg(a) => acc(*a, g.scale(-1.0)),
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::ScaleBy { x, s } => {
                    let sv = val(*s).item();
                    let gs: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![gs]));
                    acc(*x, g.scale(sv));
                }
                Op::AddRowBroadcast { x, b } => {
                    let m = val(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(*b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                    acc(*x, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm_nt(g.data(), bv.data(), &mut ga, m, nn, k);
                        acc(*a, Tensor::from_parts(vec![m, k], ga));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * nn];
                        kernels::gemm_tn(av.data(), g.data(), &mut gb, k, m, nn);
                        acc(*b, Tensor::from_parts(vec![k, nn], gb));
                    }
                }
                Op::Transpose(a) => acc(*a, g.t()),
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::SumRows(a) => {
                    let av = val(*a);
                    let cols = av.shape()[1];
                    let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, cols)).collect();
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), data));
                }
                Op::RowNorms(a) => {
                    let av = val(*a);
                    let cols = av.shape()[1];
                    let norms = node.value.data();
                    let mut data = vec![0.0; av.len()];
                    for (r, (row, out)) in av.data().chunks_exact(cols).zip(data.chunks_exact_mut(cols)).enumerate() {
                        if norms[r] > 0.0 {
                            let f = g.data()[r] / norms[r];
                            row.iter().zip(out).for_each(|(x, o)| *o = f * x);
                        }
                    }
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), data));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, Tensor::from_parts(shape, g.into_data()));
                }
                Op::Gather { x, index } => {
                    let xv = val(*x);
                    let mut data = vec![0.0; xv.len()];
                    for (&src, &gi) in index.iter().zip(g.data()) {
                        data[src] += gi;
                    }
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let len = pv.len();
                        if nodes[p].requires_grad {
                            let data = g.data()[offset..offset + len].to_vec();
                            acc(p, Tensor::from_parts(pv.shape().to_vec(), data));
                        }
                        offset += len;
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.shape()[1];
                    let mut data = vec![0.0; y.len()];
                    for ((yr, gr), out) in y
                        .data()
                        .chunks_exact(cols)
                        .zip(g.data().chunks_exact(cols))
                        .zip(data.chunks_exact_mut(cols))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o = gi - yi.exp() * gsum;
                        }
                    }
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), data));
                }
                Op::LeakyRelu { x, slope } => {
                    acc(*x, g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { slope * gi }));
                }
                Op::Conv2d { x, w } => {
                    let (gx, gw) = conv2d_backward(val(*x), val(*w), &g, nodes[*x].requires_grad);
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                }
                Op::BatchNorm { x, inv_std } => {
                    acc(*x, batch_norm_backward(&node.value, inv_std, &g));
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let (gx, gs, gb) = channel_affine_backward(val(*x), val(*scale), &g);
                    acc(*scale, gs);
                    acc(*shift, gb);
                    acc(*x, gx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = val(*x);
                    let mut data = vec![0.0; xv.len()];
                    for (&src, &gi) in argmax.iter().zip(g.data()) {
                        data[src] += gi;
                    }
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                Op::SolveSpd { a, b, chol } => {
                    let xv = &node.value;
                    let (n, m) = (xv.shape()[0], xv.shape()[1]);
                    // adjoint solve: A G_B = G_X, reusing the forward factorization
                    let gb = chol.solve(g.data(), m);
                    if nodes[*a].requires_grad {
                        // G_A = -sym(G_B Xᵀ)
                        let mut outer = vec![0.0; n * n];
                        kernels::gemm_nt(&gb, xv.data(), &mut outer, n, m, n);
                        let mut ga = vec![0.0; n * n];
                        for i in 0..n {
                            for j in 0..n {
                                ga[i * n + j] = -0.5 * (outer[i * n + j] + outer[j * n + i]);
                            }
                        }
                        acc(*a, Tensor::from_parts(vec![n, n], ga));
                    }
                    acc(*b, Tensor::from_parts(vec![n, m], gb));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    /// Borrow the value without bumping the refcount. Do not hold across op calls.
    pub fn value_ref(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &*n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    /// Identity forward; blocks all gradient flow to `self`.
    pub fn stop_grad(self) -> Var<'g> {
        let v = self.graph.nodes.borrow()[self.id].value.clone();
        let mut nodes = self.graph.nodes.borrow_mut();
        nodes.push(Node { value: v, op: Op::StopGrad, requires_grad: false });
        Var { graph: self.graph, id: nodes.len() - 1 }
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let v = self.value_ref().zip_map(&other.value_ref(), |a, b| a / b);
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value_ref().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Multiply every element by the one-element tensor `s`.
    pub fn scale_by(self, s: Var<'g>) -> Var<'g> {
        let sv = s.item();
        let v = self.value_ref().scale(sv);
        self.binary(s, v, Op::ScaleBy { x: self.id, s: s.id })
    }

    /// `self` (N×M) plus the length-M vector `b` on every row.
    pub fn add_row(self, b: Var<'g>) -> Var<'g> {
        let v = {
            let (x, bv) = (self.value_ref(), b.value_ref());
            assert_eq!(x.rank(), 2);
            assert_eq!(x.shape()[1], bv.len(), "add_row width mismatch");
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(bv.len()) {
                row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
            }
            out
        };
        self.binary(b, v, Op::AddRowBroadcast { x: self.id, b: b.id })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let v = self.value_ref().matmul(&other.value_ref());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'g> {
        let v = self.value_ref().t();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value_ref().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value_ref().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums of a matrix, giving a vector.
    pub fn sum_rows(self) -> Var<'g> {
        let v = {
            let x = self.value_ref();
            assert_eq!(x.rank(), 2, "sum_rows needs a matrix");
            let cols = x.shape()[1];
            let data: Vec<f64> = x.data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
            Tensor::from_parts(vec![x.shape()[0]], data)
        };
        self.unary(v, Op::SumRows(self.id))
    }

    pub fn mean_rows(self) -> Var<'g> {
        let cols = self.shape()[1] as f64;
        self.sum_rows().scale(1.0 / cols)
    }

    /// Euclidean norm of every row. The gradient at a zero row is taken as zero.
    pub fn row_norms(self) -> Var<'g> {
        let v = {
            let x = self.value_ref();
            assert_eq!(x.rank(), 2, "row_norms needs a matrix");
            let cols = x.shape()[1];
            let data = x
                .data()
                .chunks_exact(cols)
                .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
                .collect();
            Tensor::from_parts(vec![x.shape()[0]], data)
        };
        self.unary(v, Op::RowNorms(self.id))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let shape = self.shape();
        self + self.graph.constant(Tensor::full(&shape, c))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = {
            let x = self.value_ref();
            assert_eq!(shape.iter().product::<usize>(), x.len(), "reshape size mismatch");
            Tensor::from_parts(shape.to_vec(), x.data().to_vec())
        };
        self.unary(v, Op::Reshape(self.id))
    }

    /// `out.flat[i] = self.flat[index[i]]`, giving a tensor of `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Var<'g> {
        let v = {
            let x = self.value_ref();
            assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape mismatch");
            let data = index.iter().map(|&i| x.data()[i]).collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        self.unary(v, Op::Gather { x: self.id, index })
    }

    /// Select rows of a matrix.
    pub fn select_rows(self, rows: &[usize]) -> Var<'g> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "select_rows needs a matrix");
        let cols = shape[1];
        let index: Vec<usize> = rows.iter().flat_map(|&r| r * cols..(r + 1) * cols).collect();
        self.gather(index.into(), &[rows.len(), cols])
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(self) -> Var<'g> {
        let v = {
            let x = self.value_ref();
            assert_eq!(x.rank(), 2, "log_softmax_rows needs a matrix");
            let cols = x.shape()[1];
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        self.unary(v, Op::LogSoftmaxRows(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let v = self.value_ref().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu { x: self.id, slope })
    }

    /// Same-padded stride-1 convolution. `self`: N×C×H×W, `w`: O×C×k×k with odd k.
    pub fn conv2d(self, w: Var<'g>) -> Var<'g> {
        let v = conv2d_forward(&self.value_ref(), &w.value_ref());
        self.binary(w, v, Op::Conv2d { x: self.id, w: w.id })
    }

    /// Per-channel normalization of N×C×H×W using statistics of this batch.
    pub fn batch_norm(self) -> Var<'g> {
        let (v, inv_std) = batch_norm_forward(&self.value_ref());
        self.unary(v, Op::BatchNorm { x: self.id, inv_std })
    }

    /// `x * scale[c] + shift[c]` over N×C×H×W.
    pub fn channel_affine(self, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
        let v = {
            let x = self.value_ref();
            let (s, b) = (scale.value_ref(), shift.value_ref());
            let c = x.shape()[1];
            assert!(s.len() == c && b.len() == c, "channel_affine size mismatch");
            let plane = x.shape()[2] * x.shape()[3];
            let mut out = x.clone();
            for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
                let ch = i % c;
                let (sv, bv) = (s.data()[ch], b.data()[ch]);
                chunk.iter_mut().for_each(|x| *x = *x * sv + bv);
            }
            out
        };
        let rg = self.graph.needs(&[self.id, scale.id, shift.id]);
        self.graph.push(v, Op::ChannelAffine { x: self.id, scale: scale.id, shift: shift.id }, rg)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(self) -> Var<'g> {
        let (v, argmax) = max_pool2_forward(&self.value_ref());
        self.unary(v, Op::MaxPool2 { x: self.id, argmax })
    }

    /// Solve `A X = rhs` for symmetric positive-definite `A` (`self`).
    ///
    /// `A` is symmetrized as `(A + Aᵀ)/2` before factoring; the gradient with respect to
    /// `A` is the matching symmetric adjoint `-sym(A⁻¹ Ḡ Xᵀ)`.
    pub fn solve_spd(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (x, chol) = {
            let (a, b) = (self.value_ref(), rhs.value_ref());
            if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
                return Err(Error::Solver(format!("solve_spd needs a square matrix, got {:?}", a.shape())));
            }
            let n = a.shape()[0];
            if b.rank() != 2 || b.shape()[0] != n {
                return Err(Error::Solver(format!(
                    "right-hand side {:?} does not match system dimension {n}",
                    b.shape()
                )));
            }
            let sym: Vec<f64> = (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    0.5 * (a.data()[i * n + j] + a.data()[j * n + i])
                })
                .collect();
            let chol = Cholesky::factor(&sym, n)?;
            let m = b.shape()[1];
            (Tensor::from_parts(vec![n, m], chol.solve(b.data(), m)), chol)
        };
        Ok(self.binary(rhs, x, Op::SolveSpd { a: self.id, b: rhs.id, chol }))
    }
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        let v = self.value_ref().zip_map(&rhs.value_ref(), |a, b| a + b);
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        let v = self.value_ref().zip_map(&rhs.value_ref(), |a, b| a - b);
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        let v = self.value_ref().zip_map(&rhs.value_ref(), |a, b| a * b);
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        let v = self.value_ref().scale(-1.0);
        self.unary(v, Op::Neg(self.id))
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected an N×C×H×W tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Unfold one C×H×W image into a (C·k·k)×(H·W) column matrix with zero padding k/2.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (o, c2, k, k2) = dims4(w);
    assert_eq!(c, c2, "conv2d channel mismatch: input {c}, kernel {c2}");
    assert!(k == k2 && k % 2 == 1, "conv2d needs square odd kernels");
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![0.0; n * o * hw];
    let mut col = vec![0.0; ckk * hw];
    for i in 0..n {
        let img = &x.data()[i * c * hw..(i + 1) * c * hw];
        let dst = &mut out[i * o * hw..(i + 1) * o * hw];
        if k == 1 {
            kernels::gemm_nn(w.data(), img, dst, o, c, hw);
        } else {
            im2col(img, c, h, wd, k, &mut col);
            kernels::gemm_nn(w.data(), &col, dst, o, ckk, hw);
        }
    }
    Tensor::from_parts(vec![n, o, h, wd], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, need_x: bool) -> (Option<Tensor>, Tensor) {
    let (n, c, h, wd) = dims4(x);
    let (o, _, k, _) = dims4(w);
    let hw = h * wd;
    let ckk = c * k * k;
    let mut gw = vec![0.0; o * ckk];
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut col = vec![0.0; ckk * hw];
    let mut gcol = vec![0.0; ckk * hw];
    for i in 0..n {
        let img = &x.data()[i * c * hw..(i + 1) * c * hw];
        let go = &g.data()[i * o * hw..(i + 1) * o * hw];
        if k == 1 {
            kernels::gemm_nt(go, img, &mut gw, o, hw, c);
            if need_x {
                kernels::gemm_tn(w.data(), go, &mut gx[i * c * hw..(i + 1) * c * hw], c, o, hw);
            }
        } else {
            im2col(img, c, h, wd, k, &mut col);
            kernels::gemm_nt(go, &col, &mut gw, o, hw, ckk);
            if need_x {
                gcol.fill(0.0);
                kernels::gemm_tn(w.data(), go, &mut gcol, ckk, o, hw);
                col2im(&gcol, c, h, wd, k, &mut gx[i * c * hw..(i + 1) * c * hw]);
            }
        }
    }
    let gx = need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx));
    (gx, Tensor::from_parts(w.shape().to_vec(), gw))
}

fn batch_norm_forward(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, c, h, w) = dims4(x);
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut out = x.clone();
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..n).map(|i| (i * c + ch) * hw);
        let mean = planes.clone().map(|o| x.data()[o..o + hw].iter().sum::<f64>()).sum::<f64>() / count;
        let var = planes
            .clone()
            .map(|o| x.data()[o..o + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / count;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = inv;
        for o in planes {
            out.data_mut()[o..o + hw].iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
    (out, inv_std)
}

fn batch_norm_backward(xhat: &Tensor, inv_std: &[f64], g: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(xhat);
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut gx = vec![0.0; xhat.len()];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..n {
            let o = (i * c + ch) * hw;
            for j in o..o + hw {
                sum_g += g.data()[j];
                sum_gx += g.data()[j] * xhat.data()[j];
            }
        }
        let inv = inv_std[ch];
        for i in 0..n {
            let o = (i * c + ch) * hw;
            for j in o..o + hw {
                gx[j] = inv / count * (count * g.data()[j] - sum_g - xhat.data()[j] * sum_gx);
            }
        }
    }
    Tensor::from_parts(xhat.shape().to_vec(), gx)
}

fn channel_affine_backward(x: &Tensor, scale: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (_, c, h, w) = dims4(x);
    let plane = h * w;
    let mut gx = g.clone();
    let mut gs = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (i, (gchunk, xchunk)) in gx
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(x.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = i % c;
        let s = scale.data()[ch];
        for (gv, xv) in gchunk.iter_mut().zip(xchunk) {
            gs[ch] += *gv * xv;
            gb[ch] += *gv;
            *gv *= s;
        }
    }
    (gx, Tensor::from_parts(vec![c], gs), Tensor::from_parts(vec![c], gb))
}

fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    assert!(oh > 0 && ow > 0, "max_pool2 on a {h}x{w} map");
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::from_parts(vec![n, c, oh, ow], out), argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let grads = g.backward((x * x).sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -2.0]));
        let s = x.stop_grad();
        assert_eq!(s.value().data(), x.value().data());
        let grads = g.backward((s * s).sum()).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x).data(), &[0.0, 0.0]);

        // d/dx [x * sg(x)] = sg(x), not 2x
        let grads = g.backward((x * x.stop_grad()).sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x * x), Err(Error::Contract(_))));
    }

    #[test]
    fn solve_spd_small_systems() {
        let g = Graph::new();
        let a = g.constant(Tensor::eye(3));
        let b = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(a.solve_spd(b).unwrap().value().data(), b.value().data());

        let a = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[2.0, 8.0]));
        let x = a.solve_spd(b).unwrap().value();
        assert!((x.data()[0] - 1.0).abs() < 1e-15 && (x.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_errors() {
        let g = Graph::new();
        let rect = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(rect.solve_spd(b), Err(Error::Solver(_))));
        let a = g.constant(Tensor::eye(3));
        assert!(a.solve_spd(b).unwrap_err().to_string().contains("dimension 3"));
        let indefinite = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, -1.0]));
        assert!(indefinite.solve_spd(b).unwrap_err().to_string().contains("pivot 1"));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let y = x.max_pool2();
        assert_eq!(y.value().data(), &[5.0]);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        let w = g.param(k);
        assert_eq!(x.conv2d(w).value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
