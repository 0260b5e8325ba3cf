//! Reverse-mode differentiation by operation recording.
//!
//! A [`Graph`] is a Wengert list: each op evaluates eagerly, appends a node
//! holding its value and its inputs, and returns a [`Var`] handle. Nodes are
//! only ever appended, so the list is already in topological order and
//! [`Graph::backward`] walks it once in reverse.
//!
//! The graph also counts multiply-accumulates performed by the dense
//! kernels, bucketed by a caller-selected [`FlopCategory`]. This is the
//! instrumented counter the FLOPs report is checked against.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::tensor::{permute_index, slice_last_index};
use crate::numerics::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bucket that multiply-accumulates are charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlopCategory {
    PatchEmbed,
    Conditioning,
    Modulation,
    Projection,
    AttentionPair,
    BridgeDepthwise,
    BridgePointwise,
    Mlp,
    FinalLayer,
    Other,
}

impl FlopCategory {
    pub const ALL: [FlopCategory; 10] = [
        FlopCategory::PatchEmbed,
        FlopCategory::Conditioning,
        FlopCategory::Modulation,
        FlopCategory::Projection,
        FlopCategory::AttentionPair,
        FlopCategory::BridgeDepthwise,
        FlopCategory::BridgePointwise,
        FlopCategory::Mlp,
        FlopCategory::FinalLayer,
        FlopCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopCategory::PatchEmbed => "patch_embed",
            FlopCategory::Conditioning => "conditioning",
            FlopCategory::Modulation => "modulation",
            FlopCategory::Projection => "projection",
            FlopCategory::AttentionPair => "attention_pair",
            FlopCategory::BridgeDepthwise => "bridge_depthwise",
            FlopCategory::BridgePointwise => "bridge_pointwise",
            FlopCategory::Mlp => "mlp",
            FlopCategory::FinalLayer => "final_layer",
            FlopCategory::Other => "other",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` is repeated over the leading axes of `a`.
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gather {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    Concat(Var, Var),
    Softmax(Var),
    Normalize {
        x: Var,
        rstds: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    DepthwiseConv(Var, Var),
    PointwiseConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Accumulated gradients from one [`Graph::backward`] pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` did not
    /// participate in the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    category: Option<FlopCategory>,
    macs: BTreeMap<FlopCategory, u64>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Charges subsequent kernel MACs to `category`.
    pub fn set_category(&mut self, category: FlopCategory) {
        self.category = Some(category);
    }

    pub fn macs(&self) -> &BTreeMap<FlopCategory, u64> {
        &self.macs
    }

    fn charge(&mut self, macs: usize) {
        let cat = self.category.unwrap_or(FlopCategory::Other);
        *self.macs.entry(cat).or_insert(0) += macs as u64;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf (parameter or input under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k, n) = ops::matmul_dims(self.value(a), self.value(b))?;
        self.charge(m * k * n);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `[G×m×k]·[G×k×n]`, or against `b` transposed when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b), transpose_b)?;
        let (g, m, k, n) = ops::bmm_dims(self.value(a), self.value(b), transpose_b)?;
        self.charge(g * m * k * n);
        Ok(self.push(out, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn trailing(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(self.value(b).len())
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`; the shape of
    /// `b` must equal the trailing axes of `a` (bias add).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.trailing("add_trailing", a, b)?;
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let out = Tensor::from_op(self.shape(a).to_vec(), data);
        Ok(self.push(out, Op::AddTrailing(a, b), &[a, b]))
    }

    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.trailing("mul_trailing", a, b)?;
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bd[i % n])
            .collect();
        let out = Tensor::from_op(self.shape(a).to_vec(), data);
        Ok(self.push(out, Op::MulTrailing(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `out[i] = src[index[i]]`. Backward scatter-adds, so repeated indices
    /// (broadcasts) are handled.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if let Some(&bad) = index.iter().find(|&&i| i >= self.value(src).len()) {
            return Err(Error::Domain(format!(
                "gather index {bad} out of range for {:?}",
                self.shape(src)
            )));
        }
        let out = self.value(src).gather(&index, shape)?;
        Ok(self.push(out, Op::Gather { src, index }, &[src]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        self.gather(a, Arc::new((0..n).collect()), shape)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (index, shape) = permute_index(self.shape(a), axes)?;
        self.gather(a, Arc::new(index), &shape)
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (index, shape) = slice_last_index(self.shape(a), start, end)?;
        self.gather(a, Arc::new(index), &shape)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_last(self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Layer normalization without affine parameters.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let (out, rstds) = ops::normalize_rows(self.value(x), eps);
        self.push(out, Op::Normalize { x, rstds }, &[x])
    }

    /// Layer normalization with per-channel `gamma` and `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps);
        let scaled = self.mul_trailing(n, gamma)?;
        self.add_trailing(scaled, beta)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::silu);
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.value(kernels))?;
        let (b, c, h, w, k) = ops::depthwise_dims(self.value(x), self.value(kernels))?;
        // Every tap is charged, including those that land on zero padding.
        self.charge(b * c * h * w * k * k);
        Ok(self.push(out, Op::DepthwiseConv(x, kernels), &[x, kernels]))
    }

    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::pointwise_conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let (b, cin, cout, hw) = ops::pointwise_dims(self.value(x), self.value(w), None)?;
        self.charge(b * cin * cout * hw);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::PointwiseConv { x, w, bias }, &inputs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Bmm { a, b, transpose_b } => {
                let (da, db) = ops::bmm_backward(val(*a), val(*b), *transpose_b, g);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_with(val(*b), |x, y| x * y).unwrap());
                acc(*b, g.zip_with(val(*a), |x, y| x * y).unwrap());
            }
            Op::AddTrailing(a, b) => {
                acc(*a, g.clone());
                acc(*b, fold_trailing(g.data(), val(*b).shape(), |i| g.data()[i]));
            }
            Op::MulTrailing(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                let bd = bv.data();
                let da = g.data().iter().enumerate().map(|(i, &x)| x * bd[i % n]).collect();
                acc(*a, Tensor::from_op(av.shape().to_vec(), da));
                acc(*b, fold_trailing(g.data(), bv.shape(), |i| g.data()[i] * av.data()[i]));
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Gather { src, index } => {
                let mut d = vec![0.0; val(*src).len()];
                for (&i, &x) in index.iter().zip(g.data()) {
                    d[i] += x;
                }
                acc(*src, Tensor::from_op(val(*src).shape().to_vec(), d));
            }
            Op::Concat(a, b) => {
                let ca = val(*a).last_dim();
                let cb = val(*b).last_dim();
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::from_op(val(*a).shape().to_vec(), da));
                acc(*b, Tensor::from_op(val(*b).shape().to_vec(), db));
            }
            Op::Softmax(a) => acc(*a, ops::softmax_rows_backward(&node.value, g)),
            Op::Normalize { x, rstds } => acc(*x, ops::normalize_rows_backward(&node.value, rstds, g)),
            Op::Gelu(a) => {
                let d = val(*a).zip_with(g, |x, gv| ops::gelu_grad(x) * gv).unwrap();
                acc(*a, d);
            }
            Op::Silu(a) => {
                let d = val(*a).zip_with(g, |x, gv| ops::silu_grad(x) * gv).unwrap();
                acc(*a, d);
            }
            Op::DepthwiseConv(x, k) => {
                let (dx, dk) = ops::depthwise_conv2d_backward(val(*x), val(*k), g);
                acc(*x, dx);
                acc(*k, dk);
            }
            Op::PointwiseConv { x, w, bias } => {
                let (dx, dw, db) = ops::pointwise_conv2d_backward(val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
        }
    }
}

/// Sums `term(i)` over the leading axes into a tensor of `shape`.
fn fold_trailing(g: &[f64], shape: &[usize], term: impl Fn(usize) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for i in 0..g.len() {
        out[i % n] += term(i);
    }
    Tensor::from_op(shape.to_vec(), out)
}
