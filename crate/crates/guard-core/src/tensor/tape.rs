//! Recorded computations and reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only record of primitive operations evaluated
//! eagerly. [`grad`] walks the record backwards and builds the adjoints
//! *as new recorded operations*, so a gradient taken on a depth-2 record
//! is itself a differentiable function of the record's inputs. That is
//! what lets a penalty containing input gradients be differentiated with
//! respect to parameters.
//!
//! Records are confined to one thread; parallelism happens across
//! independent records.

use std::cell::RefCell;
use std::rc::Rc;

use super::{kernels, Tensor, TensorError, TensorResult};

#[derive(Clone)]
enum Op {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    Exp,
    Ln,
    Sqrt,
    Recip,
    Tanh,
    Relu,
    Heaviside,
    Softplus { beta: f64 },
    Sigmoid { beta: f64 },
    Matmul,
    Transpose,
    Reshape,
    SumAll,
    BroadcastScalar,
    RowSum,
    RowBroadcast,
    GatherLabel(Rc<Vec<usize>>),
    ScatterLabel(Rc<Vec<usize>>),
    ChannelSum,
    ChannelBroadcast,
    Conv2d { stride: usize, pad: usize },
    Conv2dDx { stride: usize, pad: usize },
    Conv2dDw { stride: usize, pad: usize },
    MaxPool2d { k: usize, stride: usize, indices: Rc<Vec<usize>> },
    MaxUnpool2d { indices: Rc<Vec<usize>> },
    IndexGather { indices: Rc<Vec<usize>> },
    AvgPool2d { k: usize, stride: usize },
    AvgUnpool2d { k: usize, stride: usize },
    DiffRows,
    DiffRowsAdj,
    DiffCols,
    DiffColsAdj,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Heaviside => "heaviside",
            Op::Softplus { .. } => "softplus",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SumAll => "sum_all",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::RowSum => "row_sum",
            Op::RowBroadcast => "row_broadcast",
            Op::GatherLabel(_) => "gather_label",
            Op::ScatterLabel(_) => "scatter_label",
            Op::ChannelSum => "channel_sum",
            Op::ChannelBroadcast => "channel_broadcast",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dDx { .. } => "conv2d_dx",
            Op::Conv2dDw { .. } => "conv2d_dw",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::MaxUnpool2d { .. } => "max_unpool2d",
            Op::IndexGather { .. } => "index_gather",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::AvgUnpool2d { .. } => "avg_unpool2d",
            Op::DiffRows => "diff_rows",
            Op::DiffRowsAdj => "diff_rows_adj",
            Op::DiffCols => "diff_cols",
            Op::DiffColsAdj => "diff_cols_adj",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// requires_grad was suppressed because the node was produced by a
    /// final-level sweep; differentiating through it must error rather
    /// than silently yield zero.
    forced_detach: bool,
    /// 0 for user-recorded ops, k for ops created by the k-th nested
    /// differentiation sweep.
    gen: u8,
}

struct TapeInner {
    nodes: Vec<Node>,
    depth: u8,
    checked: bool,
    force_no_grad: bool,
    sweep_gen: u8,
}

/// An append-only record of primitive operations; see module docs.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one recorded value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op.name())
            .field("shape", &node.value.shape())
            .finish()
    }
}

impl Tape {
    /// A record supporting one differentiation pass.
    pub fn new() -> Self {
        Self::with_depth(1)
    }

    /// A record whose gradients are themselves differentiable
    /// (`depth` = 2). Depth 1 gradients are value-only.
    pub fn with_depth(depth: u8) -> Self {
        assert!(depth == 1 || depth == 2, "depth must be 1 or 2");
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                depth,
                checked: false,
                force_no_grad: false,
                sweep_gen: 0,
            })),
        }
    }

    /// Like [`Tape::with_depth`] but every op validates input finiteness.
    pub fn checked(depth: u8) -> Self {
        let t = Self::with_depth(depth);
        t.inner.borrow_mut().checked = true;
        t
    }

    pub fn depth(&self) -> u8 {
        self.inner.borrow().depth
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(Op::Input, vec![], value)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Const, vec![], value)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let natural = match op {
            Op::Input => true,
            Op::Const => false,
            _ => inputs
                .iter()
                .any(|&i| inner.nodes[i].requires_grad || inner.nodes[i].forced_detach),
        };
        let requires_grad = if inner.force_no_grad {
            false
        } else {
            match op {
                Op::Input => true,
                Op::Const => false,
                _ => inputs.iter().any(|&i| inner.nodes[i].requires_grad),
            }
        };
        let forced_detach = natural && !requires_grad;
        let gen = inner.sweep_gen;
        inner.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            forced_detach,
            gen,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    fn check_inputs(&self, op: &'static str, ids: &[usize]) -> TensorResult<()> {
        let inner = self.inner.borrow();
        if inner.checked {
            for &id in ids {
                if !inner.nodes[id].value.all_finite() {
                    return Err(TensorError::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf node from its recorded inputs and verifies
    /// bit-for-bit equality with the stored values.
    pub fn replay_check(&self) -> bool {
        let inner = self.inner.borrow();
        for node in inner.nodes.iter() {
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &inner.nodes[i].value).collect();
            if let Some(recomputed) = forward(&node.op, &vals) {
                if recomputed != node.value {
                    return false;
                }
            }
        }
        true
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Forward evaluation of an op from input values. Returns `None` for leaves.
fn forward(op: &Op, vals: &[&Tensor]) -> Option<Tensor> {
    let out = match op {
        Op::Input | Op::Const => return None,
        Op::Add => vals[0].zip(vals[1], "add", |a, b| a + b).unwrap(),
        Op::Sub => vals[0].zip(vals[1], "sub", |a, b| a - b).unwrap(),
        Op::Mul => vals[0].zip(vals[1], "mul", |a, b| a * b).unwrap(),
        Op::Neg => vals[0].map(|a| -a),
        Op::AddScalar(c) => vals[0].map(|a| a + c),
        Op::MulScalar(c) => vals[0].map(|a| a * c),
        Op::Exp => vals[0].map(f64::exp),
        Op::Ln => vals[0].map(f64::ln),
        Op::Sqrt => vals[0].map(f64::sqrt),
        Op::Recip => vals[0].map(|a| 1.0 / a),
        Op::Tanh => vals[0].map(f64::tanh),
        Op::Relu => vals[0].map(|a| if a > 0.0 { a } else { 0.0 }),
        Op::Heaviside => vals[0].map(|a| if a > 0.0 { 1.0 } else { 0.0 }),
        Op::Softplus { beta } => vals[0].map(|a| softplus_stable(a, *beta)),
        Op::Sigmoid { beta } => vals[0].map(|a| sigmoid_stable(a, *beta)),
        Op::Matmul => kernels::matmul(vals[0], vals[1]),
        Op::Transpose => kernels::transpose(vals[0]),
        Op::Reshape => return None, // shape captured in stored value
        Op::SumAll => Tensor::scalar(vals[0].sum()),
        Op::BroadcastScalar => return None,
        Op::RowSum => kernels::row_sum(vals[0]),
        Op::RowBroadcast => return None,
        Op::GatherLabel(y) => kernels::gather_label(vals[0], y),
        Op::ScatterLabel(_) => return None,
        Op::ChannelSum => kernels::channel_sum(vals[0]),
        Op::ChannelBroadcast => return None,
        Op::Conv2d { stride, pad } => kernels::conv2d(vals[0], vals[1], *stride, *pad),
        Op::Conv2dDx { .. } => return None,
        Op::Conv2dDw { .. } => return None,
        Op::MaxPool2d { k, stride, .. } => kernels::maxpool2d(vals[0], *k, *stride).0,
        Op::MaxUnpool2d { .. } => return None,
        Op::IndexGather { .. } => return None,
        Op::AvgPool2d { k, stride } => kernels::avgpool2d(vals[0], *k, *stride),
        Op::AvgUnpool2d { .. } => return None,
        Op::DiffRows => kernels::diff_rows(vals[0]),
        Op::DiffRowsAdj => return None,
        Op::DiffCols => kernels::diff_cols(vals[0]),
        Op::DiffColsAdj => return None,
    };
    Some(out)
}

fn softplus_stable(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 30.0 {
        x
    } else if z < -30.0 {
        (z.exp()) / beta
    } else {
        (1.0 + z.exp()).ln() / beta
    }
}

fn sigmoid_stable(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        Err(TensorError::ShapeMismatch { op: $op, detail: format!($($arg)*) })
    };
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var, op: &'static str) -> TensorResult<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return shape_err!(op, "operands recorded on different tapes");
        }
        Ok(())
    }

    fn binary_elementwise(
        &self,
        other: &Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Var> {
        let name = op.name();
        self.same_tape(other, name)?;
        self.tape.check_inputs(name, &[self.id, other.id])?;
        let value = self.value().zip(&other.value(), name, f)?;
        Ok(self.tape.push(op, vec![self.id, other.id], value))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> TensorResult<Var> {
        self.tape.check_inputs(op.name(), &[self.id])?;
        let value = self.value().map(f);
        Ok(self.tape.push(op, vec![self.id], value))
    }

    pub fn add(&self, other: &Var) -> TensorResult<Var> {
        self.binary_elementwise(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> TensorResult<Var> {
        self.binary_elementwise(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> TensorResult<Var> {
        self.binary_elementwise(other, Op::Mul, |a, b| a * b)
    }

    pub fn neg(&self) -> TensorResult<Var> {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn add_scalar(&self, c: f64) -> TensorResult<Var> {
        self.unary(Op::AddScalar(c), |a| a + c)
    }

    pub fn mul_scalar(&self, c: f64) -> TensorResult<Var> {
        self.unary(Op::MulScalar(c), |a| a * c)
    }

    pub fn exp(&self) -> TensorResult<Var> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> TensorResult<Var> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn sqrt(&self) -> TensorResult<Var> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn recip(&self) -> TensorResult<Var> {
        self.unary(Op::Recip, |a| 1.0 / a)
    }

    pub fn tanh(&self) -> TensorResult<Var> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> TensorResult<Var> {
        self.unary(Op::Relu, |a| if a > 0.0 { a } else { 0.0 })
    }

    /// Step gate; defined to have zero derivative everywhere, which encodes
    /// the convention that ReLU's second derivative is zero at the kink.
    pub fn heaviside(&self) -> TensorResult<Var> {
        self.unary(Op::Heaviside, |a| if a > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self, beta: f64) -> TensorResult<Var> {
        self.unary(Op::Softplus { beta }, |a| softplus_stable(a, beta))
    }

    pub fn sigmoid(&self, beta: f64) -> TensorResult<Var> {
        self.unary(Op::Sigmoid { beta }, |a| sigmoid_stable(a, beta))
    }

    pub fn matmul(&self, other: &Var) -> TensorResult<Var> {
        self.same_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err!("matmul", "{:?} x {:?}", a.shape(), b.shape());
        }
        self.tape.check_inputs("matmul", &[self.id, other.id])?;
        let value = kernels::matmul(&a, &b);
        Ok(self.tape.push(Op::Matmul, vec![self.id, other.id], value))
    }

    pub fn transpose(&self) -> TensorResult<Var> {
        let a = self.value();
        if a.shape().len() != 2 {
            return shape_err!("transpose", "rank {} != 2", a.shape().len());
        }
        let value = kernels::transpose(&a);
        Ok(self.tape.push(Op::Transpose, vec![self.id], value))
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Var> {
        let value = self.value().reshaped(shape)?;
        Ok(self.tape.push(Op::Reshape, vec![self.id], value))
    }

    pub fn sum_all(&self) -> TensorResult<Var> {
        self.tape.check_inputs("sum_all", &[self.id])?;
        let value = Tensor::scalar(self.value().sum());
        Ok(self.tape.push(Op::SumAll, vec![self.id], value))
    }

    /// Fills `shape` with a scalar value (adjoint of [`Var::sum_all`]).
    pub fn broadcast_scalar(&self, shape: &[usize]) -> TensorResult<Var> {
        let v = self.value();
        if !v.is_scalar() {
            return shape_err!("broadcast_scalar", "source has shape {:?}", v.shape());
        }
        let value = Tensor::filled(shape, v.item());
        Ok(self.tape.push(Op::BroadcastScalar, vec![self.id], value))
    }

    pub fn row_sum(&self) -> TensorResult<Var> {
        let v = self.value();
        if v.shape().len() != 2 {
            return shape_err!("row_sum", "rank {} != 2", v.shape().len());
        }
        let value = kernels::row_sum(&v);
        Ok(self.tape.push(Op::RowSum, vec![self.id], value))
    }

    pub fn row_broadcast(&self, cols: usize) -> TensorResult<Var> {
        let v = self.value();
        if v.shape().len() != 1 {
            return shape_err!("row_broadcast", "rank {} != 1", v.shape().len());
        }
        let value = kernels::row_broadcast(&v, cols);
        Ok(self.tape.push(Op::RowBroadcast, vec![self.id], value))
    }

    pub fn gather_label(&self, labels: &Rc<Vec<usize>>) -> TensorResult<Var> {
        let v = self.value();
        if v.shape().len() != 2 || labels.len() != v.shape()[0] {
            return shape_err!("gather_label", "{:?} with {} labels", v.shape(), labels.len());
        }
        let c = v.shape()[1];
        if labels.iter().any(|&y| y >= c) {
            return shape_err!("gather_label", "label out of range (classes {c})");
        }
        let value = kernels::gather_label(&v, labels);
        Ok(self
            .tape
            .push(Op::GatherLabel(labels.clone()), vec![self.id], value))
    }

    pub fn scatter_label(&self, labels: &Rc<Vec<usize>>, classes: usize) -> TensorResult<Var> {
        let v = self.value();
        if v.shape().len() != 1 || labels.len() != v.shape()[0] {
            return shape_err!("scatter_label", "{:?} with {} labels", v.shape(), labels.len());
        }
        if labels.iter().any(|&y| y >= classes) {
            return shape_err!("scatter_label", "label out of range (classes {classes})");
        }
        let value = kernels::scatter_label(&v, labels, classes);
        Ok(self
            .tape
            .push(Op::ScatterLabel(labels.clone()), vec![self.id], value))
    }

    pub fn channel_sum(&self) -> TensorResult<Var> {
        let v = self.value();
        if v.shape().len() < 2 {
            return shape_err!("channel_sum", "rank {} < 2", v.shape().len());
        }
        let value = kernels::channel_sum(&v);
        Ok(self.tape.push(Op::ChannelSum, vec![self.id], value))
    }

    pub fn channel_broadcast(&self, shape: &[usize]) -> TensorResult<Var> {
        let v = self.value();
        if v.shape().len() != 1 || shape.len() < 2 || shape[1] != v.shape()[0] {
            return shape_err!("channel_broadcast", "{:?} -> {:?}", v.shape(), shape);
        }
        let value = kernels::channel_broadcast(&v, shape);
        Ok(self.tape.push(Op::ChannelBroadcast, vec![self.id], value))
    }

    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> TensorResult<Var> {
        self.same_tape(kernel, "conv2d")?;
        let (x, w) = (self.value(), kernel.value());
        if x.shape().len() != 4 || w.shape().len() != 4 || x.shape()[1] != w.shape()[1] {
            return shape_err!("conv2d", "x {:?}, kernel {:?}", x.shape(), w.shape());
        }
        if stride == 0
            || x.shape()[2] + 2 * pad < w.shape()[2]
            || x.shape()[3] + 2 * pad < w.shape()[3]
        {
            return shape_err!("conv2d", "kernel {:?} too large for input {:?} (pad {pad})", w.shape(), x.shape());
        }
        self.tape.check_inputs("conv2d", &[self.id, kernel.id])?;
        let value = kernels::conv2d(&x, &w, stride, pad);
        Ok(self
            .tape
            .push(Op::Conv2d { stride, pad }, vec![self.id, kernel.id], value))
    }

    fn conv2d_dx(&self, kernel: &Var, stride: usize, pad: usize, x_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::conv2d_dx(&self.value(), &kernel.value(), stride, pad, x_shape);
        Ok(self
            .tape
            .push(Op::Conv2dDx { stride, pad }, vec![self.id, kernel.id], value))
    }

    fn conv2d_dw(&self, x: &Var, stride: usize, pad: usize, w_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::conv2d_dw(&self.value(), &x.value(), stride, pad, w_shape);
        Ok(self
            .tape
            .push(Op::Conv2dDw { stride, pad }, vec![self.id, x.id], value))
    }

    pub fn maxpool2d(&self, k: usize, stride: usize) -> TensorResult<Var> {
        let x = self.value();
        validate_pool("maxpool2d", &x, k, stride)?;
        let (value, indices) = kernels::maxpool2d(&x, k, stride);
        Ok(self.tape.push(
            Op::MaxPool2d {
                k,
                stride,
                indices: Rc::new(indices),
            },
            vec![self.id],
            value,
        ))
    }

    fn max_unpool2d(&self, indices: &Rc<Vec<usize>>, x_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::max_unpool2d(&self.value(), indices, x_shape);
        Ok(self.tape.push(
            Op::MaxUnpool2d {
                indices: indices.clone(),
            },
            vec![self.id],
            value,
        ))
    }

    fn index_gather(&self, indices: &Rc<Vec<usize>>, out_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::index_gather(&self.value(), indices, out_shape);
        Ok(self.tape.push(
            Op::IndexGather {
                indices: indices.clone(),
            },
            vec![self.id],
            value,
        ))
    }

    pub fn avgpool2d(&self, k: usize, stride: usize) -> TensorResult<Var> {
        let x = self.value();
        validate_pool("avgpool2d", &x, k, stride)?;
        let value = kernels::avgpool2d(&x, k, stride);
        Ok(self
            .tape
            .push(Op::AvgPool2d { k, stride }, vec![self.id], value))
    }

    fn avg_unpool2d(&self, k: usize, stride: usize, x_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::avg_unpool2d(&self.value(), k, stride, x_shape);
        Ok(self
            .tape
            .push(Op::AvgUnpool2d { k, stride }, vec![self.id], value))
    }

    pub fn diff_rows(&self) -> TensorResult<Var> {
        let x = self.value();
        if x.shape().len() != 4 || x.shape()[2] < 2 {
            return shape_err!("diff_rows", "shape {:?}", x.shape());
        }
        let value = kernels::diff_rows(&x);
        Ok(self.tape.push(Op::DiffRows, vec![self.id], value))
    }

    fn diff_rows_adj(&self, x_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::diff_rows_adj(&self.value(), x_shape);
        Ok(self.tape.push(Op::DiffRowsAdj, vec![self.id], value))
    }

    pub fn diff_cols(&self) -> TensorResult<Var> {
        let x = self.value();
        if x.shape().len() != 4 || x.shape()[3] < 2 {
            return shape_err!("diff_cols", "shape {:?}", x.shape());
        }
        let value = kernels::diff_cols(&x);
        Ok(self.tape.push(Op::DiffCols, vec![self.id], value))
    }

    fn diff_cols_adj(&self, x_shape: &[usize]) -> TensorResult<Var> {
        let value = kernels::diff_cols_adj(&self.value(), x_shape);
        Ok(self.tape.push(Op::DiffColsAdj, vec![self.id], value))
    }
}

fn validate_pool(op: &'static str, x: &Tensor, k: usize, stride: usize) -> TensorResult<()> {
    if x.shape().len() != 4 || k == 0 || stride == 0 || x.shape()[2] < k || x.shape()[3] < k {
        return shape_err!(op, "shape {:?}, k {k}, stride {stride}", x.shape());
    }
    Ok(())
}

/// Contribution of node `id`'s adjoint `g` to each of its inputs.
/// Only inputs flagged in `want` are materialized.
fn backward_node(tape: &Tape, id: usize, g: &Var, want: &[bool]) -> TensorResult<Vec<(usize, Var)>> {
    let (op, inputs) = {
        let inner = tape.inner.borrow();
        (inner.nodes[id].op.clone(), inner.nodes[id].inputs.clone())
    };
    let var = |i: usize| Var {
        tape: tape.clone(),
        id: inputs[i],
    };
    let out_var = Var {
        tape: tape.clone(),
        id,
    };
    let mut contrib: Vec<(usize, Var)> = Vec::with_capacity(2);
    let mut put = |i: usize, v: Var| {
        contrib.push((inputs[i], v));
    };

    match op {
        Op::Input | Op::Const => {}
        Op::Add => {
            if want[0] {
                put(0, g.clone());
            }
            if want[1] {
                put(1, g.clone());
            }
        }
        Op::Sub => {
            if want[0] {
                put(0, g.clone());
            }
            if want[1] {
                put(1, g.neg()?);
            }
        }
        Op::Mul => {
            if want[0] {
                put(0, g.mul(&var(1))?);
            }
            if want[1] {
                put(1, g.mul(&var(0))?);
            }
        }
        Op::Neg => {
            if want[0] {
                put(0, g.neg()?);
            }
        }
        Op::AddScalar(_) => {
            if want[0] {
                put(0, g.clone());
            }
        }
        Op::MulScalar(c) => {
            if want[0] {
                put(0, g.mul_scalar(c)?);
            }
        }
        Op::Exp => {
            if want[0] {
                put(0, g.mul(&out_var)?);
            }
        }
        Op::Ln => {
            if want[0] {
                put(0, g.mul(&var(0).recip()?)?);
            }
        }
        Op::Sqrt => {
            if want[0] {
                put(0, g.mul(&out_var.recip()?)?.mul_scalar(0.5)?);
            }
        }
        Op::Recip => {
            if want[0] {
                put(0, g.mul(&out_var)?.mul(&out_var)?.neg()?);
            }
        }
        Op::Tanh => {
            if want[0] {
                let one_minus_sq = out_var.mul(&out_var)?.neg()?.add_scalar(1.0)?;
                put(0, g.mul(&one_minus_sq)?);
            }
        }
        Op::Relu => {
            if want[0] {
                put(0, g.mul(&var(0).heaviside()?)?);
            }
        }
        Op::Heaviside => {} // derivative treated as zero everywhere
        Op::Softplus { beta } => {
            if want[0] {
                put(0, g.mul(&var(0).sigmoid(beta)?)?);
            }
        }
        Op::Sigmoid { beta } => {
            if want[0] {
                let s = out_var;
                let ds = s.mul(&s.neg()?.add_scalar(1.0)?)?.mul_scalar(beta)?;
                put(0, g.mul(&ds)?);
            }
        }
        Op::Matmul => {
            if want[0] {
                put(0, g.matmul(&var(1).transpose()?)?);
            }
            if want[1] {
                put(1, var(0).transpose()?.matmul(g)?);
            }
        }
        Op::Transpose => {
            if want[0] {
                put(0, g.transpose()?);
            }
        }
        Op::Reshape => {
            if want[0] {
                put(0, g.reshape(&tape.shape_of(inputs[0]))?);
            }
        }
        Op::SumAll => {
            if want[0] {
                put(0, g.broadcast_scalar(&tape.shape_of(inputs[0]))?);
            }
        }
        Op::BroadcastScalar => {
            if want[0] {
                put(0, g.sum_all()?);
            }
        }
        Op::RowSum => {
            if want[0] {
                let cols = tape.shape_of(inputs[0])[1];
                put(0, g.row_broadcast(cols)?);
            }
        }
        Op::RowBroadcast => {
            if want[0] {
                put(0, g.row_sum()?);
            }
        }
        Op::GatherLabel(y) => {
            if want[0] {
                let classes = tape.shape_of(inputs[0])[1];
                put(0, g.scatter_label(&y, classes)?);
            }
        }
        Op::ScatterLabel(y) => {
            if want[0] {
                put(0, g.gather_label(&y)?);
            }
        }
        Op::ChannelSum => {
            if want[0] {
                put(0, g.channel_broadcast(&tape.shape_of(inputs[0]))?);
            }
        }
        Op::ChannelBroadcast => {
            if want[0] {
                put(0, g.channel_sum()?);
            }
        }
        Op::Conv2d { stride, pad } => {
            if want[0] {
                let x_shape = tape.shape_of(inputs[0]);
                put(0, g.conv2d_dx(&var(1), stride, pad, &x_shape)?);
            }
            if want[1] {
                let w_shape = tape.shape_of(inputs[1]);
                put(1, g.conv2d_dw(&var(0), stride, pad, &w_shape)?);
            }
        }
        Op::Conv2dDx { stride, pad } => {
            // dx = scatter(gout, w); bilinear in (gout, w).
            if want[0] {
                put(0, g.conv2d(&var(1), stride, pad)?);
            }
            if want[1] {
                let w_shape = tape.shape_of(inputs[1]);
                put(1, var(0).conv2d_dw(g, stride, pad, &w_shape)?);
            }
        }
        Op::Conv2dDw { stride, pad } => {
            // dw = correlate(gout, x); bilinear in (gout, x).
            if want[0] {
                put(0, var(1).conv2d(g, stride, pad)?);
            }
            if want[1] {
                let x_shape = tape.shape_of(inputs[1]);
                put(1, var(0).conv2d_dx(g, stride, pad, &x_shape)?);
            }
        }
        Op::MaxPool2d { indices, .. } => {
            if want[0] {
                put(0, g.max_unpool2d(&indices, &tape.shape_of(inputs[0]))?);
            }
        }
        Op::MaxUnpool2d { indices } => {
            if want[0] {
                put(0, g.index_gather(&indices, &tape.shape_of(inputs[0]))?);
            }
        }
        Op::IndexGather { indices } => {
            if want[0] {
                put(0, g.max_unpool2d(&indices, &tape.shape_of(inputs[0]))?);
            }
        }
        Op::AvgPool2d { k, stride } => {
            if want[0] {
                put(0, g.avg_unpool2d(k, stride, &tape.shape_of(inputs[0]))?);
            }
        }
        Op::AvgUnpool2d { k, stride } => {
            if want[0] {
                put(0, g.avgpool2d(k, stride)?);
            }
        }
        Op::DiffRows => {
            if want[0] {
                put(0, g.diff_rows_adj(&tape.shape_of(inputs[0]))?);
            }
        }
        Op::DiffRowsAdj => {
            if want[0] {
                put(0, g.diff_rows()?);
            }
        }
        Op::DiffCols => {
            if want[0] {
                put(0, g.diff_cols_adj(&tape.shape_of(inputs[0]))?);
            }
        }
        Op::DiffColsAdj => {
            if want[0] {
                put(0, g.diff_cols()?);
            }
        }
    }
    Ok(contrib)
}

/// Reverse-mode gradients of a recorded scalar with respect to record inputs.
///
/// Adjoints are recorded on the same tape, so on a depth-2 record the
/// returned gradients can be differentiated once more. Inputs with no path
/// to the scalar get a zero gradient.
pub fn grad(scalar: &Var, wrt: &[&Var]) -> TensorResult<Vec<Var>> {
    let tape = scalar.tape.clone();
    for v in wrt {
        if !Rc::ptr_eq(&tape.inner, &v.tape.inner) {
            return Err(TensorError::ForeignVar);
        }
    }

    let (n, sweep_level) = {
        let inner = tape.inner.borrow();
        let node = &inner.nodes[scalar.id];
        if !node.value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: node.value.shape().to_vec(),
            });
        }
        for v in wrt {
            if !matches!(inner.nodes[v.id].op, Op::Input) {
                return Err(TensorError::NotAnInput);
            }
        }
        (inner.nodes.len(), 0u8)
    };
    let _ = sweep_level;

    // Nodes that can reach the scalar going forward.
    let mut ancestor = vec![false; n];
    ancestor[scalar.id] = true;
    {
        let inner = tape.inner.borrow();
        for id in (0..=scalar.id).rev() {
            if ancestor[id] {
                for &i in &inner.nodes[id].inputs {
                    ancestor[i] = true;
                }
            }
        }
    }

    // Nodes reachable from the wrt set through differentiable ops. The
    // loose variant also crosses forcibly detached nodes so that trying to
    // differentiate through a final-level gradient errors instead of
    // silently yielding zero.
    let mut descendant = vec![false; n];
    let mut loose = vec![false; n];
    for v in wrt {
        descendant[v.id] = true;
        loose[v.id] = true;
    }
    let mut max_gen = 0u8;
    let mut crosses_detached = false;
    {
        let inner = tape.inner.borrow();
        for id in 0..n {
            let node = &inner.nodes[id];
            if !descendant[id] && node.requires_grad && node.inputs.iter().any(|&i| descendant[i])
            {
                descendant[id] = true;
            }
            if !loose[id]
                && (node.requires_grad || node.forced_detach)
                && node.inputs.iter().any(|&i| loose[i])
            {
                loose[id] = true;
            }
            if descendant[id] && ancestor[id] {
                max_gen = max_gen.max(node.gen);
            }
            if loose[id] && ancestor[id] && node.forced_detach {
                crosses_detached = true;
            }
        }
    }

    let depth = tape.inner.borrow().depth;
    if crosses_detached {
        return Err(TensorError::DepthExceeded { depth });
    }
    let level = max_gen + 1;
    if level > depth {
        return Err(TensorError::DepthExceeded { depth });
    }

    let needed: Vec<bool> = (0..n).map(|i| ancestor[i] && descendant[i]).collect();

    // At the final permitted level the produced nodes are value-only.
    {
        let mut inner = tape.inner.borrow_mut();
        inner.sweep_gen = level;
        inner.force_no_grad = level >= depth;
    }
    let result = sweep(&tape, scalar, wrt, &needed, n);
    {
        let mut inner = tape.inner.borrow_mut();
        inner.sweep_gen = 0;
        inner.force_no_grad = false;
    }
    result
}

fn sweep(
    tape: &Tape,
    scalar: &Var,
    wrt: &[&Var],
    needed: &[bool],
    n: usize,
) -> TensorResult<Vec<Var>> {
    let mut adjoint: Vec<Option<Var>> = (0..n).map(|_| None).collect();
    adjoint[scalar.id] = Some(tape.constant(Tensor::scalar(1.0)));

    for id in (0..=scalar.id).rev() {
        if !needed[id] {
            continue;
        }
        let g = match adjoint[id].clone() {
            Some(g) => g,
            None => continue, // no path from this node to the scalar survived
        };
        let want: Vec<bool> = {
            let inner = tape.inner.borrow();
            inner.nodes[id]
                .inputs
                .iter()
                .map(|&i| needed[i])
                .collect()
        };
        if !want.iter().any(|&w| w) {
            continue;
        }
        for (input_id, contrib) in backward_node(tape, id, &g, &want)? {
            adjoint[input_id] = Some(match adjoint[input_id].take() {
                None => contrib,
                Some(prev) => prev.add(&contrib)?,
            });
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for v in wrt {
        let g = match adjoint[v.id].take() {
            Some(g) => g,
            None => tape.constant(Tensor::zeros(&tape.shape_of(v.id))),
        };
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        // f(x) = 0.5 * ||x||^2 at (3, 4) has gradient (3, 4).
        let tape = Tape::new();
        let x = tape.input(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let f = x.mul(&x).unwrap().sum_all().unwrap().mul_scalar(0.5).unwrap();
        let g = grad(&f, &[&x]).unwrap();
        assert_eq!(g[0].value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::scalar(5.0));
        let g = grad(&c, &[&x]).unwrap();
        assert_eq!(g[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        // 1x1x3x3 ones convolved with 1x1x2x2 ones -> 2x2 of 4.0.
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn gradient_not_wrt_input_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.mul_scalar(2.0).unwrap();
        let f = y.sum_all().unwrap();
        let err = grad(&f, &[&y]).unwrap_err();
        assert!(matches!(err, TensorError::NotAnInput));
    }

    #[test]
    fn gradient_of_nonscalar_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let err = grad(&x, &[&x]).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn depth_one_gradient_cannot_be_differentiated() {
        let tape = Tape::new(); // depth 1
        let x = tape.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let f = x.mul(&x).unwrap().sum_all().unwrap();
        let g = grad(&f, &[&x]).unwrap();
        let s = g[0].sum_all().unwrap();
        let err = grad(&s, &[&x]).unwrap_err();
        assert!(matches!(err, TensorError::DepthExceeded { .. }));
    }

    #[test]
    fn double_differentiation_recovers_hessian_action() {
        // f(x) = 0.5 x^T A x with symmetric A: grad(grad(f) . u) == A u.
        let a = [[2.0, 1.0, 0.5], [1.0, 3.0, -1.0], [0.5, -1.0, 1.5]];
        let mut rng = Rng::new(9);
        for _ in 0..4 {
            let x0: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let u: Vec<f64> = (0..3).map(|_| rng.normal()).collect();

            let tape = Tape::with_depth(2);
            let x = tape.input(Tensor::new(&[3, 1], x0.clone()).unwrap());
            let a_mat = tape.constant(
                Tensor::new(&[3, 3], a.iter().flatten().copied().collect()).unwrap(),
            );
            let ax = a_mat.matmul(&x).unwrap();
            let f = x
                .mul(&ax)
                .unwrap()
                .sum_all()
                .unwrap()
                .mul_scalar(0.5)
                .unwrap();
            let gx = grad(&f, &[&x]).unwrap().remove(0);
            let u_var = tape.constant(Tensor::new(&[3, 1], u.clone()).unwrap());
            let gu = gx.mul(&u_var).unwrap().sum_all().unwrap();
            let hu = grad(&gu, &[&x]).unwrap().remove(0).value();

            for i in 0..3 {
                let expect: f64 = (0..3).map(|j| a[i][j] * u[j]).sum();
                assert!(
                    close(hu.data()[i], expect, 1e-12),
                    "H u mismatch: {} vs {}",
                    hu.data()[i],
                    expect
                );
            }
        }
    }

    #[test]
    fn gradient_linearity() {
        let mut rng = Rng::new(4);
        for _ in 0..8 {
            let xv = Tensor::rand_normal(&[5], 0.0, 1.0, &mut rng);
            let (alpha, beta) = (rng.normal(), rng.normal());

            // combined = alpha * f + beta * g with f = sum(x^2), g = sum(softplus(x))
            let tape = Tape::new();
            let x = tape.input(xv.clone());
            let f = x.mul(&x).unwrap().sum_all().unwrap();
            let g_fn = x.softplus(10.0).unwrap().sum_all().unwrap();
            let combined = f
                .mul_scalar(alpha)
                .unwrap()
                .add(&g_fn.mul_scalar(beta).unwrap())
                .unwrap();
            let g_combined = grad(&combined, &[&x]).unwrap().remove(0).value();
            let g_f = grad(&f, &[&x]).unwrap().remove(0).value();
            let g_g = grad(&g_fn, &[&x]).unwrap().remove(0).value();

            for i in 0..5 {
                let expect = alpha * g_f.data()[i] + beta * g_g.data()[i];
                assert!(close(g_combined.data()[i], expect, 1e-12));
            }
        }
    }

    #[test]
    fn replay_reproduces_values() {
        let mut rng = Rng::new(21);
        let tape = Tape::with_depth(2);
        let x = tape.input(Tensor::rand_normal(&[2, 4], 0.0, 1.0, &mut rng));
        let w = tape.input(Tensor::rand_normal(&[4, 3], 0.0, 1.0, &mut rng));
        let h = x.matmul(&w).unwrap().relu().unwrap();
        let loss = h.mul(&h).unwrap().sum_all().unwrap();
        let _g = grad(&loss, &[&w]).unwrap();
        assert!(tape.replay_check());
    }

    #[test]
    fn determinism_same_seed_bitwise() {
        let run = || {
            let mut rng = Rng::new(77);
            let tape = Tape::new();
            let x = tape.input(Tensor::rand_normal(&[4, 4], 0.0, 1.0, &mut rng));
            let w = tape.input(Tensor::rand_uniform(&[4, 2], -0.5, 0.5, &mut rng));
            let y = x.matmul(&w).unwrap().softplus(10.0).unwrap().sum_all().unwrap();
            let g = grad(&y, &[&x, &w]).unwrap();
            (y.value(), g[0].value(), g[1].value())
        };
        let (a1, b1, c1) = run();
        let (a2, b2, c2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn checked_tape_rejects_non_finite_inputs() {
        let tape = Tape::checked(1);
        let x = tape.input(Tensor::new(&[2], vec![1.0, f64::INFINITY]).unwrap());
        let err = x.mul_scalar(2.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
