//! Reverse-mode automatic differentiation over a dynamic, append-only graph.
//!
//! The backward pass is itself built from the same graph primitives, so the
//! gradients it returns are ordinary graph nodes and can be differentiated
//! again. Hessian-vector products fall out of running `backward` twice.
//!
//! Graphs are single-owner, created per forward/backward episode, and freed
//! when dropped. Detached [`Array`] values cross episode boundaries.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::array::{Array, ArrayError};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tensor does not belong to this graph")]
    GraphMismatch,
    #[error("invalid operation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    Conv2dIgrad { stride: usize, pad: usize },
    Conv2dWgrad { stride: usize, pad: usize },
    Relu,
    Gap,
    SpatialBroadcast { h: usize, w: usize },
    AvgPool { k: usize },
    AvgUnpool { k: usize },
    Sum,
    Exp,
    Ln,
    Sqrt,
    Recip,
    AddRowVec,
    AddChanVec,
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    grad_cache: HashMap<(NodeId, NodeId), (NodeId, bool)>,
}

/// Handle to a node in a [`Graph`]. Cloning is cheap; the value is read with
/// [`Tensor::value`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: NodeId,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Detach the current value as an owned array.
    pub fn value(&self) -> Array {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        Array::from_parts(n.shape.clone(), n.data.clone())
    }

    pub fn item(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn check_finite(&self) -> Result<()> {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        for (i, &v) in n.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(AutodiffError::Array(ArrayError::NonFinite { index: i, value: v }));
            }
        }
        Ok(())
    }
}

pub struct BackwardResult {
    pub grads: Vec<Tensor>,
    /// Indices into `wrt` that were not reachable from the output; their
    /// gradients are zero tensors.
    pub unreachable: Vec<usize>,
}

#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                grad_cache: HashMap::new(),
            })),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = {
            let inner = self.inner.borrow();
            match op {
                Op::Leaf => true,
                Op::Constant => false,
                _ => inputs.iter().any(|&i| inner.nodes[i].requires_grad),
            }
        };
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn check_owned(&self, t: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &t.graph.inner) {
            Ok(())
        } else {
            Err(AutodiffError::GraphMismatch)
        }
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    fn with_data<R>(&self, id: NodeId, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[id].data)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, a: &Array) -> Tensor {
        self.push(Op::Leaf, vec![], a.shape().to_vec(), a.data().to_vec())
    }

    /// A non-differentiable input.
    pub fn constant(&self, a: &Array) -> Tensor {
        self.push(Op::Constant, vec![], a.shape().to_vec(), a.data().to_vec())
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&Array::scalar(v))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_shapes(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        allow_scalar: bool,
    ) -> Result<Vec<usize>> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        let sa = a.shape();
        let sb = b.shape();
        if sa == sb {
            return Ok(sa);
        }
        if allow_scalar {
            if sb.iter().product::<usize>() == 1 {
                return Ok(sa);
            }
            if sa.iter().product::<usize>() == 1 {
                return Ok(sb);
            }
        }
        Err(AutodiffError::ShapeMismatch {
            op,
            detail: format!("{sa:?} vs {sb:?}"),
        })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = self.binary_shapes("add", a, b, true)?;
        let data = self.with_data(a.id, |xa| {
            self.with_data(b.id, |xb| {
                if xa.len() == xb.len() {
                    xa.iter().zip(xb).map(|(x, y)| x + y).collect::<Vec<_>>()
                } else if xb.len() == 1 {
                    xa.iter().map(|x| x + xb[0]).collect()
                } else {
                    xb.iter().map(|y| xa[0] + y).collect()
                }
            })
        });
        Ok(self.push(Op::Add, vec![a.id, b.id], shape, data))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = self.binary_shapes("sub", a, b, true)?;
        let data = self.with_data(a.id, |xa| {
            self.with_data(b.id, |xb| {
                if xa.len() == xb.len() {
                    xa.iter().zip(xb).map(|(x, y)| x - y).collect::<Vec<_>>()
                } else if xb.len() == 1 {
                    xa.iter().map(|x| x - xb[0]).collect()
                } else {
                    xb.iter().map(|y| xa[0] - y).collect()
                }
            })
        });
        Ok(self.push(Op::Sub, vec![a.id, b.id], shape, data))
    }

    /// Elementwise product; one operand may be scalar.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = self.binary_shapes("mul", a, b, true)?;
        let data = self.with_data(a.id, |xa| {
            self.with_data(b.id, |xb| {
                if xa.len() == xb.len() {
                    xa.iter().zip(xb).map(|(x, y)| x * y).collect::<Vec<_>>()
                } else if xb.len() == 1 {
                    xa.iter().map(|x| x * xb[0]).collect()
                } else {
                    xb.iter().map(|y| xa[0] * y).collect()
                }
            })
        });
        Ok(self.push(Op::Mul, vec![a.id, b.id], shape, data))
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check_owned(a)?;
        let shape = a.shape();
        let data = self.with_data(a.id, |x| x.iter().map(|v| v * c).collect());
        Ok(self.push(Op::Scale(c), vec![a.id], shape, data))
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.scale(a, -1.0)
    }

    fn unary(&self, op: Op, name: &'static str, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        self.check_owned(a)?;
        let _ = name;
        let shape = a.shape();
        let data = self.with_data(a.id, |x| x.iter().map(|&v| f(v)).collect());
        Ok(self.push(op, vec![a.id], shape, data))
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Relu, "relu", a, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, "exp", a, f64::exp)
    }

    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Ln, "ln", a, f64::ln)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Sqrt, "sqrt", a, f64::sqrt)
    }

    pub fn recip(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Recip, "recip", a, f64::recip)
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned(a)?;
        let total = self.with_data(a.id, |x| x.iter().sum::<f64>());
        Ok(self.push(Op::Sum, vec![a.id], vec![1], vec![total]))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.check_owned(a)?;
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", a.shape(), shape),
            });
        }
        let data = self.with_data(a.id, |x| x.to_vec());
        Ok(self.push(Op::Reshape, vec![a.id], shape, data))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.with_data(a.id, |xa| {
            self.with_data(b.id, |xb| kernels::matmul(xa, xb, m, k, n))
        });
        Ok(self.push(Op::Matmul, vec![a.id, b.id], vec![m, n], data))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned(a)?;
        let sa = a.shape();
        if sa.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("{sa:?}"),
            });
        }
        let data = self.with_data(a.id, |x| kernels::transpose(x, sa[0], sa[1]));
        Ok(self.push(Op::Transpose, vec![a.id], vec![sa[1], sa[0]], data))
    }

    // ---- convolution family ------------------------------------------------

    pub fn conv2d(&self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        self.check_owned(x)?;
        self.check_owned(w)?;
        let sx = x.shape();
        let sw = w.shape();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {sx:?}, weight {sw:?}, stride {stride}"),
            });
        }
        let (n, ci, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wid + 2 * pad < k {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {k} larger than padded input {h}x{wid}+{pad}"),
            });
        }
        let (oh, ow) = kernels::conv2d_out_hw(h, wid, k, stride, pad);
        let data = self.with_data(x.id, |xd| {
            self.with_data(w.id, |wd| {
                kernels::conv2d(xd, wd, n, ci, h, wid, co, k, stride, pad)
            })
        });
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x.id, w.id], vec![n, co, oh, ow], data))
    }

    /// Adjoint of conv2d w.r.t. its input: g is output-shaped, w is the filter
    /// bank, result is input-shaped with the given spatial size.
    pub fn conv2d_igrad(
        &self,
        g: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Tensor> {
        self.check_owned(g)?;
        self.check_owned(w)?;
        let sg = g.shape();
        let sw = w.shape();
        if sg.len() != 4 || sw.len() != 4 || sg[1] != sw[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_igrad",
                detail: format!("g {sg:?}, w {sw:?}"),
            });
        }
        let (n, co, oh, ow) = (sg[0], sg[1], sg[2], sg[3]);
        let (ci, k) = (sw[1], sw[2]);
        let data = self.with_data(g.id, |gd| {
            self.with_data(w.id, |wd| {
                kernels::conv2d_igrad(gd, wd, n, co, oh, ow, ci, k, stride, pad, in_h, in_w)
            })
        });
        Ok(self.push(
            Op::Conv2dIgrad { stride, pad },
            vec![g.id, w.id],
            vec![n, ci, in_h, in_w],
            data,
        ))
    }

    /// Adjoint of conv2d w.r.t. the filter bank.
    pub fn conv2d_wgrad(&self, x: &Tensor, g: &Tensor, stride: usize, pad: usize, k: usize) -> Result<Tensor> {
        self.check_owned(x)?;
        self.check_owned(g)?;
        let sx = x.shape();
        let sg = g.shape();
        if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_wgrad",
                detail: format!("x {sx:?}, g {sg:?}"),
            });
        }
        let (n, ci, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, oh, ow) = (sg[1], sg[2], sg[3]);
        let data = self.with_data(x.id, |xd| {
            self.with_data(g.id, |gd| {
                kernels::conv2d_wgrad(xd, gd, n, ci, h, wid, co, oh, ow, k, stride, pad)
            })
        });
        Ok(self.push(
            Op::Conv2dWgrad { stride, pad },
            vec![x.id, g.id],
            vec![co, ci, k, k],
            data,
        ))
    }

    // ---- pooling -----------------------------------------------------------

    pub fn global_average_pool(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned(a)?;
        let s = a.shape();
        if s.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "global_average_pool",
                detail: format!("{s:?}"),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = self.with_data(a.id, |x| kernels::gap(x, n * c, h * w));
        Ok(self.push(Op::Gap, vec![a.id], vec![n, c], data))
    }

    pub fn spatial_broadcast(&self, a: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        self.check_owned(a)?;
        let s = a.shape();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "spatial_broadcast",
                detail: format!("{s:?}"),
            });
        }
        let data = self.with_data(a.id, |x| kernels::spatial_broadcast(x, h * w));
        Ok(self.push(Op::SpatialBroadcast { h, w }, vec![a.id], vec![s[0], s[1], h, w], data))
    }

    pub fn avg_pool2d(&self, a: &Tensor, k: usize) -> Result<Tensor> {
        self.check_owned(a)?;
        let s = a.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "avg_pool2d",
                detail: format!("{s:?} with window {k}"),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let data = self.with_data(a.id, |x| kernels::avg_pool2d(x, n * c, h, w, k));
        Ok(self.push(Op::AvgPool { k }, vec![a.id], vec![n, c, h / k, w / k], data))
    }

    pub fn avg_unpool2d(&self, a: &Tensor, k: usize) -> Result<Tensor> {
        self.check_owned(a)?;
        let s = a.shape();
        if s.len() != 4 || k == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "avg_unpool2d",
                detail: format!("{s:?} with window {k}"),
            });
        }
        let (n, c, oh, ow) = (s[0], s[1], s[2], s[3]);
        let data = self.with_data(a.id, |x| kernels::avg_unpool2d(x, n * c, oh, ow, k));
        Ok(self.push(Op::AvgUnpool { k }, vec![a.id], vec![n, c, oh * k, ow * k], data))
    }

    // ---- row/channel bias --------------------------------------------------

    /// [n, c] + [c], broadcasting over rows.
    pub fn add_rowvec(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_rowvec",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let c = sa[1];
        let data = self.with_data(a.id, |xa| {
            self.with_data(b.id, |xb| {
                xa.iter().enumerate().map(|(i, v)| v + xb[i % c]).collect()
            })
        });
        Ok(self.push(Op::AddRowVec, vec![a.id, b.id], sa, data))
    }

    /// [n, c, h, w] + [c], broadcasting over batch and space.
    pub fn add_chanvec(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 4 || sb != vec![sa[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_chanvec",
                detail: format!("{sa:?} + {sb:?}"),
            });
        }
        let (c, hw) = (sa[1], sa[2] * sa[3]);
        let data = self.with_data(a.id, |xa| {
            self.with_data(b.id, |xb| {
                xa.iter()
                    .enumerate()
                    .map(|(i, v)| v + xb[(i / hw) % c])
                    .collect()
            })
        });
        Ok(self.push(Op::AddChanVec, vec![a.id, b.id], sa, data))
    }

    // ---- composites --------------------------------------------------------

    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        let prod = self.mul(a, b)?;
        self.sum(&prod)
    }

    pub fn l2_norm(&self, a: &Tensor) -> Result<Tensor> {
        let sq = self.dot(a, a)?;
        self.sqrt(&sq)
    }

    pub fn cosine_similarity(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = self.dot(a, b)?;
        let na = self.l2_norm(a)?;
        let nb = self.l2_norm(b)?;
        let denom = self.mul(&na, &nb)?;
        self.mul(&d, &self.recip(&denom)?)
    }

    /// Per-row cosine similarity of two [p, d] matrices -> [p, 1].
    pub fn row_cosine(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let sp = pred.shape();
        if sp.len() != 2 || target.shape() != sp {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_cosine",
                detail: format!("{:?} vs {:?}", sp, target.shape()),
            });
        }
        let ones = self.constant(&Array::ones(&[sp[1], 1]));
        let dots = self.matmul(&self.mul(pred, target)?, &ones)?;
        let pn = self.sqrt(&self.matmul(&self.mul(pred, pred)?, &ones)?)?;
        let tn = self.sqrt(&self.matmul(&self.mul(target, target)?, &ones)?)?;
        let denom = self.mul(&pn, &tn)?;
        self.mul(&dots, &self.recip(&denom)?)
    }

    /// Mean over rows of (1 - cosine(pred_row, target_row)).
    pub fn mean_row_cosine_distance(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let cos = self.row_cosine(pred, target)?;
        let p = cos.len();
        let ones = self.constant(&Array::ones(&[p, 1]));
        let sum = self.sum(&self.sub(&ones, &cos)?)?;
        self.scale(&sum, 1.0 / p as f64)
    }

    /// Mean softmax cross-entropy of scores [n, c] against integer labels.
    /// The row-max shift is detached, which leaves the gradient exact.
    pub fn softmax_cross_entropy(&self, scores: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let s = scores.shape();
        if s.len() != 2 || labels.len() != s[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("scores {s:?}, {} labels", labels.len()),
            });
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::Invalid(format!(
                "label {bad} outside score range 0..{c}"
            )));
        }
        let (rowmax_bcast, rowmax_total) = self.with_data(scores.id, |x| {
            let mut bcast = vec![0.0; n * c];
            let mut total = 0.0;
            for i in 0..n {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                bcast[i * c..(i + 1) * c].fill(m);
                total += m;
            }
            (bcast, total)
        });
        let shift = self.constant(&Array::from_parts(vec![n, c], rowmax_bcast));
        let shifted = self.sub(scores, &shift)?;
        let e = self.exp(&shifted)?;
        let ones = self.constant(&Array::ones(&[c, 1]));
        let rowsum = self.matmul(&e, &ones)?;
        let lse = self.sum(&self.ln(&rowsum)?)?;
        let lse = self.add(&lse, &self.scalar(rowmax_total))?;
        let mut onehot = vec![0.0; n * c];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * c + l] = 1.0;
        }
        let picked = self.sum(&self.mul(scores, &self.constant(&Array::from_parts(vec![n, c], onehot)))?)?;
        self.scale(&self.sub(&lse, &picked)?, 1.0 / n as f64)
    }

    // ---- differentiation ---------------------------------------------------

    /// Reverse-mode differentiation of a scalar output. Returned gradients are
    /// graph nodes and can themselves be differentiated. Unreachable `wrt`
    /// entries yield zero tensors and are flagged in the result.
    pub fn backward(&self, output: &Tensor, wrt: &[&Tensor]) -> Result<BackwardResult> {
        self.check_owned(output)?;
        for t in wrt {
            self.check_owned(t)?;
        }
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }

        // Cache hit only when every requested pair is present.
        {
            let inner = self.inner.borrow();
            let cached: Vec<_> = wrt
                .iter()
                .filter_map(|t| inner.grad_cache.get(&(output.id, t.id)).copied())
                .collect();
            if cached.len() == wrt.len() {
                let grads = cached
                    .iter()
                    .map(|&(id, _)| Tensor { graph: self.clone(), id })
                    .collect();
                let unreachable = cached
                    .iter()
                    .enumerate()
                    .filter(|(_, &(_, reached))| !reached)
                    .map(|(i, _)| i)
                    .collect();
                return Ok(BackwardResult { grads, unreachable });
            }
        }

        let out_id = output.id;
        // needed[i]: some wrt node is in the input-closure of i.
        let mut needed = vec![false; out_id + 1];
        for t in wrt {
            if t.id <= out_id {
                needed[t.id] = true;
            }
        }
        {
            let inner = self.inner.borrow();
            for id in 0..=out_id {
                if !needed[id] {
                    needed[id] = inner.nodes[id].inputs.iter().any(|&i| needed[i]);
                }
            }
        }

        let mut adjoint: Vec<Option<Tensor>> = vec![None; out_id + 1];
        adjoint[out_id] = Some(self.constant(&Array::from_parts(out_shape, vec![1.0])));

        for id in (0..=out_id).rev() {
            let Some(grad) = adjoint[id].clone() else { continue };
            if !needed[id] {
                continue;
            }
            let (op, inputs) = {
                let inner = self.inner.borrow();
                (inner.nodes[id].op.clone(), inner.nodes[id].inputs.clone())
            };
            let partials = self.vjp(id, &op, &inputs, &grad)?;
            for (input_id, partial) in partials {
                if !needed[input_id] {
                    continue;
                }
                adjoint[input_id] = Some(match adjoint[input_id].take() {
                    Some(existing) => self.add(&existing, &partial)?,
                    None => partial,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for (i, t) in wrt.iter().enumerate() {
            let (tensor, reached) = match adjoint.get(t.id).and_then(|a| a.clone()) {
                Some(g) => (g, true),
                None => (self.constant(&Array::zeros(&t.shape())), false),
            };
            if !reached {
                unreachable.push(i);
            }
            self.inner
                .borrow_mut()
                .grad_cache
                .insert((out_id, t.id), (tensor.id, reached));
            grads.push(tensor);
        }
        Ok(BackwardResult { grads, unreachable })
    }

    /// Hessian-vector product of a scalar loss w.r.t. `params`, computed as
    /// backward(dot(backward(loss, params), v), params).
    pub fn hvp(&self, loss: &Tensor, params: &Tensor, vector: &Array) -> Result<Tensor> {
        if vector.shape() != params.shape().as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                op: "hvp",
                detail: format!("params {:?}, vector {:?}", params.shape(), vector.shape()),
            });
        }
        let grad = self.backward(loss, &[params])?.grads.remove(0);
        let v = self.constant(vector);
        let gv = self.dot(&grad, &v)?;
        Ok(self.backward(&gv, &[params])?.grads.remove(0))
    }

    /// Partial adjoints for each differentiable input of a node, built from
    /// graph primitives so the result stays differentiable.
    fn vjp(&self, id: NodeId, op: &Op, inputs: &[NodeId], g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let t = |nid: NodeId| Tensor { graph: self.clone(), id: nid };
        let out = match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add => {
                let ga = self.reduce_to(g, inputs[0])?;
                let gb = self.reduce_to(g, inputs[1])?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Sub => {
                let ga = self.reduce_to(g, inputs[0])?;
                let gb = self.reduce_to(&self.neg(g)?, inputs[1])?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Mul => {
                let (a, b) = (t(inputs[0]), t(inputs[1]));
                let ga = self.reduce_to(&self.mul(g, &b)?, inputs[0])?;
                let gb = self.reduce_to(&self.mul(g, &a)?, inputs[1])?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Scale(c) => vec![(inputs[0], self.scale(g, *c)?)],
            Op::Matmul => {
                let (a, b) = (t(inputs[0]), t(inputs[1]));
                let ga = self.matmul(g, &self.transpose(&b)?)?;
                let gb = self.matmul(&self.transpose(&a)?, g)?;
                vec![(inputs[0], ga), (inputs[1], gb)]
            }
            Op::Transpose => vec![(inputs[0], self.transpose(g)?)],
            Op::Conv2d { stride, pad } => {
                let (x, w) = (t(inputs[0]), t(inputs[1]));
                let sx = self.shape_of(inputs[0]);
                let sw = self.shape_of(inputs[1]);
                let gx = self.conv2d_igrad(g, &w, *stride, *pad, sx[2], sx[3])?;
                let gw = self.conv2d_wgrad(&x, g, *stride, *pad, sw[2])?;
                vec![(inputs[0], gx), (inputs[1], gw)]
            }
            Op::Conv2dIgrad { stride, pad, .. } => {
                // This node maps (g_in, w) -> x-shaped output; its adjoints are
                // the other two members of the bilinear convolution family.
                let (gin, w) = (t(inputs[0]), t(inputs[1]));
                let sw = self.shape_of(inputs[1]);
                let gg = self.conv2d(g, &w, *stride, *pad)?;
                let gw = self.conv2d_wgrad(g, &gin, *stride, *pad, sw[2])?;
                vec![(inputs[0], gg), (inputs[1], gw)]
            }
            Op::Conv2dWgrad { stride, pad, .. } => {
                let (x, gin) = (t(inputs[0]), t(inputs[1]));
                let sx = self.shape_of(inputs[0]);
                let gx = self.conv2d_igrad(&gin, g, *stride, *pad, sx[2], sx[3])?;
                let gg = self.conv2d(&x, g, *stride, *pad)?;
                vec![(inputs[0], gx), (inputs[1], gg)]
            }
            Op::Relu => {
                // Derivative at exactly 0 is 0; the mask is a constant, so the
                // second derivative of relu is 0 everywhere.
                let mask = self.with_data(inputs[0], |x| {
                    x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>()
                });
                let shape = self.shape_of(inputs[0]);
                let mask = self.constant(&Array::from_parts(shape, mask));
                vec![(inputs[0], self.mul(g, &mask)?)]
            }
            Op::Gap => {
                let s = self.shape_of(inputs[0]);
                let (h, w) = (s[2], s[3]);
                let spread = self.spatial_broadcast(g, h, w)?;
                vec![(inputs[0], self.scale(&spread, 1.0 / (h * w) as f64)?)]
            }
            Op::SpatialBroadcast { h, w } => {
                let pooled = self.global_average_pool(g)?;
                vec![(inputs[0], self.scale(&pooled, (*h * *w) as f64)?)]
            }
            Op::AvgPool { k } => vec![(inputs[0], self.avg_unpool2d(g, *k)?)],
            Op::AvgUnpool { k } => vec![(inputs[0], self.avg_pool2d(g, *k)?)],
            Op::Sum => {
                let shape = self.shape_of(inputs[0]);
                let ones = self.constant(&Array::ones(&shape));
                vec![(inputs[0], self.mul(&ones, g)?)]
            }
            Op::Exp => vec![(inputs[0], self.mul(g, &t(id))?)],
            Op::Ln => {
                let x = t(inputs[0]);
                vec![(inputs[0], self.mul(g, &self.recip(&x)?)?)]
            }
            Op::Sqrt => {
                let half_recip = self.scale(&self.recip(&t(id))?, 0.5)?;
                vec![(inputs[0], self.mul(g, &half_recip)?)]
            }
            Op::Recip => {
                let y = t(id);
                let y2 = self.mul(&y, &y)?;
                vec![(inputs[0], self.neg(&self.mul(g, &y2)?)?)]
            }
            Op::AddRowVec => {
                let gb = self.colsum(g)?;
                vec![(inputs[0], g.clone()), (inputs[1], gb)]
            }
            Op::AddChanVec => {
                let s = self.shape_of(inputs[0]);
                let hw = (s[2] * s[3]) as f64;
                let per_img = self.scale(&self.global_average_pool(g)?, hw)?;
                let gb = self.colsum(&per_img)?;
                vec![(inputs[0], g.clone()), (inputs[1], gb)]
            }
            Op::Reshape => {
                let shape = self.shape_of(inputs[0]);
                vec![(inputs[0], self.reshape(g, shape)?)]
            }
        };
        Ok(out)
    }

    /// Column sums of an [n, c] tensor -> [c].
    fn colsum(&self, g: &Tensor) -> Result<Tensor> {
        let s = g.shape();
        let ones = self.constant(&Array::ones(&[s[0], 1]));
        let col = self.matmul(&self.transpose(g)?, &ones)?;
        self.reshape(&col, vec![s[1]])
    }

    /// If the forward op broadcast a scalar operand, reduce the gradient back
    /// to scalar shape.
    fn reduce_to(&self, g: &Tensor, input: NodeId) -> Result<Tensor> {
        let target = self.shape_of(input);
        if g.shape() == target {
            return Ok(g.clone());
        }
        debug_assert_eq!(target.iter().product::<usize>(), 1);
        let s = self.sum(g)?;
        self.reshape(&s, target)
    }
}
