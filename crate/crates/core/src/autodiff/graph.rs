//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Every operator records its inputs and whatever it needs for the adjoint
//! as a node appended to the graph; node order is therefore a topological
//! order and [`Graph::backward`] simply walks it in reverse.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Nearest,
    Trilinear,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        spatial: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dim: usize,
    },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Upsample {
        a: Var,
        planes: usize,
        dims: [usize; 3],
        mode: Upsample,
    },
    Slice {
        a: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Matmul { .. } => "matmul",
            Op::Conv3d { .. } => "conv3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Upsample { .. } => "upsample2x",
            Op::Slice { .. } => "slice",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass worth of recorded operations.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<ParamId, Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Sums `g` (shaped like the broadcast output) down to `n` trailing elements.
fn reduce_to<T: Real>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

pub(crate) fn permute_data<T: Real>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let value = store.value_arc(id);
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                op: Op::Leaf,
                requires_grad: true,
            });
            Var(nodes.len() - 1)
        };
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> Vec<(ParamId, Var)> {
        self.params.borrow().iter().map(|(&p, &v)| (p, v)).collect()
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !suffix_broadcast(ta.shape(), tb.shape()) {
            return Err(Error::shape(format!(
                "{what}: shape {:?} does not broadcast onto {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let nb = tb.len();
        let out: Vec<T> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Ok((Tensor::new(ta.shape(), out)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise `a + b`; `b` may be a trailing-dimension suffix of `a` (broadcast).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::Scale(a, c), self.rg(a))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::AddScalar(a), self.rg(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.abs()).collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::Abs(a), self.rg(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b, m, k, n }, self.rg(a) || self.rg(b)))
    }

    /// Cross-correlation of `x: [B,Cin,D,H,W]` with `w: [Cout,Cin,k,k,k]` plus optional bias `[Cout]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(Error::shape(format!("conv3d: input {sx:?}, weight {sw:?}")));
        }
        let k = sw[2];
        if sw[3] != k || sw[4] != k {
            return Err(Error::shape(format!(
                "conv3d: kernel must be cubic, got {sw:?}"
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(format!(
                "conv3d: input has {} channels, weight expects {}",
                sx[1], sw[1]
            )));
        }
        let mut output = [0usize; 3];
        for ax in 0..3 {
            output[ax] = ConvGeom::out_len(sx[2 + ax], k, stride, pad).ok_or_else(|| {
                Error::shape(format!(
                    "conv3d: axis {ax} of length {} with kernel {k}, stride {stride}, pad {pad} is not integral",
                    sx[2 + ax]
                ))
            })?;
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: k,
            stride,
            pad,
            output,
        };
        let tb = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [geom.cout] {
                    return Err(Error::shape(format!(
                        "conv3d: bias {:?} for {} outputs",
                        tb.shape(),
                        geom.cout
                    )));
                }
                Some(tb)
            }
            None => None,
        };
        let out =
            kernels::conv3d_forward(tx.data(), tw.data(), tb.as_deref().map(|t| t.data()), &geom);
        let shape = [geom.batch, geom.cout, output[0], output[1], output[2]];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Per-sample, per-channel normalization over all trailing (spatial) axes.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "instance_norm: eps must be positive, got {eps}"
            )));
        }
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 3 {
            return Err(Error::shape(format!(
                "instance_norm: need [B,C,...], got {s:?}"
            )));
        }
        let channels = s[1];
        let spatial: usize = s[2..].iter().product();
        if spatial == 0 {
            return Err(Error::shape("instance_norm: empty spatial extent"));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [channels] || tb.shape() != [channels] {
            return Err(Error::shape(format!(
                "instance_norm: affine params {:?}/{:?} for {channels} channels",
                tg.shape(),
                tb.shape()
            )));
        }
        let planes = s[0] * channels;
        let (out, xhat, inv_std) = normalize_rows(tx.data(), planes, spatial, eps, |r| {
            let c = r % channels;
            (tg.data()[c], tb.data()[c])
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                spatial,
            },
            rg,
        ))
    }

    /// Normalization over the last axis with per-feature affine.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let tx = self.value(x);
        let s = tx.shape();
        let dim = *s
            .last()
            .ok_or_else(|| Error::shape("layer_norm: rank-0 input"))?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [dim] || tb.shape() != [dim] {
            return Err(Error::shape(format!(
                "layer_norm: affine params for dim {dim}"
            )));
        }
        let rows = tx.len() / dim.max(1);
        let (out, xhat, inv_std) =
            normalize_rows(tx.data(), rows, dim, eps, |_| (T::zero(), T::zero()));
        // per-feature affine
        let out: Vec<T> = out
            .iter()
            .zip(&xhat)
            .enumerate()
            .map(|(i, (_, &xh))| tg.data()[i % dim] * xh + tb.data()[i % dim])
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dim,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let ta = self.value(a);
        let slope = T::of(slope);
        let out = ta
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::LeakyRelu(a, slope), self.rg(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::Sigmoid(a), self.rg(a))
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let dim = *ta
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax: rank-0 input"))?;
        if dim == 0 {
            return Err(Error::shape("softmax: empty last axis"));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(dim) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            let inv = T::one() / z;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, Op::Softmax(a), self.rg(a)))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat: no inputs"))?;
        let s0 = self.shape(*first);
        if axis >= s0.len() {
            return Err(Error::shape(format!(
                "concat: axis {axis} out of range for {s0:?}"
            )));
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut sizes = Vec::with_capacity(inputs.len());
        let vals: Vec<Arc<Tensor<T>>> = inputs.iter().map(|&v| self.value(v)).collect();
        for t in &vals {
            let s = t.shape();
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(Error::shape(format!(
                    "concat: {s:?} incompatible with {s0:?} on axis {axis}"
                )));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &sz) in vals.iter().zip(&sizes) {
                out.extend_from_slice(&t.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                sizes,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if numel(shape) != ta.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?}",
                ta.shape()
            )));
        }
        let t = Tensor::new(shape, ta.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), self.rg(a)))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let (out, shape) = permute_data(ta.data(), ta.shape(), perm);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Permute(a, perm.to_vec()),
            self.rg(a),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn sum(&self, a: Var) -> Var {
        let ta = self.value(a);
        let s = kernels::sum(ta.data());
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let ta = self.value(a);
        let s = kernels::sum(ta.data()) / T::of(ta.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), self.rg(a))
    }

    /// x2 spatial upsampling of `[B,C,D,H,W]`.
    pub fn upsample2x(&self, a: Var, mode: Upsample) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 5 {
            return Err(Error::shape(format!(
                "upsample2x: need [B,C,D,H,W], got {s:?}"
            )));
        }
        let planes = s[0] * s[1];
        let dims = [s[2], s[3], s[4]];
        let out = match mode {
            Upsample::Nearest => kernels::upsample2x(ta.data(), planes, dims),
            Upsample::Trilinear => kernels::trilinear2x(ta.data(), planes, dims, None),
        };
        let shape = [s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]];
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Upsample {
                a,
                planes,
                dims,
                mode,
            },
            self.rg(a),
        ))
    }

    pub fn upsample_nearest2x(&self, a: Var) -> Result<Var> {
        self.upsample2x(a, Upsample::Nearest)
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice: axis {axis} range {start}..{} of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice {
                a,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            self.rg(a),
        ))
    }

    /// Reverse pass from a scalar. Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.0 >= n {
            return Err(Error::shape("backward: loss is not a node of this graph"));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Names of the operators recorded so far, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }
}

/// Row-wise standardization. Returns (affine output, xhat, 1/std per row).
fn normalize_rows<T: Real>(
    x: &[T],
    rows: usize,
    len: usize,
    eps: f64,
    affine: impl Fn(usize) -> (T, T),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let constant = row.iter().all(|&v| v == row[0]);
        let mean = if constant {
            row[0].f64()
        } else {
            row.iter().map(|v| v.f64()).sum::<f64>() / len as f64
        };
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / len as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (gm, bt) = affine(r);
        let (mean_t, inv_t) = (T::of(mean), T::of(inv));
        for j in 0..len {
            let xh = (row[j] - mean_t) * inv_t;
            xhat[r * len + j] = xh;
            out[r * len + j] = gm * xh + bt;
        }
        inv_std.push(inv_t);
    }
    (out, xhat, inv_std)
}

/// Adjoint of standardization for one row given `dxhat`.
fn normalize_row_backward<T: Real>(dxhat: &[T], xhat: &[T], inv: T, dx: &mut [T]) {
    let n = T::of(dxhat.len() as f64);
    let s1 = kernels::sum(dxhat);
    let s2 = kernels::dot(dxhat, xhat);
    for ((d, &g), &xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *d += inv / n * (n * g - s1 - xh * s2);
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, val(*a).shape(), gd.to_vec());
            }
            if rg(*b) {
                let mut db = reduce_to(gd, val(*b).len());
                if matches!(node.op, Op::Sub(..)) {
                    db.iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(grads, *b, val(*b).shape(), db);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let nb = tb.len();
            if rg(*a) {
                let da = gd
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| x * tb.data()[j % nb])
                    .collect();
                accumulate(grads, *a, ta.shape(), da);
            }
            if rg(*b) {
                let prod: Vec<T> = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *b, tb.shape(), reduce_to(&prod, nb));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let nb = tb.len();
            if rg(*a) {
                let da = gd
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| x / tb.data()[j % nb])
                    .collect();
                accumulate(grads, *a, ta.shape(), da);
            }
            if rg(*b) {
                let prod: Vec<T> = gd
                    .iter()
                    .zip(ta.data())
                    .enumerate()
                    .map(|(j, (&x, &y))| {
                        let bv = tb.data()[j % nb];
                        -x * y / (bv * bv)
                    })
                    .collect();
                accumulate(grads, *b, tb.shape(), reduce_to(&prod, nb));
            }
        }
        Op::Scale(a, c) => {
            if rg(*a) {
                accumulate(grads, *a, g.shape(), gd.iter().map(|&x| x * *c).collect());
            }
        }
        Op::AddScalar(a) => {
            if rg(*a) {
                accumulate(grads, *a, g.shape(), gd.to_vec());
            }
        }
        Op::Abs(a) => {
            if rg(*a) {
                let ta = val(*a);
                let da = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&x, &y)| {
                        if y > T::zero() {
                            x
                        } else if y < T::zero() {
                            -x
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *a, ta.shape(), da);
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (ta, tb) = (val(*a), val(*b));
            if rg(*a) {
                let mut da = vec![T::zero(); m * k];
                kernels::matmul_grad_a(gd, tb.data(), &mut da, *m, *k, *n);
                accumulate(grads, *a, ta.shape(), da);
            }
            if rg(*b) {
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_grad_b(ta.data(), gd, &mut db, *m, *k, *n);
                accumulate(grads, *b, tb.shape(), db);
            }
        }
        Op::Conv3d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            if rg(*x) {
                let mut dx = vec![T::zero(); tx.len()];
                kernels::conv3d_backward_input(gd, tw.data(), &mut dx, geom);
                accumulate(grads, *x, tx.shape(), dx);
            }
            let want_w = rg(*w);
            let want_b = b.is_some_and(&rg);
            if want_w || want_b {
                let mut dw = want_w.then(|| vec![T::zero(); tw.len()]);
                let mut db = want_b.then(|| vec![T::zero(); geom.cout]);
                kernels::conv3d_backward_params(
                    gd,
                    tx.data(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    geom,
                );
                if let Some(dw) = dw {
                    accumulate(grads, *w, tw.shape(), dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(grads, *b, &[geom.cout], db);
                }
            }
        }
        Op::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            spatial,
        } => {
            let tg = val(*gamma);
            let (c, sp) = (*channels, *spatial);
            if rg(*gamma) || rg(*beta) {
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (r, (grow, xrow)) in gd.chunks_exact(sp).zip(xhat.chunks_exact(sp)).enumerate()
                {
                    dg[r % c] += kernels::dot(grow, xrow);
                    dbeta[r % c] += kernels::sum(grow);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, &[c], dg);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, &[c], dbeta);
                }
            }
            if rg(*x) {
                let mut dx = vec![T::zero(); gd.len()];
                let mut dxhat = vec![T::zero(); sp];
                for r in 0..gd.len() / sp {
                    let gm = tg.data()[r % c];
                    for (d, &v) in dxhat.iter_mut().zip(&gd[r * sp..(r + 1) * sp]) {
                        *d = v * gm;
                    }
                    normalize_row_backward(
                        &dxhat,
                        &xhat[r * sp..(r + 1) * sp],
                        inv_std[r],
                        &mut dx[r * sp..(r + 1) * sp],
                    );
                }
                accumulate(grads, *x, g.shape(), dx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dim,
        } => {
            let tg = val(*gamma);
            let d = *dim;
            if rg(*gamma) || rg(*beta) {
                let mut dg = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (grow, xrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, &[d], dg);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, &[d], dbeta);
                }
            }
            if rg(*x) {
                let mut dx = vec![T::zero(); gd.len()];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..gd.len() / d {
                    for j in 0..d {
                        dxhat[j] = gd[r * d + j] * tg.data()[j];
                    }
                    normalize_row_backward(
                        &dxhat,
                        &xhat[r * d..(r + 1) * d],
                        inv_std[r],
                        &mut dx[r * d..(r + 1) * d],
                    );
                }
                accumulate(grads, *x, g.shape(), dx);
            }
        }
        Op::LeakyRelu(a, slope) => {
            if rg(*a) {
                let ta = val(*a);
                let da = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(&x, &y)| if y > T::zero() { x } else { x * *slope })
                    .collect();
                accumulate(grads, *a, ta.shape(), da);
            }
        }
        Op::Sigmoid(a) => {
            if rg(*a) {
                let y = &node.value;
                let da = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&x, &s)| x * s * (T::one() - s))
                    .collect();
                accumulate(grads, *a, y.shape(), da);
            }
        }
        Op::Softmax(a) => {
            if rg(*a) {
                let y = &node.value;
                let dim = *y.shape().last().expect("softmax rank");
                let mut da = vec![T::zero(); gd.len()];
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(dim)
                    .zip(gd.chunks_exact(dim))
                    .zip(y.data().chunks_exact(dim))
                {
                    let s = kernels::dot(grow, yrow);
                    for j in 0..dim {
                        drow[j] = yrow[j] * (grow[j] - s);
                    }
                }
                accumulate(grads, *a, y.shape(), da);
            }
        }
        Op::Concat {
            inputs,
            outer,
            sizes,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&v, &sz) in inputs.iter().zip(sizes) {
                if rg(v) {
                    let mut dv = Vec::with_capacity(outer * sz * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        dv.extend_from_slice(&gd[base..base + sz * inner]);
                    }
                    accumulate(grads, v, val(v).shape(), dv);
                }
                offset += sz;
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                accumulate(grads, *a, val(*a).shape(), gd.to_vec());
            }
        }
        Op::Permute(a, perm) => {
            if rg(*a) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (da, _) = permute_data(gd, g.shape(), &inv);
                accumulate(grads, *a, val(*a).shape(), da);
            }
        }
        Op::Sum(a) => {
            if rg(*a) {
                let ta = val(*a);
                accumulate(grads, *a, ta.shape(), vec![gd[0]; ta.len()]);
            }
        }
        Op::Mean(a) => {
            if rg(*a) {
                let ta = val(*a);
                let v = gd[0] / T::of(ta.len() as f64);
                accumulate(grads, *a, ta.shape(), vec![v; ta.len()]);
            }
        }
        Op::Upsample {
            a,
            planes,
            dims,
            mode,
        } => {
            if rg(*a) {
                let ta = val(*a);
                let da = match mode {
                    Upsample::Nearest => {
                        let mut da = vec![T::zero(); ta.len()];
                        kernels::upsample2x_backward(gd, &mut da, *planes, *dims);
                        da
                    }
                    Upsample::Trilinear => kernels::trilinear2x(&[], *planes, *dims, Some(gd)),
                };
                accumulate(grads, *a, ta.shape(), da);
            }
        }
        Op::Slice {
            a,
            outer,
            axis_len,
            start,
            len,
            inner,
        } => {
            if rg(*a) {
                let ta = val(*a);
                let mut da = vec![T::zero(); ta.len()];
                for o in 0..*outer {
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    let base = (o * axis_len + start) * inner;
                    da[base..base + len * inner].copy_from_slice(src);
                }
                accumulate(grads, *a, ta.shape(), da);
            }
        }
    }
}
