use super::kernels::{self, ConvGeom};
use super::{broadcast_shape, broadcast_strides, check_shape, numel, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Softplus,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

/// Pointwise nonlinearities used by the network blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Sigmoid,
    Tanh,
}

impl From<Activation> for UnaryOp {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Relu => UnaryOp::Relu,
            Activation::Gelu => UnaryOp::Gelu,
            Activation::Sigmoid => UnaryOp::Sigmoid,
            Activation::Tanh => UnaryOp::Tanh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary { kind: BinaryOp, a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, s: T },
    Unary { kind: UnaryOp, a: Var },
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: Var, k: Var, geom: ConvGeom },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reduce { x: Var, kind: Reduce, axis: Option<usize> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of a computation. Nodes are appended in execution order, so
/// every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a copy of `t` as a leaf; it participates in differentiation
    /// iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), true, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent buffers")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: binary_name(kind),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = vec![T::zero(); numel(&out)];
        let f = |x: T, y: T| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        if sa == sb {
            for ((o, &x), &y) in value.iter_mut().zip(va).zip(vb) {
                *o = f(x, y);
            }
        } else {
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            bcast_iter(&out, &ta, &tb, |o, ia, ib| value[o] = f(va[ia], vb[ib]));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, value, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x + s).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.requires_grad(a));
        self.push(shape, value, rg, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.requires_grad(a));
        self.push(shape, value, rg, Op::MulScalar { a, s })
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| unary_forward(kind, x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.requires_grad(a));
        self.push(shape, value, rg, Op::Unary { kind, a })
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        self.unary(kind.into(), a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let mut value = vec![T::zero(); numel(&plan.out_shape)];
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (plan.m, plan.k, plan.n);
        plan.for_each_batch(|o, ia, ib| {
            kernels::gemm_nn(
                m,
                k,
                n,
                &va[ia * m * k..(ia + 1) * m * k],
                &vb[ib * k * n..(ib + 1) * k * n],
                &mut value[o * m * n..(o + 1) * m * n],
            )
        });
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(plan.out_shape, value, rg, Op::MatMul { a, b }))
    }

    /// Cross-correlation of `x[c_in,h,w]` with `k[c_out,c_in,kh,kw]`, zero
    /// padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (kh, kw) = (sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel extents must be odd and stride positive, got {kh}x{kw} stride {stride}"),
            });
        }
        let oh = out_extent(sx[1], kh, stride, pad)?;
        let ow = out_extent(sx[2], kw, stride, pad)?;
        let geom = ConvGeom {
            c: sx[0],
            h: sx[1],
            w: sx[2],
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = kernels::im2col(&geom, self.value(x));
        let (co, ckk, p) = (sk[0], sx[0] * kh * kw, oh * ow);
        let mut value = vec![T::zero(); co * p];
        kernels::gemm_nn(co, ckk, p, self.value(k), &cols, &mut value);
        let rg = self.requires_grad(x) || self.requires_grad(k);
        // The unfolded input is only needed for the kernel gradient.
        let cols = if self.requires_grad(k) { cols } else { Vec::new() };
        Ok(self.push(vec![co, oh, ow], value, rg, Op::Conv2d { x, k, geom, cols }))
    }

    /// Transposed convolution of `x[c_in,h,w]` with `k[c_in,c_out,kh,kw]`;
    /// output is `[c_out, (h−1)·stride + kh, (w−1)·stride + kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sx[0] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sk[1], sk[2], sk[3]);
        let geom = ConvGeom {
            c: co,
            h: (h - 1) * stride + kh,
            w: (w - 1) * stride + kw,
            kh,
            kw,
            stride,
            pad: 0,
            oh: h,
            ow: w,
        };
        let mut cols = vec![T::zero(); co * kh * kw * h * w];
        kernels::gemm_tn(co * kh * kw, ci, h * w, self.value(k), self.value(x), &mut cols);
        let mut value = vec![T::zero(); co * geom.h * geom.w];
        kernels::col2im(&geom, &cols, &mut value);
        let rg = self.requires_grad(x) || self.requires_grad(k);
        Ok(self.push(vec![co, geom.h, geom.w], value, rg, Op::ConvTranspose2d { x, k, geom }))
    }

    // ---- normalisation -----------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let mut value = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(value[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (value[at(j)] - mx).exp();
                    value[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    value[at(j)] = value[at(j)] / s;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("log_softmax", &shape, axis)?;
        let mut value = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(value[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    s += (value[at(j)] - mx).exp();
                }
                let lse = mx + s.ln();
                for j in 0..len {
                    value[at(j)] = value[at(j)] - lse;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, rg, Op::LogSoftmax { x, axis }))
    }

    /// Normalises the last axis to zero mean and unit variance (ε = 1e-5),
    /// then applies `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        if numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = numel(&shape) / d;
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut value = vec![T::zero(); vx.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                value[r * d + j] = xh * vg[j] + vb[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ---- reductions and layout ---------------------------------------

    /// Sum or mean along `axis` (removed from the shape), or over all
    /// elements when `axis` is `None` (result shape `[1]`).
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let vx = self.value(x);
        let (out_shape, value) = match axis {
            None => {
                let mut s = T::zero();
                for &v in vx {
                    s += v;
                }
                if kind == Reduce::Mean {
                    s = s / T::of(vx.len() as f64);
                }
                (vec![1], vec![s])
            }
            Some(ax) => {
                let (outer, len, inner) = split_axis("reduce", &shape, ax)?;
                let mut value = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &vx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if kind == Reduce::Mean {
                    let inv = T::one() / T::of(len as f64);
                    value.iter_mut().for_each(|v| *v *= inv);
                }
                let mut out: Vec<usize> = shape.clone();
                out.remove(ax);
                if out.is_empty() {
                    out.push(1);
                }
                (out, value)
            }
        };
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, value, rg, Op::Reduce { x, kind, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::Sum, None).expect("full reduction cannot fail")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(x, Reduce::Mean, None).expect("full reduction cannot fail")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = permute_values(self.value(x), &shape, perm);
        let rg = self.requires_grad(x);
        Ok(self.push(
            out,
            value,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len() && s.iter().enumerate().all(|(i, &e)| i == axis || e == first[i]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            out,
            value,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Takes `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis("slice", &shape, axis)?;
        if len == 0 || start + len > full {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{} outside extent {full}", start + len),
            });
        }
        let vx = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            value.extend_from_slice(&vx[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(out, value, rg, Op::Slice { x, axis, start }))
    }

    // ---- reverse pass ------------------------------------------------

    /// Propagates d(loss)/d(node) back to every leaf that requires a
    /// gradient, adding into the leaf accumulators. Calling it twice
    /// without [`Tape::zero_grad`] doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Err(TensorError::NothingToDifferentiate);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::Binary { kind, a, b } => self.back_binary(kind, a, b, &node.shape, g, grads),
            &Op::AddScalar { a } => {
                if self.wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
            }
            &Op::MulScalar { a, s } => {
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            &Op::Unary { kind, a } => {
                if self.wants(a) {
                    let (x, y) = (self.value(a), &node.value);
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * unary_derivative(kind, x[i], y[i]);
                    }
                }
            }
            &Op::MatMul { a, b } => {
                let plan = MatmulPlan::new(self.shape(a), self.shape(b)).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.wants(a) {
                    let vb = self.value(b);
                    let ga = slot(grads, a, numel(self.shape(a)));
                    plan.for_each_batch(|o, ia, ib| {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[o * m * n..(o + 1) * m * n],
                            &vb[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                        )
                    });
                }
                if self.wants(b) {
                    let va = self.value(a);
                    let gb = slot(grads, b, numel(self.shape(b)));
                    plan.for_each_batch(|o, ia, ib| {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &va[ia * m * k..(ia + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                        )
                    });
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let (co, ckk, p) = (node.shape[0], geom.c * geom.kh * geom.kw, geom.oh * geom.ow);
                if self.wants(*k) {
                    let gk = slot(grads, *k, co * ckk);
                    kernels::gemm_nt(co, p, ckk, g, cols, gk);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); ckk * p];
                    kernels::gemm_tn(ckk, co, p, self.value(*k), g, &mut dcols);
                    let gx = slot(grads, *x, geom.c * geom.h * geom.w);
                    kernels::col2im(geom, &dcols, gx);
                }
            }
            Op::ConvTranspose2d { x, k, geom } => {
                let sx = self.shape(*x);
                let (ci, hw) = (sx[0], sx[1] * sx[2]);
                let ckk = geom.c * geom.kh * geom.kw;
                let dcols = kernels::im2col(geom, g);
                if self.wants(*x) {
                    let gx = slot(grads, *x, ci * hw);
                    kernels::gemm_nn(ci, ckk, hw, self.value(*k), &dcols, gx);
                }
                if self.wants(*k) {
                    let gk = slot(grads, *k, ci * ckk);
                    kernels::gemm_nt(ci, hw, ckk, self.value(*x), &dcols, gk);
                }
            }
            &Op::Softmax { x, axis } => {
                if self.wants(x) {
                    let (outer, len, inner) = split_axis("softmax", &node.shape, axis).expect("validated");
                    let y = &node.value;
                    let gx = slot(grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..len {
                                s += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, axis } => {
                if self.wants(x) {
                    let (outer, len, inner) = split_axis("log_softmax", &node.shape, axis).expect("validated");
                    let y = &node.value;
                    let gx = slot(grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..len {
                                s += g[at(j)];
                            }
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().expect("rank >= 1");
                let rows = g.len() / d;
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let vg = self.value(*gain);
                    let gx = slot(grads, *x, g.len());
                    let dn = T::of(d as f64);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * vg[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * vg[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            &Op::Reduce { x, kind, axis } => {
                if self.wants(x) {
                    let sx = self.shape(x).to_vec();
                    let gx = slot(grads, x, numel(&sx));
                    match axis {
                        None => {
                            let s = if kind == Reduce::Mean { g[0] / T::of(gx.len() as f64) } else { g[0] };
                            gx.iter_mut().for_each(|v| *v += s);
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis("reduce", &sx, ax).expect("validated");
                            let scale = if kind == Reduce::Mean { T::one() / T::of(len as f64) } else { T::one() };
                            for o in 0..outer {
                                for j in 0..len {
                                    let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                                    for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                        *d += s * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if self.wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_values(g, &node.shape, &inv);
                    add_into(slot(grads, *x, g.len()), &back);
                }
            }
            Op::Concat { xs, axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let gv = slot(grads, v, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                if self.wants(x) {
                    let sx = self.shape(x).to_vec();
                    let (outer, full, inner) = split_axis("slice", &sx, axis).expect("validated");
                    let len = node.shape[axis];
                    let gx = slot(grads, x, numel(&sx));
                    for o in 0..outer {
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
        }
    }

    fn back_binary(&self, kind: BinaryOp, a: Var, b: Var, out: &[usize], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb && matches!(kind, BinaryOp::Add | BinaryOp::Mul) {
            if self.wants(a) {
                let ga = slot(grads, a, g.len());
                match kind {
                    BinaryOp::Add => add_into(ga, g),
                    _ => ga.iter_mut().zip(g).zip(vb).for_each(|((d, &gi), &y)| *d += gi * y),
                }
            }
            if self.wants(b) {
                let gb = slot(grads, b, g.len());
                match kind {
                    BinaryOp::Add => add_into(gb, g),
                    _ => gb.iter_mut().zip(g).zip(va).for_each(|((d, &gi), &x)| *d += gi * x),
                }
            }
            return;
        }
        let (ta, tb) = (broadcast_strides(&sa, out), broadcast_strides(&sb, out));
        if self.wants(a) {
            let ga = slot(grads, a, numel(&sa));
            bcast_iter(out, &ta, &tb, |o, ia, ib| {
                ga[ia] += match kind {
                    BinaryOp::Add | BinaryOp::Sub => g[o],
                    BinaryOp::Mul => g[o] * vb[ib],
                    BinaryOp::Div => g[o] / vb[ib],
                }
            });
        }
        if self.wants(b) {
            let gb = slot(grads, b, numel(&sb));
            bcast_iter(out, &ta, &tb, |o, ia, ib| {
                gb[ib] += match kind {
                    BinaryOp::Add => g[o],
                    BinaryOp::Sub => -g[o],
                    BinaryOp::Mul => g[o] * va[ia],
                    BinaryOp::Div => -g[o] * va[ia] / (vb[ib] * vb[ib]),
                }
            });
        }
    }
}

fn binary_name(kind: BinaryOp) -> &'static str {
    match kind {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_forward<T: Real>(kind: UnaryOp, x: T) -> T {
    match kind {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Tanh => x.tanh(),
    }
}

/// d y / d x given input `x` and forward output `y`.
fn unary_derivative<T: Real>(kind: UnaryOp, x: T, y: T) -> T {
    match kind {
        UnaryOp::Neg => -T::one(),
        UnaryOp::Exp => y,
        UnaryOp::Log => T::one() / x,
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::Gelu => {
            let c = T::of(GELU_C);
            let a = T::of(GELU_A);
            let t = (c * (x + a * x * x * x)).tanh();
            let half = T::of(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
        }
        UnaryOp::Sigmoid => y * (T::one() - y),
        UnaryOp::Tanh => T::one() - y * y,
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k || (span - k) % stride != 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("non-integral output extent: ({n} + 2·{pad} − {k}) / {stride}"),
        });
    }
    Ok((span - k) / stride + 1)
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn permute_values<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut value = vec![T::zero(); x.len()];
    bcast_iter(&out, &strides, &strides, |o, i, _| value[o] = x[i]);
    value
}

/// Visits the output positions of a broadcast in row-major order, passing
/// the matching flat offsets into both operands.
fn bcast_iter(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n = numel(out);
    if rank == 0 {
        if n == 1 {
            f(0, 0, 0);
        }
        return;
    }
    let last = out[rank - 1];
    if last == 0 {
        return;
    }
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(TensorError::InnerDim {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let mut batch = broadcast_shape(if ba.is_empty() { &[1] } else { ba }, if bb.is_empty() { &[1] } else { bb })
            .ok_or_else(|| TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })?;
        let both_plain = ba.is_empty() && bb.is_empty();
        let stride_a = broadcast_strides(if ba.is_empty() { &[1] } else { ba }, &batch);
        let stride_b = broadcast_strides(if bb.is_empty() { &[1] } else { bb }, &batch);
        let mut out_shape = if both_plain { Vec::new() } else { batch.clone() };
        out_shape.extend([m, n]);
        if batch.is_empty() {
            batch.push(1);
        }
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch,
            stride_a,
            stride_b,
            out_shape,
        })
    }

    fn for_each_batch(&self, f: impl FnMut(usize, usize, usize)) {
        bcast_iter(&self.batch, &self.stride_a, &self.stride_b, f);
    }
}
