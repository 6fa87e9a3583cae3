//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value; [`Graph::backward`] walks the nodes in reverse
//! creation order and accumulates gradients into every node that depends on
//! a parameter. Elementwise binary ops require equal shapes, except that
//! either side may be a one-element tensor.

use crate::error::{NumError, Result};
use crate::kernels::{self, Window};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        bias: Option<Var>,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        cols: Vec<T>,
    },
    XCorr {
        z: Var,
        x: Var,
        win: Window,
    },
    Resize(Var),
    GlobalAvgPool(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Pad2d {
        x: Var,
        top: usize,
        left: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::XCorr { .. } => "cross_correlate",
            Op::Resize(_) => "resize_bilinear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Pad2d { .. } => "pad2d",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.numel() == 1 {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return Err(mismatch(op, va.shape(), vb.shape()));
        };
        Ok((out, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.nodes[x.0].value.map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// `x · sigmoid(x)`, composed from primitive ops.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false, None)
    }

    /// Matrix product `op(a) · op(b) (+ bias)` where `op` optionally
    /// transposes the last two axes. Operands are both 2-D, or both 3-D with
    /// the same leading batch extent. `bias` has shape `[n]` and is added to
    /// every output row.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool, bias: Option<Var>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || mismatch("matmul", &sa, &sb);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let batch = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return Err(bad());
            }
            sa[0]
        } else {
            1
        };
        let r = sa.len();
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(bad());
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [n] {
                return Err(mismatch("matmul bias", self.shape(bv), &[n]));
            }
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            for bi in 0..batch {
                let (ra, ca) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rb, cb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[bi * m * k..(bi + 1) * m * k],
                    ra,
                    ca,
                    &db[bi * k * n..(bi + 1) * k * n],
                    rb,
                    cb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
            if let Some(bv) = bias {
                let bd = self.nodes[bv.0].value.data();
                for row in out.chunks_mut(n) {
                    for (o, &bb) in row.iter_mut().zip(bd) {
                        *o += bb;
                    }
                }
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(a) || self.ng(b) || bias.is_some_and(|bv| self.ng(bv));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                bias,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// 2-D convolution (cross-correlation convention) of `x: N×C×H×W` with
    /// `w: O×C×kh×kw`, optional bias `[O]`, symmetric zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(bv), &[sw[0]]));
            }
        }
        let win = Window::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)
            .ok_or_else(|| NumError::invalid("conv2d", format!("kernel {sw:?} does not fit input {sx:?}")))?;
        let (nb, o) = (sx[0], sw[0]);
        let (rows, p) = (win.rows(), win.cols());
        let mut cols = vec![T::zero(); nb * rows * p];
        let mut out = vec![T::zero(); nb * o * p];
        {
            let xd = self.nodes[x.0].value.data();
            let wd = self.nodes[w.0].value.data();
            let plane = sx[1] * sx[2] * sx[3];
            for n in 0..nb {
                let c = &mut cols[n * rows * p..(n + 1) * rows * p];
                kernels::im2col(&xd[n * plane..(n + 1) * plane], &win, c);
                let dst = &mut out[n * o * p..(n + 1) * o * p];
                if let Some(bv) = b {
                    let bd = self.nodes[bv.0].value.data();
                    for (oc, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v = bd[oc]);
                    }
                }
                T::gemm(o, rows, p, T::one(), wd, rows as isize, 1, c, p as isize, 1, T::one(), dst, p as isize, 1);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|bv| self.ng(bv));
        if !ng {
            cols = Vec::new();
        }
        let v = Tensor::new(&[nb, o, win.oh, win.ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, win, cols }, ng))
    }

    /// Per-sample channel-summed cross-correlation:
    /// `out[n,0,u,v] = Σ_{c,i,j} z[n,c,i,j] · x[n,c,u+i,v+j]`.
    pub fn cross_correlate(&mut self, z: Var, x: Var) -> Result<Var> {
        let (sz, sx) = (self.shape(z).to_vec(), self.shape(x).to_vec());
        if sz.len() != 4 || sx.len() != 4 || sz[0] != sx[0] || sz[1] != sx[1] {
            return Err(mismatch("cross_correlate", &sz, &sx));
        }
        if sz[2] > sx[2] || sz[3] > sx[3] {
            return Err(NumError::invalid(
                "cross_correlate",
                format!("template {sz:?} larger than search {sx:?}"),
            ));
        }
        let win = Window::new(sx[1], sx[2], sx[3], sz[2], sz[3], 1, 0).expect("checked above");
        let (nb, p) = (sz[0], win.cols());
        let mut out = vec![T::zero(); nb * p];
        {
            let (zd, xd) = (self.nodes[z.0].value.data(), self.nodes[x.0].value.data());
            let (zs, xs) = (win.rows(), sx[1] * sx[2] * sx[3]);
            for n in 0..nb {
                kernels::xcorr(
                    &zd[n * zs..(n + 1) * zs],
                    &xd[n * xs..(n + 1) * xs],
                    &win,
                    &mut out[n * p..(n + 1) * p],
                );
            }
        }
        let ng = self.ng(z) || self.ng(x);
        let v = Tensor::new(&[nb, 1, win.oh, win.ow], out)?;
        Ok(self.push(v, Op::XCorr { z, x, win }, ng))
    }

    /// Align-corners bilinear resampling of the last two axes.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(NumError::invalid("resize_bilinear", format!("need ≥2 axes, got {sx:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(NumError::invalid("resize_bilinear", "non-positive target size"));
        }
        let r = sx.len();
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let planes: usize = sx[..r - 2].iter().product();
        let (ty, tx) = (kernels::bilinear_taps(h, out_h), kernels::bilinear_taps(w, out_w));
        let mut out = vec![T::zero(); planes * out_h * out_w];
        {
            let xd = self.nodes[x.0].value.data();
            for pl in 0..planes {
                kernels::resize_plane(
                    &xd[pl * h * w..(pl + 1) * h * w],
                    h,
                    w,
                    &ty,
                    &tx,
                    &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w],
                );
            }
        }
        let mut shape = sx[..r - 2].to_vec();
        shape.extend([out_h, out_w]);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Resize(x), ng))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(NumError::invalid("global_avg_pool", format!("need N×C×H×W, got {sx:?}")));
        }
        let hw = sx[2] * sx[3];
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&sx[..2], out)?, Op::GlobalAvgPool(x), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = *t.shape().last().expect("tensors have ≥1 axis");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), ng))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let d = *t.shape().last().expect("tensors have ≥1 axis");
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        let dn = T::of(d as f64);
        for row in out.chunks_mut(d) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = T::one() / (var + T::of(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, inv_std }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(NumError::invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let ok = sp.len() == s0.len() && sp.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &s0, sp));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(NumError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_split(&sx, axis);
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Reorders axes; output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumError::invalid("permute", format!("{perm:?} is not a permutation of {sx:?}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let mut out = vec![T::zero(); self.nodes[x.0].value.numel()];
        kernels::permute(self.nodes[x.0].value.data(), &sx, perm, &mut out, false);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Zero-pads the last two axes.
    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(NumError::invalid("pad2d", format!("need ≥2 axes, got {sx:?}")));
        }
        let r = sx.len();
        let (h, w) = (sx[r - 2], sx[r - 1]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let planes: usize = sx[..r - 2].iter().product();
        let mut out = vec![T::zero(); planes * oh * ow];
        let xd = self.nodes[x.0].value.data();
        for pl in 0..planes {
            for y in 0..h {
                let src = &xd[(pl * h + y) * w..(pl * h + y + 1) * w];
                let o = (pl * oh + y + top) * ow + left;
                out[o..o + w].copy_from_slice(src);
            }
        }
        let mut shape = sx[..r - 2].to_vec();
        shape.extend([oh, ow]);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Pad2d { x, top, left }, ng))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    ///
    /// Fails if `loss` is not a one-element tensor, or if any node created up
    /// to `loss` holds a non-finite value; the error names the first op that
    /// produced one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(NumError::NonScalar(lv.shape().to_vec()));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if !node.value.is_finite() {
                return Err(NumError::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(NumError::NonFinite {
                    op: "backward",
                    node: i,
                });
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Adds `g · coeff` into the gradient of `v`, summing if `v` was
    /// broadcast from a single element.
    fn acc_scaled(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], coeff: impl Fn(usize) -> T) {
        if let Some(dst) = self.slot(grads, v) {
            if dst.len() == g.len() {
                for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                    *d += gi * coeff(i);
                }
            } else {
                let s: T = g.iter().enumerate().map(|(i, &gi)| gi * coeff(i)).sum();
                dst[0] += s;
            }
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let bcast = |d: &[T], j: usize| if d.len() == 1 { d[0] } else { d[j] };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(grads, *a, g, |_| T::one());
                self.acc_scaled(grads, *b, g, |_| T::one());
            }
            Op::Sub(a, b) => {
                self.acc_scaled(grads, *a, g, |_| T::one());
                self.acc_scaled(grads, *b, g, |_| -T::one());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                self.acc_scaled(grads, *a, g, |j| bcast(db, j));
                self.acc_scaled(grads, *b, g, |j| bcast(da, j));
            }
            Op::Neg(x) => self.acc_scaled(grads, *x, g, |_| -T::one()),
            Op::Scale(x, c) => self.acc_scaled(grads, *x, g, |_| *c),
            Op::AddScalar(x) => self.acc_scaled(grads, *x, g, |_| T::one()),
            Op::Tanh(x) => self.acc_scaled(grads, *x, g, |j| T::one() - out[j] * out[j]),
            Op::Sigmoid(x) => self.acc_scaled(grads, *x, g, |j| out[j] * (T::one() - out[j])),
            Op::Log(x) => {
                let dx = val(*x);
                self.acc_scaled(grads, *x, g, |j| T::one() / dx[j]);
            }
            Op::Exp(x) => self.acc_scaled(grads, *x, g, |j| out[j]),
            Op::Clamp(x, lo, hi) => {
                let dx = val(*x);
                self.acc_scaled(grads, *x, g, |j| {
                    if dx[j] >= *lo && dx[j] <= *hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum(x) => {
                if let Some(dst) = self.slot(grads, *x) {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dst) = self.slot(grads, *x) {
                    let s = g[0] / T::of(dst.len() as f64);
                    dst.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MatMul {
                a,
                b,
                bias,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..*batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &db[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // logical opB(B) as (k×n) strides
                        let (rb, cb) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                        if *ta {
                            // dA_stored (k×m) = opB(B) · dCᵀ
                            T::gemm(k, n, m, T::one(), bb, rb, cb, gb, 1, n as isize, T::one(), dst, m as isize, 1);
                        } else {
                            // dA (m×k) = dC · opB(B)ᵀ
                            T::gemm(m, n, k, T::one(), gb, n as isize, 1, bb, cb, rb, T::one(), dst, k as isize, 1);
                        }
                    }
                }
                if let Some(gbv) = self.slot(grads, *b) {
                    for bi in 0..*batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &da[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gbv[bi * k * n..(bi + 1) * k * n];
                        // logical opA(A) as (m×k) strides
                        let (ra, ca) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                        if *tb {
                            // dB_stored (n×k) = dCᵀ · opA(A)
                            T::gemm(n, m, k, T::one(), gc, 1, n as isize, aa, ra, ca, T::one(), dst, k as isize, 1);
                        } else {
                            // dB (k×n) = opA(A)ᵀ · dC
                            T::gemm(k, m, n, T::one(), aa, ca, ra, gc, n as isize, 1, T::one(), dst, n as isize, 1);
                        }
                    }
                }
                if let Some(bv) = bias {
                    if let Some(gbias) = self.slot(grads, *bv) {
                        for row in g.chunks(n) {
                            for (d, &gi) in gbias.iter_mut().zip(row) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, win, cols } => {
                let o = self.nodes[w.0].value.shape()[0];
                let (rows, p) = (win.rows(), win.cols());
                let nb = node.value.shape()[0];
                let plane = win.c * win.h * win.w;
                if let Some(gw) = self.slot(grads, *w) {
                    for n in 0..nb {
                        let gn = &g[n * o * p..(n + 1) * o * p];
                        let cn = &cols[n * rows * p..(n + 1) * rows * p];
                        T::gemm(o, p, rows, T::one(), gn, p as isize, 1, cn, 1, p as isize, T::one(), gw, rows as isize, 1);
                    }
                }
                if let Some(bv) = b {
                    if let Some(gb) = self.slot(grads, *bv) {
                        for n in 0..nb {
                            for (oc, row) in g[n * o * p..(n + 1) * o * p].chunks(p).enumerate() {
                                gb[oc] += row.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let wd = val(*w);
                    let mut dcols = vec![T::zero(); rows * p];
                    let gx = self.slot(grads, *x).expect("needs_grad checked");
                    for n in 0..nb {
                        let gn = &g[n * o * p..(n + 1) * o * p];
                        T::gemm(rows, o, p, T::one(), wd, 1, rows as isize, gn, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                        kernels::col2im(&dcols, win, &mut gx[n * plane..(n + 1) * plane]);
                    }
                }
            }
            Op::XCorr { z, x, win } => {
                let (zd, xd) = (val(*z), val(*x));
                let (zs, xs, p) = (win.rows(), win.c * win.h * win.w, win.cols());
                let nb = node.value.shape()[0];
                let mut gz = self.slot(grads, *z).map(std::mem::take);
                let mut gx = self.slot(grads, *x).map(std::mem::take);
                for n in 0..nb {
                    kernels::xcorr_backward(
                        &zd[n * zs..(n + 1) * zs],
                        &xd[n * xs..(n + 1) * xs],
                        win,
                        &g[n * p..(n + 1) * p],
                        gz.as_mut().map(|v| &mut v[n * zs..(n + 1) * zs]),
                        gx.as_mut().map(|v| &mut v[n * xs..(n + 1) * xs]),
                    );
                }
                if let Some(v) = gz {
                    grads[z.0] = Some(v);
                }
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
            }
            Op::Resize(x) => {
                let sx = self.nodes[x.0].value.shape();
                let r = sx.len();
                let (h, w) = (sx[r - 2], sx[r - 1]);
                let so = node.value.shape();
                let (oh, ow) = (so[r - 2], so[r - 1]);
                let (ty, tx) = (kernels::bilinear_taps(h, oh), kernels::bilinear_taps(w, ow));
                if let Some(gx) = self.slot(grads, *x) {
                    for (pl, go) in g.chunks(oh * ow).enumerate() {
                        kernels::resize_plane_backward(go, w, &ty, &tx, &mut gx[pl * h * w..(pl + 1) * h * w]);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.nodes[x.0].value.shape();
                let hw = sx[2] * sx[3];
                let inv = T::of(1.0 / hw as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, chunk) in gx.chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += g[j] * inv);
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().expect("≥1 axis");
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dst, y), gr) in gx.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d)) {
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let d = *node.value.shape().last().expect("≥1 axis");
                let dn = T::of(d as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, ((dst, xh), gr)) in gx.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d)).enumerate() {
                        let mg = gr.iter().copied().sum::<T>() / dn;
                        let mgx = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dst[j] += inv_std[r] * (gr[j] - mg - xh[j] * mgx);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let so = node.value.shape();
                let (outer, total, inner) = axis_split(so, *axis);
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                            for (d, &s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.nodes[x.0].value.shape();
                let (outer, dim, inner) = axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        for (d, &s) in gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_scaled(grads, *x, g, |_| T::one()),
            Op::Permute { x, perm } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::permute(g, &sx, perm, gx, true);
                }
            }
            Op::Pad2d { x, top, left } => {
                let sx = self.nodes[x.0].value.shape();
                let r = sx.len();
                let (h, w) = (sx[r - 2], sx[r - 1]);
                let so = node.value.shape();
                let (oh, ow) = (so[r - 2], so[r - 1]);
                if let Some(gx) = self.slot(grads, *x) {
                    let planes = gx.len() / (h * w);
                    for pl in 0..planes {
                        for y in 0..h {
                            let o = (pl * oh + y + top) * ow + left;
                            for (d, &s) in gx[(pl * h + y) * w..(pl * h + y + 1) * w].iter_mut().zip(&g[o..o + w]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
