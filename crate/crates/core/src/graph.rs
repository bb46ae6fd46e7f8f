//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse, routes
//! gradients to inputs and deposits parameter gradients into the
//! [`ParamStore`]. Tapes are never reused: build a new graph per step.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, Dims4};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;
pub const SD_EPS: f64 = 1e-6;
pub const LAMBDA_FLOOR: f64 = 1e-3;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Constant,
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var },
    TransposeLast2 { x: Var },
    SoftmaxLast { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    AddBatchBroadcast { x: Var, y: Var },
    AddChannelMap { x: Var, m: Var },
    AddChannelBias { x: Var, v: Var },
    ScaleChannels { x: Var, s: Var },
    GlobalAvgPool { x: Var },
    UpsampleNearest { x: Var, factor: usize },
    ConcatChannels { a: Var, b: Var },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    Dice { p: Var, gt: Tensor<T> },
    Bce { p: Var, gt: Tensor<T> },
    ShapeDistance { p: Var, dmap: Tensor<T> },
    Uncertainty { loss: Var, lambda: Var },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::TransposeLast2 { .. } => "transpose",
            Op::SoftmaxLast { .. } => "softmax",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::AddBatchBroadcast { .. } => "add_batch_broadcast",
            Op::AddChannelMap { .. } => "add_channel_map",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::GlobalAvgPool { .. } => "adaptive_avg_pool",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Mse { .. } => "mse",
            Op::Dice { .. } => "dice",
            Op::Bce { .. } => "bce",
            Op::ShapeDistance { .. } => "shape_distance",
            Op::Uncertainty { .. } => "uncertainty",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    overrides: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<Dims4> {
    Dims4::from_shape(t.shape())
        .ok_or_else(|| Error::Shape { op, detail: format!("expected rank-4 tensor, got {:?}", t.shape()) })
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, overrides: HashMap::new() }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, overrides: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Constant, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Input, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Routes later [`Graph::param`] lookups of `id` to `v`, so a parameter
    /// can be driven as an input (finite-difference checks).
    pub fn override_param(&mut self, id: ParamId, v: Var) {
        self.overrides.insert(id, v);
    }

    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.overrides.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = !p.frozen && self.grad_enabled;
        self.nodes.push(Node { value: p.tensor.cast(), op: Op::Param(id), requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, b, stride, pad, false)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &g,
        );
        let t = Tensor::new(&[g.x.n, g.cout, g.oh, g.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = self.conv_geom(x, w, b, stride, pad, true)?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &g,
        );
        let t = Tensor::new(&[g.x.n, g.cout, g.oh, g.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::ConvT2d { x, w, b, stride, pad }, rg)
    }

    fn conv_geom(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let op = if transposed { "conv_transpose2d" } else { "conv2d" };
        let xd = dims4(op, self.value(x))?;
        let wd = dims4(op, self.value(w))?;
        let (cin_w, cout) = if transposed { (wd.n, wd.c) } else { (wd.c, wd.n) };
        if cin_w != xd.c {
            return shape_err(op, format!("input has {} channels, weight expects {}", xd.c, cin_w));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return shape_err(op, format!("bias length {} != {} output channels", self.value(b).len(), cout));
            }
        }
        let (kh, kw) = (wd.h, wd.w);
        let (oh, ow) = if transposed {
            (
                kernels::conv_transpose2d_out_extent(xd.h, kh, stride, pad),
                kernels::conv_transpose2d_out_extent(xd.w, kw, stride, pad),
            )
        } else {
            (
                kernels::conv2d_out_extent(xd.h, kh, stride, pad),
                kernels::conv2d_out_extent(xd.w, kw, stride, pad),
            )
        };
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return shape_err(op, format!("kernel {}x{} does not fit input {}x{} (stride {}, pad {})", kh, kw, xd.h, xd.w, stride, pad));
        };
        Ok(ConvGeom { x: xd, cout, kh, kw, stride, pad, oh, ow })
    }

    /// `x[N, D] · w[D, E] + b[E]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[n, d], &[d2, e]) = (xs, ws) else {
            return shape_err("linear", format!("expected [N,D]·[D,E], got {:?}·{:?}", xs, ws));
        };
        if d != d2 {
            return shape_err("linear", format!("inner dimensions {} vs {}", d, d2));
        }
        if let Some(b) = b {
            if self.value(b).len() != e {
                return shape_err("linear", format!("bias length {} != {}", self.value(b).len(), e));
            }
        }
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            d,
            e,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, e], out)?, Op::Linear { x, w, b }, rg)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[bs, m, k], &[bs2, k2, n]) = (sa, sb) else {
            return shape_err("bmm", format!("expected rank-3 operands, got {:?} and {:?}", sa, sb));
        };
        if bs != bs2 || k != k2 {
            return shape_err("bmm", format!("{:?} x {:?}", sa, sb));
        }
        let out = kernels::bmm_forward(self.value(a).data(), self.value(b).data(), bs, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[bs, m, n], out)?, Op::Bmm { a, b }, rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let &[bs, m, n] = self.shape(x) else {
            return shape_err("transpose", format!("expected rank 3, got {:?}", self.shape(x)));
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for p in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out[p * m * n + j * m + i] = src[p * m * n + i * n + j];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[bs, n, m], out)?, Op::TransposeLast2 { x }, rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return shape_err("softmax", "scalar input");
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, orow) in src.chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
            let mut z = 0.0f64;
            let mut exps = Vec::with_capacity(n);
            for &v in row {
                let e = (v.as_f64() - mx).exp();
                exps.push(e);
                z += e;
            }
            for (o, e) in orow.iter_mut().zip(exps) {
                *o = T::of(e / z);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::SoftmaxLast { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid::<T>);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let sv = T::of(s);
        let t = self.value(x).map(|v| v * sv);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let sv = T::of(s);
        let t = self.value(x).map(|v| v + sv);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    /// Adds `y` (shape = `x.shape[1..]`) to every batch item of `x`.
    pub fn add_batch_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.is_empty() || &sx[1..] != sy {
            return shape_err("add_batch_broadcast", format!("{:?} + {:?}", sx, sy));
        }
        let inner = self.value(y).len();
        let yd = self.value(y).data();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(yd) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(t, Op::AddBatchBroadcast { x, y }, rg)
    }

    /// `x[B,C,H,W] + m[B,1,H,W]`, the map repeated over channels.
    pub fn add_channel_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let xd = dims4("add_channel_map", self.value(x))?;
        let md = dims4("add_channel_map", self.value(m))?;
        if md.n != xd.n || md.c != 1 || md.h != xd.h || md.w != xd.w {
            return shape_err("add_channel_map", format!("{:?} + {:?}", xd, md));
        }
        let plane = xd.plane();
        let md_data = self.value(m).data();
        let mut t = self.value(x).clone();
        for b in 0..xd.n {
            let mp = &md_data[b * plane..(b + 1) * plane];
            for c in 0..xd.c {
                let off = (b * xd.c + c) * plane;
                for (o, &v) in t.data_mut()[off..off + plane].iter_mut().zip(mp) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(m);
        self.push(t, Op::AddChannelMap { x, m }, rg)
    }

    /// `x[B,C,H,W] + v[B,C]`, each channel offset by a constant.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Result<Var> {
        let xd = dims4("add_channel_bias", self.value(x))?;
        if self.value(v).len() != xd.n * xd.c {
            return shape_err("add_channel_bias", format!("{:?} + {:?}", xd, self.shape(v)));
        }
        let plane = xd.plane();
        let vd = self.value(v).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            for o in chunk {
                *o += vd[i];
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::AddChannelBias { x, v }, rg)
    }

    /// `x[B,C,H,W] ⊗ s[B,C(,1,1)]`: every channel plane scaled by its own weight.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xd = dims4("scale_channels", self.value(x))?;
        if self.value(s).len() != xd.n * xd.c {
            return shape_err("scale_channels", format!("{:?} ⊗ {:?}", xd, self.shape(s)));
        }
        let plane = xd.plane();
        let sd = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            for o in chunk {
                *o *= sd[i];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::ScaleChannels { x, s }, rg)
    }

    /// Global adaptive average pooling to `[B, C, 1, 1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xd = dims4("adaptive_avg_pool", self.value(x))?;
        let plane = xd.plane();
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| T::of(c.iter().map(|&v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[xd.n, xd.c, 1, 1], out)?, Op::GlobalAvgPool { x }, rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xd = dims4("upsample_nearest", self.value(x))?;
        if factor == 0 {
            return shape_err("upsample_nearest", "factor 0");
        }
        let (oh, ow) = (xd.h * factor, xd.w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); xd.n * xd.c * oh * ow];
        for p in 0..xd.n * xd.c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = src[p * xd.plane() + (y / factor) * xd.w + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[xd.n, xd.c, oh, ow], out)?, Op::UpsampleNearest { x, factor }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = dims4("concat_channels", self.value(a))?;
        let bd = dims4("concat_channels", self.value(b))?;
        if ad.n != bd.n || ad.h != bd.h || ad.w != bd.w {
            return shape_err("concat_channels", format!("{:?} with {:?}", ad, bd));
        }
        let plane = ad.plane();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..ad.n {
            out.extend_from_slice(&av[n * ad.c * plane..(n + 1) * ad.c * plane]);
            out.extend_from_slice(&bv[n * bd.c * plane..(n + 1) * bd.c * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[ad.n, ad.c + bd.c, ad.h, ad.w], out)?, Op::ConcatChannels { a, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = T::of(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = T::of(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
        let v = T::of(s / ta.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::Mse { a, b }, rg)
    }

    /// `1 − 2Σ p·g / (Σ p² + Σ g² + ε)` over every element.
    pub fn dice_loss(&mut self, p: Var, gt: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != gt.shape() {
            return shape_err("dice", format!("{:?} vs {:?}", self.shape(p), gt.shape()));
        }
        let (i, u) = dice_terms(self.value(p).data(), gt.data());
        let v = T::of(1.0 - 2.0 * i / u);
        let rg = self.rg(p);
        self.push(Tensor::scalar(v), Op::Dice { p, gt: gt.clone() }, rg)
    }

    /// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, gt: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != gt.shape() {
            return shape_err("bce", format!("{:?} vs {:?}", self.shape(p), gt.shape()));
        }
        let pd = self.value(p).data();
        let mut s = 0.0f64;
        for (&pv, &g) in pd.iter().zip(gt.data()) {
            let pc = pv.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let g = g.as_f64();
            s -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        }
        let v = T::of(s / pd.len() as f64);
        let rg = self.rg(p);
        self.push(Tensor::scalar(v), Op::Bce { p, gt: gt.clone() }, rg)
    }

    /// Mean over `(sample, channel)` of `Σ|D − p| / max(Σ p, ε)`.
    pub fn shape_distance_loss(&mut self, p: Var, dmap: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != dmap.shape() {
            return shape_err("shape_distance", format!("{:?} vs {:?}", self.shape(p), dmap.shape()));
        }
        let pd = dims4("shape_distance", self.value(p))?;
        let plane = pd.plane();
        let mut total = 0.0f64;
        for (pc, dc) in self.value(p).data().chunks(plane).zip(dmap.data().chunks(plane)) {
            let (num, den) = sd_terms(pc, dc);
            total += num / den;
        }
        let v = T::of(total / (pd.n * pd.c) as f64);
        let rg = self.rg(p);
        self.push(Tensor::scalar(v), Op::ShapeDistance { p, dmap: dmap.clone() }, rg)
    }

    /// `L / (2λ²) + ln(1 + λ²)` with `|λ|` floored at [`LAMBDA_FLOOR`].
    pub fn uncertainty_term(&mut self, loss: Var, lambda: Var) -> Result<Var> {
        if self.value(loss).len() != 1 || self.value(lambda).len() != 1 {
            return shape_err("uncertainty", "loss and lambda must be scalars");
        }
        let l = self.value(loss).item().as_f64();
        let lam = floored_lambda(self.value(lambda).item().as_f64());
        let v = T::of(l / (2.0 * lam * lam) + (1.0 + lam * lam).ln());
        let rg = self.rg(loss) || self.rg(lambda);
        self.push(Tensor::scalar(v), Op::Uncertainty { loss, lambda }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store` (accumulating across calls); input-leaf gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on a no-grad graph".into()));
        }
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) | Op::Constant => {
                    grads[i] = Some(g);
                }
                op => self.backprop(op, i, &g, &mut grads),
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                let g32: Vec<f32> = g.iter().map(|v| v.as_f64() as f32).collect();
                store.accumulate_grad(*id, &g32);
            }
        }
        // only leaves keep their gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(g) {
                    *e += d;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, op: &Op<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match *op {
            Op::Constant | Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = self.conv_geom(x, w, b, stride, pad, false).expect("validated in forward");
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(x).data(), self.value(w).data(), g, &geom, self.rg(x));
                if let Some(dx) = dx {
                    self.acc(grads, x, dx);
                }
                self.acc(grads, w, dw);
                if let Some(b) = b {
                    self.acc(grads, b, db);
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let geom = self.conv_geom(x, w, b, stride, pad, true).expect("validated in forward");
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    &geom,
                    self.rg(x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, x, dx);
                }
                self.acc(grads, w, dw);
                if let Some(b) = b {
                    self.acc(grads, b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let e = self.shape(w)[1];
                let (dx, dw, db) = kernels::linear_backward(self.value(x).data(), self.value(w).data(), g, n, d, e);
                self.acc(grads, x, dx);
                self.acc(grads, w, dw);
                if let Some(b) = b {
                    self.acc(grads, b, db);
                }
            }
            Op::Bmm { a, b } => {
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                let (da, db) = kernels::bmm_backward(self.value(a).data(), self.value(b).data(), g, bs, m, k, n);
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::TransposeLast2 { x } => {
                let (bs, m, n) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let mut dx = vec![T::zero(); g.len()];
                for p in 0..bs {
                    for i in 0..m {
                        for j in 0..n {
                            dx[p * m * n + i * n + j] = g[p * m * n + j * m + i];
                        }
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::SoftmaxLast { x } => {
                let n = *out.shape().last().expect("rank >= 1");
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in out.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&y, &gv)| y.as_f64() * gv.as_f64()).sum();
                    for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = T::of(y.as_f64() * (gv.as_f64() - dot));
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::Relu { x } => {
                let dx = self.value(x).data().iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                self.acc(grads, x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = out.data().iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.acc(grads, x, dx);
            }
            Op::Add { a, b } => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.acc(grads, a, g.to_vec());
                self.acc(grads, b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let da = g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(self.value(a).data()).map(|(&gv, &av)| gv * av).collect();
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::Scale { x, s } => {
                let sv = T::of(s);
                self.acc(grads, x, g.iter().map(|&v| v * sv).collect());
            }
            Op::AddScalar { x } => {
                self.acc(grads, x, g.to_vec());
            }
            Op::AddBatchBroadcast { x, y } => {
                self.acc(grads, x, g.to_vec());
                let inner = self.value(y).len();
                let mut dy = vec![0.0f64; inner];
                for chunk in g.chunks(inner) {
                    for (d, &v) in dy.iter_mut().zip(chunk) {
                        *d += v.as_f64();
                    }
                }
                self.acc(grads, y, dy.into_iter().map(T::of).collect());
            }
            Op::AddChannelMap { x, m } => {
                self.acc(grads, x, g.to_vec());
                let xd = Dims4::from_shape(self.shape(x)).expect("rank 4");
                let plane = xd.plane();
                let mut dm = vec![T::zero(); xd.n * plane];
                for b in 0..xd.n {
                    for c in 0..xd.c {
                        let off = (b * xd.c + c) * plane;
                        for (d, &v) in dm[b * plane..(b + 1) * plane].iter_mut().zip(&g[off..off + plane]) {
                            *d += v;
                        }
                    }
                }
                self.acc(grads, m, dm);
            }
            Op::AddChannelBias { x, v } => {
                self.acc(grads, x, g.to_vec());
                let plane = Dims4::from_shape(self.shape(x)).expect("rank 4").plane();
                let dv = g.chunks(plane).map(|c| T::of(c.iter().map(|&v| v.as_f64()).sum::<f64>())).collect();
                self.acc(grads, v, dv);
            }
            Op::ScaleChannels { x, s } => {
                let plane = Dims4::from_shape(self.shape(x)).expect("rank 4").plane();
                let sd = self.value(s).data();
                let xv = self.value(x).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut ds = vec![T::zero(); sd.len()];
                for (i, (gc, xc)) in g.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                    for (d, &gv) in dx[i * plane..(i + 1) * plane].iter_mut().zip(gc) {
                        *d = gv * sd[i];
                    }
                    ds[i] = T::of(gc.iter().zip(xc).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>());
                }
                self.acc(grads, x, dx);
                self.acc(grads, s, ds);
            }
            Op::GlobalAvgPool { x } => {
                let plane = Dims4::from_shape(self.shape(x)).expect("rank 4").plane();
                let mut dx = vec![T::zero(); self.value(x).len()];
                for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                    chunk.fill(T::of(g[i].as_f64() / plane as f64));
                }
                self.acc(grads, x, dx);
            }
            Op::UpsampleNearest { x, factor } => {
                let xd = Dims4::from_shape(self.shape(x)).expect("rank 4");
                let (oh, ow) = (xd.h * factor, xd.w * factor);
                let mut dx = vec![T::zero(); xd.numel()];
                for p in 0..xd.n * xd.c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[p * xd.plane() + (y / factor) * xd.w + xx / factor] += g[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.acc(grads, x, dx);
            }
            Op::ConcatChannels { a, b } => {
                let ad = Dims4::from_shape(self.shape(a)).expect("rank 4");
                let bd = Dims4::from_shape(self.shape(b)).expect("rank 4");
                let plane = ad.plane();
                let mut da = Vec::with_capacity(ad.numel());
                let mut db = Vec::with_capacity(bd.numel());
                let stride = (ad.c + bd.c) * plane;
                for n in 0..ad.n {
                    da.extend_from_slice(&g[n * stride..n * stride + ad.c * plane]);
                    db.extend_from_slice(&g[n * stride + ad.c * plane..(n + 1) * stride]);
                }
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::Reshape { x } => self.acc(grads, x, g.to_vec()),
            Op::Sum { x } => {
                self.acc(grads, x, vec![g[0]; self.value(x).len()]);
            }
            Op::Mean { x } => {
                let n = self.value(x).len();
                self.acc(grads, x, vec![T::of(g[0].as_f64() / n as f64); n]);
            }
            Op::Mse { a, b } => {
                let n = self.value(a).len() as f64;
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&x, &y)| T::of(2.0 * (x.as_f64() - y.as_f64()) / n * g[0].as_f64()))
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::Dice { p, ref gt } => {
                let pd = self.value(p).data();
                let (inter, u) = dice_terms(pd, gt.data());
                let dp = pd
                    .iter()
                    .zip(gt.data())
                    .map(|(&pv, &gv)| {
                        let d = -2.0 * gv.as_f64() / u + 4.0 * inter * pv.as_f64() / (u * u);
                        T::of(d * g[0].as_f64())
                    })
                    .collect();
                self.acc(grads, p, dp);
            }
            Op::Bce { p, ref gt } => {
                let pd = self.value(p).data();
                let n = pd.len() as f64;
                let dp = pd
                    .iter()
                    .zip(gt.data())
                    .map(|(&pv, &gv)| {
                        let (pv, gv) = (pv.as_f64(), gv.as_f64());
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                            return T::zero();
                        }
                        let d = -(gv / pv - (1.0 - gv) / (1.0 - pv)) / n;
                        T::of(d * g[0].as_f64())
                    })
                    .collect();
                self.acc(grads, p, dp);
            }
            Op::ShapeDistance { p, ref dmap } => {
                let pd = Dims4::from_shape(self.shape(p)).expect("rank 4");
                let plane = pd.plane();
                let count = (pd.n * pd.c) as f64;
                let mut dp = vec![T::zero(); pd.numel()];
                for ((pc, dc), out) in self
                    .value(p)
                    .data()
                    .chunks(plane)
                    .zip(dmap.data().chunks(plane))
                    .zip(dp.chunks_mut(plane))
                {
                    let (num, den) = sd_terms(pc, dc);
                    let floored = pc.iter().map(|&v| v.as_f64()).sum::<f64>() <= SD_EPS;
                    for ((o, &pv), &dv) in out.iter_mut().zip(pc).zip(dc) {
                        let diff = pv.as_f64() - dv.as_f64();
                        let sign = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                        let mut d = sign / den;
                        if !floored {
                            d -= num / (den * den);
                        }
                        *o = T::of(d / count * g[0].as_f64());
                    }
                }
                self.acc(grads, p, dp);
            }
            Op::Uncertainty { loss, lambda } => {
                let l = self.value(loss).item().as_f64();
                let raw = self.value(lambda).item().as_f64();
                let lam = floored_lambda(raw);
                let dl = 1.0 / (2.0 * lam * lam);
                let dlam = if raw.abs() >= LAMBDA_FLOOR {
                    -l / (lam * lam * lam) + 2.0 * lam / (1.0 + lam * lam)
                } else {
                    0.0
                };
                self.acc(grads, loss, vec![T::of(dl * g[0].as_f64())]);
                self.acc(grads, lambda, vec![T::of(dlam * g[0].as_f64())]);
            }
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn floored_lambda(raw: f64) -> f64 {
    if raw.abs() >= LAMBDA_FLOOR {
        raw
    } else if raw < 0.0 {
        -LAMBDA_FLOOR
    } else {
        LAMBDA_FLOOR
    }
}

fn dice_terms<T: Real>(p: &[T], g: &[T]) -> (f64, f64) {
    let mut inter = 0.0f64;
    let mut u = DICE_EPS;
    for (&pv, &gv) in p.iter().zip(g) {
        let (pv, gv) = (pv.as_f64(), gv.as_f64());
        inter += pv * gv;
        u += pv * pv + gv * gv;
    }
    (inter, u)
}

/// `(Σ|D − p|, max(Σp, ε))` for one channel plane.
fn sd_terms<T: Real>(p: &[T], d: &[T]) -> (f64, f64) {
    let mut num = 0.0f64;
    let mut s = 0.0f64;
    for (&pv, &dv) in p.iter().zip(d) {
        num += (dv.as_f64() - pv.as_f64()).abs();
        s += pv.as_f64();
    }
    (num, s.max(SD_EPS))
}
