//! Reverse-mode gradient engine over a small closed set of image
//! primitives — enough to differentiate every restoration tool and every
//! training loss with respect to tool parameters.
//!
//! Values on the tape are either whole images (all channels, flattened) or
//! scalars. Parameters live in a [`ParamStore`]; `backward` accumulates
//! ∂loss/∂param into each reachable parameter's `grad` buffer, so callers
//! zero grads explicitly between passes.
//!
//! Primitive inventory (forward / adjoint pairs, all exact):
//! conv2d_same (learnable or constant kernel, replicate padding), affine,
//! power_eps, blend (sigmoid-gated), clamp01 (interior-pass), sub, add,
//! scale, abs_mean, square_mean, haze_inv (scattering inversion with
//! logit-parameterized transmission), power_gain (softplus-bounded gamma
//! with gain), inv_sat (scalar c/(s+c)), down2 (2×2 box).

use crate::error::{Error, Result};
use crate::image::Image;

pub const POWER_EPS_OFFSET: f64 = 1e-3;

/// Learnable parameter vector with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Owning container for parameters; tapes reference parameters by id.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Vec<f64>) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }

    /// Flatten all gradients in id order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Flatten all values in id order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Write back a flat value vector (inverse of `flat_values`).
    pub fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let len = p.value.len();
            p.value.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        assert_eq!(off, flat.len());
    }
}

/// A plane stack: image payload on the tape (all channels flattened).
#[derive(Debug, Clone, PartialEq)]
pub struct Buf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Buf {
    pub fn from_image(img: &Image) -> Buf {
        Buf {
            height: img.height(),
            width: img.width(),
            channels: img.channels(),
            data: img.data().to_vec(),
        }
    }

    /// Convert to an `Image`, clamping into [0,1].
    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::from_clamped(self.height, self.width, self.channels, data)
    }

    pub fn zeros_like(&self) -> Buf {
        Buf { height: self.height, width: self.width, channels: self.channels, data: vec![0.0; self.data.len()] }
    }

    fn same_shape(&self, other: &Buf) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Img(Buf),
    Scalar(f64),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(s) => Some(*s),
            _ => None,
        }
    }

    pub fn as_img(&self) -> Option<&Buf> {
        match self {
            Value::Img(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Kernel binding for conv nodes: learnable parameter or fixed weights.
#[derive(Debug, Clone)]
pub enum KernelSource {
    Param(ParamId),
    Const(Vec<f64>),
}

#[derive(Debug, Clone)]
enum Op {
    LeafImg,
    LeafScalar,
    Conv2dSame { input: NodeId, kernel: KernelSource, kh: usize, kw: usize, normalized: bool },
    Affine { input: NodeId, a: ParamId, b: ParamId },
    PowerEps { input: NodeId, gamma: ParamId },
    Blend { x: NodeId, y: NodeId, alpha: ParamId },
    Clamp01 { input: NodeId },
    Sub { x: NodeId, y: NodeId },
    Add { x: NodeId, y: NodeId },
    Scale { input: NodeId, c: f64 },
    AbsMean { input: NodeId },
    SquareMean { input: NodeId },
    HazeInv { input: NodeId, p: ParamId },
    PowerGain { input: NodeId, p: ParamId },
    InvSat { input: NodeId, c: f64 },
    Down2 { input: NodeId },
}

/// Append-only computation record; node values are cached at build time.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Value>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub fn softplus(x: f64) -> f64 {
    // Numerically stable log(1+e^x).
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.values[id.0]
    }

    pub fn output_image(&self, id: NodeId) -> Result<Image> {
        self.values[id.0]
            .as_img()
            .map(|b| b.to_image())
            .ok_or_else(|| Error::Shape("node is not an image".into()))
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        NodeId(self.values.len() - 1)
    }

    fn img(&self, id: NodeId) -> &Buf {
        self.values[id.0].as_img().expect("image-valued node expected")
    }

    pub fn leaf_image(&mut self, img: &Image) -> NodeId {
        self.push(Op::LeafImg, Value::Img(Buf::from_image(img)))
    }

    pub fn leaf_buf(&mut self, buf: Buf) -> NodeId {
        self.push(Op::LeafImg, Value::Img(buf))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::LeafScalar, Value::Scalar(v))
    }

    pub fn conv2d_same(
        &mut self,
        input: NodeId,
        kernel: KernelSource,
        kh: usize,
        kw: usize,
        store: &ParamStore,
    ) -> Result<NodeId> {
        self.conv2d_impl(input, kernel, kh, kw, store, false)
    }

    /// Convolution with the kernel rescaled to unit sum, so the filter can
    /// never shift overall brightness. Gradients flow through the
    /// normalization.
    pub fn conv2d_same_norm(
        &mut self,
        input: NodeId,
        kernel: KernelSource,
        kh: usize,
        kw: usize,
        store: &ParamStore,
    ) -> Result<NodeId> {
        self.conv2d_impl(input, kernel, kh, kw, store, true)
    }

    fn conv2d_impl(
        &mut self,
        input: NodeId,
        kernel: KernelSource,
        kh: usize,
        kw: usize,
        store: &ParamStore,
        normalized: bool,
    ) -> Result<NodeId> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Param(format!("kernel {kh}x{kw} must be odd-sized")));
        }
        let weights = match &kernel {
            KernelSource::Param(id) => store.get(*id).value.clone(),
            KernelSource::Const(w) => w.clone(),
        };
        if weights.len() != kh * kw {
            return Err(Error::Shape(format!(
                "kernel length {} does not match {kh}x{kw}",
                weights.len()
            )));
        }
        let out = if normalized {
            forward::conv2d_same_norm(self.img(input), &weights, kh, kw)
        } else {
            forward::conv2d_same(self.img(input), &weights, kh, kw)
        };
        Ok(self.push(Op::Conv2dSame { input, kernel, kh, kw, normalized }, Value::Img(out)))
    }

    pub fn affine(&mut self, input: NodeId, a: ParamId, b: ParamId, store: &ParamStore) -> NodeId {
        let av = store.get(a).value[0];
        let bv = store.get(b).value[0];
        let out = forward::affine(self.img(input), av, bv);
        self.push(Op::Affine { input, a, b }, Value::Img(out))
    }

    pub fn power_eps(&mut self, input: NodeId, gamma: ParamId, store: &ParamStore) -> NodeId {
        let g = store.get(gamma).value[0];
        let out = forward::power_eps(self.img(input), g);
        self.push(Op::PowerEps { input, gamma }, Value::Img(out))
    }

    pub fn blend(&mut self, x: NodeId, y: NodeId, alpha: ParamId, store: &ParamStore) -> Result<NodeId> {
        if !self.img(x).same_shape(self.img(y)) {
            return Err(Error::Shape("blend operands differ in shape".into()));
        }
        let a = store.get(alpha).value[0];
        let out = forward::blend(self.img(x), self.img(y), a);
        Ok(self.push(Op::Blend { x, y, alpha }, Value::Img(out)))
    }

    pub fn clamp01(&mut self, input: NodeId) -> NodeId {
        let out = forward::clamp01(self.img(input));
        self.push(Op::Clamp01 { input }, Value::Img(out))
    }

    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let v = match (&self.values[x.0], &self.values[y.0]) {
            (Value::Img(a), Value::Img(b)) => {
                if !a.same_shape(b) {
                    return Err(Error::Shape("sub operands differ in shape".into()));
                }
                let mut out = a.clone();
                for (o, bv) in out.data.iter_mut().zip(&b.data) {
                    *o -= bv;
                }
                Value::Img(out)
            }
            (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a - b),
            _ => return Err(Error::Shape("sub operands must both be images or both scalars".into())),
        };
        Ok(self.push(Op::Sub { x, y }, v))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let v = match (&self.values[x.0], &self.values[y.0]) {
            (Value::Img(a), Value::Img(b)) => {
                if !a.same_shape(b) {
                    return Err(Error::Shape("add operands differ in shape".into()));
                }
                let mut out = a.clone();
                for (o, bv) in out.data.iter_mut().zip(&b.data) {
                    *o += bv;
                }
                Value::Img(out)
            }
            (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a + b),
            _ => return Err(Error::Shape("add operands must both be images or both scalars".into())),
        };
        Ok(self.push(Op::Add { x, y }, v))
    }

    pub fn scale(&mut self, input: NodeId, c: f64) -> NodeId {
        let v = match &self.values[input.0] {
            Value::Img(b) => {
                let mut out = b.clone();
                for o in &mut out.data {
                    *o *= c;
                }
                Value::Img(out)
            }
            Value::Scalar(s) => Value::Scalar(s * c),
        };
        self.push(Op::Scale { input, c }, v)
    }

    pub fn abs_mean(&mut self, input: NodeId) -> NodeId {
        let b = self.img(input);
        let m = b.data.iter().map(|v| v.abs()).sum::<f64>() / b.data.len() as f64;
        self.push(Op::AbsMean { input }, Value::Scalar(m))
    }

    pub fn square_mean(&mut self, input: NodeId) -> NodeId {
        let b = self.img(input);
        let m = b.data.iter().map(|v| v * v).sum::<f64>() / b.data.len() as f64;
        self.push(Op::SquareMean { input }, Value::Scalar(m))
    }

    /// Scattering inversion (img − Â(1−t̂))/t̂ with Â = p[0] and
    /// t̂ = σ(p[1]).
    pub fn haze_inv(&mut self, input: NodeId, p: ParamId, store: &ParamStore) -> NodeId {
        let a_hat = store.get(p).value[0];
        let t_hat = sigmoid(store.get(p).value[1]);
        let out = forward::haze_inv(self.img(input), a_hat, t_hat);
        self.push(Op::HazeInv { input, p }, Value::Img(out))
    }

    /// g·(img + 1e-3)^γ̂ with γ̂ = 1/(1 + softplus(p[0])) < 1 and g = p[1].
    pub fn power_gain(&mut self, input: NodeId, p: ParamId, store: &ParamStore) -> NodeId {
        let gamma = 1.0 / (1.0 + softplus(store.get(p).value[0]));
        let gain = store.get(p).value[1];
        let out = forward::power_gain(self.img(input), gamma, gain);
        self.push(Op::PowerGain { input, p }, Value::Img(out))
    }

    /// Scalar saturation c/(s + c): a residual that shrinks as `s` grows.
    pub fn inv_sat(&mut self, input: NodeId, c: f64) -> Result<NodeId> {
        let s = self.values[input.0]
            .as_scalar()
            .ok_or_else(|| Error::Shape("inv_sat expects a scalar node".into()))?;
        Ok(self.push(Op::InvSat { input, c }, Value::Scalar(c / (s + c))))
    }

    /// 2×2 box downsample (even dimensions required).
    pub fn down2(&mut self, input: NodeId) -> Result<NodeId> {
        let b = self.img(input);
        if b.height % 2 != 0 || b.width % 2 != 0 {
            return Err(Error::Shape(format!("down2 needs even dims, got {}x{}", b.height, b.width)));
        }
        let out = forward::down2(b);
        Ok(self.push(Op::Down2 { input }, Value::Img(out)))
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate into the
    /// store; callers zero them between passes.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.values[loss.0].as_scalar().is_none() {
            return Err(Error::Shape("backward requires a scalar loss node".into()));
        }
        let mut adj: Vec<Option<Value>> = vec![None; self.values.len()];
        adj[loss.0] = Some(Value::Scalar(1.0));

        for idx in (0..self.ops.len()).rev() {
            let Some(out_adj) = adj[idx].take() else { continue };
            match &self.ops[idx] {
                Op::LeafImg | Op::LeafScalar => {}
                Op::Conv2dSame { input, kernel, kh, kw, normalized } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let raw = match kernel {
                        KernelSource::Param(id) => store.get(*id).value.clone(),
                        KernelSource::Const(w) => w.clone(),
                    };
                    if *normalized {
                        let s = forward::effective_kernel_sum(&raw);
                        let scaled: Vec<f64> = raw.iter().map(|w| w / s).collect();
                        let (dx, dk_hat) = backward_conv2d(x, g, &scaled, *kh, *kw);
                        if let KernelSource::Param(id) = kernel {
                            // k_hat_i = k_i / s: dk_j = (dk_hat_j - sum_i
                            // dk_hat_i k_hat_i) / s (no gradient through a
                            // clamped sum)
                            let raw_sum: f64 = raw.iter().sum();
                            let clamped = raw_sum.abs() < forward::MIN_KERNEL_SUM;
                            let inner: f64 =
                                dk_hat.iter().zip(&scaled).map(|(d, k)| d * k).sum();
                            let p = store.get_mut(*id);
                            for (pg, d) in p.grad.iter_mut().zip(&dk_hat) {
                                *pg += if clamped { d / s } else { (d - inner) / s };
                            }
                        }
                        accumulate(&mut adj[input.0], Value::Img(dx));
                    } else {
                        let (dx, dk) = backward_conv2d(x, g, &raw, *kh, *kw);
                        if let KernelSource::Param(id) = kernel {
                            let p = store.get_mut(*id);
                            for (pg, d) in p.grad.iter_mut().zip(&dk) {
                                *pg += d;
                            }
                        }
                        accumulate(&mut adj[input.0], Value::Img(dx));
                    }
                }
                Op::Affine { input, a, b } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let av = store.get(*a).value[0];
                    let mut da = 0.0;
                    let mut db = 0.0;
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        da += g.data[i] * x.data[i];
                        db += g.data[i];
                        dx.data[i] = av * g.data[i];
                    }
                    store.get_mut(*a).grad[0] += da;
                    store.get_mut(*b).grad[0] += db;
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::PowerEps { input, gamma } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let gv = store.get(*gamma).value[0];
                    let mut dgamma = 0.0;
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        let base = x.data[i] + POWER_EPS_OFFSET;
                        let out = base.powf(gv);
                        dgamma += g.data[i] * out * base.ln();
                        dx.data[i] = g.data[i] * gv * base.powf(gv - 1.0);
                    }
                    store.get_mut(*gamma).grad[0] += dgamma;
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::Blend { x, y, alpha } => {
                    let g = out_adj.as_img().unwrap();
                    let xb = self.img(*x);
                    let yb = self.img(*y);
                    let av = store.get(*alpha).value[0];
                    let s = sigmoid(av);
                    let ds = s * (1.0 - s);
                    let mut dalpha = 0.0;
                    let mut dx = xb.zeros_like();
                    let mut dy = xb.zeros_like();
                    for i in 0..xb.data.len() {
                        dalpha += g.data[i] * (yb.data[i] - xb.data[i]) * ds;
                        dx.data[i] = g.data[i] * (1.0 - s);
                        dy.data[i] = g.data[i] * s;
                    }
                    store.get_mut(*alpha).grad[0] += dalpha;
                    accumulate(&mut adj[x.0], Value::Img(dx));
                    accumulate(&mut adj[y.0], Value::Img(dy));
                }
                Op::Clamp01 { input } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        if x.data[i] > 0.0 && x.data[i] < 1.0 {
                            dx.data[i] = g.data[i];
                        }
                    }
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::Sub { x, y } => match &out_adj {
                    Value::Img(g) => {
                        accumulate(&mut adj[x.0], Value::Img(g.clone()));
                        let mut neg = g.clone();
                        for v in &mut neg.data {
                            *v = -*v;
                        }
                        accumulate(&mut adj[y.0], Value::Img(neg));
                    }
                    Value::Scalar(g) => {
                        accumulate(&mut adj[x.0], Value::Scalar(*g));
                        accumulate(&mut adj[y.0], Value::Scalar(-*g));
                    }
                },
                Op::Add { x, y } => {
                    accumulate(&mut adj[x.0], out_adj.clone());
                    accumulate(&mut adj[y.0], out_adj);
                }
                Op::Scale { input, c } => match &out_adj {
                    Value::Img(g) => {
                        let mut dx = g.clone();
                        for v in &mut dx.data {
                            *v *= c;
                        }
                        accumulate(&mut adj[input.0], Value::Img(dx));
                    }
                    Value::Scalar(g) => accumulate(&mut adj[input.0], Value::Scalar(g * c)),
                },
                Op::AbsMean { input } => {
                    let g = out_adj.as_scalar().unwrap();
                    let x = self.img(*input);
                    let n = x.data.len() as f64;
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        dx.data[i] = g * x.data[i].signum() * if x.data[i] == 0.0 { 0.0 } else { 1.0 } / n;
                    }
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::SquareMean { input } => {
                    let g = out_adj.as_scalar().unwrap();
                    let x = self.img(*input);
                    let n = x.data.len() as f64;
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        dx.data[i] = g * 2.0 * x.data[i] / n;
                    }
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::HazeInv { input, p } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let a_hat = store.get(*p).value[0];
                    let tau = store.get(*p).value[1];
                    let t_hat = sigmoid(tau);
                    let dt_dtau = t_hat * (1.0 - t_hat);
                    let mut da = 0.0;
                    let mut dtau = 0.0;
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        let out = (x.data[i] - a_hat * (1.0 - t_hat)) / t_hat;
                        // ∂out/∂Â = −(1−t̂)/t̂ ; ∂out/∂t̂ = (Â − out)/t̂
                        da += g.data[i] * (-(1.0 - t_hat) / t_hat);
                        dtau += g.data[i] * ((a_hat - out) / t_hat) * dt_dtau;
                        dx.data[i] = g.data[i] / t_hat;
                    }
                    let pm = store.get_mut(*p);
                    pm.grad[0] += da;
                    pm.grad[1] += dtau;
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::PowerGain { input, p } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let u = store.get(*p).value[0];
                    let gain = store.get(*p).value[1];
                    let sp = softplus(u);
                    let gamma = 1.0 / (1.0 + sp);
                    // dγ/du = −σ(u)/(1+softplus(u))²
                    let dgamma_du = -sigmoid(u) * gamma * gamma;
                    let mut du = 0.0;
                    let mut dgain = 0.0;
                    let mut dx = x.zeros_like();
                    for i in 0..x.data.len() {
                        let base = x.data[i] + POWER_EPS_OFFSET;
                        let powed = base.powf(gamma);
                        dgain += g.data[i] * powed;
                        du += g.data[i] * gain * powed * base.ln() * dgamma_du;
                        dx.data[i] = g.data[i] * gain * gamma * base.powf(gamma - 1.0);
                    }
                    let pm = store.get_mut(*p);
                    pm.grad[0] += du;
                    pm.grad[1] += dgain;
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
                Op::InvSat { input, c } => {
                    let g = out_adj.as_scalar().unwrap();
                    let s = self.values[input.0].as_scalar().unwrap();
                    let d = -c / ((s + c) * (s + c));
                    accumulate(&mut adj[input.0], Value::Scalar(g * d));
                }
                Op::Down2 { input } => {
                    let g = out_adj.as_img().unwrap();
                    let x = self.img(*input);
                    let mut dx = x.zeros_like();
                    let (oh, ow, c) = (g.height, g.width, g.channels);
                    for y in 0..oh {
                        for xq in 0..ow {
                            for ch in 0..c {
                                let gv = g.data[(y * ow + xq) * c + ch] * 0.25;
                                for dy in 0..2 {
                                    for dxp in 0..2 {
                                        let i = ((2 * y + dy) * x.width + 2 * xq + dxp) * c + ch;
                                        dx.data[i] += gv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut adj[input.0], Value::Img(dx));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Value>, v: Value) {
    match slot {
        None => *slot = Some(v),
        Some(Value::Scalar(s)) => {
            if let Value::Scalar(add) = v {
                *s += add;
            }
        }
        Some(Value::Img(b)) => {
            if let Value::Img(add) = v {
                for (o, a) in b.data.iter_mut().zip(&add.data) {
                    *o += a;
                }
            }
        }
    }
}

/// ∂L/∂x and ∂L/∂kernel for replicate-padded same convolution.
fn backward_conv2d(x: &Buf, g: &Buf, kernel: &[f64], kh: usize, kw: usize) -> (Buf, Vec<f64>) {
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let (h, w, c) = (x.height, x.width, x.channels);
    let mut dx = x.zeros_like();
    let mut dk = vec![0.0; kernel.len()];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for ch in 0..c {
        for y in 0..h {
            for xq in 0..w {
                let gv = g.data[(y * w + xq) * c + ch];
                if gv == 0.0 {
                    continue;
                }
                for i in 0..kh {
                    for j in 0..kw {
                        let sy = clamp(y as isize + i as isize - ry, h);
                        let sx = clamp(xq as isize + j as isize - rx, w);
                        let src = (sy * w + sx) * c + ch;
                        dk[i * kw + j] += gv * x.data[src];
                        dx.data[src] += gv * kernel[i * kw + j];
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Shared forward kernels: the taped ops and the tape-free tool path both
/// call these, so the two evaluation modes are bit-identical.
pub mod forward {
    use super::{sigmoid, Buf, POWER_EPS_OFFSET};

    /// Kernel sums with magnitude below this are clamped before the
    /// normalizing division.
    pub const MIN_KERNEL_SUM: f64 = 0.25;

    pub fn effective_kernel_sum(kernel: &[f64]) -> f64 {
        let s: f64 = kernel.iter().sum();
        if s.abs() >= MIN_KERNEL_SUM {
            s
        } else if s >= 0.0 {
            MIN_KERNEL_SUM
        } else {
            -MIN_KERNEL_SUM
        }
    }

    pub fn conv2d_same_norm(x: &Buf, kernel: &[f64], kh: usize, kw: usize) -> Buf {
        let s = effective_kernel_sum(kernel);
        let scaled: Vec<f64> = kernel.iter().map(|w| w / s).collect();
        conv2d_same(x, &scaled, kh, kw)
    }

    pub fn conv2d_same(x: &Buf, kernel: &[f64], kh: usize, kw: usize) -> Buf {
        let (ry, rx) = (kh / 2, kw / 2);
        let (h, w, c) = (x.height, x.width, x.channels);
        let mut out = x.zeros_like();
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        for y in 0..h {
            let interior_y = y >= ry && y + ry < h;
            for xq in 0..w {
                let interior = interior_y && xq >= rx && xq + rx < w;
                let base = (y * w + xq) * c;
                if interior {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..kh {
                            let row = ((y + i - ry) * w + xq - rx) * c + ch;
                            for j in 0..kw {
                                acc += kernel[i * kw + j] * x.data[row + j * c];
                            }
                        }
                        out.data[base + ch] = acc;
                    }
                } else {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..kh {
                            let sy = clamp(y as isize + i as isize - ry as isize, h);
                            for j in 0..kw {
                                let sx = clamp(xq as isize + j as isize - rx as isize, w);
                                acc += kernel[i * kw + j] * x.data[(sy * w + sx) * c + ch];
                            }
                        }
                        out.data[base + ch] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn affine(x: &Buf, a: f64, b: f64) -> Buf {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = a * *v + b;
        }
        out
    }

    pub fn power_eps(x: &Buf, gamma: f64) -> Buf {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = (*v + POWER_EPS_OFFSET).powf(gamma);
        }
        out
    }

    pub fn blend(x: &Buf, y: &Buf, alpha: f64) -> Buf {
        let s = sigmoid(alpha);
        let mut out = x.clone();
        for (o, (xv, yv)) in out.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
            *o = s * yv + (1.0 - s) * xv;
        }
        out
    }

    pub fn clamp01(x: &Buf) -> Buf {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn haze_inv(x: &Buf, a_hat: f64, t_hat: f64) -> Buf {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = (*v - a_hat * (1.0 - t_hat)) / t_hat;
        }
        out
    }

    pub fn power_gain(x: &Buf, gamma: f64, gain: f64) -> Buf {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = gain * (*v + POWER_EPS_OFFSET).powf(gamma);
        }
        out
    }

    pub fn down2(x: &Buf) -> Buf {
        let (oh, ow, c) = (x.height / 2, x.width / 2, x.channels);
        let mut out = Buf { height: oh, width: ow, channels: c, data: vec![0.0; oh * ow * c] };
        for y in 0..oh {
            for xq in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += x.data[((2 * y + dy) * x.width + 2 * xq + dx) * c + ch];
                        }
                    }
                    out.data[(y * ow + xq) * c + ch] = acc * 0.25;
                }
            }
        }
        out
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }

    /// One descent step along `grads` (pass negated gradients to ascend).
    pub fn step(&mut self, values: &mut [f64], grads: &[f64]) {
        assert_eq!(values.len(), grads.len());
        assert_eq!(values.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..values.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Scale `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            *g *= scale;
        }
    }
    norm
}

/// Central-difference gradient check. `f` rebuilds the computation from
/// the store and returns the scalar loss; the worst relative error over
/// all parameter elements is returned (denominator
/// max(|analytic|, |numeric|, 1e-8)).
pub fn grad_check(
    f: &dyn Fn(&ParamStore) -> Result<f64>,
    store: &mut ParamStore,
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    let base = store.flat_values();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        store.set_flat_values(&plus);
        let fp = f(store)?;
        let mut minus = base.clone();
        minus[i] -= h;
        store.set_flat_values(&minus);
        let fm = f(store)?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    store.set_flat_values(&base);
    Ok(worst)
}

/// Per-element relative errors, for quantile-style acceptance checks.
pub fn grad_check_detail(
    f: &dyn Fn(&ParamStore) -> Result<f64>,
    store: &mut ParamStore,
    analytic: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let base = store.flat_values();
    let mut errs = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        store.set_flat_values(&plus);
        let fp = f(store)?;
        let mut minus = base.clone();
        minus[i] -= h;
        store.set_flat_values(&minus);
        let fm = f(store)?;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        errs.push((analytic[i] - numeric).abs() / denom);
    }
    store.set_flat_values(&base);
    Ok(errs)
}
