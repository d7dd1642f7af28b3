//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every trainable parameter leaf, keyed by [`ParamKey`].
//! Nodes that do not depend on a trainable leaf are never visited, so a
//! detached or frozen sub-graph receives exactly zero gradient.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Identifies one parameter tensor: the store it lives in and its index there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub store: u16,
    pub index: u32,
}

enum Op<T> {
    Leaf,
    Param(ParamKey),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    InstanceNorm {
        x: Var,
        rstd: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        target: Tensor<T>,
        probs: Vec<T>,
    },
    MeanAbsDiff(Var, Var),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<ParamKey, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&[T]> {
        self.map.get(&key).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Vec<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, key by key.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (k, g) in other.map {
            match self.map.get_mut(&k) {
                Some(dst) => dst.iter_mut().zip(g).for_each(|(d, s)| *d += s),
                None => {
                    self.map.insert(k, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Recording tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; never receives gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A parameter leaf. Frozen parameters behave like inputs.
    pub fn param(&mut self, key: ParamKey, value: Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.push(value, Op::Param(key), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// Copies the value of `v` into a new leaf cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// Stride-1 2-D convolution of a `C×H×W` map with a `O×C×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let (o, k) = match self.shape(w) {
            &[o, ci, k1, k2] if ci == c && k1 == k2 => (o, k1),
            s => {
                return Err(shape_err(format!(
                    "conv kernel {:?} does not fit input with {} channels",
                    s, c
                )))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err(format!(
                    "conv bias {:?} for {} outputs",
                    self.shape(b),
                    o
                )));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(format!(
                "kernel {} larger than padded input {}×{}",
                k, h, wd
            )));
        }
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let n = oh * ow;
        let kk = c * k * k;
        let mut out = vec![T::zero(); o * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if k == 1 && pad == 0 {
                T::gemm(
                    o,
                    kk,
                    n,
                    T::one(),
                    wv,
                    kk as isize,
                    1,
                    xv,
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
            } else {
                let cols = im2col(xv, c, h, wd, k, pad, oh, ow);
                T::gemm(
                    o,
                    kk,
                    n,
                    T::one(),
                    wv,
                    kk as isize,
                    1,
                    &cols,
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (row, &bias) in out.chunks_mut(n).zip(bv) {
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            Tensor::new(&[o, oh, ow], out)?,
            Op::Conv2d { x, w, b, k, pad },
            ng,
        ))
    }

    /// `W·x + b` with `x` flattened to a vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let n_in = self.value(x).len();
        let o = match self.shape(w) {
            &[o, i] if i == n_in => o,
            s => {
                return Err(shape_err(format!(
                    "linear weight {:?} for input of {} values",
                    s, n_in
                )))
            }
        };
        let mut out = match b {
            Some(b) if self.shape(b) == [o] => self.value(b).data().to_vec(),
            Some(b) => {
                return Err(shape_err(format!(
                    "linear bias {:?} for {} outputs",
                    self.shape(b),
                    o
                )))
            }
            None => vec![T::zero(); o],
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for (acc, row) in out.iter_mut().zip(wv.chunks(n_in)) {
                *acc += dot(row, xv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::new(&[o], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!(
                "avg_pool2 needs even spatial size, got {}×{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = real::<T>(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for i in 0..oh {
                let r0 = &src[2 * i * w..(2 * i + 1) * w];
                let r1 = &src[(2 * i + 1) * w..(2 * i + 2) * w];
                for j in 0..ow {
                    dst[i * ow + j] =
                        (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                let src = &xv[ch * h * w + (i / 2) * w..ch * h * w + (i / 2 + 1) * w];
                let dst = &mut out[ch * oh * ow + i * ow..ch * oh * ow + (i + 1) * ow];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[j / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::Upsample2(x), ng))
    }

    /// Per-channel normalisation to zero mean and unit variance over the
    /// spatial extent: `(x − μ) / sqrt(σ² + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * n];
        let mut rstds = Vec::with_capacity(c);
        for ch in 0..c {
            let src = &xv[ch * n..(ch + 1) * n];
            let (mean, var) = mean_var(src);
            let rstd = 1.0 / (var + eps).sqrt();
            let (mean_t, rstd_t) = (real::<T>(mean), real::<T>(rstd));
            for (d, &s) in out[ch * n..(ch + 1) * n].iter_mut().zip(src) {
                *d = (s - mean_t) * rstd_t;
            }
            rstds.push(rstd_t);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&[c, h, w], out)?,
            Op::InstanceNorm { x, rstd: rstds },
            ng,
        ))
    }

    /// `x[c] * scale[c] + shift[c]` for every channel `c`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(shape_err(format!(
                "affine vectors of length {}/{} for {} channels",
                self.value(scale).len(),
                self.value(shift).len(),
                c
            )));
        }
        let n = h * w;
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let tv = self.value(shift).data();
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let (s, t) = (sv[ch], tv[ch]);
            for (d, &v) in out[ch * n..(ch + 1) * n]
                .iter_mut()
                .zip(&xv[ch * n..(ch + 1) * n])
            {
                *d = v * s + t;
            }
        }
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(
            Tensor::new(&[c, h, w], out)?,
            Op::ChannelAffine { x, scale, shift },
            ng,
        ))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(value.shape(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = real::<T>(slope);
        self.unary(x, Op::LeakyRelu { x, slope: s }, move |v| {
            if v > T::zero() {
                v
            } else {
                v * s
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v > T::zero() { v } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = real::<T>(c);
        self.unary(x, Op::Scale(x, c), move |v| v * c)
    }

    fn binary_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Softmax over the channel axis of a `C×H×W` map.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = softmax_channels(self.value(x).data(), c, h * w);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Softmax(x), ng))
    }

    /// Pixel-averaged cross-entropy `−mean_p Σ_c t[c,p] · log softmax(x)[c,p]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let (c, h, w) = self.value(logits).chw()?;
        if target.shape() != [c, h, w] {
            return Err(shape_err(format!(
                "cross-entropy target {:?} for logits {:?}",
                target.shape(),
                self.shape(logits)
            )));
        }
        let n = h * w;
        let xv = self.value(logits).data();
        let probs = softmax_channels(xv, c, n);
        let tv = target.data();
        let mut total = 0.0f64;
        for p in 0..n {
            let mut m = xv[p];
            for ch in 1..c {
                m = m.max(xv[ch * n + p]);
            }
            let lse: f64 = (0..c)
                .map(|ch| (xv[ch * n + p] - m).as_f64().exp())
                .sum::<f64>()
                .ln()
                + m.as_f64();
            for ch in 0..c {
                let t = tv[ch * n + p].as_f64();
                if t != 0.0 {
                    total -= t * (xv[ch * n + p].as_f64() - lse);
                }
            }
        }
        let value = Tensor::scalar(real::<T>(total / n as f64));
        let ng = self.ng(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// `mean |a − b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(format!(
                "L1: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs().as_f64())
            .sum();
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::scalar(real::<T>(s / n as f64)),
            Op::MeanAbsDiff(a, b),
            ng,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum();
        let value = Tensor::scalar(real::<T>(s / v.len() as f64));
        let ng = self.ng(&[x]);
        self.push(value, Op::Mean(x), ng)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = T::zero();
        let mut list = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err(format!(
                    "weighted_sum term has shape {:?}",
                    self.shape(v)
                )));
            }
            let w = real::<T>(w);
            s += w * self.value(v).item();
            list.push((v, w));
        }
        let deps: Vec<Var> = list.iter().map(|t| t.0).collect();
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(list), ng))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut result = Gradients {
            map: BTreeMap::new(),
        };
        if !self.nodes[loss.0].needs_grad {
            return Ok(result);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, gy, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gy: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => match out.map.get_mut(key) {
                Some(dst) => dst.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g),
                None => {
                    out.map.insert(*key, gy);
                }
            },
            &Op::Conv2d { x, w, b, k, pad } => {
                let (c, h, wd) = self.value(x).chw().expect("checked at forward");
                let o = self.shape(w)[0];
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let n = oh * ow;
                let kk = c * k * k;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let pointwise = k == 1 && pad == 0;
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, b) {
                        for (d, row) in db.iter_mut().zip(gy.chunks(n)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    }
                }
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                let cols = if need_w && !pointwise {
                    Some(im2col(xv, c, h, wd, k, pad, oh, ow))
                } else {
                    None
                };
                if let Some(dw) = self.buf(grads, w) {
                    let cv: &[T] = cols.as_deref().unwrap_or(xv);
                    // dW[o×kk] += dY[o×n] · colsᵀ[n×kk]
                    T::gemm(
                        o,
                        n,
                        kk,
                        T::one(),
                        &gy,
                        n as isize,
                        1,
                        cv,
                        1,
                        n as isize,
                        T::one(),
                        dw,
                        kk as isize,
                        1,
                    );
                }
                if need_x {
                    if pointwise {
                        let dx = self.buf(grads, x).expect("needs grad");
                        T::gemm(
                            kk,
                            o,
                            n,
                            T::one(),
                            wv,
                            1,
                            kk as isize,
                            &gy,
                            n as isize,
                            1,
                            T::one(),
                            dx,
                            n as isize,
                            1,
                        );
                    } else {
                        let mut dcols = vec![T::zero(); kk * n];
                        T::gemm(
                            kk,
                            o,
                            n,
                            T::one(),
                            wv,
                            1,
                            kk as isize,
                            &gy,
                            n as isize,
                            1,
                            T::zero(),
                            &mut dcols,
                            n as isize,
                            1,
                        );
                        let dx = self.buf(grads, x).expect("needs grad");
                        col2im(&dcols, dx, c, h, wd, k, pad, oh, ow);
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let xv = self.value(x).data();
                let n_in = xv.len();
                if let Some(b) = b {
                    if let Some(db) = self.buf(grads, b) {
                        db.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dw) = self.buf(grads, w) {
                    for (row, &g) in dw.chunks_mut(n_in).zip(&gy) {
                        if g != T::zero() {
                            row.iter_mut().zip(xv).for_each(|(d, &xi)| *d += g * xi);
                        }
                    }
                }
                let wv = self.value(w).data();
                if let Some(dx) = self.buf(grads, x) {
                    for (row, &g) in wv.chunks(n_in).zip(&gy) {
                        if g != T::zero() {
                            dx.iter_mut().zip(row).for_each(|(d, &wi)| *d += g * wi);
                        }
                    }
                }
            }
            &Op::AvgPool2(x) => {
                let (c, h, w) = self.value(x).chw().expect("checked");
                let (oh, ow) = (h / 2, w / 2);
                let quarter = real::<T>(0.25);
                if let Some(dx) = self.buf(grads, x) {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[ch * h * w + i * w + j] +=
                                    gy[ch * oh * ow + (i / 2) * ow + j / 2] * quarter;
                            }
                        }
                    }
                }
            }
            &Op::Upsample2(x) => {
                let (c, h, w) = self.value(x).chw().expect("checked");
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(dx) = self.buf(grads, x) {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[ch * h * w + (i / 2) * w + j / 2] +=
                                    gy[ch * oh * ow + i * ow + j];
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm { x, rstd } => {
                let (c, h, w) = self.value(*x).chw().expect("checked");
                let n = h * w;
                let inv_n = 1.0 / n as f64;
                if let Some(dx) = self.buf(grads, *x) {
                    for ch in 0..c {
                        let g = &gy[ch * n..(ch + 1) * n];
                        let xh = &y[ch * n..(ch + 1) * n];
                        let mean_g: f64 = g.iter().map(|v| v.as_f64()).sum::<f64>() * inv_n;
                        let mean_gx: f64 = g
                            .iter()
                            .zip(xh)
                            .map(|(a, b)| a.as_f64() * b.as_f64())
                            .sum::<f64>()
                            * inv_n;
                        let (mg, mgx, r) = (real::<T>(mean_g), real::<T>(mean_gx), rstd[ch]);
                        for ((d, &gv), &xv) in dx[ch * n..(ch + 1) * n].iter_mut().zip(g).zip(xh) {
                            *d += r * (gv - mg - xv * mgx);
                        }
                    }
                }
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let (c, h, w) = self.value(x).chw().expect("checked");
                let n = h * w;
                let xv = self.value(x).data();
                if let Some(dt) = self.buf(grads, shift) {
                    for ch in 0..c {
                        dt[ch] += gy[ch * n..(ch + 1) * n].iter().copied().sum::<T>();
                    }
                }
                if let Some(ds) = self.buf(grads, scale) {
                    for ch in 0..c {
                        ds[ch] += dot(&gy[ch * n..(ch + 1) * n], &xv[ch * n..(ch + 1) * n]);
                    }
                }
                let sv = self.value(scale).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ch in 0..c {
                        let s = sv[ch];
                        for (d, &g) in dx[ch * n..(ch + 1) * n]
                            .iter_mut()
                            .zip(&gy[ch * n..(ch + 1) * n])
                        {
                            *d += g * s;
                        }
                    }
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(&gy).zip(xv) {
                        *d += if v > T::zero() { g } else { g * slope };
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(&gy).zip(xv) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &g), &t) in dx.iter_mut().zip(&gy).zip(y) {
                        *d += g * (T::one() - t * t);
                    }
                }
            }
            &Op::Softplus(x) => {
                let xv = self.value(x).data();
                if let Some(dx) = self.buf(grads, x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(&gy).zip(xv) {
                        *d += g * sigmoid(v);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.buf(grads, a) {
                    da.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = self.buf(grads, b) {
                    db.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.buf(grads, a) {
                    da.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g);
                }
                if let Some(db) = self.buf(grads, b) {
                    db.iter_mut().zip(&gy).for_each(|(d, &g)| *d -= g);
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.buf(grads, x) {
                    dx.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g * c);
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.buf(grads, x) {
                    dx.iter_mut().zip(&gy).for_each(|(d, &g)| *d += g);
                }
            }
            &Op::Softmax(x) => {
                let (c, h, w) = self.value(x).chw().expect("checked");
                let n = h * w;
                if let Some(dx) = self.buf(grads, x) {
                    for p in 0..n {
                        let mut s = T::zero();
                        for ch in 0..c {
                            s += gy[ch * n + p] * y[ch * n + p];
                        }
                        for ch in 0..c {
                            dx[ch * n + p] += y[ch * n + p] * (gy[ch * n + p] - s);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let (c, h, w) = self.value(*logits).chw().expect("checked");
                let n = h * w;
                let scale = gy[0] / real::<T>(n as f64);
                let tv = target.data();
                if let Some(dx) = self.buf(grads, *logits) {
                    for p in 0..n {
                        let mut tsum = T::zero();
                        for ch in 0..c {
                            tsum += tv[ch * n + p];
                        }
                        for ch in 0..c {
                            dx[ch * n + p] += scale * (probs[ch * n + p] * tsum - tv[ch * n + p]);
                        }
                    }
                }
            }
            &Op::MeanAbsDiff(a, b) => {
                let n = self.value(a).len();
                let scale = gy[0] / real::<T>(n as f64);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let sign = |x: T, y: T| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(da) = self.buf(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += sign(x, y);
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= sign(x, y);
                    }
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let g = gy[0] / real::<T>(n as f64);
                if let Some(dx) = self.buf(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(dv) = self.buf(grads, v) {
                        dv[0] += gy[0] * w;
                    }
                }
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Population mean and variance, accumulated in `f64`.
pub(crate) fn mean_var<T: Real>(xs: &[T]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_channels<T: Real>(x: &[T], c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * n];
    for p in 0..n {
        let mut m = x[p];
        for ch in 1..c {
            m = m.max(x[ch * n + p]);
        }
        let mut s = T::zero();
        for ch in 0..c {
            let e = (x[ch * n + p] - m).exp();
            out[ch * n + p] = e;
            s += e;
        }
        for ch in 0..c {
            out[ch * n + p] = out[ch * n + p] / s;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                // valid output columns: 0 <= ox + kx - pad < w
                let ox0 = pad.saturating_sub(kx);
                let ox1 = (w + pad).saturating_sub(kx).min(ow);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix0 = ox0 + kx - pad;
                    let len = ox1 - ox0;
                    dst[oy * ow + ox0..oy * ow + ox1]
                        .copy_from_slice(&src[iy * w + ix0..iy * w + ix0 + len]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let n = oh * ow;
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let ox0 = pad.saturating_sub(kx);
                let ox1 = (w + pad).saturating_sub(kx).min(ow);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix0 = ox0 + kx - pad;
                    let len = ox1 - ox0;
                    for (d, &s) in dst[iy * w + ix0..iy * w + ix0 + len]
                        .iter_mut()
                        .zip(&src[oy * ow + ox0..oy * ow + ox1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}
