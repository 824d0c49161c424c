//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and enough saved state
//! to run its adjoint. [`Tape::backward`] walks the tape once in reverse and
//! returns fresh gradient buffers; the tape itself is never mutated by a
//! backward pass, so it can be replayed any number of times.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, Tap};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Hardswish,
    Hardsigmoid,
    Sigmoid,
    Log,
    /// Gradient is taken as zero at exactly zero.
    Sqrt,
    Square,
    Affine { scale: f64, shift: f64 },
    Clamp { lo: f64, hi: f64 },
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Hardswish => "hardswish",
            Unary::Hardsigmoid => "hardsigmoid",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Affine { .. } => "affine",
            Unary::Clamp { .. } => "clamp",
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one().div_s(T::one() + (-x).nat_exp())
    } else {
        let e = x.nat_exp();
        e.div_s(T::one() + e)
    }
}

pub fn hardswish<T: Scalar>(x: T) -> T {
    let three = T::lit(3.0);
    let six = T::lit(6.0);
    (x * (x + three).max(T::zero()).min(six)).div_s(six)
}

pub fn hardsigmoid<T: Scalar>(x: T) -> T {
    let three = T::lit(3.0);
    let six = T::lit(6.0);
    ((x + three).max(T::zero()).min(six)).div_s(six)
}

fn unary_forward<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::Hardswish => hardswish(x),
        Unary::Hardsigmoid => hardsigmoid(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Log => x.nat_log(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Affine { scale, shift } => x * T::lit(scale) + T::lit(shift),
        Unary::Clamp { lo, hi } => x.max(T::lit(lo)).min(T::lit(hi)),
    }
}

fn unary_grad<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    let zero = T::zero();
    let one = T::one();
    let three = T::lit(3.0);
    match kind {
        Unary::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        Unary::Hardswish => {
            if x < -three {
                zero
            } else if x <= three {
                (x + x + three) / T::lit(6.0)
            } else {
                one
            }
        }
        Unary::Hardsigmoid => {
            if x > -three && x < three {
                one / T::lit(6.0)
            } else {
                zero
            }
        }
        Unary::Sigmoid => y * (one - y),
        Unary::Log => one / x,
        Unary::Sqrt => {
            if y > zero {
                T::lit(0.5) / y
            } else {
                zero
            }
        }
        Unary::Square => x + x,
        Unary::Affine { scale, .. } => T::lit(scale),
        Unary::Clamp { lo, hi } => {
            if x >= T::lit(lo) && x <= T::lit(hi) {
                one
            } else {
                zero
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Unary(Var, Unary),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SubRow(Var, Var),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    ScaleSample(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    AvgPool {
        x: Var,
        factor: usize,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    GaussianBlur {
        x: Var,
        kernel: Vec<T>,
    },
    Resize {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    Concat(Vec<Var>),
    Column {
        x: Var,
        k: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    SqNormRows(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads<T> {
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given length when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    /// Registers a leaf. Leaves may hold any value, including infinities;
    /// only op outputs are checked for finiteness.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, rg: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(shape_err(op, format!("expected rank {rank}, got shape {s:?}")));
        }
        Ok(s)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let data = self.value(x).iter().map(|&v| unary_forward(kind, v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(kind.name(), shape, data, Op::Unary(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Hardswish)
    }

    pub fn hardsigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Hardsigmoid)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, Unary::Affine { scale, shift })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(arg_err("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(x, Unary::Clamp { lo, hi })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        let shape = self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(op, shape, data, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[n, ..] - row[..]` for every leading index `n`.
    pub fn sub_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape.iter().skip(1).product();
        if shape.is_empty() || self.value(row).len() != inner {
            return Err(shape_err(
                "sub_row",
                format!("x {:?} vs row {:?}", shape, self.shape(row)),
            ));
        }
        let r = self.value(row);
        let data = self
            .value(x)
            .chunks(inner)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a - b))
            .collect();
        let rg = self.rg(&[x, row]);
        self.push("sub_row", shape, data, Op::SubRow(x, row), rg)
    }

    /// `x[n, c, ..] * s[n, c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(s) != &shape[..2] {
            return Err(shape_err(
                "mul_channel",
                format!("x {:?} vs gate {:?}", shape, self.shape(s)),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let sv = self.value(s);
        let data = self
            .value(x)
            .chunks(inner)
            .zip(sv)
            .flat_map(|(c, &g)| c.iter().map(move |&v| v * g))
            .collect();
        let rg = self.rg(&[x, s]);
        self.push("mul_channel", shape, data, Op::MulChannel(x, s), rg)
    }

    /// `x[n, c, h, w] * m[n, 0, h, w]`.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let shape = self.expect_rank("mul_spatial", x, 4)?.to_vec();
        let ms = self.shape(m);
        if ms != [shape[0], 1, shape[2], shape[3]] {
            return Err(shape_err(
                "mul_spatial",
                format!("x {:?} vs map {:?}", shape, ms),
            ));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let xv = self.value(x);
        let mv = self.value(m);
        let mut data = Vec::with_capacity(xv.len());
        for i in 0..n {
            let map = &mv[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                data.extend(xv[off..off + hw].iter().zip(map).map(|(&a, &b)| a * b));
            }
        }
        let rg = self.rg(&[x, m]);
        self.push("mul_spatial", shape, data, Op::MulSpatial(x, m), rg)
    }

    /// `x[n, ..] * s[n]`.
    pub fn scale_sample(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(s) != [shape[0]] {
            return Err(shape_err(
                "scale_sample",
                format!("x {:?} vs scale {:?}", shape, self.shape(s)),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let sv = self.value(s);
        let data = self
            .value(x)
            .chunks(inner)
            .zip(sv)
            .flat_map(|(c, &g)| c.iter().map(move |&v| v * g))
            .collect();
        let rg = self.rg(&[x, s]);
        self.push("scale_sample", shape, data, Op::ScaleSample(x, s), rg)
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [Co, C/groups, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.expect_rank(OP, x, 4)?.to_vec();
        let ws = self.expect_rank(OP, w, 4)?.to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || stride == 0 {
            return Err(arg_err(OP, "groups and stride must be positive"));
        }
        if c % groups != 0 || co % groups != 0 {
            return Err(shape_err(
                OP,
                format!("channels in={c} out={co} not divisible by groups={groups}"),
            ));
        }
        if ci != c / groups {
            return Err(shape_err(
                OP,
                format!("weight expects {ci} input channels per group, input has C={c}/groups={groups}"),
            ));
        }
        if kh != kw || kh == 0 {
            return Err(shape_err(OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(shape_err(
                OP,
                format!("kernel {kh} larger than padded input {h}x{wd} (padding {padding})"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err(
                    OP,
                    format!("bias shape {:?}, expected [{co}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in: c,
            h,
            w: wd,
            c_out: co,
            k: kh,
            stride,
            padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(OP, vec![n, co, geom.ho, geom.wo], data, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.expect_rank(OP, x, 2)?.to_vec();
        let ws = self.expect_rank(OP, w, 2)?.to_vec();
        let (n, din) = (xs[0], xs[1]);
        let dout = ws[0];
        if ws[1] != din {
            return Err(shape_err(
                OP,
                format!("input has {din} features, weight expects {}", ws[1]),
            ));
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err(OP, format!("bias shape {:?}, expected [{dout}]", self.shape(b))));
            }
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x),
            din as isize,
            1,
            self.value(w),
            1,
            din as isize,
            T::one(),
            &mut out,
            dout as isize,
            1,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(OP, vec![n, dout], out, Op::Linear { x, w, b }, rg)
    }

    fn bn_dims(&self, op: &'static str, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(usize, usize, usize)> {
        if eps <= 0.0 {
            return Err(arg_err(op, format!("epsilon must be positive, got {eps}")));
        }
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(op, format!("expected [N, C, ..], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                op,
                format!("{c} channels but affine params {:?}/{:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((n, c, inner))
    }

    /// Batch-statistics normalization (training mode).
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        const OP: &str = "batchnorm2d";
        let (n, c, inner) = self.bn_dims(OP, x, gamma, beta, eps)?;
        let count = n * inner;
        if count == 0 {
            return Err(Error::Empty(OP));
        }
        let xv = self.value(x);
        let m = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                mean[ch] += T::total(xv[off..off + inner].iter().copied());
            }
        }
        mean.iter_mut().for_each(|v| *v = v.div_s(m));
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                let mu = mean[ch];
                var[ch] += T::total(xv[off..off + inner].iter().map(|&v| (v - mu) * (v - mu)));
            }
        }
        var.iter_mut().for_each(|v| *v = v.div_s(m));
        let inv_std: Vec<T> = var.iter().map(|&v| T::one().div_s((v + T::lit(eps)).sqrt())).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, inner);
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            OP,
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        )?;
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Normalization with fixed statistics (inference mode).
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let (n, c, inner) = self.bn_dims(OP, x, gamma, beta, eps)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(OP, format!("running stats for {} channels, input has {c}", mean.len())));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one().div_s((v + T::lit(eps)).sqrt())).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, n, c, inner);
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.push(
            OP,
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], n: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for j in off..off + inner {
                    let h = (xv[j] - mu) * is;
                    xhat[j] = h;
                    out[j] = g * h + b;
                }
            }
        }
        (out, xhat)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("global_avg_pool", x, 4)?.to_vec();
        let hw = s[2] * s[3];
        let inv = T::one().div_s(T::lit(hw as f64));
        let data = self
            .value(x)
            .chunks(hw)
            .map(|c| T::total(c.iter().copied()) * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push("global_avg_pool", vec![s[0], s[1]], data, Op::GlobalAvgPool(x), rg)
    }

    /// Non-overlapping `factor x factor` mean pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "avg_pool";
        let s = self.expect_rank(OP, x, 4)?.to_vec();
        if factor == 0 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(shape_err(OP, format!("{}x{} not divisible by {factor}", s[2], s[3])));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / factor, w / factor);
        let inv = T::one().div_s(T::lit((factor * factor) as f64));
        let xv = self.value(x);
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xi in 0..w {
                    dst[(y / factor) * ow + xi / factor] += src[y * w + xi];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        self.push(OP, vec![s[0], s[1], oh, ow], out, Op::AvgPool { x, factor }, rg)
    }

    /// Row-wise softmax of a `[N, K]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("softmax", x, 2)?.to_vec();
        if s[1] == 0 {
            return Err(Error::Empty("softmax"));
        }
        let mut data = Vec::with_capacity(s[0] * s[1]);
        for row in self.value(x).chunks(s[1]) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - mx).nat_exp()));
            let total: T = T::total(data[start..].iter().copied());
            data[start..].iter_mut().for_each(|v| *v = v.div_s(total));
        }
        let rg = self.rg(&[x]);
        self.push("softmax", s, data, Op::Softmax(x), rg)
    }

    /// Row-wise `x / ||x||_2` of a `[N, D]` matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "l2_normalize";
        const FLOOR: f64 = 1e-12;
        let s = self.expect_rank(OP, x, 2)?.to_vec();
        let d = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0] * d);
        for row in self.value(x).chunks(d) {
            let nrm = T::total(row.iter().map(|&v| v * v)).sqrt();
            if nrm.to_f64().unwrap() <= FLOOR {
                return Err(Error::DegenerateNorm {
                    op: OP,
                    norm: nrm.to_f64().unwrap(),
                });
            }
            norms.push(nrm);
            data.extend(row.iter().map(|&v| v.div_s(nrm)));
        }
        let rg = self.rg(&[x]);
        self.push(OP, s, data, Op::L2Normalize { x, norms }, rg)
    }

    /// Separable Gaussian smoothing of every `H x W` plane with reflect borders.
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var> {
        const OP: &str = "gaussian_blur";
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(arg_err(OP, format!("sigma must be positive, got {sigma}")));
        }
        let s = self.expect_rank(OP, x, 4)?.to_vec();
        let kernel: Vec<T> = kernels::gaussian_kernel(sigma).into_iter().map(T::lit).collect();
        let data = kernels::blur_forward(self.value(x), s[0] * s[1], s[2], s[3], &kernel);
        let rg = self.rg(&[x]);
        self.push(OP, s, data, Op::GaussianBlur { x, kernel }, rg)
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "bilinear_resize";
        if out_h == 0 || out_w == 0 {
            return Err(arg_err(OP, format!("target size {out_h}x{out_w} must be positive")));
        }
        let s = self.expect_rank(OP, x, 4)?.to_vec();
        let (h, w) = (s[2], s[3]);
        if h == 0 || w == 0 {
            return Err(Error::Empty(OP));
        }
        let rows = kernels::resize_taps(h, out_h);
        let cols = kernels::resize_taps(w, out_w);
        let xv = self.value(x);
        let mut out = vec![T::zero(); s[0] * s[1] * out_h * out_w];
        for p in 0..s[0] * s[1] {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, r) in rows.iter().enumerate() {
                for (ox, c) in cols.iter().enumerate() {
                    let v = T::lit(r.w0 * c.w0) * src[r.i0 * w + c.i0]
                        + T::lit(r.w0 * c.w1) * src[r.i0 * w + c.i1]
                        + T::lit(r.w1 * c.w0) * src[r.i1 * w + c.i0]
                        + T::lit(r.w1 * c.w1) * src[r.i1 * w + c.i1];
                    dst[oy * out_w + ox] = v;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(OP, vec![s[0], s[1], out_h, out_w], out, Op::Resize { x, rows, cols }, rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = parts.first().ok_or(Error::Empty(OP))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(shape_err(OP, format!("expected rank >= 2, got {s0:?}")));
        }
        let n = s0[0];
        let rest: Vec<usize> = s0[2..].to_vec();
        let inner: usize = rest.iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != n || s[2..] != rest[..] {
                return Err(shape_err(OP, format!("{s0:?} vs {s:?}")));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p)[i * c * inner..(i + 1) * c * inner]);
            }
        }
        let mut shape = vec![n, total_c];
        shape.extend(rest);
        let rg = self.rg(parts);
        self.push(OP, shape, data, Op::Concat(parts.to_vec()), rg)
    }

    /// Column `k` of a `[N, K]` matrix, as a `[N]` vector.
    pub fn column(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.expect_rank("column", x, 2)?.to_vec();
        if k >= s[1] {
            return Err(shape_err("column", format!("column {k} of {s:?}")));
        }
        let data = self.value(x).chunks(s[1]).map(|r| r[k]).collect();
        let rg = self.rg(&[x]);
        self.push("column", vec![s[0]], data, Op::Column { x, k }, rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(shape_err("select_rows", format!("rows {rows:?} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let xv = self.value(x);
        let data = rows
            .iter()
            .flat_map(|&r| xv[r * inner..(r + 1) * inner].iter().copied())
            .collect();
        let mut shape = s.clone();
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        self.push("select_rows", shape, data, Op::SelectRows { x, rows: rows.to_vec() }, rg)
    }

    /// Mean over the leading axis of `[N, D]`, giving `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("mean_rows", x, 2)?.to_vec();
        if s[0] == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut data = vec![T::zero(); s[1]];
        for row in self.value(x).chunks(s[1]) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let inv = T::one().div_s(T::lit(s[0] as f64));
        data.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push("mean_rows", vec![1, s[1]], data, Op::MeanRows(x), rg)
    }

    /// Squared Euclidean norm of every row of `[N, D]`, giving `[N]`.
    pub fn sq_norm_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank("sq_norm_rows", x, 2)?.to_vec();
        let data = self
            .value(x)
            .chunks(s[1].max(1))
            .map(|r| T::total(r.iter().map(|&v| v * v)))
            .collect();
        let rg = self.rg(&[x]);
        self.push("sq_norm_rows", vec![s[0]], data, Op::SqNormRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = T::total(self.value(x).iter().copied());
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![total], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let total = T::total(self.value(x).iter().copied()).div_s(T::lit(n as f64));
        let rg = self.rg(&[x]);
        self.push("mean", vec![1], vec![total], Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape, data, Op::Reshape(x), rg)
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let rs = &self.nodes[root.0];
        if rs.data.len() != 1 {
            return Err(Error::NonScalarOutput {
                shape: rs.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if rs.requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.data.len()]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * unary_grad(*kind, xv[j], node.data[j]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::SubRow(x, row) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                let inner = self.value(*row).len();
                if let Some(d) = self.slot(grads, *row) {
                    for chunk in g.chunks(inner) {
                        d.iter_mut().zip(chunk).for_each(|(d, &gv)| *d -= gv);
                    }
                }
            }
            Op::MulChannel(x, s) | Op::ScaleSample(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let inner = xv.len() / sv.len().max(1);
                if let Some(d) = self.slot(grads, *x) {
                    for (k, &sk) in sv.iter().enumerate() {
                        for j in k * inner..(k + 1) * inner {
                            d[j] += g[j] * sk;
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *s) {
                    for (k, dk) in d.iter_mut().enumerate() {
                        let r = k * inner..(k + 1) * inner;
                        *dk += T::total(g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b));
                    }
                }
            }
            Op::MulSpatial(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let s = &node.shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..n {
                        let map = &mv[i * hw..(i + 1) * hw];
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for j in 0..hw {
                                d[off + j] += g[off + j] * map[j];
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *m) {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for j in 0..hw {
                                d[i * hw + j] += g[off + j] * xv[off + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                // Distinct parents: take the buffers out to hold three mutable borrows.
                let mut dx = self.slot(grads, *x).map(|_| ()).and(grads[x.0].take());
                let mut dw = self.slot(grads, *w).map(|_| ()).and(grads[w.0].take());
                let mut db = b.and_then(|b| self.slot(grads, b).map(|_| ()).and(grads[b.0].take()));
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if dx.is_some() {
                    grads[x.0] = dx;
                }
                if dw.is_some() {
                    grads[w.0] = dw;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    grads[b.0] = Some(db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if let Some(d) = self.slot(grads, *x) {
                    T::gemm(n, dout, din, T::one(), g, dout as isize, 1, wv, din as isize, 1, T::one(), d, din as isize, 1);
                }
                if let Some(d) = self.slot(grads, *w) {
                    T::gemm(dout, n, din, T::one(), g, 1, dout as isize, xv, din as isize, 1, T::one(), d, din as isize, 1);
                }
                if let Some(b) = b {
                    if let Some(d) = self.slot(grads, *b) {
                        for row in g.chunks(dout) {
                            d.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = &node.shape;
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let gv = self.value(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        for j in off..off + inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *gamma) {
                    d.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if let Some(d) = self.slot(grads, *beta) {
                    d.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if let Some(d) = self.slot(grads, *x) {
                    let m = T::lit((n * inner) as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * inner;
                            let k = gv[ch] * inv_std[ch];
                            if *batch_stats {
                                let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                                for j in off..off + inner {
                                    d[j] += k * (g[j] - mg - xhat[j] * mgx);
                                }
                            } else {
                                for j in off..off + inner {
                                    d[j] += k * g[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one().div_s(T::lit(hw as f64));
                if let Some(d) = self.slot(grads, *x) {
                    for (k, &gv) in g.iter().enumerate() {
                        d[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v += gv * inv);
                    }
                }
            }
            Op::AvgPool { x, factor } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / factor, w / factor);
                let inv = T::one().div_s(T::lit((factor * factor) as f64));
                if let Some(d) = self.slot(grads, *x) {
                    for p in 0..s[0] * s[1] {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for xi in 0..w {
                                dst[y * w + xi] += src[(y / factor) * ow + xi / factor] * inv;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let k = node.shape[1];
                if let Some(d) = self.slot(grads, *x) {
                    for ((yr, gr), dr) in node.data.chunks(k).zip(g.chunks(k)).zip(d.chunks_mut(k)) {
                        let dot: T = T::total(yr.iter().zip(gr).map(|(&a, &b)| a * b));
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let k = node.shape[1];
                if let Some(d) = self.slot(grads, *x) {
                    for (r, ((yr, gr), dr)) in node.data.chunks(k).zip(g.chunks(k)).zip(d.chunks_mut(k)).enumerate() {
                        let dot: T = T::total(yr.iter().zip(gr).map(|(&a, &b)| a * b));
                        for j in 0..k {
                            dr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::GaussianBlur { x, kernel } => {
                let s = &node.shape;
                if let Some(d) = self.slot(grads, *x) {
                    kernels::blur_backward(g, s[0] * s[1], s[2], s[3], kernel, d);
                }
            }
            Op::Resize { x, rows, cols } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (rows.len(), cols.len());
                if let Some(d) = self.slot(grads, *x) {
                    for p in 0..s[0] * s[1] {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut d[p * h * w..(p + 1) * h * w];
                        for (oy, r) in rows.iter().enumerate() {
                            for (ox, c) in cols.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                dst[r.i0 * w + c.i0] += T::lit(r.w0 * c.w0) * gv;
                                dst[r.i0 * w + c.i1] += T::lit(r.w0 * c.w1) * gv;
                                dst[r.i1 * w + c.i0] += T::lit(r.w1 * c.w0) * gv;
                                dst[r.i1 * w + c.i1] += T::lit(r.w1 * c.w1) * gv;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let n = node.shape[0];
                let inner: usize = node.shape[2..].iter().product();
                let total_c = node.shape[1];
                let mut c_off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(d) = self.slot(grads, p) {
                        for i in 0..n {
                            let src = &g[(i * total_c + c_off) * inner..(i * total_c + c_off + c) * inner];
                            d[i * c * inner..(i + 1) * c * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    c_off += c;
                }
            }
            Op::Column { x, k } => {
                let kk = self.shape(*x)[1];
                if let Some(d) = self.slot(grads, *x) {
                    for (r, &gv) in g.iter().enumerate() {
                        d[r * kk + k] += gv;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                if let Some(d) = self.slot(grads, *x) {
                    for (j, &r) in rows.iter().enumerate() {
                        d[r * inner..(r + 1) * inner]
                            .iter_mut()
                            .zip(&g[j * inner..(j + 1) * inner])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x)[0];
                let inv = T::one() / T::lit(n as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for row in d.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(d, &v)| *d += v * inv);
                    }
                }
            }
            Op::SqNormRows(x) => {
                let k = self.shape(*x)[1].max(1);
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for (r, &gv) in g.iter().enumerate() {
                        for j in r * k..(r + 1) * k {
                            d[j] += T::lit(2.0) * xv[j] * gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g[0] / T::lit(n as f64);
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}
