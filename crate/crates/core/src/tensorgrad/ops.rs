use std::rc::Rc;

use super::conv::{Geom, Padding};
use super::tape::{accumulate, Node, Var};
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Neg,
    Exp,
    Log,
    Atan,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Softplus,
    Sqrt,
    Erf,
    Abs,
    PowConst(f64),
    AddScalar(f64),
    MulScalar(f64),
    MinScalar(f64),
    MaxScalar(f64),
}

/// A recorded operation and the ids of its parents.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
    },
    Unary {
        kind: Unary,
        x: usize,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    BroadcastTo {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: Padding,
    },
    Unfold {
        x: usize,
        k: usize,
        pad: Padding,
    },
    Upsample2x(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    BlockSum {
        x: usize,
        bh: usize,
        bw: usize,
    },
    AdaptiveAvgPool {
        x: usize,
    },
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Pooling window along one axis, `[floor(i*n/o), ceil((i+1)*n/o))`.
fn adaptive_range(i: usize, n: usize, o: usize) -> (usize, usize) {
    (i * n / o, ((i + 1) * n).div_ceil(o))
}

fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let numel: usize = dst.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Var<T> {
    fn check_tape(&self, other: &Var<T>) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    fn binary(&self, other: &Var<T>, kind: Binary) -> Result<Var<T>> {
        self.check_tape(other)?;
        let (na, nb) = (self.numel(), other.numel());
        let shape = if self.shape == other.shape || nb == 1 {
            self.shape.clone()
        } else if na == 1 {
            other.shape.clone()
        } else {
            return Err(Error::Shape {
                op: kind.name(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        };
        let (a, b) = (self.data(), other.data());
        let n: usize = shape.iter().product();
        let ia = |i: usize| if na == 1 { 0 } else { i };
        let ib = |i: usize| if nb == 1 { 0 } else { i };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (a[ia(i)], b[ib(i)]);
            let v = match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y == T::zero() {
                        return Err(Error::Domain {
                            op: "div",
                            detail: format!("division by zero at element {i}"),
                        });
                    }
                    x / y
                }
                Binary::Pow => {
                    if x < T::zero() || (x == T::zero() && y < T::zero()) {
                        return Err(Error::Domain {
                            op: "pow",
                            detail: format!("{x}^{y} at element {i}"),
                        });
                    }
                    x.powf(y)
                }
            };
            out.push(v);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    fn unary(&self, kind: Unary) -> Result<Var<T>> {
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let r = match kind {
                Unary::Neg => -v,
                Unary::Exp => v.exp(),
                Unary::Log => {
                    if v <= T::zero() {
                        return Err(Error::Domain {
                            op: "log",
                            detail: format!("log({v}) at element {i}"),
                        });
                    }
                    v.ln()
                }
                Unary::Atan => v.atan(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::LeakyRelu(s) => {
                    if v > T::zero() {
                        v
                    } else {
                        v * T::c(s)
                    }
                }
                Unary::Softplus => v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
                Unary::Sqrt => {
                    if v < T::zero() {
                        return Err(Error::Domain {
                            op: "sqrt",
                            detail: format!("sqrt({v}) at element {i}"),
                        });
                    }
                    v.sqrt()
                }
                Unary::Erf => v.erf(),
                Unary::Abs => v.abs(),
                Unary::PowConst(p) => {
                    let pt = T::c(p);
                    if (v < T::zero() && p.fract() != 0.0) || (v == T::zero() && p < 0.0) {
                        return Err(Error::Domain {
                            op: "pow",
                            detail: format!("{v}^{p} at element {i}"),
                        });
                    }
                    v.powf(pt)
                }
                Unary::AddScalar(c) => v + T::c(c),
                Unary::MulScalar(c) => v * T::c(c),
                Unary::MinScalar(c) => v.min(T::c(c)),
                Unary::MaxScalar(c) => v.max(T::c(c)),
            };
            out.push(r);
        }
        Ok(self.tape.push(
            self.shape.clone(),
            out,
            Op::Unary { kind, x: self.id },
            self.requires_grad(),
        ))
    }

    pub fn add(&self, o: &Var<T>) -> Result<Var<T>> {
        self.binary(o, Binary::Add)
    }
    pub fn sub(&self, o: &Var<T>) -> Result<Var<T>> {
        self.binary(o, Binary::Sub)
    }
    pub fn mul(&self, o: &Var<T>) -> Result<Var<T>> {
        self.binary(o, Binary::Mul)
    }
    pub fn div(&self, o: &Var<T>) -> Result<Var<T>> {
        self.binary(o, Binary::Div)
    }
    /// Elementwise power with a tensor exponent; base must be nonnegative.
    pub fn pow(&self, exponent: &Var<T>) -> Result<Var<T>> {
        self.binary(exponent, Binary::Pow)
    }
    pub fn powf(&self, p: f64) -> Result<Var<T>> {
        self.unary(Unary::PowConst(p))
    }
    pub fn neg(&self) -> Result<Var<T>> {
        self.unary(Unary::Neg)
    }
    pub fn exp(&self) -> Result<Var<T>> {
        self.unary(Unary::Exp)
    }
    pub fn log(&self) -> Result<Var<T>> {
        self.unary(Unary::Log)
    }
    pub fn atan(&self) -> Result<Var<T>> {
        self.unary(Unary::Atan)
    }
    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(&self) -> Result<Var<T>> {
        self.unary(Unary::Tanh)
    }
    pub fn leaky_relu(&self, slope: f64) -> Result<Var<T>> {
        self.unary(Unary::LeakyRelu(slope))
    }
    pub fn relu(&self) -> Result<Var<T>> {
        self.unary(Unary::LeakyRelu(0.0))
    }
    pub fn softplus(&self) -> Result<Var<T>> {
        self.unary(Unary::Softplus)
    }
    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Result<Var<T>> {
        self.unary(Unary::Sqrt)
    }
    pub fn erf(&self) -> Result<Var<T>> {
        self.unary(Unary::Erf)
    }
    pub fn abs(&self) -> Result<Var<T>> {
        self.unary(Unary::Abs)
    }
    pub fn add_scalar(&self, c: f64) -> Result<Var<T>> {
        self.unary(Unary::AddScalar(c))
    }
    pub fn mul_scalar(&self, c: f64) -> Result<Var<T>> {
        self.unary(Unary::MulScalar(c))
    }
    /// Elementwise `min(x, c)`.
    pub fn min_scalar(&self, c: f64) -> Result<Var<T>> {
        self.unary(Unary::MinScalar(c))
    }
    /// Elementwise `max(x, c)`.
    pub fn max_scalar(&self, c: f64) -> Result<Var<T>> {
        self.unary(Unary::MaxScalar(c))
    }
    pub fn square(&self) -> Result<Var<T>> {
        self.mul(self)
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let s = self.data().iter().copied().sum();
        Ok(self
            .tape
            .push(vec![1], vec![s], Op::Sum(self.id), self.requires_grad()))
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let d = self.data();
        let s: T = d.iter().copied().sum();
        let m = s / T::c(d.len() as f64);
        Ok(self
            .tape
            .push(vec![1], vec![m], Op::Mean(self.id), self.requires_grad()))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<T>> {
        if axis >= self.shape.len() {
            return Err(Error::contract(format!(
                "sum_axis: axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let (outer, mid, inner) = split_axis(&self.shape, axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &x[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(self.tape.push(
            shape,
            out,
            Op::SumAxis { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    /// Repeat axes of extent 1 up to `shape` (same rank required).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let ok = shape.len() == self.shape.len()
            && self
                .shape
                .iter()
                .zip(shape)
                .all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let x = self.data();
        let out = broadcast_index_map(&self.shape, shape)
            .into_iter()
            .map(|i| x[i])
            .collect();
        Ok(self.tape.push(
            shape.to_vec(),
            out,
            Op::BroadcastTo { x: self.id },
            self.requires_grad(),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, o: &Var<T>) -> Result<Var<T>> {
        self.check_tape(o)?;
        if self.shape.len() != 2 || o.shape.len() != 2 || self.shape[1] != o.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: o.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], o.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data(), false, &o.data(), false, &mut out, T::zero());
        let rg = self.requires_grad() || o.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: o.id,
            },
            rg,
        ))
    }

    /// 2-D convolution (cross-correlation) of `[N, C, H, W]` with weights
    /// `[O, C, kh, kw]` and optional bias `[O]`.
    pub fn conv2d(
        &self,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var<T>> {
        self.check_tape(w)?;
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: self.shape.clone(),
            rhs: w.shape.clone(),
        };
        if self.shape.len() != 4 || w.shape.len() != 4 || self.shape[1] != w.shape[1] {
            return Err(shape_err());
        }
        if let Some(b) = bias {
            self.check_tape(b)?;
            if b.shape != [w.shape[0]] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: w.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
        }
        let [n, c, h, wd] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let [o, _, kh, kw] = [w.shape[0], w.shape[1], w.shape[2], w.shape[3]];
        let g = Geom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(shape_err)?;
        let (rows, p) = (g.rows(), g.cols());
        let x = self.data();
        let wv = w.data();
        let bv = bias.map(|b| b.data());
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); rows * p];
        for b in 0..n {
            g.im2col(&x[b * c * h * wd..(b + 1) * c * h * wd], &mut cols);
            let dst = &mut out[b * o * p..(b + 1) * o * p];
            if let Some(bv) = &bv {
                for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bv[oc]);
                }
            }
            T::gemm(o, rows, p, &wv, false, &cols, false, dst, T::one());
        }
        let rg = self.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            vec![n, o, g.oh, g.ow],
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Gather every `k x k` neighbourhood (stride 1) into channels:
    /// `[N, C, H, W] -> [N, C*k*k, OH, OW]`, channel `c*k*k + ky*k + kx`.
    pub fn unfold(&self, k: usize, pad: Padding) -> Result<Var<T>> {
        if self.shape.len() != 4 {
            return Err(Error::contract(format!(
                "unfold expects [N,C,H,W], got {:?}",
                self.shape
            )));
        }
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let g = Geom::new(c, h, w, k, k, 1, pad).ok_or_else(|| {
            Error::contract(format!("unfold window {k} does not fit {:?}", self.shape))
        })?;
        let (rows, p) = (g.rows(), g.cols());
        let x = self.data();
        let mut out = vec![T::zero(); n * rows * p];
        for b in 0..n {
            g.im2col(
                &x[b * c * h * w..(b + 1) * c * h * w],
                &mut out[b * rows * p..(b + 1) * rows * p],
            );
        }
        Ok(self.tape.push(
            vec![n, rows, g.oh, g.ow],
            out,
            Op::Unfold { x: self.id, k, pad },
            self.requires_grad(),
        ))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<T>> {
        if self.shape.len() != 4 {
            return Err(Error::contract(format!(
                "upsample expects [N,C,H,W], got {:?}",
                self.shape
            )));
        }
        let [n, c, h, w] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        let x = self.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.tape.push(
            vec![n, c, h2, w2],
            out,
            Op::Upsample2x(self.id),
            self.requires_grad(),
        ))
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if axis >= first.shape.len() {
            return Err(Error::contract(format!(
                "concat: axis {axis} out of range for {:?}",
                first.shape
            )));
        }
        for p in &parts[1..] {
            first.check_tape(p)?;
            let compatible = p.shape.len() == first.shape.len()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, d) in parts.iter().zip(&datas) {
                let blk = p.shape[axis] * inner;
                out.extend_from_slice(&d[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        if axis >= self.shape.len() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let (outer, mid, inner) = split_axis(&self.shape, axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(self.tape.push(
            shape,
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        if shape.contains(&0) || shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.id),
            self.requires_grad(),
        ))
    }

    /// Sum over non-overlapping `bh x bw` tiles of the last two axes; partial
    /// tiles at the bottom/right edges are summed over what they cover.
    pub fn block_sum(&self, bh: usize, bw: usize) -> Result<Var<T>> {
        let r = self.shape.len();
        if r < 2 || bh == 0 || bw == 0 {
            return Err(Error::contract(format!(
                "block_sum {bh}x{bw} on {:?}",
                self.shape
            )));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let (oh, ow) = (h.div_ceil(bh), w.div_ceil(bw));
        let planes: usize = self.shape[..r - 2].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let o = p * oh * ow + (y / bh) * ow + xx / bw;
                    out[o] = out[o] + x[p * h * w + y * w + xx];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.tape.push(
            shape,
            out,
            Op::BlockSum { x: self.id, bh, bw },
            self.requires_grad(),
        ))
    }

    /// Average pooling of the last two axes onto a fixed `oh x ow` grid.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Var<T>> {
        let r = self.shape.len();
        if r < 2 || oh == 0 || ow == 0 {
            return Err(Error::contract(format!(
                "adaptive_avg_pool2d to {oh}x{ow} on {:?}",
                self.shape
            )));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let planes: usize = self.shape[..r - 2].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = adaptive_range(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = adaptive_range(j, w, ow);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s = s + plane[y * w + xx];
                        }
                    }
                    out.push(s / T::c(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.tape.push(
            shape,
            out,
            Op::AdaptiveAvgPool { x: self.id },
            self.requires_grad(),
        ))
    }
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Pow => "pow",
        }
    }
}

fn reduce_to<T: Real>(full: Vec<T>, numel: usize) -> Vec<T> {
    if numel == 1 && full.len() != 1 {
        vec![full.into_iter().sum()]
    } else {
        full
    }
}

impl Op {
    /// Push the vector-Jacobian product of this node's output gradient `g`
    /// into its parents' slots.
    pub(crate) fn backward<T: Real>(
        &self,
        nodes: &[Node<T>],
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let wants = |id: usize| nodes[id].requires_grad;
        match self {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (na, nb) = (av.len(), bv.len());
                let out = &node.value;
                let ia = |i: usize| if na == 1 { av[0] } else { av[i] };
                let ib = |i: usize| if nb == 1 { bv[0] } else { bv[i] };
                let n = g.len();
                if wants(*a) {
                    let da: Vec<T> = (0..n)
                        .map(|i| {
                            let (x, y) = (ia(i), ib(i));
                            match kind {
                                Binary::Add | Binary::Sub => g[i],
                                Binary::Mul => g[i] * y,
                                Binary::Div => g[i] / y,
                                Binary::Pow => {
                                    if x == T::zero() {
                                        if y == T::one() {
                                            g[i]
                                        } else {
                                            T::zero()
                                        }
                                    } else {
                                        g[i] * y * x.powf(y - T::one())
                                    }
                                }
                            }
                        })
                        .collect();
                    accumulate(&mut grads[*a], reduce_to(da, na));
                }
                if wants(*b) {
                    let db: Vec<T> = (0..n)
                        .map(|i| {
                            let (x, y) = (ia(i), ib(i));
                            match kind {
                                Binary::Add => g[i],
                                Binary::Sub => -g[i],
                                Binary::Mul => g[i] * x,
                                Binary::Div => -g[i] * x / (y * y),
                                Binary::Pow => {
                                    if x == T::zero() {
                                        T::zero()
                                    } else {
                                        g[i] * out[i] * x.ln()
                                    }
                                }
                            }
                        })
                        .collect();
                    accumulate(&mut grads[*b], reduce_to(db, nb));
                }
            }
            Op::Unary { kind, x } => {
                if !wants(*x) {
                    return;
                }
                let xv = &nodes[*x].value;
                let out = &node.value;
                let two_over_sqrt_pi = T::c(std::f64::consts::FRAC_2_SQRT_PI);
                let dx: Vec<T> = g
                    .iter()
                    .zip(xv.iter().zip(out.iter()))
                    .map(|(&g, (&x, &y))| match *kind {
                        Unary::Neg => -g,
                        Unary::Exp => g * y,
                        Unary::Log => g / x,
                        Unary::Atan => g / (T::one() + x * x),
                        Unary::Sigmoid => g * y * (T::one() - y),
                        Unary::Tanh => g * (T::one() - y * y),
                        Unary::LeakyRelu(s) => {
                            if x > T::zero() {
                                g
                            } else {
                                g * T::c(s)
                            }
                        }
                        Unary::Softplus => g * sigmoid(x),
                        Unary::Sqrt => {
                            if y > T::zero() {
                                g / (y + y)
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Erf => g * two_over_sqrt_pi * (-x * x).exp(),
                        Unary::Abs => {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }
                        Unary::PowConst(p) => {
                            if x == T::zero() {
                                if p == 1.0 {
                                    g
                                } else {
                                    T::zero()
                                }
                            } else {
                                g * T::c(p) * x.powf(T::c(p - 1.0))
                            }
                        }
                        Unary::AddScalar(_) => g,
                        Unary::MulScalar(c) => g * T::c(c),
                        Unary::MinScalar(c) => {
                            if x < T::c(c) {
                                g
                            } else {
                                T::zero()
                            }
                        }
                        Unary::MaxScalar(c) => {
                            if x > T::c(c) {
                                g
                            } else {
                                T::zero()
                            }
                        }
                    })
                    .collect();
                accumulate(&mut grads[*x], dx);
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(&mut grads[*x], vec![g[0]; nodes[*x].value.len()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = nodes[*x].value.len();
                    accumulate(&mut grads[*x], vec![g[0] / T::c(n as f64); n]);
                }
            }
            Op::SumAxis { x, axis } => {
                if !wants(*x) {
                    return;
                }
                let (outer, mid, inner) = split_axis(&nodes[*x].shape, *axis);
                let mut dx = Vec::with_capacity(outer * mid * inner);
                for o in 0..outer {
                    for _ in 0..mid {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::BroadcastTo { x } => {
                if !wants(*x) {
                    return;
                }
                let src = &nodes[*x];
                let mut dx = vec![T::zero(); src.value.len()];
                for (i, s) in broadcast_index_map(&src.shape, &node.shape)
                    .into_iter()
                    .enumerate()
                {
                    dx[s] = dx[s] + g[i];
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::MatMul { a, b } => {
                let (an, bn) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (an.shape[0], an.shape[1], bn.shape[1]);
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, &bn.value, true, &mut da, T::zero());
                    accumulate(&mut grads[*a], da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &an.value, true, g, false, &mut db, T::zero());
                    accumulate(&mut grads[*b], db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xn, wn) = (&nodes[*x], &nodes[*w]);
                let [n, c, h, wd] = [xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]];
                let [o, _, kh, kw] = [wn.shape[0], wn.shape[1], wn.shape[2], wn.shape[3]];
                let geom = Geom::new(c, h, wd, kh, kw, *stride, *pad).expect("forward geometry");
                let (rows, p) = (geom.rows(), geom.cols());
                let (want_x, want_w) = (wants(*x), wants(*w));
                let mut cols = vec![T::zero(); rows * p];
                let mut dcols = vec![T::zero(); rows * p];
                let mut dw = want_w.then(|| vec![T::zero(); o * rows]);
                let mut dx = want_x.then(|| vec![T::zero(); n * c * h * wd]);
                for bi in 0..n {
                    let gb = &g[bi * o * p..(bi + 1) * o * p];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xn.value[bi * c * h * wd..(bi + 1) * c * h * wd], &mut cols);
                        T::gemm(o, p, rows, gb, false, &cols, true, dw, T::one());
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(rows, o, p, &wn.value, true, gb, false, &mut dcols, T::zero());
                        geom.col2im(&dcols, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[*w], dw);
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[*x], dx);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for bi in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let s: T = g[(bi * o + oc) * p..(bi * o + oc + 1) * p]
                                    .iter()
                                    .copied()
                                    .sum();
                                *d = *d + s;
                            }
                        }
                        accumulate(&mut grads[*b], db);
                    }
                }
            }
            Op::Unfold { x, k, pad } => {
                if !wants(*x) {
                    return;
                }
                let xn = &nodes[*x];
                let [n, c, h, w] = [xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]];
                let geom = Geom::new(c, h, w, *k, *k, 1, *pad).expect("forward geometry");
                let (rows, p) = (geom.rows(), geom.cols());
                let mut dx = vec![T::zero(); n * c * h * w];
                for bi in 0..n {
                    geom.col2im(
                        &g[bi * rows * p..(bi + 1) * rows * p],
                        &mut dx[bi * c * h * w..(bi + 1) * c * h * w],
                    );
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Upsample2x(x) => {
                if !wants(*x) {
                    return;
                }
                let xn = &nodes[*x];
                let [n, c, h, w] = [xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]];
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let d = &mut dx[plane * h * w + (y / 2) * w + xx / 2];
                            *d = *d + g[plane * h2 * w2 + y * w2 + xx];
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &pid in parts {
                    let len = nodes[pid].shape[*axis];
                    if wants(pid) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(&mut grads[pid], dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if !wants(*x) {
                    return;
                }
                let (outer, mid, inner) = split_axis(&nodes[*x].shape, *axis);
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    let base = (o * mid + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(&mut grads[*x], g.to_vec());
                }
            }
            Op::BlockSum { x, bh, bw } => {
                if !wants(*x) {
                    return;
                }
                let xs = &nodes[*x].shape;
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (node.shape[r - 2], node.shape[r - 1]);
                let planes: usize = xs[..r - 2].iter().product();
                let mut dx = Vec::with_capacity(planes * h * w);
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            dx.push(g[p * oh * ow + (y / bh) * ow + xx / bw]);
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::AdaptiveAvgPool { x } => {
                if !wants(*x) {
                    return;
                }
                let xs = &nodes[*x].shape;
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (node.shape[r - 2], node.shape[r - 1]);
                let planes: usize = xs[..r - 2].iter().product();
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        let (y0, y1) = adaptive_range(i, h, oh);
                        for j in 0..ow {
                            let (x0, x1) = adaptive_range(j, w, ow);
                            let share = g[p * oh * ow + i * ow + j]
                                / T::c(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let d = &mut dx[p * h * w + y * w + xx];
                                    *d = *d + share;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
        }
    }
}
