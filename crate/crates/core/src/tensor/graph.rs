use rand::Rng;

use super::broadcast::{broadcast_shape, for_each_pair, operand_offsets, strides_for};
use super::fft;
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{from_usize, lit, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Powf(Var, T),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    RfftRe(Var),
    RfftIm(Var),
    Irfft {
        re: Var,
        im: Var,
        n: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Append-only computation record. Nodes are created in topological order, so
/// backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_to<T: Scalar>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let n_in: usize = in_shape.iter().product();
    let mut acc = vec![T::zero(); n_in];
    for (o, &ia) in operand_offsets(in_shape, out_shape).iter().enumerate() {
        acc[ia] += grad[o];
    }
    acc
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation (GPT-2 convention)
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * k * x * x);
    (y, dy)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input leaf. Leaves with `requires_grad == false` never receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, rg, op)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape =
            broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })?;
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = strides_for(va.shape(), &out_shape);
            let sb = strides_for(vb.shape(), &out_shape);
            let n: usize = out_shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let (da, db) = (va.data(), vb.data());
            for_each_pair(&out_shape, &sa, &sb, |_, ia, ib| {
                data.push(f(da[ia], db[ib]))
            });
            data
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let plan = BatchPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let mut out = vec![T::zero(); plan.count * m * n];
        for (bo, &(ia, ib)) in plan.pairs.iter().enumerate() {
            gemm_nn(
                &va.data()[ia * m * k..(ia + 1) * m * k],
                &vb.data()[ib * k * n..(ib + 1) * k * n],
                &mut out[bo * m * n..(bo + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = plan.out_batch.clone();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul(a, b)))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let d = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("shape");
        let rg = self.rg(x);
        self.push(value, rg, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let d = *v.shape().last().unwrap_or(&1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("shape");
        let rg = self.rg(x);
        self.push(value, rg, Op::LogSoftmax(x))
    }

    /// Normalizes over the last axis and applies the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let d = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: v.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.len() / d;
        let dn = from_usize::<T>(d);
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &z) in row.iter().enumerate() {
                let h = (z - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / from_usize::<T>(v.len().max(1));
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            rg,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or(Error::Axis {
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / from_usize::<T>(len.max(1))))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "bad permutation {perm:?} for rank {rank}"
            )));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(oshape, data)?,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::Axis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{} exceeds axis {axis} of length {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &data[(o * full + start) * inner..(o * full + start + len) * inner],
            );
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            rg,
            Op::Slice {
                x,
                outer,
                len: full,
                inner,
                start,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::Empty("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.value(p).data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(oshape, out)?,
            rg,
            Op::Concat {
                parts: parts.iter().copied().zip(lens).collect(),
                outer,
                inner,
            },
        ))
    }

    /// Real FFT along the last axis; returns `(real, imaginary)` planes of
    /// shape `[.., n/2 + 1]`.
    pub fn rfft(&mut self, x: Var) -> Result<(Var, Var)> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("rfft of a scalar"))?;
        if n == 0 {
            return Err(Error::invalid("rfft of an empty axis"));
        }
        let bins = fft::rfft_bins(n);
        let mut re = Vec::with_capacity(shape.iter().product::<usize>() / n * bins);
        let mut im = Vec::with_capacity(re.capacity());
        for row in self.value(x).data().chunks(n) {
            let (r, i) = fft::rfft(row);
            re.extend(r);
            im.extend(i);
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = bins;
        let rg = self.rg(x);
        let vr = self.push(Tensor::new(oshape.clone(), re)?, rg, Op::RfftRe(x));
        let vi = self.push(Tensor::new(oshape, im)?, rg, Op::RfftIm(x));
        Ok((vr, vi))
    }

    /// Inverse of [`Graph::rfft`] producing length `n` along the last axis.
    pub fn irfft(&mut self, re: Var, im: Var, n: usize) -> Result<Var> {
        let shape = self.shape(re).to_vec();
        if shape != self.shape(im) {
            return Err(Error::ShapeMismatch {
                op: "irfft",
                lhs: shape,
                rhs: self.shape(im).to_vec(),
            });
        }
        let bins = *shape
            .last()
            .ok_or_else(|| Error::invalid("irfft of a scalar"))?;
        if n == 0 || fft::rfft_bins(n) != bins {
            return Err(Error::invalid(format!(
                "irfft length {n} needs {} bins, got {bins}",
                fft::rfft_bins(n.max(1))
            )));
        }
        let mut out = Vec::with_capacity(shape.iter().product::<usize>() / bins * n);
        for (r, i) in self
            .value(re)
            .data()
            .chunks(bins)
            .zip(self.value(im).data().chunks(bins))
        {
            out.extend(fft::irfft(r, i, n));
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = n;
        let rg = self.rg(re) || self.rg(im);
        Ok(self.push(Tensor::new(oshape, out)?, rg, Op::Irfft { re, im, n }))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = lit::<T>(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("shape");
        let rg = self.rg(x);
        self.push(value, rg, Op::Dropout { x, mask })
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// gradient-requiring node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            // Intermediate cotangents are consumed here; only leaves keep theirs.
            let contributions = self.local_grads(i, &g);
            for (v, gv) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.nodes[v.0], &gv);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let mut r = vec![];
                if rg(*a) {
                    r.push((*a, reduce_to(g, out.shape(), val(*a).shape())));
                }
                if rg(*b) {
                    r.push((*b, reduce_to(g, out.shape(), val(*b).shape())));
                }
                r
            }
            Op::Sub(a, b) => {
                let mut r = vec![];
                if rg(*a) {
                    r.push((*a, reduce_to(g, out.shape(), val(*a).shape())));
                }
                if rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    r.push((*b, reduce_to(&neg, out.shape(), val(*b).shape())));
                }
                r
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (val(*a), val(*b));
                let sa = strides_for(va.shape(), out.shape());
                let sb = strides_for(vb.shape(), out.shape());
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                let (da, db) = (va.data(), vb.data());
                for_each_pair(out.shape(), &sa, &sb, |o, ia, ib| {
                    if is_div {
                        ga[ia] += g[o] / db[ib];
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]);
                    } else {
                        ga[ia] += g[o] * db[ib];
                        gb[ib] += g[o] * da[ia];
                    }
                });
                let mut r = vec![];
                if rg(*a) {
                    r.push((*a, ga));
                }
                if rg(*b) {
                    r.push((*b, gb));
                }
                r
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Powf(x, p) => {
                let d = val(*x).data();
                let pm1 = *p - T::one();
                vec![(
                    *x,
                    g.iter()
                        .zip(d)
                        .map(|(&gv, &xv)| gv * *p * xv.powf(pm1))
                        .collect(),
                )]
            }
            Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(&a, &y)| a * y).collect())],
            Op::Log(x) => vec![(
                *x,
                g.iter().zip(val(*x).data()).map(|(&a, &v)| a / v).collect(),
            )],
            Op::Tanh(x) => vec![(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&a, &y)| a * (T::one() - y * y))
                    .collect(),
            )],
            Op::Gelu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(&a, &v)| a * gelu_parts(v).1)
                    .collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter()
                    .zip(out.data())
                    .map(|(&a, &s)| a * s * (T::one() - s))
                    .collect(),
            )],
            Op::Softplus(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(&a, &v)| a * sigmoid(v))
                    .collect(),
            )],
            Op::MatMul(a, b) => self.matmul_grads(*a, *b, g),
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let s: T = gr.iter().copied().sum();
                    for j in 0..d {
                        dst[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let dn = from_usize::<T>(d);
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((gr, hr), dst)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let gh = gr[j] * gam[j];
                        m1 += gh;
                        m2 += gh * hr[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        dst[j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
                let mut out = vec![];
                if rg(*x) {
                    out.push((*x, gx));
                }
                if rg(*gamma) {
                    out.push((*gamma, gg));
                }
                if rg(*beta) {
                    out.push((*beta, gb));
                }
                out
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / from_usize::<T>(n.max(1)); n])]
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..*outer {
                    for _ in 0..*len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, permute_data(g, out.shape(), &inv))]
            }
            Op::Slice {
                x,
                outer,
                len,
                inner,
                start,
            } => {
                let sl = out.shape().iter().product::<usize>() / (outer * inner).max(1);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + sl * inner]
                        .copy_from_slice(&g[o * sl * inner..(o + 1) * sl * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut res = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &(p, l) in parts {
                    if rg(p) {
                        let mut gp = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let s = (o * total + off) * inner;
                            gp.extend_from_slice(&g[s..s + l * inner]);
                        }
                        res.push((p, gp));
                    }
                    off += l;
                }
                res
            }
            Op::RfftRe(x) | Op::RfftIm(x) => {
                let n = *val(*x).shape().last().unwrap();
                let bins = fft::rfft_bins(n);
                let zeros = vec![T::zero(); bins];
                let is_re = matches!(node.op, Op::RfftRe(_));
                let mut gx = Vec::with_capacity(val(*x).len());
                for gr in g.chunks(bins) {
                    let adj = if is_re {
                        fft::rfft_adjoint(gr, &zeros, n)
                    } else {
                        fft::rfft_adjoint(&zeros, gr, n)
                    };
                    gx.extend(adj);
                }
                vec![(*x, gx)]
            }
            Op::Irfft { re, im, n } => {
                let bins = fft::rfft_bins(*n);
                let mut gr = Vec::with_capacity(val(*re).len());
                let mut gi = Vec::with_capacity(val(*re).len());
                for row in g.chunks(*n) {
                    let (a, b) = fft::irfft_adjoint(row, *n);
                    debug_assert_eq!(a.len(), bins);
                    gr.extend(a);
                    gi.extend(b);
                }
                let mut r = vec![];
                if rg(*re) {
                    r.push((*re, gr));
                }
                if rg(*im) {
                    r.push((*im, gi));
                }
                r
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())]
            }
        }
    }

    fn matmul_grads(&self, a: Var, b: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let plan = BatchPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).expect("validated");
        let mut res = vec![];
        if self.rg(a) {
            let mut ga = vec![T::zero(); va.len()];
            for (bo, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm_nt(
                    &g[bo * m * n..(bo + 1) * m * n],
                    &vb.data()[ib * k * n..(ib + 1) * k * n],
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            res.push((a, ga));
        }
        if self.rg(b) {
            let mut gb = vec![T::zero(); vb.len()];
            for (bo, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm_tn(
                    &va.data()[ia * m * k..(ia + 1) * m * k],
                    &g[bo * m * n..(bo + 1) * m * n],
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            res.push((b, gb));
        }
        res
    }
}

fn accumulate<T: Scalar>(node: &mut Node<T>, g: &[T]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
    let mut s = T::zero();
    for z in row.iter_mut() {
        *z = (*z - mx).exp();
        s += *z;
    }
    for z in row.iter_mut() {
        *z /= s;
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ostrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; rank];
    let mut out = Vec::with_capacity(data.len());
    for_each_pair(&oshape, &ostrides, &zero, |_, ia, _| out.push(data[ia]));
    out
}

/// Matrix-index pairs for a broadcast batched product.
struct BatchPlan {
    out_batch: Vec<usize>,
    count: usize,
    pairs: Vec<(usize, usize)>,
}

impl BatchPlan {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let out_batch = broadcast_shape(a, b)?;
        let count = out_batch.iter().product();
        let sa = strides_for(a, &out_batch);
        let sb = strides_for(b, &out_batch);
        let mut pairs = Vec::with_capacity(count);
        for_each_pair(&out_batch, &sa, &sb, |_, ia, ib| pairs.push((ia, ib)));
        Some(Self {
            out_batch,
            count,
            pairs,
        })
    }
}
