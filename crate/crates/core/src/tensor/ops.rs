use std::rc::Rc;

use super::{
    check_permutation, for_each_index, inverse_permutation, numel, strides, Real, Tensor, Var,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Result shape of right-aligned broadcasting, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand of shape `shape` is addressed when broadcast to `out`.
enum Addressing {
    Same,
    /// Operand equals the trailing `n` elements of every output row.
    Suffix(usize),
    /// Operand matches the output except for a unit last axis of extent `n`.
    Column(usize),
    Map(Vec<usize>),
}

impl Addressing {
    fn new(shape: &[usize], out: &[usize]) -> Self {
        if shape == out {
            return Addressing::Same;
        }
        let k = shape.len();
        if k <= out.len() && shape == &out[out.len() - k..] {
            return Addressing::Suffix(numel(shape));
        }
        if k == out.len() && k > 0 && shape[k - 1] == 1 && shape[..k - 1] == out[..k - 1] {
            return Addressing::Column(out[k - 1]);
        }
        let pad = out.len() - k;
        let st = strides(shape);
        let eff: Vec<usize> = (0..out.len())
            .map(|i| {
                if i < pad || shape[i - pad] == 1 {
                    0
                } else {
                    st[i - pad]
                }
            })
            .collect();
        let mut map = Vec::with_capacity(numel(out));
        for_each_index(out, |_, idx| {
            map.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        });
        Addressing::Map(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Addressing::Same => i,
            Addressing::Suffix(n) => i % n,
            Addressing::Column(n) => i / n,
            Addressing::Map(m) => m[i],
        }
    }

    fn reduce<T: Real>(&self, shape: &[usize], full: Vec<T>) -> Tensor<T> {
        match self {
            Addressing::Same => Tensor::new(shape, full).expect("shape"),
            _ => {
                let mut out = vec![T::zero(); numel(shape)];
                for (i, v) in full.into_iter().enumerate() {
                    let j = self.at(i);
                    out[j] = out[j] + v;
                }
                Tensor::new(shape, out).expect("shape")
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, rhs: Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::dim(name, a.shape(), b.shape()))?;
        let am = Rc::new(Addressing::new(a.shape(), &out_shape));
        let bm = Rc::new(Addressing::new(b.shape(), &out_shape));
        let n = numel(&out_shape);
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (ad[am.at(i)], bd[bm.at(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(&out_shape, data)?;
        let (a_req, b_req) = (self.requires_grad(), rhs.requires_grad());
        self.tape.record(
            name,
            value,
            &[self, rhs],
            Box::new(move |g| {
                let g = g.data();
                let (ad, bd) = (a.data(), b.data());
                let ga = a_req.then(|| {
                    let full: Vec<T> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().enumerate().map(|(i, &g)| g * bd[bm.at(i)]).collect(),
                        BinOp::Div => g.iter().enumerate().map(|(i, &g)| g / bd[bm.at(i)]).collect(),
                    };
                    am.reduce(a.shape(), full)
                });
                let gb = b_req.then(|| {
                    let full: Vec<T> = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&g| -g).collect(),
                        BinOp::Mul => g.iter().enumerate().map(|(i, &g)| g * ad[am.at(i)]).collect(),
                        BinOp::Div => g
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| {
                                let y = bd[bm.at(i)];
                                -g * ad[am.at(i)] / (y * y)
                            })
                            .collect(),
                    };
                    bm.reduce(b.shape(), full)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Div)
    }

    /// Elementwise `y = f(x)` with derivative `df(x, y)`.
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let x2 = Rc::clone(&x);
        let y2 = Rc::clone(&y);
        self.tape.record(
            op,
            (*y).clone(),
            &[self],
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x2.data().iter().zip(y2.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(x2.shape(), data).expect("shape"))]
            }),
        )
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary("ln", |x| x.ln(), |x, _| x.recip())
    }

    pub fn reciprocal(self) -> Result<Var<'t, T>> {
        self.unary("reciprocal", |x| x.recip(), |_, y| -y * y)
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Result<Var<'t, T>> {
        self.unary("silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t, T>> {
        let s = T::lit(slope);
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { s * x },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn scale(self, k: f64) -> Result<Var<'t, T>> {
        let k = T::lit(k);
        self.unary("scale", move |x| x * k, move |_, _| k)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::lit(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s: T = x.data().iter().copied().sum();
        self.tape.record(
            "sum",
            Tensor::scalar(s),
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.numel().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums over every axis except the last: `[.., C] -> [C]`.
    pub fn sum_leading(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("sum_leading", "rank-0 input"))?;
        let mut out = vec![T::zero(); c];
        for row in x.data().chunks(c.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        self.tape.record(
            "sum_leading",
            Tensor::new(&[c], out)?,
            &[self],
            Box::new(move |g| {
                let rows = numel(&shape) / c.max(1);
                let mut d = Vec::with_capacity(numel(&shape));
                for _ in 0..rows {
                    d.extend_from_slice(g.data());
                }
                vec![Some(Tensor::new(&shape, d).expect("shape"))]
            }),
        )
    }

    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = Tensor::new(&[m, n], matmul_kernel(a.data(), b.data(), m, k, n))?;
        let (a_req, b_req) = (self.requires_grad(), rhs.requires_grad());
        self.tape.record(
            "matmul",
            value,
            &[self, rhs],
            Box::new(move |g| {
                let g = g.data();
                let ga = a_req.then(|| {
                    // dA = G · Bᵀ
                    let (bd, mut out) = (b.data(), vec![T::zero(); m * k]);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            out[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    Tensor::new(&[m, k], out).expect("shape")
                });
                let gb = b_req.then(|| {
                    // dB = Aᵀ · G
                    let (ad, mut out) = (a.data(), vec![T::zero(); k * n]);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(ad[i * k + p], grow, &mut out[p * n..(p + 1) * n]);
                        }
                    }
                    Tensor::new(&[k, n], out).expect("shape")
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x · W (+ bias)` applied over the last axis of `x` (any rank ≥ 1).
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let ws = weight.shape();
        let k = *shape.last().ok_or_else(|| Error::dim("linear", &shape, &ws))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::dim("linear", &shape, &ws));
        }
        let rows = numel(&shape) / k.max(1);
        let mut y = self.reshape(&[rows, k])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = ws[1];
        y.reshape(&out_shape)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::dim("reshape", x.shape(), shape));
        }
        let old = x.shape().to_vec();
        let value = (*x).clone().reshape(shape)?;
        self.tape.record(
            "reshape",
            value,
            &[self],
            Box::new(move |g| vec![Some(g.clone().reshape(&old).expect("shape"))]),
        )
    }

    /// Output axis `i` is input axis `perm[i]`; the gradient applies the
    /// inverse permutation.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        check_permutation(perm, x.rank())?;
        let inv = inverse_permutation(perm);
        let value = x.permute(perm)?;
        self.tape.record(
            "permute",
            value,
            &[self],
            Box::new(move |g| vec![Some(g.permute(&inv).expect("valid inverse"))]),
        )
    }

    /// Reverses axis 0.
    pub fn reverse_rows(self) -> Result<Var<'t, T>> {
        let value = self.value().reverse_rows();
        self.tape.record(
            "reverse_rows",
            value,
            &[self],
            Box::new(|g| vec![Some(g.reverse_rows())]),
        )
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_last", "no inputs"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for v in &values {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::dim("concat_last", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        first.tape.record(
            "concat_last",
            Tensor::new(&shape, data)?,
            parts,
            Box::new(move |g| {
                let mut outs: Vec<Vec<T>> =
                    widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g.data()[off..off + w]);
                        off += w;
                    }
                }
                outs.into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::new(s, d).expect("shape")))
                    .collect()
            }),
        )
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("slice_last", "rank-0 input"))?;
        if start >= end || end > c {
            return Err(Error::contract(
                "slice_last",
                format!("range {start}..{end} invalid for last axis {c}"),
            ));
        }
        let w = end - start;
        let rows = numel(&shape) / c;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * c + start..r * c + end]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = w;
        self.tape.record(
            "slice_last",
            Tensor::new(&out_shape, data)?,
            &[self],
            Box::new(move |g| {
                let mut d = vec![T::zero(); rows * c];
                for r in 0..rows {
                    d[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(Tensor::new(&shape, d).expect("shape"))]
            }),
        )
    }

    /// Normalizes over the last axis to zero mean and unit (biased) variance,
    /// then applies the optional affine `gain`/`bias` of shape `[C]`.
    pub fn layer_norm(
        self,
        gain: Option<Var<'t, T>>,
        bias: Option<Var<'t, T>>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = match shape.last() {
            Some(&c) if c >= 1 => c,
            _ => return Err(Error::contract("layer_norm", format!("bad shape {shape:?}"))),
        };
        let eps = T::lit(eps);
        let cn = T::lit(c as f64);
        let rows = x.numel() / c;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for (o, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let xhat = Rc::new(Tensor::new(&shape, xhat)?);
        let xh = Rc::clone(&xhat);
        let normed = self.tape.record(
            "layer_norm",
            (*xhat).clone(),
            &[self],
            Box::new(move |g| {
                let (gd, xd) = (g.data(), xh.data());
                let mut out = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xr = &xd[r * c..(r + 1) * c];
                    let mg = gr.iter().copied().sum::<T>() / cn;
                    let mgx = dot(gr, xr) / cn;
                    for j in 0..c {
                        out[r * c + j] = inv_std[r] * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                vec![Some(Tensor::new(xh.shape(), out).expect("shape"))]
            }),
        )?;
        let mut y = normed;
        if let Some(g) = gain {
            y = y.mul(g)?;
        }
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        Ok(y)
    }

    /// Normalises each channel (last axis) over all leading positions, then
    /// applies the optional per-channel affine. On a single `[H, W, D, C]`
    /// volume this is instance normalisation.
    pub fn instance_norm(
        self,
        gain: Option<Var<'t, T>>,
        bias: Option<Var<'t, T>>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = match shape.last() {
            Some(&c) if c >= 1 && x.numel() >= c => c,
            _ => return Err(Error::contract("instance_norm", format!("bad shape {shape:?}"))),
        };
        let rows = x.numel() / c;
        let n = T::lit(rows as f64);
        let mut mean = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); c];
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| (v / n + eps).sqrt().recip()).collect();
        let mut xhat = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(c) {
            for j in 0..c {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let xhat = Rc::new(Tensor::new(&shape, xhat)?);
        let xh = Rc::clone(&xhat);
        let normed = self.tape.record(
            "instance_norm",
            (*xhat).clone(),
            &[self],
            Box::new(move |g| {
                let (gd, xd) = (g.data(), xh.data());
                let mut mg = vec![T::zero(); c];
                let mut mgx = vec![T::zero(); c];
                for (gr, xr) in gd.chunks_exact(c).zip(xd.chunks_exact(c)) {
                    for j in 0..c {
                        mg[j] = mg[j] + gr[j];
                        mgx[j] = mgx[j] + gr[j] * xr[j];
                    }
                }
                for j in 0..c {
                    mg[j] = mg[j] / n;
                    mgx[j] = mgx[j] / n;
                }
                let mut out = Vec::with_capacity(gd.len());
                for (gr, xr) in gd.chunks_exact(c).zip(xd.chunks_exact(c)) {
                    for j in 0..c {
                        out.push(inv_std[j] * (gr[j] - mg[j] - xr[j] * mgx[j]));
                    }
                }
                vec![Some(Tensor::new(xh.shape(), out).expect("shape"))]
            }),
        )?;
        let mut y = normed;
        if let Some(g) = gain {
            y = y.mul(g)?;
        }
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        Ok(y)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::contract("softmax", "rank-0 input"))?;
        let y = Rc::new(Tensor::new(x.shape(), softmax_rows(x.data(), c))?);
        let y2 = Rc::clone(&y);
        self.tape.record(
            "softmax",
            (*y).clone(),
            &[self],
            Box::new(move |g| {
                let (gd, yd) = (g.data(), y2.data());
                let mut out = vec![T::zero(); gd.len()];
                for (r, o) in out.chunks_mut(c).enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let yr = &yd[r * c..(r + 1) * c];
                    let s = dot(gr, yr);
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(Tensor::new(y2.shape(), out).expect("shape"))]
            }),
        )
    }

    /// Mean cross-entropy of `[.., C]` logits against integer labels, one
    /// label per row.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::contract("cross_entropy", "rank-0"))?;
        let rows = x.numel() / c;
        if labels.len() != rows {
            return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let p = softmax_rows(x.data(), c);
        let nrows = T::lit(rows as f64);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * c + l].max(T::min_positive_value()).ln())
            .sum::<T>()
            / nrows;
        let labels = labels.to_vec();
        let shape = x.shape().to_vec();
        self.tape.record(
            "cross_entropy",
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g| {
                let k = g.item() / nrows;
                let mut d = p.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] = d[r * c + l] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * k);
                vec![Some(Tensor::new(&shape, d).expect("shape"))]
            }),
        )
    }

    /// Elementwise mean of equally shaped inputs, summed in slice order.
    pub fn mean_of(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::contract("mean_of", "no inputs"))?;
        let mut acc = *first;
        for p in rest {
            if p.shape() != acc.shape() {
                return Err(Error::dim("mean_of", &acc.shape(), &p.shape()));
            }
            acc = acc.add(*p)?;
        }
        acc.scale(1.0 / parts.len() as f64)
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows<T: Real>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - m).exp();
            s = s + *oj;
        }
        o.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
    out
}
