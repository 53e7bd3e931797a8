//! Channels-last convolutions: volumes are `[H, W, D, C]`, 3-D kernels are
//! `[K, K, K, C_in, C_out]`, sequences are `[L, C]`.

use super::ops::{axpy, dot};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    ci: usize,
    co: usize,
}

impl Geometry {
    /// Visits every (output voxel, kernel tap, input voxel) triple that lies
    /// inside the unpadded input, as flat voxel indices.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [h, w, d] = self.input;
        let [oh, ow, od] = self.output;
        let (k, s, p) = (self.k as isize, self.stride as isize, self.pad as isize);
        for a in 0..oh {
            for b in 0..ow {
                for c in 0..od {
                    let o = (a * ow + b) * od + c;
                    for kh in 0..k {
                        let ih = a as isize * s + kh - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = b as isize * s + kw - p;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            for kd in 0..k {
                                let id = c as isize * s + kd - p;
                                if id < 0 || id >= d as isize {
                                    continue;
                                }
                                let i = (ih as usize * w + iw as usize) * d + id as usize;
                                let tap = ((kh * k + kw) * k + kd) as usize;
                                f(o, tap, i);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 3-D cross-correlation with a cubic kernel and symmetric zero padding.
    /// Output extent per axis is `(in + 2·pad − k) / stride + 1`.
    pub fn conv3d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = kernel.value();
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 4
            || ws.len() != 5
            || ws[0] != ws[1]
            || ws[1] != ws[2]
            || ws[3] != xs[3]
        {
            return Err(Error::dim("conv3d", xs, ws));
        }
        let k = ws[0];
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] =
                conv_out_len(xs[ax], k, stride, pad).ok_or_else(|| Error::dim("conv3d", xs, ws))?;
        }
        let geo = Geometry {
            input: [xs[0], xs[1], xs[2]],
            output,
            k,
            stride,
            pad,
            ci: ws[3],
            co: ws[4],
        };
        let (ci, co) = (geo.ci, geo.co);
        let nout = output.iter().product::<usize>();
        let mut out = vec![T::zero(); nout * co];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [co] {
                return Err(Error::dim("conv3d bias", bv.shape(), &[co]));
            }
            for row in out.chunks_mut(co) {
                row.copy_from_slice(bv.data());
            }
        }
        {
            let (xd, wd) = (x.data(), wt.data());
            geo.for_each_tap(|o, tap, i| {
                let orow = &mut out[o * co..(o + 1) * co];
                let xrow = &xd[i * ci..(i + 1) * ci];
                let wblk = &wd[tap * ci * co..(tap + 1) * ci * co];
                for (c, &xv) in xrow.iter().enumerate() {
                    axpy(xv, &wblk[c * co..(c + 1) * co], orow);
                }
            });
        }
        let value = Tensor::new(&[output[0], output[1], output[2], co], out)?;
        let (x_req, w_req) = (self.requires_grad(), kernel.requires_grad());
        let b_req = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.record(
            "conv3d",
            value,
            &parents,
            Box::new(move |g| {
                let (xd, wd, gd) = (x.data(), wt.data(), g.data());
                let mut gx = x_req.then(|| vec![T::zero(); xd.len()]);
                let mut gw = w_req.then(|| vec![T::zero(); wd.len()]);
                geo.for_each_tap(|o, tap, i| {
                    let grow = &gd[o * co..(o + 1) * co];
                    let wblk = &wd[tap * ci * co..(tap + 1) * ci * co];
                    if let Some(gx) = gx.as_mut() {
                        let gxrow = &mut gx[i * ci..(i + 1) * ci];
                        for (c, v) in gxrow.iter_mut().enumerate() {
                            *v = *v + dot(grow, &wblk[c * co..(c + 1) * co]);
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xrow = &xd[i * ci..(i + 1) * ci];
                        let gblk = &mut gw[tap * ci * co..(tap + 1) * ci * co];
                        for (c, &xv) in xrow.iter().enumerate() {
                            axpy(xv, grow, &mut gblk[c * co..(c + 1) * co]);
                        }
                    }
                });
                let mut res = vec![
                    gx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
                    gw.map(|d| Tensor::new(wt.shape(), d).expect("shape")),
                ];
                if has_bias {
                    res.push(b_req.then(|| sum_rows(gd, co)));
                }
                res
            }),
        )
    }

    /// Transposed 3-D convolution whose kernel extent equals its stride, so
    /// every input voxel expands into a disjoint `s x s x s` output block.
    /// Kernel shape is `[s, s, s, C_in, C_out]`.
    pub fn conv_transpose3d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = kernel.value();
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 4
            || ws.len() != 5
            || ws[0] == 0
            || ws[0] != ws[1]
            || ws[1] != ws[2]
            || ws[3] != xs[3]
        {
            return Err(Error::dim("conv_transpose3d", xs, ws));
        }
        let (s, ci, co) = (ws[0], ws[3], ws[4]);
        let [h, w, d] = [xs[0], xs[1], xs[2]];
        let (oh, ow, od) = (h * s, w * s, d * s);
        let mut out = vec![T::zero(); oh * ow * od * co];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [co] {
                return Err(Error::dim("conv_transpose3d bias", bv.shape(), &[co]));
            }
            for row in out.chunks_mut(co) {
                row.copy_from_slice(bv.data());
            }
        }
        // (input voxel, tap, output voxel)
        let visit = move |f: &mut dyn FnMut(usize, usize, usize)| {
            for a in 0..h {
                for b in 0..w {
                    for c in 0..d {
                        let i = (a * w + b) * d + c;
                        for ka in 0..s {
                            for kb in 0..s {
                                for kc in 0..s {
                                    let o = ((a * s + ka) * ow + b * s + kb) * od + c * s + kc;
                                    f(i, (ka * s + kb) * s + kc, o);
                                }
                            }
                        }
                    }
                }
            }
        };
        {
            let (xd, wd) = (x.data(), wt.data());
            visit(&mut |i, tap, o| {
                let orow = &mut out[o * co..(o + 1) * co];
                let wblk = &wd[tap * ci * co..(tap + 1) * ci * co];
                for (c, &xv) in xd[i * ci..(i + 1) * ci].iter().enumerate() {
                    axpy(xv, &wblk[c * co..(c + 1) * co], orow);
                }
            });
        }
        let value = Tensor::new(&[oh, ow, od, co], out)?;
        let (x_req, w_req) = (self.requires_grad(), kernel.requires_grad());
        let b_req = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let has_bias = bias.is_some();
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        self.tape.record(
            "conv_transpose3d",
            value,
            &parents,
            Box::new(move |g| {
                let (xd, wd, gd) = (x.data(), wt.data(), g.data());
                let mut gx = x_req.then(|| vec![T::zero(); xd.len()]);
                let mut gw = w_req.then(|| vec![T::zero(); wd.len()]);
                visit(&mut |i, tap, o| {
                    let grow = &gd[o * co..(o + 1) * co];
                    let wblk = &wd[tap * ci * co..(tap + 1) * ci * co];
                    if let Some(gx) = gx.as_mut() {
                        for (c, v) in gx[i * ci..(i + 1) * ci].iter_mut().enumerate() {
                            *v = *v + dot(grow, &wblk[c * co..(c + 1) * co]);
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let gblk = &mut gw[tap * ci * co..(tap + 1) * ci * co];
                        for (c, &xv) in xd[i * ci..(i + 1) * ci].iter().enumerate() {
                            axpy(xv, grow, &mut gblk[c * co..(c + 1) * co]);
                        }
                    }
                });
                let mut res = vec![
                    gx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
                    gw.map(|d| Tensor::new(wt.shape(), d).expect("shape")),
                ];
                if has_bias {
                    res.push(b_req.then(|| sum_rows(gd, co)));
                }
                res
            }),
        )
    }

    /// Depthwise causal 1-D convolution over `[L, C]` with kernel `[K, C]`:
    /// the input is left-padded by `K − 1` zeros so output `t` reads inputs
    /// `t − K + 1 ..= t`, with the last kernel tap aligned to `t`.
    pub fn conv1d_depthwise_causal(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wt = kernel.value();
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || ws[0] == 0 {
            return Err(Error::dim("conv1d_depthwise_causal", xs, ws));
        }
        let (l, c, k) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); l * c];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [c] {
                return Err(Error::dim("conv1d bias", bv.shape(), &[c]));
            }
            for row in out.chunks_mut(c.max(1)) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (x.data(), wt.data());
        for t in 0..l {
            for j in 0..k {
                // tap j reads x[t - (k - 1) + j]
                let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                let orow = &mut out[t * c..(t + 1) * c];
                let xrow = &xd[src * c..(src + 1) * c];
                let wrow = &wd[j * c..(j + 1) * c];
                for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
        let value = Tensor::new(&[l, c], out)?;
        let (x_req, w_req) = (self.requires_grad(), kernel.requires_grad());
        let b_req = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let has_bias = bias.is_some();
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        self.tape.record(
            "conv1d_depthwise_causal",
            value,
            &parents,
            Box::new(move |g| {
                let (xd, wd, gd) = (x.data(), wt.data(), g.data());
                let mut gx = vec![T::zero(); if x_req { xd.len() } else { 0 }];
                let mut gw = vec![T::zero(); if w_req { wd.len() } else { 0 }];
                for t in 0..l {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                        for ch in 0..c {
                            let gv = gd[t * c + ch];
                            if x_req {
                                gx[src * c + ch] = gx[src * c + ch] + gv * wd[j * c + ch];
                            }
                            if w_req {
                                gw[j * c + ch] = gw[j * c + ch] + gv * xd[src * c + ch];
                            }
                        }
                    }
                }
                let mut res = vec![
                    x_req.then(|| Tensor::new(x.shape(), gx).expect("shape")),
                    w_req.then(|| Tensor::new(wt.shape(), gw).expect("shape")),
                ];
                if has_bias {
                    res.push(b_req.then(|| sum_rows(gd, c)));
                }
                res
            }),
        )
    }
}

fn sum_rows<T: Real>(g: &[T], c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for row in g.chunks(c.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::new(&[c], out).expect("shape")
}
