//! The S6 selective state-space kernel.
//!
//! Continuous parameters are a diagonal state matrix `A` (stored per channel
//! as `[E, N]`), token-dependent `B`, `C` (`[L, N]`, shared by all channels)
//! and a positive step `Δ` (`[L, E]`). Zero-order hold gives, per state
//! dimension,
//!
//! ```text
//! Ā = exp(Δa)
//! B̄ = (exp(Δa) − 1) / a · b
//! ```
//!
//! and the scan runs `h_t = Ā_t ⊙ h_{t−1} + B̄_t ⊙ x_t`, `y_t = C_t · h_t`
//! from `h_{−1} = 0`, so `y_t` depends on `x_0 ..= x_t`.

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Largest SSM state size used when sizing from a channel count.
pub const MAX_STATE_SIZE: usize = 256;

pub const DEFAULT_CHUNK: usize = 64;

/// State size for a token width of `channels`: `min(channels, 256)`.
pub fn state_size_for(channels: usize) -> usize {
    channels.min(MAX_STATE_SIZE)
}

/// Selected SSM quantities for one sequence.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    /// Diagonal of `A` per channel, `[E, N]`, strictly negative.
    pub a: Tensor<T>,
    /// `[L, N]`
    pub b: Tensor<T>,
    /// `[L, N]`
    pub c: Tensor<T>,
    /// `[L, E]`, strictly positive.
    pub delta: Tensor<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn state_size(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn discretize(&self) -> Result<DiscretizedParams<T>> {
        discretize_sequence(&self.a, &self.b, &self.delta)
    }
}

/// Per-token, per-channel discretized parameters, laid out `[L, E, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedParams<T> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// `(exp(Δa) − 1) / a`, accurate for small `Δa`.
#[inline]
fn zoh_gain<T: Real>(a: T, delta: T) -> T {
    (delta * a).exp_m1() / a
}

/// Zero-order hold for one diagonal entry.
pub fn discretize_zoh_scalar<T: Real>(a: T, b: T, delta: T) -> Result<(T, T)> {
    let (ab, bb) = discretize_zoh(&[a], &[b], delta)?;
    Ok((ab[0], bb[0]))
}

/// Zero-order hold of a diagonal `A` (length `N`) and input vector `B`
/// (length `N`) at step `delta`.
pub fn discretize_zoh<T: Real>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    if a.len() != b.len() {
        return Err(Error::dim("discretize_zoh", &[a.len()], &[b.len()]));
    }
    if !(delta > T::zero()) {
        return Err(Error::contract(
            "discretize_zoh",
            format!("step must be positive, got {delta}"),
        ));
    }
    if let Some(index) = a.iter().position(|&v| v == T::zero()) {
        return Err(Error::SingularDiscretization { index });
    }
    let a_bar = a.iter().map(|&an| (delta * an).exp()).collect();
    let b_bar = a.iter().zip(b).map(|(&an, &bn)| zoh_gain(an, delta) * bn).collect();
    Ok((a_bar, b_bar))
}

/// Discretizes a whole selected sequence: `a` `[E, N]`, `b` `[L, N]`,
/// `delta` `[L, E]`.
pub fn discretize_sequence<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<DiscretizedParams<T>> {
    let (e, n, l) = check_shapes(a.shape(), b.shape(), delta.shape())?;
    if let Some(index) = a.data().iter().position(|&v| v == T::zero()) {
        return Err(Error::SingularDiscretization { index: index % n.max(1) });
    }
    let mut a_bar = Vec::with_capacity(l * e * n);
    let mut b_bar = Vec::with_capacity(l * e * n);
    for t in 0..l {
        let brow = &b.data()[t * n..(t + 1) * n];
        for d in 0..e {
            let dt = delta.data()[t * e + d];
            let arow = &a.data()[d * n..(d + 1) * n];
            for (&an, &bn) in arow.iter().zip(brow) {
                a_bar.push((dt * an).exp());
                b_bar.push(zoh_gain(an, dt) * bn);
            }
        }
    }
    Ok(DiscretizedParams {
        len: l,
        channels: e,
        state: n,
        a_bar,
        b_bar,
    })
}

fn check_shapes(a: &[usize], b: &[usize], delta: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || delta.len() != 2 || b[1] != a[1] || delta[1] != a[0] || b[0] != delta[0] {
        return Err(Error::Dimension {
            op: "ssm",
            lhs: [a, b].concat(),
            rhs: delta.to_vec(),
        });
    }
    Ok((a[0], a[1], b[0]))
}

fn check_scan_inputs<T: Real>(
    x: &Tensor<T>,
    p: &DiscretizedParams<T>,
    c: &Tensor<T>,
) -> Result<()> {
    if x.shape() != [p.len, p.channels] {
        return Err(Error::dim("scan", x.shape(), &[p.len, p.channels]));
    }
    if c.shape() != [p.len, p.state] {
        return Err(Error::dim("scan", c.shape(), &[p.len, p.state]));
    }
    Ok(())
}

/// Reference recurrence, one token at a time.
pub fn scan_sequential<T: Real>(
    x: &Tensor<T>,
    p: &DiscretizedParams<T>,
    c: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_scan_inputs(x, p, c)?;
    let (e, n) = (p.channels, p.state);
    let mut h = vec![T::zero(); e * n];
    let mut y = vec![T::zero(); p.len * e];
    scan_span(x.data(), p, c.data(), 0, p.len, &mut h, &mut y);
    Tensor::new(x.shape(), y)
}

/// Runs the recurrence over tokens `start..end` from state `h`, writing
/// `y` rows `start..end` into `y` (indexed from `start`).
#[inline]
fn scan_span<T: Real>(
    x: &[T],
    p: &DiscretizedParams<T>,
    c: &[T],
    start: usize,
    end: usize,
    h: &mut [T],
    y: &mut [T],
) {
    let (e, n) = (p.channels, p.state);
    for t in start..end {
        let crow = &c[t * n..(t + 1) * n];
        let base = t * e * n;
        for d in 0..e {
            let xv = x[t * e + d];
            let ab = &p.a_bar[base + d * n..base + (d + 1) * n];
            let bb = &p.b_bar[base + d * n..base + (d + 1) * n];
            let hd = &mut h[d * n..(d + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                hd[j] = ab[j] * hd[j] + bb[j] * xv;
                acc = acc + crow[j] * hd[j];
            }
            y[(t - start) * e + d] = acc;
        }
    }
}

/// Blocked scan. Each chunk is summarized as the affine map
/// `h ↦ α ⊙ h + β` (α the product of its `Ā`, β its state from zero);
/// chunk summaries are composed left to right to get every chunk's entry
/// state, then chunks are replayed independently. Chunks run in parallel on
/// the rayon pool; the result does not depend on the worker count.
pub fn scan_chunked<T: Real>(
    x: &Tensor<T>,
    p: &DiscretizedParams<T>,
    c: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    check_scan_inputs(x, p, c)?;
    if chunk == 0 {
        return Err(Error::contract("scan_chunked", "chunk must be >= 1"));
    }
    let (l, e, n) = (p.len, p.channels, p.state);
    let en = e * n;
    let starts: Vec<usize> = (0..l).step_by(chunk).collect();

    let summaries: Vec<(Vec<T>, Vec<T>)> = starts
        .par_iter()
        .map(|&s| {
            let end = (s + chunk).min(l);
            let mut alpha = vec![T::one(); en];
            let mut beta = vec![T::zero(); en];
            for t in s..end {
                let base = t * en;
                for d in 0..e {
                    let xv = x.data()[t * e + d];
                    for j in d * n..(d + 1) * n {
                        let ab = p.a_bar[base + j];
                        alpha[j] = alpha[j] * ab;
                        beta[j] = ab * beta[j] + p.b_bar[base + j] * xv;
                    }
                }
            }
            (alpha, beta)
        })
        .collect();

    let mut entry = Vec::with_capacity(starts.len());
    let mut h = vec![T::zero(); en];
    for (alpha, beta) in &summaries {
        entry.push(h.clone());
        for j in 0..en {
            h[j] = alpha[j] * h[j] + beta[j];
        }
    }

    let mut y = vec![T::zero(); l * e];
    y.par_chunks_mut(chunk * e)
        .zip(entry.into_par_iter())
        .enumerate()
        .for_each(|(k, (ys, mut h0))| {
            let s = k * chunk;
            let end = (s + chunk).min(l);
            scan_span(x.data(), p, c.data(), s, end, &mut h0, ys);
        });
    Tensor::new(x.shape(), y)
}

impl<'t, T: Real> Var<'t, T> {
    /// Fused differentiable selective scan. `self` is the input `u` `[L, E]`;
    /// `delta` `[L, E]`, `a` `[E, N]` (must be nonzero), `b`, `c` `[L, N]`.
    /// Returns `y` `[L, E]`.
    pub fn selective_scan(
        self,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (u, dv, av, bv, cv) = (self.value(), delta.value(), a.value(), b.value(), c.value());
        let (e, n, l) = check_shapes(av.shape(), bv.shape(), dv.shape())?;
        if u.shape() != dv.shape() || cv.shape() != bv.shape() {
            return Err(Error::dim("selective_scan", u.shape(), dv.shape()));
        }
        if let Some(index) = av.data().iter().position(|&v| v == T::zero()) {
            return Err(Error::SingularDiscretization { index: index % n.max(1) });
        }
        let en = e * n;
        // states[t] = h_t, all L of them, for the reverse sweep
        let mut states = vec![T::zero(); l * en];
        let mut y = vec![T::zero(); l * e];
        {
            let (ud, dd, ad, bd, cd) = (u.data(), dv.data(), av.data(), bv.data(), cv.data());
            let mut h = vec![T::zero(); en];
            for t in 0..l {
                let brow = &bd[t * n..(t + 1) * n];
                let crow = &cd[t * n..(t + 1) * n];
                for d in 0..e {
                    let dt = dd[t * e + d];
                    let xv = ud[t * e + d];
                    let arow = &ad[d * n..(d + 1) * n];
                    let hd = &mut h[d * n..(d + 1) * n];
                    let mut acc = T::zero();
                    for j in 0..n {
                        let em1 = (dt * arow[j]).exp_m1();
                        let abar = em1 + T::one();
                        let bbar = em1 / arow[j] * brow[j];
                        hd[j] = abar * hd[j] + bbar * xv;
                        acc = acc + crow[j] * hd[j];
                    }
                    y[t * e + d] = acc;
                }
                states[t * en..(t + 1) * en].copy_from_slice(&h);
            }
        }
        let states = Rc::new(states);
        self.tape.record(
            "selective_scan",
            Tensor::new(&[l, e], y)?,
            &[self, delta, a, b, c],
            Box::new(move |g| {
                let (ud, dd, ad, bd, cd) = (u.data(), dv.data(), av.data(), bv.data(), cv.data());
                let gd = g.data();
                let mut du = vec![T::zero(); l * e];
                let mut ddelta = vec![T::zero(); l * e];
                let mut da_acc = vec![T::zero(); en];
                let mut db = vec![T::zero(); l * n];
                let mut dc = vec![T::zero(); l * n];
                let mut dh = vec![T::zero(); en];
                for t in (0..l).rev() {
                    let brow = &bd[t * n..(t + 1) * n];
                    let crow = &cd[t * n..(t + 1) * n];
                    let h_t = &states[t * en..(t + 1) * en];
                    for d in 0..e {
                        let gy = gd[t * e + d];
                        let dt = dd[t * e + d];
                        let xv = ud[t * e + d];
                        let arow = &ad[d * n..(d + 1) * n];
                        let mut du_td = T::zero();
                        let mut ddt = T::zero();
                        for j in 0..n {
                            let k = d * n + j;
                            let h_prev = if t > 0 { states[(t - 1) * en + k] } else { T::zero() };
                            let an = arow[j];
                            let em1 = (dt * an).exp_m1();
                            let ea = em1 + T::one();
                            let f = em1 / an;
                            let bbar = f * brow[j];
                            let dhk = dh[k] + gy * crow[j];
                            dc[t * n + j] = dc[t * n + j] + gy * h_t[k];
                            let dabar = dhk * h_prev;
                            let dbbar = dhk * xv;
                            du_td = du_td + dhk * bbar;
                            db[t * n + j] = db[t * n + j] + dbbar * f;
                            let df = dbbar * brow[j];
                            ddt = ddt + dabar * an * ea + df * ea;
                            da_acc[k] = da_acc[k] + dabar * dt * ea + df * (dt * ea - f) / an;
                            dh[k] = dhk * ea;
                        }
                        du[t * e + d] = du_td;
                        ddelta[t * e + d] = ddt;
                    }
                }
                vec![
                    Some(Tensor::new(&[l, e], du).expect("shape")),
                    Some(Tensor::new(&[l, e], ddelta).expect("shape")),
                    Some(Tensor::new(&[e, n], da_acc).expect("shape")),
                    Some(Tensor::new(&[l, n], db).expect("shape")),
                    Some(Tensor::new(&[l, n], dc).expect("shape")),
                ]
            }),
        )
    }
}

/// Learned S6 parameters for `channels` channels and `state` state dims.
#[derive(Clone, Debug)]
pub struct S6Weights {
    pub channels: usize,
    pub state: usize,
    /// `log(−A)`, `[E, N]`; `A = −exp(a_log)` stays negative.
    pub a_log: ParamId,
    /// `Linear_N` producing `B`, `[E, N]`.
    pub w_b: ParamId,
    /// `Linear_N` producing `C`, `[E, N]`.
    pub w_c: ParamId,
    /// `Linear_1` producing the shared step offset, `[E, 1]`.
    pub w_delta: ParamId,
    /// Per-channel step bias, `[E]`.
    pub delta_bias: ParamId,
}

/// Initial step range for the Δ bias, `softplus(bias) ∈ [DT_MIN, DT_MAX]`.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl S6Weights {
    /// Registers S6 parameters under `prefix`. `A` starts at
    /// `a_n = −(n + 1)` for every channel; the step bias is the inverse
    /// softplus of a log-uniform draw from `[DT_MIN, DT_MAX]`.
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let a_log = Tensor::from_fn(&[channels, state], |i| T::lit(((i % state) as f64 + 1.0).ln()));
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let delta_bias = Tensor::from_fn(&[channels], |_| {
            let dt = (lo + (hi - lo) * rng.random::<f64>()).exp();
            T::lit(inverse_softplus(dt))
        });
        Self {
            channels,
            state,
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            w_b: store.add(format!("{prefix}.w_b"), nn::fan_in_uniform(rng, &[channels, state], channels)),
            w_c: store.add(format!("{prefix}.w_c"), nn::fan_in_uniform(rng, &[channels, state], channels)),
            w_delta: store.add(format!("{prefix}.w_delta"), nn::fan_in_uniform(rng, &[channels, 1], channels)),
            delta_bias: store.add(format!("{prefix}.delta_bias"), delta_bias),
        }
    }

    /// Selection on the tape: returns `(a, b, c, delta)` as variables.
    pub fn select<'t, T: Real>(
        &self,
        x: Var<'t, T>,
        p: &Bound<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let b = x.linear(p.var(self.w_b), None)?;
        let c = x.linear(p.var(self.w_c), None)?;
        // [L, 1] + [E] broadcasts to [L, E]
        let delta = x
            .linear(p.var(self.w_delta), None)?
            .add(p.var(self.delta_bias))?
            .softplus()?;
        let a = p.var(self.a_log).exp()?.neg()?;
        Ok((a, b, c, delta))
    }

    /// Full S6 map over a token sequence `[L, E]`.
    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        if !x.value().is_finite() {
            return Err(Error::NonFinite { op: "s6 input" });
        }
        let (a, b, c, delta) = self.select(x, p)?;
        x.selective_scan(delta, a, b, c)
    }
}

/// Evaluates the selection projections without recording gradients.
pub fn select_params<T: Real>(
    x: &Tensor<T>,
    weights: &S6Weights,
    store: &ParamStore<T>,
) -> Result<SsmParams<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "select_params input" });
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.constant(x.clone());
    let (a, b, c, delta) = weights.select(xv, &p)?;
    Ok(SsmParams {
        a: (*a.value()).clone(),
        b: (*b.value()).clone(),
        c: (*c.value()).clone(),
        delta: (*delta.value()).clone(),
    })
}

/// `s6_forward` without gradients, through the chunked scan when `chunk`
/// is given and the sequential oracle otherwise.
pub fn s6_eval<T: Real>(
    x: &Tensor<T>,
    weights: &S6Weights,
    store: &ParamStore<T>,
    chunk: Option<usize>,
) -> Result<Tensor<T>> {
    let params = select_params(x, weights, store)?;
    let disc = params.discretize()?;
    match chunk {
        Some(k) => scan_chunked(x, &disc, &params.c, k),
        None => scan_sequential(x, &disc, &params.c),
    }
}

/// `x` such that `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}
