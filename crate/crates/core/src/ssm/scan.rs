//! Selective state-space recurrence.
//!
//! For channel `d` and state slot `s`:
//!
//! ```text
//! h_t[d,s] = exp(Δ_t[d]·A[d,s])·h_{t-1}[d,s] + Δ_t[d]·B_t[s]·u_t[d]
//! y_t[d]   = Σ_s C_t[s]·h_t[d,s] + D[d]·u_t[d]
//! ```
//!
//! with `h_{-1} = 0`. The backward direction runs the same recurrence from the
//! last timestep to the first, which equals reversing, scanning and reversing.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use num_traits::Float;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Timestep visited at step `k` of a length-`t` sequence.
    #[inline]
    pub fn step(self, k: usize, t: usize) -> usize {
        match self {
            Direction::Forward => k,
            Direction::Backward => t - 1 - k,
        }
    }
}

/// Plain (non-differentiable) scan parameters. `B_t = u_t·b_proj`,
/// `C_t = u_t·c_proj` and `A = −exp(a_log)`.
#[derive(Clone, Debug)]
pub struct ScanParams<F> {
    /// `D_inner×n`
    pub a_log: Array2<F>,
    /// `D_inner×n`
    pub b_proj: Array2<F>,
    /// `D_inner×n`
    pub c_proj: Array2<F>,
    /// length `D_inner`
    pub d_skip: Vec<F>,
}

fn check_finite<F: Float>(what: &str, m: ArrayView2<'_, F>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Scan over a single sequence of `T` timesteps.
pub fn selective_scan<F: Float + ndarray::LinalgScalar>(
    u: ArrayView2<'_, F>,
    delta: ArrayView2<'_, F>,
    params: &ScanParams<F>,
    direction: Direction,
) -> Result<Array2<F>> {
    let (t, d) = u.dim();
    if t == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if delta.dim() != (t, d) || params.a_log.nrows() != d || params.d_skip.len() != d {
        return Err(Error::Shape("scan operand shapes disagree".into()));
    }
    check_finite("scan input", u)?;
    check_finite("scan step sizes", delta)?;
    if delta.iter().any(|&v| v <= F::zero()) {
        return Err(Error::Degenerate("step size must be positive".into()));
    }
    let a = params.a_log.mapv(|v| -v.exp());
    let b = u.dot(&params.b_proj);
    let c = u.dot(&params.c_proj);
    Ok(scan_kernel(u, delta, a.view(), b.view(), c.view(), &params.d_skip, t, direction, None))
}

/// Core kernel over `rows / seq_len` stacked sequences. When `states` is
/// provided, the post-update state of every row is written there
/// (`rows·D·n` entries) for the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_kernel<F: Float>(
    u: ArrayView2<'_, F>,
    delta: ArrayView2<'_, F>,
    a: ArrayView2<'_, F>,
    b: ArrayView2<'_, F>,
    c: ArrayView2<'_, F>,
    d_skip: &[F],
    seq_len: usize,
    direction: Direction,
    mut states: Option<&mut Vec<F>>,
) -> Array2<F> {
    let (rows, d) = u.dim();
    let n = a.ncols();
    let a = a.as_standard_layout();
    let a = a.as_slice().expect("contiguous A");
    let mut y = Array2::<F>::zeros((rows, d));
    let mut h = vec![F::zero(); d * n];
    if let Some(st) = states.as_deref_mut() {
        st.clear();
        st.resize(rows * d * n, F::zero());
    }
    for seq in 0..rows / seq_len {
        h.iter_mut().for_each(|v| *v = F::zero());
        for k in 0..seq_len {
            let r = seq * seq_len + direction.step(k, seq_len);
            let b_r = b.row(r);
            let c_r = c.row(r);
            for ch in 0..d {
                let dt = delta[[r, ch]];
                let x = u[[r, ch]];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let arow = &a[ch * n..(ch + 1) * n];
                let mut acc = F::zero();
                for s in 0..n {
                    let hv = (dt * arow[s]).exp() * hs[s] + dt * b_r[s] * x;
                    hs[s] = hv;
                    acc = acc + c_r[s] * hv;
                }
                y[[r, ch]] = acc + d_skip[ch] * x;
            }
            if let Some(st) = states.as_deref_mut() {
                st[r * d * n..(r + 1) * d * n].copy_from_slice(&h);
            }
        }
    }
    y
}

impl Graph {
    /// Differentiable batched scan. `u`, `delta`: `rows×D`; `a`: `D×n`;
    /// `b`, `c`: `rows×n`; `d_skip`: `1×D`. Rows hold `rows/seq_len`
    /// stacked sequences.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        seq_len: usize,
        direction: Direction,
    ) -> Var {
        let (rows, d) = self.value(u).dim();
        let n = self.value(a).ncols();
        assert!(seq_len > 0 && rows % seq_len == 0, "scan: rows not a multiple of seq_len");
        assert_eq!(self.value(delta).dim(), (rows, d));
        assert_eq!(self.value(a).dim(), (d, n));
        assert_eq!(self.value(b).dim(), (rows, n));
        assert_eq!(self.value(c).dim(), (rows, n));
        assert_eq!(self.value(d_skip).dim(), (1, d));
        let mut states = Vec::new();
        let dsk: Vec<f64> = self.value(d_skip).iter().copied().collect();
        let y = scan_kernel(
            self.value(u).view(),
            self.value(delta).view(),
            self.value(a).view(),
            self.value(b).view(),
            self.value(c).view(),
            &dsk,
            seq_len,
            direction,
            Some(&mut states),
        );
        let states = Rc::new(states);
        self.custom(
            y,
            vec![u, delta, a, b, c, d_skip],
            Box::new(move |ctx| scan_backward(ctx.inputs.as_slice(), ctx.grad, &states, seq_len, direction)),
        )
    }
}

fn scan_backward(
    inputs: &[&Mat],
    gy: &Mat,
    states: &[f64],
    seq_len: usize,
    direction: Direction,
) -> Vec<Option<Mat>> {
    let (u, delta, a, b, c, d_skip) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]);
    let (rows, d) = u.dim();
    let n = a.ncols();
    let mut gu = Mat::zeros((rows, d));
    let mut gdelta = Mat::zeros((rows, d));
    let mut ga = Mat::zeros((d, n));
    let mut gb = Mat::zeros((rows, n));
    let mut gc = Mat::zeros((rows, n));
    let mut gd = Mat::zeros((1, d));
    // carry[ch*n+s] = dL/dh_k coming from step k+1 (already multiplied by a_{k+1})
    let mut carry = vec![0.0; d * n];
    let zeros = vec![0.0; d * n];
    for seq in 0..rows / seq_len {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..seq_len).rev() {
            let r = seq * seq_len + direction.step(k, seq_len);
            let h = &states[r * d * n..(r + 1) * d * n];
            let h_prev = if k == 0 {
                &zeros[..]
            } else {
                let rp = seq * seq_len + direction.step(k - 1, seq_len);
                &states[rp * d * n..(rp + 1) * d * n]
            };
            for ch in 0..d {
                let g = gy[[r, ch]];
                let dt = delta[[r, ch]];
                let x = u[[r, ch]];
                gd[[0, ch]] += g * x;
                let mut gx = g * d_skip[[0, ch]];
                let mut gdt = 0.0;
                for s in 0..n {
                    let idx = ch * n + s;
                    gc[[r, s]] += g * h[idx];
                    let gh = c[[r, s]] * g + carry[idx];
                    let av = a[[ch, s]];
                    let decay = (dt * av).exp();
                    let bs = b[[r, s]];
                    let hp = h_prev[idx];
                    gx += gh * dt * bs;
                    gdt += gh * (bs * x + hp * decay * av);
                    ga[[ch, s]] += gh * hp * decay * dt;
                    gb[[r, s]] += gh * dt * x;
                    carry[idx] = gh * decay;
                }
                gu[[r, ch]] = gx;
                gdelta[[r, ch]] = gdt;
            }
        }
    }
    vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
}

/// Depthwise convolution of width `k` along each sequence. The forward
/// direction is causal (taps on past timesteps); the backward direction mirrors
/// it onto future timesteps. Weight is `k×C`, bias `1×C`.
pub(crate) fn conv_kernel(x: &Mat, w: &Mat, bias: &Mat, seq_len: usize, direction: Direction) -> Mat {
    let (rows, ch) = x.dim();
    let k = w.nrows();
    let mut y = Mat::zeros((rows, ch));
    for seq in 0..rows / seq_len {
        let base = seq * seq_len;
        for step in 0..seq_len {
            let r = base + direction.step(step, seq_len);
            let mut out = y.row_mut(r);
            out.assign(&bias.row(0));
            for tap in 0..k {
                // tap k-1 is the current timestep
                let lag = k - 1 - tap;
                if lag > step {
                    continue;
                }
                let src = base + direction.step(step - lag, seq_len);
                let xr = x.row(src);
                let wr = w.row(tap);
                for c in 0..ch {
                    out[c] += wr[c] * xr[c];
                }
            }
        }
    }
    y
}

impl Graph {
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        seq_len: usize,
        direction: Direction,
    ) -> Var {
        let (rows, ch) = self.value(x).dim();
        assert!(seq_len > 0 && rows % seq_len == 0, "conv: rows not a multiple of seq_len");
        assert_eq!(self.value(weight).ncols(), ch);
        assert_eq!(self.value(bias).dim(), (1, ch));
        let y = conv_kernel(self.value(x), self.value(weight), self.value(bias), seq_len, direction);
        self.custom(
            y,
            vec![x, weight, bias],
            Box::new(move |ctx| {
                let (x, w, gy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (rows, ch) = x.dim();
                let k = w.nrows();
                let mut gx = Mat::zeros((rows, ch));
                let mut gw = Mat::zeros((k, ch));
                let gb = gy.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                for seq in 0..rows / seq_len {
                    let base = seq * seq_len;
                    for step in 0..seq_len {
                        let r = base + direction.step(step, seq_len);
                        for tap in 0..k {
                            let lag = k - 1 - tap;
                            if lag > step {
                                continue;
                            }
                            let src = base + direction.step(step - lag, seq_len);
                            for c in 0..ch {
                                let g = gy[[r, c]];
                                gx[[src, c]] += g * w[[tap, c]];
                                gw[[tap, c]] += g * x[[src, c]];
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        )
    }
}
