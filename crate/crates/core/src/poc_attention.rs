//! Phase-only-correlation cross-attention.
//!
//! For inputs `x1`, `x2` of shape `[seq, d]` a head computes
//! `V = conv(x1)`, `Q = fft(conv(x1))`, `K = fft(conv(x2))` along the
//! sequence axis, normalizes the cross-power spectrum `conj(Q) K` to unit
//! magnitude, takes the real part of its inverse transform and gates `V` with
//! a softmax of that correlation surface over the sequence axis.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor, Var};

/// Relative division guard inside the magnitude normalization.
pub const POC_EPS: f64 = 1e-8;

/// A circular 1D convolution: weight `[out, in / groups, h]`, bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> ConvParams<'t> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d_circular(self.weight, self.bias)
    }

    fn same_as(&self, other: &ConvParams<'t>) -> bool {
        self.weight.id() == other.weight.id() && self.bias.id() == other.bias.id()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Value, query and key convolutions of one head. When `query` and `value`
/// are the same tape variables the value path is reused for the query.
#[derive(Clone, Copy, Debug)]
pub struct PocHeadWeights<'t> {
    pub value: ConvParams<'t>,
    pub query: ConvParams<'t>,
    pub key: ConvParams<'t>,
}

impl PocHeadWeights<'_> {
    pub fn head_dim(&self) -> usize {
        self.value.out_channels()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t> {
    /// Gated values, `[seq, width]`.
    pub values: Var<'t>,
    /// Pre-softmax real correlation surface, `[seq, width]`.
    pub poc_surface: Var<'t>,
}

/// `conj(Q) K / (|conj(Q) K| + eps * mean|conj(Q) K|)` elementwise on
/// complex tensors. The guard scales with the mean magnitude over the whole
/// tensor, so rescaling `Q` or `K` leaves the result unchanged; an all-zero
/// cross-power maps to zero.
pub fn phase_only_cross_power<'t>(q: Var<'t>, k: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let (qv, kv) = (q.value(), k.value());
    if qv.shape() != kv.shape() || !qv.is_complex() {
        return Err(Error::Shape(format!(
            "phase_only_cross_power needs equal complex shapes, got {:?} and {:?}",
            qv.shape(),
            kv.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Parameter(format!("cross-power guard {eps}")));
    }
    let n = qv.len() / 2;
    let cross = |i: usize| {
        let (a, b) = (qv.data()[2 * i], qv.data()[2 * i + 1]);
        let (c, d) = (kv.data()[2 * i], kv.data()[2 * i + 1]);
        (a * c + b * d, a * d - b * c)
    };
    let p: Vec<(f64, f64)> = (0..n).map(cross).collect();
    let mag: Vec<f64> = p.iter().map(|(r, i)| r.hypot(*i)).collect();
    let guard = eps * mag.iter().sum::<f64>() / n.max(1) as f64;
    let mut out = vec![0.0; qv.len()];
    for i in 0..n {
        let s = mag[i] + guard;
        if s > 0.0 {
            out[2 * i] = p[i].0 / s;
            out[2 * i + 1] = p[i].1 / s;
        }
    }
    let value = Tensor::new(qv.shape(), out)?;
    Ok(q.tape().op(
        value,
        &[q, k],
        Box::new(move |g, needs| {
            let gd = g.data();
            // r_i = (gM_i . P_i) / s_i^2 is -dL/ds_i; every s_i also depends
            // on all magnitudes through the guard.
            let r: Vec<f64> = (0..n)
                .map(|i| {
                    let s = mag[i] + guard;
                    if s > 0.0 {
                        (gd[2 * i] * p[i].0 + gd[2 * i + 1] * p[i].1) / (s * s)
                    } else {
                        0.0
                    }
                })
                .collect();
            let shared = eps * r.iter().sum::<f64>() / n.max(1) as f64;
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; qv.len()];
            for i in 0..n {
                let s = mag[i] + guard;
                if !(s > 0.0) {
                    continue;
                }
                let (pr, pi) = p[i];
                let radial = if mag[i] > 0.0 {
                    (r[i] + shared) / mag[i]
                } else {
                    0.0
                };
                let gpr = gd[2 * i] / s - pr * radial;
                let gpi = gd[2 * i + 1] / s - pi * radial;
                let (a, b) = (qv.data()[2 * i], qv.data()[2 * i + 1]);
                let (c, d) = (kv.data()[2 * i], kv.data()[2 * i + 1]);
                gq[2 * i] = gpr * c + gpi * d;
                gq[2 * i + 1] = gpr * d - gpi * c;
                gk[2 * i] = gpr * a - gpi * b;
                gk[2 * i + 1] = gpr * b + gpi * a;
            }
            let shape = qv.shape();
            vec![
                needs[0].then(|| Tensor::new(shape, gq).expect("shape")),
                needs[1].then(|| Tensor::new(shape, gk).expect("shape")),
            ]
        }),
    ))
}

/// Real correlation surface `Re(ifft(poc(fft(q), fft(k))))` along axis 0.
pub fn poc_surface<'t>(q_seq: Var<'t>, k_seq: Var<'t>) -> Result<Var<'t>> {
    let q = q_seq.fft_axis(0)?;
    let k = k_seq.fft_axis(0)?;
    phase_only_cross_power(q, k, POC_EPS)?.ifft_axis(0)?.real_part()
}

fn gate<'t>(v: Var<'t>, q: Var<'t>, k: Var<'t>) -> Result<AttentionOutput<'t>> {
    let surface = poc_surface(q, k)?;
    let score = surface.softmax_axis(0)?;
    Ok(AttentionOutput {
        values: v.mul(score)?,
        poc_surface: surface,
    })
}

/// One attention head over `[seq, channels]` inputs.
pub fn poc_attention_head<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    w: &PocHeadWeights<'t>,
) -> Result<AttentionOutput<'t>> {
    if x1.shape() != x2.shape() || x1.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "attention inputs must both be [seq, d], got {:?} and {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let v = w.value.apply(x1)?;
    let q = if w.query.same_as(&w.value) {
        v
    } else {
        w.query.apply(x1)?
    };
    let k = w.key.apply(x2)?;
    gate(v, q, k)
}

/// Convolution outputs keyed by weights, input and column block. With
/// shared weights the same convolution of the same input shows up as a
/// query and a value, or as one channel's value and the other channel's
/// key; the cache runs it once.
#[derive(Default)]
pub struct ConvCache<'t> {
    outputs: HashMap<(usize, usize, usize, usize), Var<'t>>,
}

impl<'t> ConvCache<'t> {
    fn apply(&mut self, conv: &ConvParams<'t>, x: Var<'t>, block: Option<(usize, usize)>) -> Result<Var<'t>> {
        let tag = block.map_or(usize::MAX, |(i, _)| i);
        let key = (conv.weight.id(), conv.bias.id(), x.id(), tag);
        if let Some(v) = self.outputs.get(&key) {
            return Ok(*v);
        }
        let input = match block {
            Some((i, width)) => x.slice_axis(1, i * width, width)?,
            None => x,
        };
        let out = conv.apply(input)?;
        self.outputs.insert(key, out);
        Ok(out)
    }
}

/// Heads applied independently and concatenated along the embedding axis.
/// A head whose weights expect `d / n` input channels sees only its own
/// column block of the inputs.
pub fn multi_head_poc_ca<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    heads: &[PocHeadWeights<'t>],
) -> Result<AttentionOutput<'t>> {
    multi_head_poc_ca_cached(x1, x2, heads, &mut ConvCache::default())
}

/// [`multi_head_poc_ca`] reusing convolution outputs held in `cache`.
pub fn multi_head_poc_ca_cached<'t>(
    x1: Var<'t>,
    x2: Var<'t>,
    heads: &[PocHeadWeights<'t>],
    cache: &mut ConvCache<'t>,
) -> Result<AttentionOutput<'t>> {
    let shape = x1.shape();
    if shape.len() != 2 || x2.shape() != shape {
        return Err(Error::Shape(format!(
            "attention inputs must both be [seq, d], got {shape:?} and {:?}",
            x2.shape()
        )));
    }
    let d = shape[1];
    let n = heads.len();
    let total: usize = heads.iter().map(PocHeadWeights::head_dim).sum();
    if n == 0 || total != d || heads.iter().any(|h| h.head_dim() * n != d) {
        return Err(Error::Config(format!(
            "{n} heads of widths {:?} cannot tile embedding width {d}",
            heads.iter().map(PocHeadWeights::head_dim).collect::<Vec<_>>()
        )));
    }
    let head_dim = d / n;
    let mut values = Vec::with_capacity(n);
    let mut surfaces = Vec::with_capacity(n);
    for (i, w) in heads.iter().enumerate() {
        let in_ch = w.value.weight.shape()[1];
        let block = (in_ch == head_dim && n > 1).then_some((i, head_dim));
        let v = cache.apply(&w.value, x1, block)?;
        let q = cache.apply(&w.query, x1, block)?;
        let k = cache.apply(&w.key, x2, block)?;
        let out = gate(v, q, k)?;
        values.push(out.values);
        surfaces.push(out.poc_surface);
    }
    Ok(AttentionOutput {
        values: concat(&values, 1)?,
        poc_surface: concat(&surfaces, 1)?,
    })
}
