//! Differentiable operations recorded on a [`Tape`](super::Tape).

use std::sync::Arc;

use super::fft::{fft_complex_axis, fft_real_axis};
use super::gemm::{gemm, MatView};
use super::{axis_layout, Tensor, Var};
use crate::error::{Error, Result};

/// Variance guard used by [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn row_sums(g: &Tensor, cols: usize) -> Tensor {
    let mut out = vec![0.0; cols];
    for row in g.data().chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, rule: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        self.tape()
            .op(value, &[self], Box::new(move |g, _| vec![Some(rule(g))]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.tape().op(
            value,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.tape().op(
            value,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape(), data)?;
        Ok(self.tape().op(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let prod = |other: &Tensor| {
                    let d = g.data().iter().zip(other.data()).map(|(x, y)| x * y);
                    Tensor::new(g.shape(), d.collect()).expect("same shape")
                };
                vec![
                    needs[0].then(|| prod(&b)),
                    needs[1].then(|| prod(&a)),
                ]
            }),
        ))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let value = self.value().map(|v| v * k);
        self.unary(value, move |g| g.map(|v| v * k))
    }

    /// Adds `bias` (shape `[c]`) to every row of a tensor whose last axis is `c`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap_or(&0);
        if b.shape() != [c] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match trailing axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.tape().op(
            value,
            &[self, bias],
            Box::new(move |g, needs| vec![Some(g.clone()), needs[1].then(|| row_sums(g, c))]),
        ))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        expect_rank(&a, 2, "matmul lhs")?;
        expect_rank(&b, 2, "matmul rhs")?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        if b.shape()[0] != k {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (MatView::row_major(m, k), MatView::row_major(k, n));
        gemm(1.0, a.data(), av, b.data(), bv, 0.0, &mut out, MatView::row_major(m, n));
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.tape().op(
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let gv = MatView::row_major(m, n);
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(1.0, g.data(), gv, b.data(), bv.t(), 0.0, &mut ga, av);
                    Tensor::new(&[m, k], ga).expect("shape")
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(1.0, a.data(), av.t(), g.data(), gv, 0.0, &mut gb, bv);
                    Tensor::new(&[k, n], gb).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map `x·wᵀ + b` with `x: [m,k]`, `w: [n,k]`, `b: [n]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        expect_rank(&x, 2, "linear input")?;
        expect_rank(&wv, 2, "linear weight")?;
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let n = wv.shape()[0];
        if wv.shape()[1] != k || bv.shape() != [n] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        let (xv, wvv, ov) = (
            MatView::row_major(m, k),
            MatView::row_major(n, k),
            MatView::row_major(m, n),
        );
        gemm(1.0, x.data(), xv, wv.data(), wvv.t(), 1.0, &mut out, ov);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.tape().op(
            value,
            &[self, w, b],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; m * k];
                    gemm(1.0, g.data(), ov, wv.data(), wvv, 0.0, &mut gx, xv);
                    Tensor::new(&[m, k], gx).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; n * k];
                    gemm(1.0, g.data(), ov.t(), x.data(), xv, 0.0, &mut gw, wvv);
                    Tensor::new(&[n, k], gw).expect("shape")
                });
                vec![gx, gw, needs[2].then(|| row_sums(g, n))]
            }),
        ))
    }

    /// Circular 1-D convolution along the sequence axis.
    ///
    /// `x: [seq, ch_in]`, `w: [ch_out, ch_in / groups, h]`, `b: [ch_out]`;
    /// `groups` is inferred from the weight's input extent. Output position
    /// `t` reads inputs `t + k - h/2 (mod seq)` for `k in 0..h`, stride 1.
    pub fn conv1d_circular(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        expect_rank(&x, 2, "conv1d input")?;
        expect_rank(&wv, 3, "conv1d weight")?;
        let (seq, cin) = (x.shape()[0], x.shape()[1]);
        let (cout, cg, h) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if cg == 0 || cin % cg != 0 || cout % (cin / cg) != 0 {
            return Err(Error::Shape(format!(
                "conv1d: channel mismatch between input {:?} and weight {:?}",
                x.shape(),
                wv.shape()
            )));
        }
        if bv.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv1d: bias {:?} for {cout} output channels",
                bv.shape()
            )));
        }
        if h == 0 || h > seq {
            return Err(Error::Shape(format!(
                "conv1d: kernel size {h} exceeds sequence length {seq}"
            )));
        }
        let groups = cin / cg;
        let og = cout / groups;
        let kc = cg * h;
        let off = h / 2;

        let mut cols = vec![0.0; groups * seq * kc];
        let xd = x.data();
        for gi in 0..groups {
            for t in 0..seq {
                let dst = &mut cols[(gi * seq + t) * kc..(gi * seq + t + 1) * kc];
                for k in 0..h {
                    let src_t = (t + k + seq - off) % seq;
                    let src = &xd[src_t * cin + gi * cg..src_t * cin + (gi + 1) * cg];
                    for (c, &v) in src.iter().enumerate() {
                        dst[c * h + k] = v;
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(seq * cout);
        for _ in 0..seq {
            out.extend_from_slice(bv.data());
        }
        let colv = MatView::row_major(seq, kc);
        let wgv = MatView::row_major(og, kc);
        let outv = MatView::with_row_stride(seq, og, cout);
        for gi in 0..groups {
            gemm(
                1.0,
                &cols[gi * seq * kc..],
                colv,
                &wv.data()[gi * og * kc..],
                wgv.t(),
                1.0,
                &mut out[gi * og..],
                outv,
            );
        }
        let value = Tensor::new(&[seq, cout], out)?;
        Ok(self.tape().op(
            value,
            &[self, w, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; cout * kc];
                    for gi in 0..groups {
                        gemm(
                            1.0,
                            &gd[gi * og..],
                            outv.t(),
                            &cols[gi * seq * kc..],
                            colv,
                            0.0,
                            &mut gw[gi * og * kc..],
                            wgv,
                        );
                    }
                    Tensor::new(&[cout, cg, h], gw).expect("shape")
                });
                let gx = needs[0].then(|| {
                    let mut gcols = vec![0.0; seq * kc];
                    let mut gx = vec![0.0; seq * cin];
                    for gi in 0..groups {
                        gemm(
                            1.0,
                            &gd[gi * og..],
                            outv,
                            &wv.data()[gi * og * kc..],
                            wgv,
                            0.0,
                            &mut gcols,
                            colv,
                        );
                        for t in 0..seq {
                            let src = &gcols[t * kc..(t + 1) * kc];
                            for k in 0..h {
                                let dst_t = (t + k + seq - off) % seq;
                                let dst = &mut gx[dst_t * cin + gi * cg..dst_t * cin + (gi + 1) * cg];
                                for (c, d) in dst.iter_mut().enumerate() {
                                    *d += src[c * h + k];
                                }
                            }
                        }
                    }
                    Tensor::new(&[seq, cin], gx).expect("shape")
                });
                vec![gx, gw, needs[2].then(|| row_sums(g, cout))]
            }),
        ))
    }

    /// Unnormalized forward DFT of a real tensor along `axis`; appends a
    /// trailing `[re, im]` axis.
    pub fn fft_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let value = fft_real_axis(&x, axis)?;
        Ok(self.unary(value, move |g| {
            // adjoint: real part of the unnormalized inverse transform
            let back = fft_complex_axis(g, axis, true, 1.0).expect("validated in forward");
            let re = back.data().iter().step_by(2).copied().collect();
            Tensor::new(x.shape(), re).expect("shape")
        }))
    }

    /// Inverse DFT (with `1/N`) of a complex tensor along `axis`.
    pub fn ifft_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_complex() || axis + 1 >= x.rank() {
            return Err(Error::Shape(format!(
                "ifft_axis: axis {axis} of complex tensor {:?}",
                x.shape()
            )));
        }
        let n = x.shape()[axis] as f64;
        let value = fft_complex_axis(&x, axis, true, 1.0 / n)?;
        Ok(self.unary(value, move |g| {
            fft_complex_axis(g, axis, false, 1.0 / n).expect("validated in forward")
        }))
    }

    /// Real component of a complex tensor.
    pub fn real_part(self) -> Result<Var<'t>> {
        let x = self.value();
        if !x.is_complex() {
            return Err(Error::Shape(format!(
                "real_part of non-complex tensor {:?}",
                x.shape()
            )));
        }
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let re = x.data().iter().step_by(2).copied().collect();
        let value = Tensor::new(&shape, re)?;
        let full = x.shape().to_vec();
        Ok(self.unary(value, move |g| {
            let mut out = vec![0.0; g.len() * 2];
            for (i, v) in g.data().iter().enumerate() {
                out[2 * i] = *v;
            }
            Tensor::new(&full, out).expect("shape")
        }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = axis_layout(x.shape(), axis)?;
        let xd = x.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (xd[idx(i)] - max).exp();
                    y[idx(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    y[idx(i)] /= sum;
                }
            }
        }
        let value = Tensor::new(x.shape(), y)?;
        let y = Arc::new(value.clone());
        Ok(self.unary(value, move |g| {
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    let dot: f64 = (0..n).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
                    for i in 0..n {
                        gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                    }
                }
            }
            Tensor::new(y.shape(), gx).expect("shape")
        }))
    }

    /// Standardizes each slice along `axis` (ε = 1e-5) then applies
    /// per-position `gain` and `bias` of shape `[extent]`.
    pub fn layer_norm(self, axis: usize, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let (outer, n, inner) = axis_layout(x.shape(), axis)?;
        if n < 2 {
            return Err(Error::Shape(format!(
                "layer_norm needs extent >= 2 along axis {axis}, got {n}"
            )));
        }
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} for extent {n}",
                gv.shape(),
                bv.shape()
            )));
        }
        let xd = x.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv = vec![0.0; outer * inner];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| xd[idx(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (xd[idx(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv[o * inner + j] = s;
                for i in 0..n {
                    let h = (xd[idx(i)] - mean) * s;
                    xhat[idx(i)] = h;
                    y[idx(i)] = h * gv.data()[i] + bv.data()[i];
                }
            }
        }
        let value = Tensor::new(x.shape(), y)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().op(
            value,
            &[self, gain, bias],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let mut gh = vec![0.0; n];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for i in 0..n {
                            let gy = gd[idx(i)];
                            gg[i] += gy * xhat[idx(i)];
                            gb[i] += gy;
                            gh[i] = gy * gv.data()[i];
                            mean_gh += gh[i];
                            mean_ghx += gh[i] * xhat[idx(i)];
                        }
                        mean_gh /= n as f64;
                        mean_ghx /= n as f64;
                        let s = inv[o * inner + j];
                        for i in 0..n {
                            gx[idx(i)] = s * (gh[i] - mean_gh - xhat[idx(i)] * mean_ghx);
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(&shape, gx).expect("shape")),
                    needs[1].then(|| Tensor::vector(gg)),
                    needs[2].then(|| Tensor::vector(gb)),
                ]
            }),
        ))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = axis_layout(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += x.data()[(o * n + i) * inner + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let full = x.shape().to_vec();
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    for j in 0..inner {
                        gx[(o * n + i) * inner + j] = g.data()[o * inner + j] / n as f64;
                    }
                }
            }
            Tensor::new(&full, gx).expect("shape")
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let value = Tensor::scalar(x.data().iter().sum());
        let shape = x.shape().to_vec();
        self.unary(value, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `sum(self ⊙ weights)` against a constant tensor.
    pub fn dot_const(self, weights: &Tensor) -> Result<Var<'t>> {
        let w = self.tape().constant(weights.clone());
        Ok(self.mul(w)?.sum())
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.unary(value, move |g| {
            let d = x.data().iter().zip(g.data()).map(|(&v, &gy)| {
                let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                gy * (0.5 * (1.0 + t) + 0.5 * v * dt)
            });
            Tensor::new(x.shape(), d.collect()).expect("shape")
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let value = x.map(|v| v.max(0.0));
        self.unary(value, move |g| {
            let d = x.data().iter().zip(g.data()).map(|(&v, &gy)| if v > 0.0 { gy } else { 0.0 });
            Tensor::new(x.shape(), d.collect()).expect("shape")
        })
    }

    /// Parametric ReLU with a single learnable slope (shape `[1]`).
    pub fn prelu(self, slope: Var<'t>) -> Result<Var<'t>> {
        let (x, a) = (self.value(), slope.value());
        if a.len() != 1 {
            return Err(Error::Shape(format!(
                "prelu slope must hold one value, got {:?}",
                a.shape()
            )));
        }
        let s = a.data()[0];
        let value = x.map(|v| if v > 0.0 { v } else { s * v });
        let slope_shape = a.shape().to_vec();
        Ok(self.tape().op(
            value,
            &[self, slope],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let d = x.data().iter().zip(g.data()).map(|(&v, &gy)| if v > 0.0 { gy } else { s * gy });
                    Tensor::new(x.shape(), d.collect()).expect("shape")
                });
                let ga = needs[1].then(|| {
                    let total: f64 = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .filter(|(&v, _)| v <= 0.0)
                        .map(|(&v, &gy)| v * gy)
                        .sum();
                    Tensor::full(&slope_shape, total)
                });
                vec![gx, ga]
            }),
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = axis_layout(x.shape(), axis)?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) exceeds extent {n} on axis {axis}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let full = x.shape().to_vec();
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::new(&full, gx).expect("shape")
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = (*x).clone().reshaped(shape)?;
        let original = x.shape().to_vec();
        Ok(self.unary(value, move |g| g.clone().reshaped(&original).expect("same size")))
    }

    /// Splits a `[h, w]` raster into non-overlapping `p×p` patches, returning
    /// `[(h/p)·(w/p), p·p]` in row-major patch order.
    pub fn patches(self, p: usize) -> Result<Var<'t>> {
        let x = self.value();
        expect_rank(&x, 2, "patches")?;
        let (h, w) = (x.shape()[0], x.shape()[1]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "patch size {p} does not tile a {h}x{w} image"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let index = move |token: usize, k: usize| {
            let (py, px) = (token / gw, token % gw);
            let (dy, dx) = (k / p, k % p);
            (py * p + dy) * w + px * p + dx
        };
        let mut out = vec![0.0; h * w];
        for t in 0..gh * gw {
            for k in 0..p * p {
                out[t * p * p + k] = x.data()[index(t, k)];
            }
        }
        let value = Tensor::new(&[gh * gw, p * p], out)?;
        Ok(self.unary(value, move |g| {
            let mut gx = vec![0.0; h * w];
            for t in 0..gh * gw {
                for k in 0..p * p {
                    gx[index(t, k)] = g.data()[t * p * p + k];
                }
            }
            Tensor::new(&[h, w], gx).expect("shape")
        }))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    let (outer, _, inner) = axis_layout(&base, axis)?;
    let mut extents = Vec::with_capacity(parts.len());
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Shape(format!(
                "concat along axis {axis}: {:?} vs {:?}",
                s, base
            )));
        }
        extents.push(s[axis]);
    }
    let total: usize = extents.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &n) in values.iter().zip(&extents) {
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let value = Tensor::new(&shape, out)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape().op(
        value,
        parts,
        Box::new(move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(shapes.len());
            for ((s, &n), &need) in shapes.iter().zip(&extents).zip(needs) {
                if need {
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    grads.push(Some(Tensor::new(s, gp).expect("shape")));
                } else {
                    grads.push(None);
                }
                offset += n;
            }
            grads
        }),
    ))
}
