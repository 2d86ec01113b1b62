//! Iterative radix-2 FFT over split real/imaginary buffers.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! `1/N` factor.

use std::f64::consts::PI;

use super::{axis_layout, Tensor};
use crate::error::{Error, Result};

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

fn check_len(n: usize) -> Result<()> {
    if is_power_of_two(n) {
        Ok(())
    } else {
        Err(Error::Size(format!(
            "FFT length must be a power of two, got {n}"
        )))
    }
}

/// Twiddle table and bit-reversal permutation for one transform length.
#[derive(Clone, Debug)]
pub struct Radix2 {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    rev: Vec<usize>,
}

impl Radix2 {
    pub fn new(n: usize) -> Result<Self> {
        check_len(n)?;
        let half = n / 2;
        let (cos, sin) = (0..half)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / n as f64;
                (theta.cos(), theta.sin())
            })
            .unzip();
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        Ok(Radix2 { n, cos, sin, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized transform in place: `X_k = Σ x_n e^{∓2πi kn/N}`, the
    /// sign being `-` for forward and `+` for `inverse`.
    pub fn process(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        debug_assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * step];
                    let wi = sign * self.sin[k * step];
                    let a = start + k;
                    let b = a + half;
                    let tr = wr * re[b] - wi * im[b];
                    let ti = wr * im[b] + wi * re[b];
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

/// Forward transform of a real tensor along `axis`; the result gains a
/// trailing `[re, im]` axis.
pub fn fft_real_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    let plan = Radix2::new(n)?;
    let mut out = vec![0.0; x.len() * 2];
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let src = x.data();
    for o in 0..outer {
        for j in 0..inner {
            for i in 0..n {
                re[i] = src[(o * n + i) * inner + j];
                im[i] = 0.0;
            }
            plan.process(&mut re, &mut im, false);
            for i in 0..n {
                let idx = ((o * n + i) * inner + j) * 2;
                out[idx] = re[i];
                out[idx + 1] = im[i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.push(2);
    Tensor::new(&shape, out)
}

/// Transform of a complex tensor along `axis` (which must not be the trailing
/// component axis). The result is multiplied by `scale`.
pub fn fft_complex_axis(x: &Tensor, axis: usize, inverse: bool, scale: f64) -> Result<Tensor> {
    if !x.is_complex() || x.rank() < 2 {
        return Err(Error::Shape(format!(
            "complex tensor needs a trailing axis of extent 2, got {:?}",
            x.shape()
        )));
    }
    let base = &x.shape()[..x.rank() - 1];
    let (outer, n, inner) = axis_layout(base, axis)?;
    let plan = Radix2::new(n)?;
    let mut out = vec![0.0; x.len()];
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let src = x.data();
    for o in 0..outer {
        for j in 0..inner {
            for i in 0..n {
                let idx = ((o * n + i) * inner + j) * 2;
                re[i] = src[idx];
                im[i] = src[idx + 1];
            }
            plan.process(&mut re, &mut im, inverse);
            for i in 0..n {
                let idx = ((o * n + i) * inner + j) * 2;
                out[idx] = re[i] * scale;
                out[idx + 1] = im[i] * scale;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(Radix2::new(6), Err(Error::Size(_))));
        assert!(Radix2::new(0).is_err());
        assert!(Radix2::new(1).is_ok());
    }

    #[test]
    fn length_one_and_two() {
        let p = Radix2::new(2).unwrap();
        let (mut re, mut im) = (vec![3.0, 1.0], vec![0.0, 0.0]);
        p.process(&mut re, &mut im, false);
        assert_eq!(re, vec![4.0, 2.0]);
        assert_eq!(im, vec![0.0, 0.0]);
    }
}
