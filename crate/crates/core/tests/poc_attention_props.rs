use pocvit::poc_attention::{
    multi_head_poc_ca, phase_only_cross_power, poc_attention_head, poc_surface, ConvParams,
    PocHeadWeights, POC_EPS,
};
use pocvit::tensor::{grad_check_extrapolated, grad_check_many, Tape, Tensor, Var};
use pocvit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn shift_rows(x: &Tensor, k: usize) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; x.len()];
    for t in 0..n {
        let dst = (t + k) % n;
        out[dst * c..(dst + 1) * c].copy_from_slice(&x.data()[t * c..(t + 1) * c]);
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn naive_dft(s: &[f64]) -> Vec<(f64, f64)> {
    let n = s.len();
    (0..n)
        .map(|k| {
            s.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, v)| {
                let th = -2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                (re + v * th.cos(), im + v * th.sin())
            })
        })
        .collect()
}

fn cross_power(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    naive_dft(x)
        .iter()
        .zip(&naive_dft(y))
        .map(|(&(a, b), &(c, d))| (a * c + b * d, a * d - b * c))
        .collect()
}

/// Naive-DFT phase correlation of two real sequences; `guard` is the
/// absolute division guard.
fn poc_oracle(x: &[f64], y: &[f64], guard: f64) -> Vec<f64> {
    let n = x.len();
    let m = cross_power(x, y);
    let m: Vec<(f64, f64)> = m
        .iter()
        .map(|&(pr, pi)| {
            let s = pr.hypot(pi) + guard;
            (pr / s, pi / s)
        })
        .collect();
    (0..n)
        .map(|t| {
            m.iter().enumerate().fold(0.0, |acc, (k, &(re, im))| {
                let th = 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                acc + re * th.cos() - im * th.sin()
            }) / n as f64
        })
        .collect()
}

/// Brute-force circular cross-correlation `sum_i x[i] y[i + t]`.
fn xcorr(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|t| (0..n).map(|i| x[i] * y[(i + t) % n]).sum())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    let c = t.shape()[1];
    (0..t.shape()[0]).map(|i| t.data()[i * c + j]).collect()
}

#[test]
fn surface_matches_naive_oracle() {
    let x = random(&[16, 3], 1);
    let y = random(&[16, 3], 2);
    let tape = Tape::inference();
    let s = poc_surface(tape.constant(x.clone()), tape.constant(y.clone())).unwrap().value();
    let total: f64 = (0..3)
        .flat_map(|j| cross_power(&column(&x, j), &column(&y, j)))
        .map(|(r, i)| r.hypot(i))
        .sum();
    let guard = POC_EPS * total / 48.0;
    for j in 0..3 {
        let want = poc_oracle(&column(&x, j), &column(&y, j), guard);
        for (a, b) in column(&s, j).iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn shift_pair_peaks_at_the_shift() {
    let x = random(&[32, 1], 3);
    for k in [0usize, 1, 5, 31] {
        let y = shift_rows(&x, k);
        let tape = Tape::inference();
        let s = poc_surface(tape.constant(x.clone()), tape.constant(y.clone())).unwrap().value();
        let col = column(&s, 0);
        assert_eq!(argmax(&col), k);
        assert_eq!(argmax(&xcorr(&column(&x, 0), &column(&y, 0))), k);
        assert!(col[k] >= 0.99, "peak {}", col[k]);
    }
}

#[test]
fn scale_invariance_examples() {
    let tape = Tape::inference();
    let q = random(&[8, 2, 2], 4);
    let k = random(&[8, 2, 2], 5);
    let base = phase_only_cross_power(tape.constant(q.clone()), tape.constant(k.clone()), POC_EPS)
        .unwrap()
        .value();
    for (a, b) in [(0.1, 10.0), (10.0, 0.1), (0.1, 0.1), (10.0, 10.0), (1e-2, 1e-2)] {
        let m = phase_only_cross_power(
            tape.constant(q.map(|v| v * a)),
            tape.constant(k.map(|v| v * b)),
            POC_EPS,
        )
        .unwrap()
        .value();
        assert!(m.max_abs_diff(&base) < 1e-6);
    }
    for z in base.data().chunks(2) {
        assert!(z[0].hypot(z[1]) <= 1.0);
    }
}

struct HeadTensors {
    wv: Tensor,
    bv: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
}

impl HeadTensors {
    fn random(out: usize, inp: usize, h: usize, seed: u64) -> Self {
        HeadTensors {
            wv: random(&[out, inp, h], seed),
            bv: random(&[out], seed + 1),
            wq: random(&[out, inp, h], seed + 2),
            bq: random(&[out], seed + 3),
            wk: random(&[out, inp, h], seed + 4),
            bk: random(&[out], seed + 5),
        }
    }

    fn list(&self) -> Vec<Tensor> {
        vec![
            self.wv.clone(),
            self.bv.clone(),
            self.wq.clone(),
            self.bq.clone(),
            self.wk.clone(),
            self.bk.clone(),
        ]
    }
}

fn bind<'t>(v: &[Var<'t>]) -> PocHeadWeights<'t> {
    PocHeadWeights {
        value: ConvParams { weight: v[0], bias: v[1] },
        query: ConvParams { weight: v[2], bias: v[3] },
        key: ConvParams { weight: v[4], bias: v[5] },
    }
}

fn constants<'t>(tape: &'t Tape, h: &HeadTensors) -> PocHeadWeights<'t> {
    let v: Vec<Var> = h.list().into_iter().map(|t| tape.constant(t)).collect();
    bind(&v)
}

#[test]
fn self_attention_scores_peak_at_zero_lag() {
    let x = random(&[16, 4], 6);
    let mut h = HeadTensors::random(2, 4, 4, 7);
    h.wk = h.wq.clone();
    h.bk = h.bq.clone();
    let tape = Tape::inference();
    let xv = tape.constant(x);
    let out = poc_attention_head(xv, xv, &constants(&tape, &h)).unwrap();
    let score = out.poc_surface.softmax_axis(0).unwrap().value();
    for j in 0..2 {
        assert_eq!(argmax(&column(&score, j)), 0);
    }
    assert_eq!(out.values.shape(), vec![16, 2]);
}

#[test]
fn zero_input_with_zero_value_bias_gives_zero() {
    let mut h = HeadTensors::random(2, 4, 4, 8);
    h.bv = Tensor::zeros(&[2]);
    let tape = Tape::inference();
    let x1 = tape.constant(Tensor::zeros(&[16, 4]));
    let x2 = tape.constant(random(&[16, 4], 9));
    let out = poc_attention_head(x1, x2, &constants(&tape, &h)).unwrap();
    assert!(out.values.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn swapping_inputs_mirrors_the_surface() {
    let x1 = random(&[16, 4], 10);
    let x2 = random(&[16, 4], 11);
    let mut h = HeadTensors::random(3, 4, 4, 12);
    h.wk = h.wq.clone();
    h.bk = h.bq.clone();
    let tape = Tape::inference();
    let w = constants(&tape, &h);
    let (a, b) = (tape.constant(x1), tape.constant(x2));
    let s12 = poc_attention_head(a, b, &w).unwrap().poc_surface.value();
    let s21 = poc_attention_head(b, a, &w).unwrap().poc_surface.value();
    for t in 0..16 {
        for j in 0..3 {
            let mirrored = s12.data()[((16 - t) % 16) * 3 + j];
            assert!((s21.data()[t * 3 + j] - mirrored).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_head_concat_layout() {
    let x1 = random(&[8, 8], 13);
    let x2 = random(&[8, 8], 14);
    let heads: Vec<HeadTensors> = (0..4).map(|i| HeadTensors::random(2, 8, 2, 100 + 10 * i)).collect();
    let tape = Tape::inference();
    let (a, b) = (tape.constant(x1), tape.constant(x2));
    let bound: Vec<PocHeadWeights> = heads.iter().map(|h| constants(&tape, h)).collect();
    let out = multi_head_poc_ca(a, b, &bound).unwrap().values.value();
    assert_eq!(out.shape(), &[8, 8]);
    let h0 = poc_attention_head(a, b, &bound[0]).unwrap().values.value();
    for t in 0..8 {
        for j in 0..2 {
            assert_eq!(out.data()[t * 8 + j].to_bits(), h0.data()[t * 2 + j].to_bits());
        }
    }

    // permuting heads permutes column blocks
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<PocHeadWeights> = perm.iter().map(|&i| bound[i]).collect();
    let pout = multi_head_poc_ca(a, b, &permuted).unwrap().values.value();
    for t in 0..8 {
        for (slot, &src) in perm.iter().enumerate() {
            for j in 0..2 {
                assert_eq!(pout.data()[t * 8 + slot * 2 + j], out.data()[t * 8 + src * 2 + j]);
            }
        }
    }

    // one full-width head equals the head itself
    let single = HeadTensors::random(8, 8, 8, 200);
    let w = constants(&tape, &single);
    let m = multi_head_poc_ca(a, b, &[w]).unwrap().values.value();
    let s = poc_attention_head(a, b, &w).unwrap().values.value();
    assert_eq!(*m, *s);

    let err = multi_head_poc_ca(a, b, &bound[..3]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn grouped_heads_see_their_own_block() {
    let x1 = random(&[8, 4], 15);
    let x2 = random(&[8, 4], 16);
    let heads: Vec<HeadTensors> = (0..2).map(|i| HeadTensors::random(2, 2, 4, 300 + 10 * i)).collect();
    let tape = Tape::inference();
    let (a, b) = (tape.constant(x1.clone()), tape.constant(x2.clone()));
    let bound: Vec<PocHeadWeights> = heads.iter().map(|h| constants(&tape, h)).collect();
    let out = multi_head_poc_ca(a, b, &bound).unwrap().values.value();
    let a1 = a.slice_axis(1, 2, 2).unwrap();
    let b1 = b.slice_axis(1, 2, 2).unwrap();
    let h1 = poc_attention_head(a1, b1, &bound[1]).unwrap().values.value();
    for t in 0..8 {
        for j in 0..2 {
            assert_eq!(out.data()[t * 4 + 2 + j], h1.data()[t * 2 + j]);
        }
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    // Query/key biases only move the real DC bin, so their true partials are
    // tiny; the extrapolated difference keeps those from drowning in noise.
    let x1 = random(&[16, 4], 17);
    let x2 = random(&[16, 4], 18);
    let h = HeadTensors::random(2, 4, 4, 19);
    let readout = random(&[16, 2], 20);
    let mut inputs = vec![x1, x2];
    inputs.extend(h.list());
    let err = grad_check_extrapolated(
        |_, v| poc_attention_head(v[0], v[1], &bind(&v[2..]))?.values.dot_const(&readout),
        &inputs,
        3e-3,
    )
    .unwrap();
    println!("POC head grad_check: {err:.3e}");
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cross_power_gradient_matches_finite_differences() {
    let q = random(&[6, 2, 2], 21);
    let k = random(&[6, 2, 2], 22);
    let readout = random(&[6, 2, 2], 23);
    let err = grad_check_many(
        |_, v| phase_only_cross_power(v[0], v[1], POC_EPS)?.dot_const(&readout),
        &[q, k],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn impulse_for_every_shift(seed in any::<u64>(), k in 0usize..64) {
        let x = random(&[64, 1], seed);
        let y = shift_rows(&x, k);
        let tape = Tape::inference();
        let s = poc_surface(tape.constant(x), tape.constant(y)).unwrap().value();
        prop_assert_eq!(argmax(s.data()), k);
        prop_assert!(s.data()[k] >= 0.99);
    }

    #[test]
    fn cross_power_scale_invariant(seed in any::<u64>(), la in -2.0f64..2.0, lb in -2.0f64..2.0) {
        let (a, b) = (10f64.powf(la), 10f64.powf(lb));
        let q = random(&[16, 2], seed);
        let k = random(&[16, 2], seed ^ 1);
        let tape = Tape::inference();
        let m0 = phase_only_cross_power(tape.constant(q.clone()), tape.constant(k.clone()), POC_EPS).unwrap().value();
        let m1 = phase_only_cross_power(tape.constant(q.map(|v| v * a)), tape.constant(k.map(|v| v * b)), POC_EPS).unwrap().value();
        prop_assert!(m0.max_abs_diff(&m1) < 1e-6);
    }

    #[test]
    fn multi_head_preserves_shape(seed in any::<u64>(), log_seq in 2u32..6, n in 1usize..4) {
        let seq = 1usize << log_seq;
        let d = 2 * n;
        let x1 = random(&[seq, d], seed);
        let x2 = random(&[seq, d], seed ^ 7);
        let heads: Vec<HeadTensors> = (0..n).map(|i| HeadTensors::random(2, d, 3.min(seq), seed.wrapping_add(i as u64 * 11))).collect();
        let tape = Tape::inference();
        let bound: Vec<PocHeadWeights> = heads.iter().map(|h| constants(&tape, h)).collect();
        let out = multi_head_poc_ca(tape.constant(x1), tape.constant(x2), &bound).unwrap();
        prop_assert_eq!(out.values.shape(), vec![seq, d]);
    }
}
