use pocvit::imageproc::{
    adaptive_contrast_equalize, adaptive_dog, adaptive_gamma, gamma_for, gaussian_blur, gaussian_kernel,
    normalize_image, tan_triggs_pipeline, truncate_contrast, GrayImage,
};
use pocvit::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Dense 2D convolution with an explicitly tabulated 2D kernel and mirrored
/// border indices; independent of the separable implementation.
fn dense_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k2 = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            k2.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k2.iter().sum();
    let mirror = |i: i64, n: i64| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - 1 - i };
        }
        i as usize
    };
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut idx = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += k2[idx] * img.get(mirror(x + dx, w), mirror(y + dy, h));
                    idx += 1;
                }
            }
            out[(y * w + x) as usize] = acc / s;
        }
    }
    out
}

#[test]
fn normalize_examples() {
    let img = GrayImage::new(3, 1, vec![10.0, 35.0, 60.0]).unwrap();
    assert_eq!(normalize_image(&img).unwrap().data()[1], 0.5);

    let c = GrayImage::filled(4, 3, 7.0).unwrap();
    assert!(normalize_image(&c).unwrap().data().iter().all(|&v| v == 0.0));

    let eight_bit = GrayImage::new(3, 1, vec![0.0, 128.0 / 255.0, 1.0]).unwrap();
    let n = normalize_image(&eight_bit).unwrap();
    assert_eq!(n.data()[0], 0.0);
    assert!((n.data()[1] - 0.50196).abs() < 1e-5);
    assert_eq!(n.data()[2], 1.0);
}

#[test]
fn gamma_examples() {
    let c = GrayImage::filled(3, 3, 0.4).unwrap();
    let (out, g) = adaptive_gamma(&c).unwrap();
    assert_eq!(g, 1.0);
    assert_eq!(out, c);

    let img = GrayImage::new(2, 1, vec![0.25, 0.75]).unwrap();
    let (out, g) = adaptive_gamma(&img).unwrap();
    assert_eq!(g, 0.75);
    assert!((out.data()[0] - 0.353_553_390_593_273_8).abs() < 1e-12);
}

#[test]
fn gamma_lower_clamp() {
    // std 0.9 cannot occur inside [0, 1], so evaluate the rule directly
    let wide = GrayImage::new(2, 1, vec![0.0, 1.8]).unwrap();
    assert!((wide.std() - 0.9).abs() < 1e-15);
    assert_eq!(gamma_for(&wide), 0.2);
    let (_, g) = adaptive_gamma(&GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
    assert_eq!(g, 0.5);
}

#[test]
fn blur_constant_and_impulse() {
    let c = GrayImage::filled(9, 7, 0.3).unwrap();
    let b = gaussian_blur(&c, 1.7).unwrap();
    for v in b.data() {
        assert!((v - 0.3).abs() < 1e-15);
    }

    let mut data = vec![0.0; 15 * 15];
    data[7 * 15 + 7] = 1.0;
    let imp = GrayImage::new(15, 15, data).unwrap();
    let b = gaussian_blur(&imp, 1.0).unwrap();
    // normalized 2D kernel centre: 1 / (sum_{|i|<=3} e^{-i^2/2})^2
    let s: f64 = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).sum();
    assert!((b.get(7, 7) - 1.0 / (s * s)).abs() < 1e-15);
    let k = gaussian_kernel(1.0).unwrap();
    assert!((b.get(7, 7) - k[3] * k[3]).abs() < 1e-15);

    assert!(matches!(gaussian_blur(&imp, 0.0), Err(Error::Parameter(_))));
}

#[test]
fn blur_matches_dense_oracle() {
    for (w, h, sigma, seed) in [(12, 9, 1.0, 1), (7, 5, 2.3, 2), (4, 3, 4.0, 3)] {
        let img = random_image(w, h, seed);
        let got = gaussian_blur(&img, sigma).unwrap();
        let want = dense_blur(&img, sigma);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{w}x{h} sigma {sigma}");
        }
        assert!((got.mean() - img.mean()).abs() < 1e-6);
    }
}

#[test]
fn dog_constant_and_step_edge() {
    let c = GrayImage::filled(16, 16, 0.6).unwrap();
    let (d, _) = adaptive_dog(&c).unwrap();
    assert!(d.data().iter().all(|v| v.abs() < 1e-15));

    // left half 0.2, right half 0.8: edge between columns 7 and 8
    let data = (0..256).map(|i| if i % 16 < 8 { 0.2 } else { 0.8 }).collect();
    let step = GrayImage::new(16, 16, data).unwrap();
    let (d, s0) = adaptive_dog(&step).unwrap();
    assert!((s0 - 3.0).abs() < 1e-12);
    let g0 = dense_blur(&step, s0);
    let g1 = dense_blur(&step, 2.0 * s0);
    for y in 0..16 {
        for x in 0..16 {
            assert!((d.get(x, y) - (g0[y * 16 + x] - g1[y * 16 + x])).abs() < 1e-12);
        }
        assert!(d.get(7, y) < 0.0 && d.get(8, y) > 0.0, "sign change at the edge");
    }
    assert!(d.mean().abs() < 1e-3);
}

#[test]
fn contrast_truncation_hand_evaluation() {
    // dog = [-3, -1, 0, 1, 3] * 0.25: mean 0, std 0.5, tau 0.75,
    // standardized values [-1.5, -0.5, 0, 0.5, 1.5]
    let dog = GrayImage::new(5, 1, vec![-0.75, -0.25, 0.0, 0.25, 0.75]).unwrap();
    let t = truncate_contrast(&dog);
    assert!((t.tau - 0.75).abs() < 1e-15);
    let want = [-0.75, -0.5, 0.0, 0.5, 0.75];
    for (a, b) in t.image.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-7);
    }
    assert_eq!(t.image.data()[0], -t.tau);
    assert_eq!(t.image.data()[4], t.tau);
    let out = adaptive_contrast_equalize(&dog).unwrap();
    assert_eq!(out.data()[0], 0.0);
    assert_eq!(out.data()[4], 1.0);

    let flat = GrayImage::filled(3, 3, 0.1).unwrap();
    assert!(adaptive_contrast_equalize(&flat).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn pipeline_constant_and_determinism() {
    let c = GrayImage::filled(8, 8, 42.0).unwrap();
    let (out, p) = tan_triggs_pipeline(&c).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert_eq!(p.gamma, 1.0);
    assert!(p.tau > 0.0 && p.epsilon > 0.0);

    let img = random_image(20, 16, 9);
    let (a, pa) = tan_triggs_pipeline(&img).unwrap();
    let (b, pb) = tan_triggs_pipeline(&img).unwrap();
    assert_eq!(pa, pb);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stage_ranges_and_gamma_bounds(seed in any::<u64>(), w in 2usize..24, h in 2usize..24, scale in 0.01f64..100.0) {
        let img = random_image(w, h, seed).map(|v| v * scale);
        let n = normalize_image(&img).unwrap();
        prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (agc, g) = adaptive_gamma(&n).unwrap();
        prop_assert!((0.2..=1.0).contains(&g));
        prop_assert_eq!(g == 1.0, n.std() <= 0.0);
        prop_assert!(agc.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (dog, s0) = adaptive_dog(&agc).unwrap();
        prop_assert!((0.5..=4.0).contains(&s0));
        prop_assert!(dog.mean().abs() <= 1e-3);
        let t = truncate_contrast(&dog);
        prop_assert!(t.image.data().iter().all(|v| v.abs() <= t.tau));
        let (out, p) = tan_triggs_pipeline(&img).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(p.sigma1, 2.0 * p.sigma0);
    }

    #[test]
    fn gamma_preserves_pixel_order(seed in any::<u64>()) {
        let img = random_image(9, 9, seed);
        let (out, _) = adaptive_gamma(&img).unwrap();
        for i in 0..img.data().len() {
            for j in 0..img.data().len() {
                if img.data()[i] < img.data()[j] {
                    prop_assert!(out.data()[i] < out.data()[j]);
                }
            }
        }
    }
}
