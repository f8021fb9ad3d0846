use deshadow_core::colorshift::{
    build_negative_set, colorshift_loss, feature_extract, filter_negatives, kmeans_rgb, lab_rmse, shadow_mean_color,
    srgb_pixel_to_lab, synth_negative, weight_negatives, ColorTriplet, FeatureExtractor,
};
use deshadow_core::numerics::Tensor;
use deshadow_core::shadowlab::synth_shadow_sample;
use deshadow_core::Error;
use proptest::prelude::*;

#[test]
fn filter_population_sigma_fixture() {
    let out = filter_negatives(&[1.0, 2.0, 9.0]).unwrap();
    assert_eq!(out.mean, 4.0);
    assert!((out.std - (38.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(out.kept, vec![0, 1]);
    assert!(!out.fallback);
    let single = filter_negatives(&[3.0]).unwrap();
    assert_eq!((single.kept, single.fallback), (vec![0], true));
}

#[test]
fn weight_fixtures() {
    assert_eq!(weight_negatives(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
    let w = weight_negatives(&[1.0, 3.0]).unwrap();
    assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    assert!(matches!(weight_negatives(&[]), Err(Error::Contract(_))));
}

#[test]
fn shadow_mean_fixture() {
    // two shadow pixels (0,0,0) and (100,200,50), one lit pixel
    let img = Tensor::new(&[3, 1, 3], vec![0.0, 100.0, 255.0, 0.0, 200.0, 255.0, 0.0, 50.0, 255.0]).unwrap();
    let mask = Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
    assert_eq!(shadow_mean_color(&img, &mask).unwrap(), ColorTriplet::new(50.0, 100.0, 25.0));
}

#[test]
fn negative_ratio_fixture() {
    let img = Tensor::full(&[3, 2, 2], 100.0);
    let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let shadow = ColorTriplet::new(100.0, 100.0, 100.0);
    let neg = synth_negative(&img, &mask, ColorTriplet::new(50.0, 100.0, 200.0), shadow).unwrap();
    assert_eq!([neg.data()[0], neg.data()[4], neg.data()[8]], [50.0, 100.0, 200.0]);
    let same = synth_negative(&img, &mask, shadow, shadow).unwrap();
    assert_eq!(same, img);
}

#[test]
fn kmeans_single_color_and_blobs() {
    let one = Tensor::from_fn(&[3, 4, 4], |i| [10.0, 20.0, 30.0][i / 16]);
    assert_eq!(kmeans_rgb(&one, 1, 0).unwrap().colors, vec![ColorTriplet::new(10.0, 20.0, 30.0)]);

    // left half near black, right half near white; exhaustive 2-partition oracle
    let img = Tensor::from_fn(&[3, 4, 4], |i| {
        let p = i % 16;
        let jitter = ((p * 7 + i / 16) % 5) as f64;
        if p % 4 < 2 {
            10.0 + jitter
        } else {
            240.0 - jitter
        }
    });
    let px: Vec<[f64; 3]> = (0..16).map(|p| [0, 1, 2].map(|c| img.data()[c * 16 + p])).collect();
    let mean = |sel: &dyn Fn(usize) -> bool| {
        let idx: Vec<usize> = (0..16).filter(|&p| sel(p)).collect();
        [0, 1, 2].map(|c| idx.iter().map(|&p| px[p][c]).sum::<f64>() / idx.len() as f64)
    };
    let mut best = (f64::INFINITY, [0.0; 3], [0.0; 3]);
    for bits in 1u32..(1 << 16) - 1 {
        let a = mean(&|p| bits >> p & 1 == 1);
        let b = mean(&|p| bits >> p & 1 == 0);
        let sse: f64 = (0..16)
            .map(|p| {
                let c = if bits >> p & 1 == 1 { a } else { b };
                (0..3).map(|k| (px[p][k] - c[k]).powi(2)).sum::<f64>()
            })
            .sum();
        if sse < best.0 {
            best = (sse, a, b);
        }
    }
    let mut got: Vec<[f64; 3]> = kmeans_rgb(&img, 2, 4).unwrap().colors.iter().map(|c| c.to_array()).collect();
    got.sort_by(|x, y| x[0].total_cmp(&y[0]));
    let mut want = vec![best.1, best.2];
    want.sort_by(|x, y| x[0].total_cmp(&y[0]));
    for (g, w) in got.iter().zip(&want) {
        for k in 0..3 {
            assert!((g[k] - w[k]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn lab_reference_colors() {
    let white = srgb_pixel_to_lab([255.0; 3]);
    assert!((white[0] - 100.0).abs() < 1e-4 && white[1].abs() < 0.01 && white[2].abs() < 0.01);
    assert_eq!(srgb_pixel_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
    let red = srgb_pixel_to_lab([255.0, 0.0, 0.0]);
    for (g, w) in red.iter().zip([53.24, 80.09, 67.20]) {
        assert!((g - w).abs() < 0.05, "{red:?}");
    }
}

#[test]
fn feature_extent_is_ceil_eighth() {
    let fe = FeatureExtractor::seeded(2);
    for (h, w) in [(8, 8), (9, 17), (16, 24), (5, 3)] {
        let img = Tensor::full(&[3, h, w], 0.5);
        let f = feature_extract(&img, &Tensor::full(&[h, w], 1.0), &fe).unwrap();
        assert_eq!(&f.shape()[1..], &[h.div_ceil(8), w.div_ceil(8)], "{h}×{w}");
    }
    let zero = Tensor::zeros(&[3, 8, 8]);
    let m = Tensor::zeros(&[8, 8]);
    assert_eq!(feature_extract(&zero, &m, &fe).unwrap(), feature_extract(&zero, &m, &fe).unwrap());
}

#[test]
fn loss_fixtures() {
    let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let p = Tensor::new(&[3], vec![2.0, 2.0, 3.0]).unwrap();
    let n = Tensor::new(&[3], vec![1.0, 2.0, 4.0]).unwrap();
    assert_eq!(colorshift_loss(&a, &a, &[(n.clone(), 1.0)]).unwrap(), 0.0);
    let half = colorshift_loss(&a, &p, &[(n, 1.0)]).unwrap();
    assert!((half - 0.5).abs() < 1e-12);
}

#[test]
fn single_color_scene_signals_skip() {
    let img = Tensor::full(&[3, 8, 8], 120.0);
    let mut mask = Tensor::zeros(&[8, 8]);
    mask.data_mut()[10] = 1.0;
    assert!(matches!(build_negative_set(&img, &mask, 10, 0), Err(Error::NoShadow(_))));
    assert!(matches!(build_negative_set(&img, &Tensor::zeros(&[8, 8]), 10, 0), Err(Error::NoShadow(_))));
}

#[test]
fn lab_rmse_identity_and_symmetry() {
    let a = Tensor::from_fn(&[3, 4, 4], |i| (i * 13 % 256) as f64);
    let b = Tensor::from_fn(&[3, 4, 4], |i| (i * 29 % 256) as f64);
    assert_eq!(lab_rmse(&a, &a).unwrap(), 0.0);
    assert_eq!(lab_rmse(&a, &b).unwrap(), lab_rmse(&b, &a).unwrap());
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_in_unit_interval_and_monotone(
        a in vec_strategy(6),
        p in vec_strategy(6),
        n1 in vec_strategy(6),
        n2 in vec_strategy(6),
        g in 0.05f64..0.95,
        t in 0.1f64..0.9,
    ) {
        let t6 = |v: &Vec<f64>| Tensor::new(&[6], v.clone()).unwrap();
        let (a, p, n1, n2) = (t6(&a), t6(&p), t6(&n1), t6(&n2));
        let negs = vec![(n1.clone(), g), (n2.clone(), 1.0 - g)];
        let l = colorshift_loss(&a, &p, &negs).unwrap();
        prop_assert!((0.0..1.0).contains(&l));
        prop_assert_eq!(l == 0.0, a == p);
        // move the first negative toward the anchor
        let closer = Tensor::from_fn(&[6], |i| n1.data()[i] + t * (a.data()[i] - n1.data()[i]));
        let moved = colorshift_loss(&a, &p, &[(closer, g), (n2, 1.0 - g)]).unwrap();
        let d_pos: f64 = a.data().iter().zip(p.data()).map(|(x, y)| (x - y).abs()).sum();
        let d_n1: f64 = a.data().iter().zip(n1.data()).map(|(x, y)| (x - y).abs()).sum();
        if d_pos > 1e-9 && d_n1 > 1e-9 {
            prop_assert!(moved > l);
        }
    }

    #[test]
    fn negative_sets_hold_invariants(seed in 0u64..10_000) {
        let s = synth_shadow_sample(seed, 16, 16).unwrap();
        let clean = s.target.map(|v| v * 255.0);
        let set = match build_negative_set(&clean, &s.mask, 10, seed) {
            Ok(set) => set,
            Err(Error::NoShadow(_)) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let m = &set.manifest;
        prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(!m.kept.is_empty() && m.kept.len() <= 10);
        for (neg, &r) in set.negatives.iter().zip(&m.difficulties) {
            prop_assert!(m.filter.fallback || (r > m.filter.mean - m.filter.std && r < m.filter.mean + m.filter.std));
            prop_assert!(r > 0.0);
            let n = 16 * 16;
            for (i, (&v, &c)) in neg.data().iter().zip(clean.data()).enumerate() {
                prop_assert!((0.0..=255.0).contains(&v));
                if s.mask.data()[i % n] == 0.0 {
                    prop_assert_eq!(v.to_bits(), c.to_bits());
                }
            }
        }
    }
}
