//! Color-shift negatives: recolor the shadow region of a clean image with its
//! dominant colors, keep the candidates of typical difficulty, and use them as
//! weighted negatives in a contrastive loss.

mod features;
mod kmeans;
mod lab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use features::{
    feature_extract, feature_extract_tape, ExtractorSource, FeatureExtractor, DEFAULT_WIDTHS,
};
pub use kmeans::{kmeans_rgb, DominantColors, CONVERGENCE_TOLERANCE, MAX_ITERATIONS};
pub use lab::{lab_rmse, lab_rmse_selected, srgb_pixel_to_lab, srgb_to_lab};

/// Floor on the shadow mean color when forming per-channel ratios.
pub const RATIO_FLOOR: f64 = 1e-6;
/// Added to the loss denominator.
pub const LOSS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTriplet {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl ColorTriplet {
    pub fn new(r: f64, g: f64, b: f64) -> Self {
        ColorTriplet { r, g, b }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }
}

impl From<[f64; 3]> for ColorTriplet {
    fn from(v: [f64; 3]) -> Self {
        ColorTriplet::new(v[0], v[1], v[2])
    }
}

fn shadow_pixels(image: &Tensor, mask: &Tensor) -> Result<Vec<usize>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("color-shift image", &[3, h, w], image.shape()));
    }
    if mask.shape() != [h, w] {
        return Err(Error::shape("color-shift mask", &[h, w], mask.shape()));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("shadow mask must be binary"));
    }
    Ok((0..h * w).filter(|&p| mask.data()[p] == 1.0).collect())
}

/// Mean RGB of the clean image over the shadow region.
pub fn shadow_mean_color(image: &Tensor, mask: &Tensor) -> Result<ColorTriplet> {
    let idx = shadow_pixels(image, mask)?;
    if idx.is_empty() {
        return Err(Error::NoShadow("empty shadow mask"));
    }
    let n = mask.len();
    let d = image.data();
    let mean = |ch: usize| idx.iter().map(|&p| d[ch * n + p]).sum::<f64>() / idx.len() as f64;
    Ok(ColorTriplet::new(mean(0), mean(1), mean(2)))
}

/// Per-channel ratio `color / max(shadow, 1e-6)`.
pub fn color_ratio(color: ColorTriplet, shadow: ColorTriplet) -> [f64; 3] {
    let c = color.to_array();
    let s = shadow.to_array();
    std::array::from_fn(|ch| c[ch] / s[ch].max(RATIO_FLOOR))
}

/// Scales the shadow region of `image` channel-wise by `color / shadow_color`
/// and clamps to `[0, 255]`; pixels outside the mask are copied unchanged.
pub fn synth_negative(
    image: &Tensor,
    mask: &Tensor,
    color: ColorTriplet,
    shadow_color: ColorTriplet,
) -> Result<Tensor> {
    let idx = shadow_pixels(image, mask)?;
    let ratio = color_ratio(color, shadow_color);
    let n = mask.len();
    let mut out = image.clone();
    let d = out.data_mut();
    for &p in &idx {
        for (ch, r) in ratio.iter().enumerate() {
            d[ch * n + p] = (d[ch * n + p] * r).clamp(0.0, 255.0);
        }
    }
    Ok(out)
}

/// Outcome of the difficulty filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    /// No candidate lay strictly inside `(mean − std, mean + std)`, so the
    /// one closest to the mean was kept.
    pub fallback: bool,
}

/// Keeps candidates whose difficulty lies strictly within one population
/// standard deviation of the mean.
pub fn filter_negatives(difficulties: &[f64]) -> Result<FilterOutcome> {
    if difficulties.is_empty() {
        return Err(Error::contract("filter_negatives on an empty candidate list"));
    }
    if let Some(i) = difficulties.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            context: "negative difficulty".into(),
        });
    }
    let n = difficulties.len() as f64;
    let mean = difficulties.iter().sum::<f64>() / n;
    let std = (difficulties.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    let kept: Vec<usize> = (0..difficulties.len())
        .filter(|&i| (difficulties[i] - mean).abs() < std)
        .collect();
    if !kept.is_empty() {
        return Ok(FilterOutcome {
            kept,
            mean,
            std,
            fallback: false,
        });
    }
    let mut best = 0;
    for (i, d) in difficulties.iter().enumerate() {
        if (d - mean).abs() < (difficulties[best] - mean).abs() {
            best = i;
        }
    }
    Ok(FilterOutcome {
        kept: vec![best],
        mean,
        std,
        fallback: true,
    })
}

/// `γ_i ∝ 1 / R_i`, normalized to sum to one.
pub fn weight_negatives(difficulties: &[f64]) -> Result<Vec<f64>> {
    if difficulties.is_empty() {
        return Err(Error::contract("weight_negatives on an empty list"));
    }
    if let Some(i) = difficulties.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::contract(format!(
            "difficulty {i} is {} but must be positive and finite",
            difficulties[i]
        )));
    }
    let inv: Vec<f64> = difficulties.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

/// Bookkeeping for one sample's negatives; everything except the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeManifest {
    pub k: usize,
    pub seed: u64,
    pub colors: Vec<ColorTriplet>,
    pub duplicated_colors: bool,
    pub shadow_color: ColorTriplet,
    pub ratios: Vec<[f64; 3]>,
    /// Difficulty of every candidate, in color order.
    pub candidate_difficulties: Vec<f64>,
    pub filter: FilterOutcome,
    /// Candidate indices that survived filtering and are not identical to
    /// the clean image.
    pub kept: Vec<usize>,
    pub difficulties: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    /// Kept negatives, `3×H×W` in `[0, 255]`, aligned with `manifest.kept`.
    pub negatives: Vec<Tensor>,
    pub manifest: NegativeManifest,
}

impl NegativeSet {
    pub fn difficulties(&self) -> &[f64] {
        &self.manifest.difficulties
    }

    pub fn weights(&self) -> &[f64] {
        &self.manifest.weights
    }
}

/// Builds the filtered, weighted negative set for a clean image (`[0, 255]`)
/// and its binary shadow mask.
pub fn build_negative_set(clean: &Tensor, mask: &Tensor, k: usize, seed: u64) -> Result<NegativeSet> {
    let shadow_color = shadow_mean_color(clean, mask)?;
    let dominant = kmeans_rgb(clean, k, seed)?;
    let mut candidates = Vec::with_capacity(k);
    let mut candidate_difficulties = Vec::with_capacity(k);
    for &c in &dominant.colors {
        let neg = synth_negative(clean, mask, c, shadow_color)?;
        candidate_difficulties.push(lab_rmse(&neg, clean)?);
        candidates.push(neg);
    }
    let filter = filter_negatives(&candidate_difficulties)?;
    let kept: Vec<usize> = filter
        .kept
        .iter()
        .copied()
        .filter(|&i| candidate_difficulties[i] > 0.0)
        .collect();
    if kept.is_empty() {
        return Err(Error::NoShadow("every kept negative equals the clean image"));
    }
    let difficulties: Vec<f64> = kept.iter().map(|&i| candidate_difficulties[i]).collect();
    let weights = weight_negatives(&difficulties)?;
    let ratios = dominant
        .colors
        .iter()
        .map(|&c| color_ratio(c, shadow_color))
        .collect();
    let negatives = kept.iter().map(|&i| candidates[i].clone()).collect();
    log::debug!(
        "negative set: {} of {k} candidates kept (mean {:.3}, std {:.3})",
        kept.len(),
        filter.mean,
        filter.std
    );
    Ok(NegativeSet {
        negatives,
        manifest: NegativeManifest {
            k,
            seed,
            colors: dominant.colors,
            duplicated_colors: dominant.duplicated,
            shadow_color,
            ratios,
            candidate_difficulties,
            filter,
            kept,
            difficulties,
            weights,
        },
    })
}

fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("colorshift_loss features", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
}

fn check_negatives(negatives: &[(Tensor, f64)]) -> Result<()> {
    if negatives.is_empty() {
        return Err(Error::contract("colorshift_loss needs at least one negative"));
    }
    Ok(())
}

/// `d⁺ / (d⁺ + Σ γ_i d_i⁻ + 1e-12)` with L1 feature distances; each negative
/// is `(features, γ)`.
pub fn colorshift_loss(anchor: &Tensor, positive: &Tensor, negatives: &[(Tensor, f64)]) -> Result<f64> {
    check_negatives(negatives)?;
    let d_pos = l1(anchor, positive)?;
    let mut d_neg = 0.0;
    for (f, g) in negatives {
        d_neg += g * l1(anchor, f)?;
    }
    Ok(d_pos / (d_pos + d_neg + LOSS_EPS))
}

/// Tape version of [`colorshift_loss`] differentiable in the anchor features.
pub fn colorshift_loss_tape(
    tape: &mut Tape,
    anchor: Var,
    positive: &Tensor,
    negatives: &[(Tensor, f64)],
) -> Result<Var> {
    check_negatives(negatives)?;
    let p = tape.constant(positive.clone());
    let d_pos = tape.l1_distance(anchor, p)?;
    let mut den = tape.add_scalar(d_pos, LOSS_EPS);
    for (f, g) in negatives {
        let n = tape.constant(f.clone());
        let d = tape.l1_distance(anchor, n)?;
        let wd = tape.scale(d, *g);
        den = tape.add(den, wd)?;
    }
    tape.div(d_pos, den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(c: [f64; 3], h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| c[i / (h * w)])
    }

    #[test]
    fn shadow_mean_and_empty_mask() {
        let img = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = shadow_mean_color(&img, &mask).unwrap();
        assert_eq!(m, ColorTriplet::new(1.5, 5.5, 9.5));
        assert!(matches!(
            shadow_mean_color(&img, &Tensor::zeros(&[2, 2])),
            Err(Error::NoShadow(_))
        ));
        let soft = Tensor::full(&[2, 2], 0.5);
        assert!(matches!(shadow_mean_color(&img, &soft), Err(Error::Contract(_))));
    }

    #[test]
    fn synth_negative_scales_inside_only() {
        let img = flat([100.0, 50.0, 200.0], 2, 2);
        let mask = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let neg = synth_negative(
            &img,
            &mask,
            ColorTriplet::new(150.0, 25.0, 255.0),
            ColorTriplet::new(100.0, 50.0, 100.0),
        )
        .unwrap();
        let d = neg.data();
        assert_eq!(&d[0..4], &[150.0, 150.0, 100.0, 100.0]);
        assert_eq!(&d[4..8], &[25.0, 25.0, 50.0, 50.0]);
        // 200 · 2.55 clamps
        assert_eq!(&d[8..12], &[255.0, 255.0, 200.0, 200.0]);
    }

    #[test]
    fn zero_shadow_channel_uses_floor() {
        let r = color_ratio(ColorTriplet::new(1.0, 0.0, 2.0), ColorTriplet::new(0.0, 0.0, 1.0));
        assert_eq!(r, [1e6, 0.0, 2.0]);
    }

    #[test]
    fn filter_keeps_strict_interval() {
        let out = filter_negatives(&[1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        // mean 4, population std sqrt(10) ≈ 3.162
        assert_eq!(out.kept, vec![0, 1, 2, 3]);
        let tight = filter_negatives(&[0.0, 4.0, 5.0, 6.0, 10.0]).unwrap();
        // mean 5, std sqrt(10.4) ≈ 3.225
        assert_eq!(tight.kept, vec![1, 2, 3]);
        assert!(!out.fallback);
    }

    #[test]
    fn filter_fallback_when_all_on_boundary() {
        let out = filter_negatives(&[1.0, 3.0]).unwrap();
        assert!(out.fallback);
        assert_eq!(out.kept, vec![0]);
        let same = filter_negatives(&[2.0, 2.0, 2.0]).unwrap();
        assert!(same.fallback);
        assert_eq!(same.kept, vec![0]);
    }

    #[test]
    fn weights_inverse_and_normalized() {
        let w = weight_negatives(&[1.0, 2.0, 4.0]).unwrap();
        let s = 1.0 + 0.5 + 0.25;
        assert!((w[0] - 1.0 / s).abs() < 1e-15);
        assert!((w[2] - 0.25 / s).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(weight_negatives(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn loss_limits() {
        let a = Tensor::from_fn(&[4], |i| i as f64);
        let far = Tensor::full(&[4], 100.0);
        assert_eq!(colorshift_loss(&a, &a, &[(far.clone(), 1.0)]).unwrap(), 0.0);
        let l = colorshift_loss(&a, &far, &[(a.clone(), 1.0)]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(matches!(colorshift_loss(&a, &a, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_tape_matches_plain_and_gradient() {
        let a = Tensor::from_fn(&[6], |i| (i as f64 * 0.7).sin());
        let p = Tensor::from_fn(&[6], |i| (i as f64 * 0.3).cos());
        let negs = vec![
            (Tensor::from_fn(&[6], |i| i as f64 * 0.2), 0.6),
            (Tensor::from_fn(&[6], |i| 1.0 - i as f64 * 0.1), 0.4),
        ];
        let plain = colorshift_loss(&a, &p, &negs).unwrap();
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let l = colorshift_loss_tape(&mut tape, av, &p, &negs).unwrap();
        assert!((tape.value(l).item() - plain).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        let grad = g.get(av).unwrap().clone();
        let h = 1e-6;
        for i in 0..6 {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let fd = (colorshift_loss(&ap, &p, &negs).unwrap() - colorshift_loss(&am, &p, &negs).unwrap())
                / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn negative_set_uniform_image_has_no_usable_negatives() {
        let img = flat([80.0, 90.0, 100.0], 4, 4);
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = 1.0;
        assert!(matches!(build_negative_set(&img, &mask, 3, 0), Err(Error::NoShadow(_))));
    }

    #[test]
    fn negative_set_is_deterministic_and_consistent() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37 + 11) % 256) as f64);
        let mask = Tensor::from_fn(&[8, 8], |p| ((p / 8) < 4 && (p % 8) < 4) as u8 as f64);
        let a = build_negative_set(&img, &mask, 6, 9).unwrap();
        let b = build_negative_set(&img, &mask, 6, 9).unwrap();
        assert_eq!(a, b);
        let m = &a.manifest;
        assert_eq!(m.candidate_difficulties.len(), 6);
        assert_eq!(a.negatives.len(), m.kept.len());
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &i) in m.kept.iter().enumerate() {
            assert_eq!(m.difficulties[j], m.candidate_difficulties[i]);
            assert!(m.filter.fallback || (m.difficulties[j] - m.filter.mean).abs() < m.filter.std);
        }
    }
}
