//! Seeded synthetic shadow scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MIN_COVERAGE: f64 = 0.05;
pub const MAX_COVERAGE: f64 = 0.60;
pub const MASK_RETRIES: usize = 20;
/// Interior ramp width of the penumbra, in pixels.
pub const PENUMBRA: f64 = 2.0;

/// A degraded image, its binary shadow mask and the clean image, all at the
/// same resolution. Images are `3×H×W` in `[0,1]`, quantized to 8 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowSample {
    pub input: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
    /// Seed that produced this sample (may exceed the requested seed when
    /// mask generation had to move on).
    pub seed: u64,
}

/// Overrides for the per-sample affine shadow model `a·x + b`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthOptions {
    pub affine: Option<([f64; 3], [f64; 3])>,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.9));
    let mut img: Vec<f64> = (0..3 * n).map(|i| base[i / n]).collect();
    for _ in 0..2 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let (dx, dy) = (angle.cos(), angle.sin());
        let scale = (dx.abs() * w as f64 + dy.abs() * h as f64).max(1.0);
        for p in 0..n {
            let (i, j) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            let t = (dx * (j - w as f64 / 2.0) + dy * (i - h as f64 / 2.0)) / scale;
            for ch in 0..3 {
                img[ch * n + p] += amp[ch] * t;
            }
        }
    }
    let shapes = rng.random_range(2..=4);
    let side = h.min(w) as f64;
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let ci = rng.random_range(0.0..h as f64);
        let cj = rng.random_range(0.0..w as f64);
        let r = rng.random_range(0.1..0.35) * side;
        let circle = rng.random_bool(0.5);
        for p in 0..n {
            let (i, j) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            let inside = if circle {
                (i - ci).powi(2) + (j - cj).powi(2) <= r * r
            } else {
                (i - ci).abs() <= r && (j - cj).abs() <= 0.7 * r
            };
            if inside {
                for ch in 0..3 {
                    img[ch * n + p] = color[ch];
                }
            }
        }
    }
    img.into_iter().map(quantize).collect()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    hull.len() >= 3 && (0..hull.len()).all(|k| cross(hull[k], hull[(k + 1) % hull.len()], p) >= 0.0)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    let side = h.min(w) as f64;
    for _ in 0..rng.random_range(1..=3) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(0.15..0.45) * side;
        let pts: Vec<(f64, f64)> = (0..rng.random_range(4..=8))
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let d = r * rng.random_range(0.4..1.0);
                (cx + d * a.cos(), cy + d * a.sin())
            })
            .collect();
        let hull = convex_hull(pts);
        for (p, m) in mask.iter_mut().enumerate() {
            let c = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            if inside_hull(&hull, c) {
                *m = 1.0;
            }
        }
    }
    mask
}

/// Weight of the shadow at each masked pixel: `min(d / (PENUMBRA + 1), 1)`
/// where `d` is the distance to the nearest unmasked pixel.
fn penumbra_weights(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let reach = PENUMBRA as isize + 1;
    let full = PENUMBRA + 1.0;
    (0..h * w)
        .map(|p| {
            if mask[p] == 0.0 {
                return 0.0;
            }
            let (i, j) = ((p / w) as isize, (p % w) as isize);
            let mut best = f64::INFINITY;
            for di in -reach..=reach {
                for dj in -reach..=reach {
                    let (ii, jj) = (i + di, j + dj);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    if mask[ii as usize * w + jj as usize] == 0.0 {
                        best = best.min(((di * di + dj * dj) as f64).sqrt());
                    }
                }
            }
            (best / full).min(1.0)
        })
        .collect()
}

fn attempt(seed: u64, h: usize, w: usize, opts: &SynthOptions) -> Option<ShadowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = background(&mut rng, h, w);
    let n = h * w;
    let mut mask = None;
    for _ in 0..MASK_RETRIES {
        let m = random_mask(&mut rng, h, w);
        let coverage = m.iter().sum::<f64>() / n as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&coverage) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask?;
    let (a, b) = match opts.affine {
        Some(ab) => ab,
        None => (
            std::array::from_fn(|_| rng.random_range(0.2..=0.6)),
            std::array::from_fn(|_| rng.random_range(0.0..=0.05)),
        ),
    };
    let ramp = penumbra_weights(&mask, h, w);
    let input: Vec<f64> = (0..3 * n)
        .map(|i| {
            let (ch, p) = (i / n, i % n);
            let x = target[i];
            if ramp[p] == 0.0 {
                x
            } else {
                quantize(x + ramp[p] * ((a[ch] - 1.0) * x + b[ch]))
            }
        })
        .collect();
    Some(ShadowSample {
        input: Tensor::new(&[3, h, w], input).expect("sized"),
        mask: Tensor::new(&[h, w], mask).expect("sized"),
        target: Tensor::new(&[3, h, w], target).expect("sized"),
        seed,
    })
}

/// Generates one sample from `seed`; if no mask within the coverage bounds
/// turns up after [`MASK_RETRIES`] tries, moves on to the next seed.
pub fn synth_shadow_sample_with(seed: u64, h: usize, w: usize, opts: &SynthOptions) -> Result<ShadowSample> {
    if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::contract(format!(
            "synthetic size {h}×{w} must be at least 16 and divisible by 4"
        )));
    }
    let mut s = seed;
    loop {
        if let Some(sample) = attempt(s, h, w, opts) {
            return Ok(sample);
        }
        log::warn!("seed {s}: no mask within coverage bounds after {MASK_RETRIES} tries, using seed {}", s.wrapping_add(1));
        s = s.wrapping_add(1);
    }
}

pub fn synth_shadow_sample(seed: u64, h: usize, w: usize) -> Result<ShadowSample> {
    synth_shadow_sample_with(seed, h, w, &SynthOptions::default())
}

/// `n` samples with seeds `seed, seed + 1, ...`.
pub fn synth_dataset(n: usize, seed: u64, h: usize, w: usize) -> Result<Vec<ShadowSample>> {
    (0..n as u64).map(|k| synth_shadow_sample(seed.wrapping_add(k), h, w)).collect()
}
