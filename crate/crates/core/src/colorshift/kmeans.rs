use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::ColorTriplet;

pub const MAX_ITERATIONS: usize = 100;
pub const CONVERGENCE_TOLERANCE: f64 = 1e-4;

/// Result of clustering an image's pixels in RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct DominantColors {
    pub colors: Vec<ColorTriplet>,
    /// Set when the image had fewer distinct colors than requested and some
    /// centroids are duplicates.
    pub duplicated: bool,
    pub iterations: usize,
}

fn pixels(image: &Tensor) -> Result<Vec<[f64; 3]>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("kmeans_rgb image", &[3, h, w], image.shape()));
    }
    let n = h * w;
    if n == 0 {
        return Err(Error::contract("kmeans_rgb on an empty image"));
    }
    let d = image.data();
    Ok((0..n).map(|p| [d[p], d[n + p], d[2 * n + p]]).collect())
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(px: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![px[rng.random_range(0..px.len())]];
    let mut d2: Vec<f64> = px.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = px.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            }
            chosen
        } else {
            rng.random_range(0..px.len())
        };
        let c = px[pick];
        for (d, p) in d2.iter_mut().zip(px) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// `K` dominant colors of a `3×H×W` image (channel values in `[0, 255]`):
/// k-means++ seeding followed by Lloyd iterations until no centroid moves by
/// more than `1e-4` or 100 iterations.
pub fn kmeans_rgb(image: &Tensor, k: usize, seed: u64) -> Result<DominantColors> {
    if k == 0 {
        return Err(Error::contract("kmeans_rgb needs K ≥ 1"));
    }
    let px = pixels(image)?;
    let distinct: BTreeSet<[u64; 3]> = px.iter().map(|p| p.map(f64::to_bits)).collect();
    let k_eff = k.min(distinct.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(&px, k_eff, &mut rng);

    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![[0.0; 3]; k_eff];
        let mut counts = vec![0usize; k_eff];
        for p in &px {
            let (i, _) = nearest(p, &centroids);
            counts[i] += 1;
            for ch in 0..3 {
                sums[i][ch] += p[ch];
            }
        }
        let mut shift: f64 = 0.0;
        for i in 0..k_eff {
            if counts[i] == 0 {
                continue;
            }
            let next = sums[i].map(|s| s / counts[i] as f64);
            shift = shift.max(dist2(&next, &centroids[i]).sqrt());
            centroids[i] = next;
        }
        if shift < CONVERGENCE_TOLERANCE {
            break;
        }
    }

    let mut colors: Vec<ColorTriplet> = centroids.iter().map(|&c| ColorTriplet::from(c)).collect();
    let duplicated = k_eff < k;
    for i in 0..k - k_eff {
        colors.push(colors[i % k_eff]);
    }
    Ok(DominantColors {
        colors,
        duplicated,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from_pixels(px: &[[f64; 3]], h: usize, w: usize) -> Tensor {
        let n = h * w;
        Tensor::from_fn(&[3, h, w], |i| px[i % n][i / n])
    }

    #[test]
    fn single_color_single_cluster() {
        let img = image_from_pixels(&[[12.0, 200.0, 99.0]; 16], 4, 4);
        let r = kmeans_rgb(&img, 1, 3).unwrap();
        assert_eq!(r.colors, vec![ColorTriplet::new(12.0, 200.0, 99.0)]);
        assert!(!r.duplicated);
    }

    #[test]
    fn two_blobs_recover_blob_means() {
        // left half near red, right half near blue
        let mut px = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                let jitter = (i * 4 + j) as f64;
                px.push(if j < 2 {
                    [220.0 + jitter, 10.0, 20.0 - jitter]
                } else {
                    [15.0, 30.0 + jitter, 240.0 - jitter]
                });
            }
        }
        let img = image_from_pixels(&px, 4, 4);
        let mut expect: Vec<[f64; 3]> = [0usize, 2]
            .iter()
            .map(|&start| {
                let members: Vec<&[f64; 3]> = px
                    .iter()
                    .enumerate()
                    .filter(|(idx, _)| (idx % 4 >= start) && (idx % 4 < start + 2))
                    .map(|(_, p)| p)
                    .collect();
                let n = members.len() as f64;
                [0, 1, 2].map(|ch| members.iter().map(|p| p[ch]).sum::<f64>() / n)
            })
            .collect();
        expect.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for seed in 0..5 {
            let r = kmeans_rgb(&img, 2, seed).unwrap();
            let mut got: Vec<[f64; 3]> = r.colors.iter().map(|c| c.to_array()).collect();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            for (g, e) in got.iter().zip(&expect) {
                for ch in 0..3 {
                    assert!((g[ch] - e[ch]).abs() < 1e-9, "seed {seed}: {g:?} vs {e:?}");
                }
            }
        }
    }

    #[test]
    fn too_few_colors_are_duplicated_and_flagged() {
        let px: Vec<[f64; 3]> = (0..16).map(|i| if i % 2 == 0 { [0.0; 3] } else { [255.0; 3] }).collect();
        let r = kmeans_rgb(&image_from_pixels(&px, 4, 4), 5, 0).unwrap();
        assert_eq!(r.colors.len(), 5);
        assert!(r.duplicated);
        for c in &r.colors {
            let v = c.to_array();
            assert!(v == [0.0; 3] || v == [255.0; 3]);
        }
    }

    #[test]
    fn zero_clusters_rejected() {
        let img = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(kmeans_rgb(&img, 0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn deterministic_for_seed() {
        let img = Tensor::from_fn(&[3, 6, 6], |i| ((i * 7919) % 256) as f64);
        assert_eq!(kmeans_rgb(&img, 4, 11).unwrap(), kmeans_rgb(&img, 4, 11).unwrap());
    }
}
