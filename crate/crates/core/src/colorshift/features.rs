//! Fixed (non-trainable) convolutional feature extractor used to measure
//! distances between restored, clean and color-shifted images.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv2d, softplus, Tape, Tensor, Var};

pub const DEFAULT_WIDTHS: [usize; 3] = [8, 16, 16];
const KERNEL: usize = 3;

/// How to obtain the extractor's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorSource {
    Seeded { seed: u64 },
    File { path: PathBuf },
}

impl Default for ExtractorSource {
    fn default() -> Self {
        ExtractorSource::Seeded { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    weight: Tensor,
    bias: Tensor,
}

/// Stack of stride-2 `3×3` convolutions, each followed by softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct LayerFile {
    shape: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
struct ExtractorFile {
    layers: Vec<LayerFile>,
}

/// Rows of a Gaussian matrix, orthonormalized with Gram-Schmidt.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    for r in 0..rows {
        for q in 0..r {
            let dot: f64 = (0..cols).map(|c| m[r * cols + c] * m[q * cols + c]).sum();
            for c in 0..cols {
                m[r * cols + c] -= dot * m[q * cols + c];
            }
        }
        let norm = (0..cols).map(|c| m[r * cols + c].powi(2)).sum::<f64>().sqrt();
        for c in 0..cols {
            m[r * cols + c] /= norm;
        }
    }
    m
}

impl FeatureExtractor {
    /// Extractor with orthonormal filters drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let layers = DEFAULT_WIDTHS
            .iter()
            .map(|&c_out| {
                let fan = c_in * KERNEL * KERNEL;
                let w = orthonormal_rows(c_out, fan, &mut rng);
                let layer = Layer {
                    weight: Tensor::new(&[c_out, c_in, KERNEL, KERNEL], w).expect("sized"),
                    bias: Tensor::zeros(&[c_out]),
                };
                c_in = c_out;
                layer
            })
            .collect();
        FeatureExtractor { layers }
    }

    /// Loads weights from a JSON document of the form
    /// `{"layers": [{"shape": [o, i, 3, 3], "weight": [...], "bias": [...]}]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ExtractorFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("extractor weights: {e}")))?;
        if file.layers.is_empty() {
            return Err(Error::Config("extractor weights: no layers".into()));
        }
        let mut c_in = 3;
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let ok = matches!(l.shape[..], [o, ci, KERNEL, KERNEL] if ci == c_in && o > 0);
            if !ok || l.bias.len() != l.shape[0] {
                return Err(Error::Config(format!(
                    "extractor layer {i}: shape {:?} with {} biases does not chain from {c_in} channels",
                    l.shape,
                    l.bias.len()
                )));
            }
            let weight = Tensor::new(&l.shape, l.weight)
                .map_err(|e| Error::Config(format!("extractor layer {i}: {e}")))?;
            if !weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Config(format!("extractor layer {i}: non-finite weight")));
            }
            c_in = l.shape[0];
            let bias = Tensor::new(&[c_in], l.bias)?;
            layers.push(Layer { weight, bias });
        }
        Ok(FeatureExtractor { layers })
    }

    pub fn from_source(source: &ExtractorSource) -> Result<Self> {
        match source {
            ExtractorSource::Seeded { seed } => Ok(Self::seeded(*seed)),
            ExtractorSource::File { path } => Self::load(path),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Features of a `3×H×W` image.
    pub fn extract(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = image.clone();
        for l in &self.layers {
            x = softplus(&conv2d(&x, &l.weight, &l.bias, 2, 1, 1)?);
        }
        Ok(x)
    }

    /// Same as [`extract`](Self::extract) but recorded on a tape; the weights
    /// enter as constants.
    pub fn extract_tape(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let mut x = image;
        for l in &self.layers {
            let w = tape.constant(l.weight.clone());
            let b = tape.constant(l.bias.clone());
            let y = tape.conv2d(x, w, b, 2, 1, 1)?;
            x = tape.softplus(y);
        }
        Ok(x)
    }
}

fn masked(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if mask.shape() != [h, w] {
        return Err(Error::shape("feature_extract mask", &[h, w], mask.shape()));
    }
    let n = h * w;
    Ok(Tensor::from_fn(&[c, h, w], |i| image.data()[i] * mask.data()[i % n]))
}

/// Features of the image restricted to the mask region (`image ⊙ mask`).
pub fn feature_extract(image: &Tensor, mask: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    extractor.extract(&masked(image, mask)?)
}

/// Tape version of [`feature_extract`]; `mask` is a constant.
pub fn feature_extract_tape(
    tape: &mut Tape,
    image: Var,
    mask: &Tensor,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    let (c, h, w) = tape.value(image).chw()?;
    if mask.shape() != [h, w] {
        return Err(Error::shape("feature_extract mask", &[h, w], mask.shape()));
    }
    let n = h * w;
    let m = tape.constant(Tensor::from_fn(&[c, h, w], |i| mask.data()[i % n]));
    let x = tape.mul(image, m)?;
    extractor.extract_tape(tape, x)
}
