//! Shadow-aware, direction-aligned similarity gating.
//!
//! The horizontal pipeline compares every query position with deformably
//! sampled keys of the same row, keeps only pairs that straddle the shadow
//! boundary, averages over keys and zeroes the shadow pixels. The vertical
//! pipeline is the horizontal one applied to transposed inputs.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_sample_2d, conv2d, identity_grid, CustomOp, Tape, Tensor, Var};

/// Direction-aware modulation maps, each `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMaps {
    pub horizontal: Tensor,
    pub vertical: Tensor,
}

impl GateMaps {
    pub fn zeros(h: usize, w: usize) -> Self {
        GateMaps {
            horizontal: Tensor::zeros(&[h, w]),
            vertical: Tensor::zeros(&[h, w]),
        }
    }
}

/// How the filtered similarities are reduced over the key axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateNormalization {
    /// Divide by the row width, as in the reference formulation.
    #[default]
    Width,
    /// Divide by the number of retained cross-region pairs at each position.
    CrossPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossGateConfig {
    /// Predict deformable offsets; when false keys are sampled on the fixed grid.
    pub use_offsets: bool,
    /// Offset bound as a fraction of the extent along each axis.
    pub max_disp_fraction: f64,
    pub normalization: GateNormalization,
}

impl Default for CrossGateConfig {
    fn default() -> Self {
        CrossGateConfig {
            use_offsets: true,
            max_disp_fraction: 0.25,
            normalization: GateNormalization::Width,
        }
    }
}

/// Weights of one directional gate block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossGateWeights {
    /// `C'×C×1×1`
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    /// `2×C'×3×3`; output channel 0 displaces columns, channel 1 rows.
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
}

impl CrossGateWeights {
    pub fn init<R: Rng>(channels: usize, qk_channels: usize, rng: &mut R) -> Self {
        let proj = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("normal");
        let off = Normal::new(0.0, 0.01).expect("normal");
        CrossGateWeights {
            q_weight: Tensor::from_fn(&[qk_channels, channels, 1, 1], |_| proj.sample(rng)),
            q_bias: Tensor::zeros(&[qk_channels]),
            k_weight: Tensor::from_fn(&[qk_channels, channels, 1, 1], |_| proj.sample(rng)),
            k_bias: Tensor::zeros(&[qk_channels]),
            offset_weight: Tensor::from_fn(&[2, qk_channels, 3, 3], |_| off.sample(rng)),
            offset_bias: Tensor::zeros(&[2]),
        }
    }

    /// Query and key projections both equal to the identity, no offsets.
    pub fn identity(channels: usize) -> Self {
        let eye = Tensor::from_fn(&[channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        CrossGateWeights {
            q_weight: eye.clone(),
            q_bias: Tensor::zeros(&[channels]),
            k_weight: eye,
            k_bias: Tensor::zeros(&[channels]),
            offset_weight: Tensor::zeros(&[2, channels, 3, 3]),
            offset_bias: Tensor::zeros(&[2]),
        }
    }

    pub fn qk_channels(&self) -> usize {
        self.q_weight.shape()[0]
    }
}

fn check_binary(m: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

fn max_disp(h: usize, w: usize, cfg: &CrossGateConfig) -> (f64, f64) {
    (w as f64 * cfg.max_disp_fraction, h as f64 * cfg.max_disp_fraction)
}

fn disp_scale(h: usize, w: usize, cfg: &CrossGateConfig) -> Tensor {
    let (mx, my) = max_disp(h, w, cfg);
    Tensor::from_fn(&[2, h, w], |i| if i < h * w { mx } else { my })
}

/// `Q = l_q(F)`, `K = l_k(F)` with 1×1 convolutions.
pub fn project_qk(f: &Tensor, w: &CrossGateWeights) -> Result<(Tensor, Tensor)> {
    Ok((
        conv2d(f, &w.q_weight, &w.q_bias, 1, 0, 1)?,
        conv2d(f, &w.k_weight, &w.k_bias, 1, 0, 1)?,
    ))
}

/// `β = max_disp · tanh(conv3×3(Q))`, a `2×H×W` displacement field.
pub fn predict_offsets(q: &Tensor, w: &CrossGateWeights, max_disp: (f64, f64)) -> Result<Tensor> {
    if !(max_disp.0 > 0.0 && max_disp.1 > 0.0) {
        return Err(Error::contract("max_disp must be positive"));
    }
    let raw = conv2d(q, &w.offset_weight, &w.offset_bias, 1, 1, 1)?;
    let n = raw.len() / 2;
    Ok(Tensor::from_fn(raw.shape(), |i| {
        let bound = if i < n { max_disp.0 } else { max_disp.1 };
        bound * raw.data()[i].tanh()
    }))
}

fn warped_grid(beta: &Tensor) -> Result<Tensor> {
    let (_, h, w) = beta.chw()?;
    identity_grid(h, w).zip_map(beta, |g, b| g + b)
}

fn threshold_mask(m: &Tensor) -> Tensor {
    m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Samples `K` and the mask at the displaced grid; the warped mask is
/// re-binarized at 0.5.
pub fn deform_sample(k: &Tensor, mask: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = mask.hw()?;
    if beta.shape() != [2, h, w] {
        return Err(Error::shape("deform_sample offsets", &[2, h, w], beta.shape()));
    }
    if !beta.is_finite() {
        return Err(Error::contract("offsets must be finite"));
    }
    let grid = warped_grid(beta)?;
    let k_hat = bilinear_sample_2d(k, &grid)?;
    let m3 = mask.clone().reshape(&[1, h, w])?;
    let m_hat = threshold_mask(&bilinear_sample_2d(&m3, &grid)?).reshape(&[h, w])?;
    Ok((k_hat, m_hat))
}

fn row_similarity_values(q: &Tensor, k_hat: &Tensor) -> Result<Tensor> {
    let (c, h, w) = q.chw()?;
    if k_hat.shape() != q.shape() {
        return Err(Error::shape("rowwise_similarity", q.shape(), k_hat.shape()));
    }
    let (qd, kd) = (q.data(), k_hat.data());
    let hw = h * w;
    let mut out = vec![0.0; w * hw];
    for i in 0..h {
        for r in 0..w {
            let dst = &mut out[(r * h + i) * w..(r * h + i + 1) * w];
            for ch in 0..c {
                let kv = kd[ch * hw + i * w + r];
                let qrow = &qd[ch * hw + i * w..ch * hw + (i + 1) * w];
                for (o, qv) in dst.iter_mut().zip(qrow) {
                    *o += qv * kv;
                }
            }
        }
    }
    Tensor::new(&[w, h, w], out)
}

/// `δ[r, i, j] = ⟨Q[:, i, j], K̂[:, i, r]⟩`, shape `W×H×W`.
pub fn rowwise_similarity(q: &Tensor, k_hat: &Tensor) -> Result<Tensor> {
    row_similarity_values(q, k_hat)
}

/// `M̃[r, i, j] = M[i, j] XOR M̂[i, r]`.
pub fn cross_region_indicator(mask: &Tensor, warped: &Tensor) -> Result<Tensor> {
    let (h, w) = mask.hw()?;
    if warped.shape() != [h, w] {
        return Err(Error::shape("cross_region_gate", &[h, w], warped.shape()));
    }
    check_binary(mask, "shadow mask")?;
    check_binary(warped, "warped mask")?;
    let (m, mh) = (mask.data(), warped.data());
    Ok(Tensor::from_fn(&[w, h, w], |idx| {
        let j = idx % w;
        let i = (idx / w) % h;
        let r = idx / (w * h);
        if (m[i * w + j] != 0.0) != (mh[i * w + r] != 0.0) {
            1.0
        } else {
            0.0
        }
    }))
}

/// `δ̂ = δ ⊙ M̃`: keeps only similarities between a shadow and a
/// non-shadow position.
pub fn cross_region_gate(delta: &Tensor, mask: &Tensor, warped: &Tensor) -> Result<Tensor> {
    let indicator = cross_region_indicator(mask, warped)?;
    delta.zip_map(&indicator, |d, m| d * m)
}

fn key_normalizer(indicator: &Tensor, norm: GateNormalization) -> Tensor {
    let (w, h) = (indicator.shape()[0], indicator.shape()[1]);
    let n = h * indicator.shape()[2];
    match norm {
        GateNormalization::Width => Tensor::full(&[h, indicator.shape()[2]], 1.0 / w as f64),
        GateNormalization::CrossPairs => Tensor::from_fn(&[h, indicator.shape()[2]], |p| {
            let count: f64 = (0..w).map(|r| indicator.data()[r * n + p]).sum();
            1.0 / count.max(1.0)
        }),
    }
}

/// `δ̃[i, j] = (1/W) Σ_r δ̂[r, i, j]`.
pub fn aggregate_relevance(filtered: &Tensor) -> Result<Tensor> {
    let (w, h, w2) = filtered.chw()?;
    let n = h * w2;
    let mut out = vec![0.0; n];
    for r in 0..w {
        for (o, v) in out.iter_mut().zip(&filtered.data()[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
    let inv = 1.0 / w as f64;
    Tensor::new(&[h, w2], out.into_iter().map(|s| s * inv).collect())
}

/// `G = δ̃ ⊙ (1 − M)`.
pub fn nonshadow_modulation(relevance: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_binary(mask, "shadow mask")?;
    relevance.zip_map(mask, |d, m| d * (1.0 - m))
}

/// Plain (no-gradient) horizontal gate map.
pub fn horizontal_gate(f: &Tensor, mask: &Tensor, w: &CrossGateWeights, cfg: &CrossGateConfig) -> Result<Tensor> {
    let (_, h, wd) = f.chw()?;
    if mask.shape() != [h, wd] {
        return Err(Error::shape("crossgate mask", &[h, wd], mask.shape()));
    }
    check_binary(mask, "shadow mask")?;
    let (q, k) = project_qk(f, w)?;
    let beta = if cfg.use_offsets {
        predict_offsets(&q, w, max_disp(h, wd, cfg))?
    } else {
        Tensor::zeros(&[2, h, wd])
    };
    let (k_hat, m_hat) = deform_sample(&k, mask, &beta)?;
    let delta = rowwise_similarity(&q, &k_hat)?;
    let indicator = cross_region_indicator(mask, &m_hat)?;
    let filtered = delta.zip_map(&indicator, |d, m| d * m)?;
    let relevance = match cfg.normalization {
        GateNormalization::Width => aggregate_relevance(&filtered)?,
        GateNormalization::CrossPairs => {
            let sums = aggregate_relevance(&filtered)?.map(|v| v * wd as f64);
            sums.zip_map(&key_normalizer(&indicator, cfg.normalization), |s, k| s * k)?
        }
    };
    nonshadow_modulation(&relevance, mask)
}

/// Both directional gate maps; the vertical map is the horizontal pipeline
/// run on the transposed feature map and mask, transposed back.
pub fn crossgate_maps(
    f: &Tensor,
    mask: &Tensor,
    weights_h: &CrossGateWeights,
    weights_v: &CrossGateWeights,
    cfg: &CrossGateConfig,
) -> Result<GateMaps> {
    let horizontal = horizontal_gate(f, mask, weights_h, cfg)?;
    let vertical = horizontal_gate(&f.transpose_hw()?, &mask.transpose_hw()?, weights_v, cfg)?
        .transpose_hw()?;
    Ok(GateMaps {
        horizontal,
        vertical,
    })
}

/// Tape handles for one directional gate block.
#[derive(Clone, Copy, Debug)]
pub struct CrossGateVars {
    pub q_weight: Var,
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
    pub offset_weight: Var,
    pub offset_bias: Var,
}

impl CrossGateVars {
    pub fn leaves(tape: &mut Tape, w: &CrossGateWeights) -> Self {
        CrossGateVars {
            q_weight: tape.leaf(w.q_weight.clone()),
            q_bias: tape.leaf(w.q_bias.clone()),
            k_weight: tape.leaf(w.k_weight.clone()),
            k_bias: tape.leaf(w.k_bias.clone()),
            offset_weight: tape.leaf(w.offset_weight.clone()),
            offset_bias: tape.leaf(w.offset_bias.clone()),
        }
    }
}

struct RowSimilarityOp;

impl CustomOp for RowSimilarityOp {
    fn name(&self) -> &'static str {
        "rowwise_similarity"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k) = (inputs[0], inputs[1]);
        let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let hw = h * w;
        let (qd, kd, g) = (q.data(), k.data(), grad.data());
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        for i in 0..h {
            for r in 0..w {
                let grow = &g[(r * h + i) * w..(r * h + i + 1) * w];
                for ch in 0..c {
                    let base = ch * hw + i * w;
                    let kv = kd[base + r];
                    let mut acc = 0.0;
                    for j in 0..w {
                        dq[base + j] += grow[j] * kv;
                        acc += grow[j] * qd[base + j];
                    }
                    dk[base + r] += acc;
                }
            }
        }
        vec![
            Some(Tensor::new(q.shape(), dq).expect("dq")),
            Some(Tensor::new(k.shape(), dk).expect("dk")),
        ]
    }
}

/// Records `rowwise_similarity` on the tape.
pub fn rowwise_similarity_tape(tape: &mut Tape, q: Var, k_hat: Var) -> Result<Var> {
    let v = row_similarity_values(tape.value(q), tape.value(k_hat))?;
    Ok(tape.custom(vec![q, k_hat], v, Box::new(RowSimilarityOp)))
}

/// Differentiable horizontal gate map. `f` is `C×H×W`; the mask is data.
pub fn horizontal_gate_tape(
    tape: &mut Tape,
    f: Var,
    mask: &Tensor,
    w: &CrossGateVars,
    cfg: &CrossGateConfig,
) -> Result<Var> {
    let (_, h, wd) = tape.value(f).chw()?;
    if mask.shape() != [h, wd] {
        return Err(Error::shape("crossgate mask", &[h, wd], mask.shape()));
    }
    check_binary(mask, "shadow mask")?;
    let q = tape.conv2d(f, w.q_weight, w.q_bias, 1, 0, 1)?;
    let k = tape.conv2d(f, w.k_weight, w.k_bias, 1, 0, 1)?;
    let identity = tape.constant(identity_grid(h, wd));
    let grid = if cfg.use_offsets {
        let raw = tape.conv2d(q, w.offset_weight, w.offset_bias, 1, 1, 1)?;
        let t = tape.tanh(raw);
        let scale = tape.constant(disp_scale(h, wd, cfg));
        let beta = tape.mul(t, scale)?;
        tape.add(identity, beta)?
    } else {
        identity
    };
    let k_hat = tape.bilinear_sample(k, grid)?;
    let m3 = mask.clone().reshape(&[1, h, wd])?;
    let m_hat = threshold_mask(&bilinear_sample_2d(&m3, tape.value(grid))?).reshape(&[h, wd])?;
    let delta = rowwise_similarity_tape(tape, q, k_hat)?;
    let indicator = cross_region_indicator(mask, &m_hat)?;
    let norm = key_normalizer(&indicator, cfg.normalization);
    let ind = tape.constant(indicator);
    let filtered = tape.mul(delta, ind)?;
    let summed = tape.sum_axis0(filtered)?;
    let relevance = match cfg.normalization {
        GateNormalization::Width => tape.scale(summed, 1.0 / wd as f64),
        GateNormalization::CrossPairs => {
            let n = tape.constant(norm);
            tape.mul(summed, n)?
        }
    };
    let keep = tape.constant(mask.map(|m| 1.0 - m));
    tape.mul(relevance, keep)
}

fn transpose_indices(c: usize, h: usize, w: usize) -> Rc<Vec<usize>> {
    // output is C×W×H; entry (ch, j, i) reads input (ch, i, j)
    Rc::new(
        (0..c * h * w)
            .map(|idx| {
                let i = idx % h;
                let j = (idx / h) % w;
                let ch = idx / (h * w);
                ch * h * w + i * w + j
            })
            .collect(),
    )
}

/// Differentiable `(G_h, G_v)`.
pub fn crossgate_maps_tape(
    tape: &mut Tape,
    f: Var,
    mask: &Tensor,
    weights_h: &CrossGateVars,
    weights_v: &CrossGateVars,
    cfg: &CrossGateConfig,
) -> Result<(Var, Var)> {
    let gh = horizontal_gate_tape(tape, f, mask, weights_h, cfg)?;
    let gv = vertical_gate_tape(tape, f, mask, weights_v, cfg)?;
    Ok((gh, gv))
}

/// Differentiable `G_v`: the horizontal pipeline on transposed inputs.
pub fn vertical_gate_tape(
    tape: &mut Tape,
    f: Var,
    mask: &Tensor,
    weights: &CrossGateVars,
    cfg: &CrossGateConfig,
) -> Result<Var> {
    let (c, h, w) = tape.value(f).chw()?;
    let ft = tape.gather(f, transpose_indices(c, h, w), &[c, w, h])?;
    let gvt = horizontal_gate_tape(tape, ft, &mask.transpose_hw()?, weights, cfg)?;
    tape.gather(gvt, transpose_indices(1, w, h), &[h, w])
}
