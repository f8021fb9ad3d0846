//! Miniature deshadowing network: a coarse unit of two plain blocks, then a
//! one-level encoder-decoder of gate-modulated blocks, trained in two stages.

mod net;
mod optim;
mod params;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::colorshift::{
    colorshift_loss, colorshift_loss_tape, feature_extract, feature_extract_tape, ExtractorSource,
    FeatureExtractor, NegativeSet,
};
use crate::crossgate::{CrossGateConfig, GateNormalization};
use crate::error::{Error, Result};
use crate::numerics::{CharbonnierMode, Tape, Tensor, Var};

pub use net::{
    coarse_deshadow, coarse_tape, forward, forward_full, init_params, main_tape, mamba_block,
    mamba_block_tape, ForwardOutput, MainOutputs, COARSE_PREFIX, MAIN_PREFIX,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{read_checkpoint, write_checkpoint, Binding, ParamSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{evaluate_stage1, evaluate_stage2, train_stage1, train_stage2, StageReport, TrainState};

/// Blocks in the coarse unit.
pub const COARSE_BLOCKS: usize = 2;

/// Which directional gates feed the main body's blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// No gates; plain four-direction scans.
    Baseline,
    HorizontalOnly,
    VerticalOnly,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub state_dim: usize,
    /// Expansion factor of the block's inner width.
    pub expand: usize,
    /// Query/key width of the gate blocks; `None` uses `channels`.
    pub qk_channels: Option<usize>,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub layer_norm_eps: f64,
    /// One set of scan parameters for all four directions.
    pub share_scan_params: bool,
    pub gates: GateVariant,
    pub use_offsets: bool,
    pub max_disp_fraction: f64,
    pub gate_normalization: GateNormalization,

    pub lambda: f64,
    pub charbonnier_eps: f64,
    pub charbonnier_mode: CharbonnierMode,
    pub k_clusters: usize,
    pub extractor: ExtractorSource,

    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Samples per optimizer step; batches cycle through the dataset in order.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            state_dim: 4,
            expand: 2,
            qk_channels: None,
            encoder_blocks: 2,
            decoder_blocks: 2,
            layer_norm_eps: 1e-5,
            share_scan_params: false,
            gates: GateVariant::Full,
            use_offsets: true,
            max_disp_fraction: 0.25,
            gate_normalization: GateNormalization::Width,
            lambda: 0.01,
            charbonnier_eps: 1e-3,
            charbonnier_mode: CharbonnierMode::PerPixel,
            k_clusters: 10,
            extractor: ExtractorSource::default(),
            learning_rate: 2e-3,
            min_learning_rate: 1e-6,
            optimizer: AdamWConfig::default(),
            stage1_steps: 200,
            stage2_steps: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn expanded(&self) -> usize {
        self.channels * self.expand
    }

    pub fn qk_width(&self) -> usize {
        self.qk_channels.unwrap_or(self.channels)
    }

    pub fn crossgate_config(&self) -> CrossGateConfig {
        CrossGateConfig {
            use_offsets: self.use_offsets,
            max_disp_fraction: self.max_disp_fraction,
            normalization: self.gate_normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("state_dim", self.state_dim),
            ("expand", self.expand),
            ("qk_channels", self.qk_width()),
            ("k_clusters", self.k_clusters),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be ≥ 0")?;
        check(self.charbonnier_eps > 0.0 && self.charbonnier_eps.is_finite(), "charbonnier_eps must be > 0")?;
        check(self.layer_norm_eps > 0.0, "layer_norm_eps must be > 0")?;
        check(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be ≥ 0",
        )?;
        check(self.min_learning_rate >= 0.0, "min_learning_rate must be ≥ 0")?;
        check(
            (0.0..=1.0).contains(&self.max_disp_fraction),
            "max_disp_fraction must lie in [0, 1]",
        )?;
        let o = &self.optimizer;
        check(
            (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0,
            "optimizer settings out of range",
        )
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda: self.lambda,
            eps: self.charbonnier_eps,
            mode: self.charbonnier_mode,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Charbonnier penalty; per-pixel mean of `sqrt(d² + ε²)` by default.
pub fn charbonnier(restored: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    charbonnier_with_mode(restored, target, eps, CharbonnierMode::PerPixel)
}

pub fn charbonnier_with_mode(restored: &Tensor, target: &Tensor, eps: f64, mode: CharbonnierMode) -> Result<f64> {
    if restored.shape() != target.shape() {
        return Err(Error::shape("charbonnier", target.shape(), restored.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::contract("charbonnier eps must be positive"));
    }
    if restored.is_empty() {
        return Err(Error::contract("charbonnier on empty tensors"));
    }
    Ok(crate::numerics::charbonnier_value(restored.data(), target.data(), eps, mode))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub eps: f64,
    pub mode: CharbonnierMode,
}

/// Precomputed features for the contrastive term of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorShiftTargets {
    pub positive: Tensor,
    /// `(features, γ)` per kept negative.
    pub negatives: Vec<(Tensor, f64)>,
}

impl ColorShiftTargets {
    /// `target` in `[0,1]`; the negative set's images are in `[0,255]`.
    pub fn new(target: &Tensor, mask: &Tensor, set: &NegativeSet, extractor: &FeatureExtractor) -> Result<Self> {
        let positive = feature_extract(target, mask, extractor)?;
        let negatives = set
            .negatives
            .iter()
            .zip(set.weights())
            .map(|(n, &g)| Ok((feature_extract(&n.map(|v| v / 255.0), mask, extractor)?, g)))
            .collect::<Result<_>>()?;
        Ok(ColorShiftTargets { positive, negatives })
    }
}

/// `L_C + λ·L_CS`; the contrastive term is dropped when `negatives` is `None`
/// (no shadow pixels) or `λ = 0`.
pub fn total_loss(
    restored: &Tensor,
    target: &Tensor,
    mask: &Tensor,
    negatives: Option<&NegativeSet>,
    extractor: &FeatureExtractor,
    settings: LossSettings,
) -> Result<f64> {
    if !(settings.lambda >= 0.0) {
        return Err(Error::contract("lambda must be non-negative"));
    }
    let lc = charbonnier_with_mode(restored, target, settings.eps, settings.mode)?;
    match negatives {
        Some(set) if settings.lambda > 0.0 => {
            let t = ColorShiftTargets::new(target, mask, set, extractor)?;
            let anchor = feature_extract(restored, mask, extractor)?;
            Ok(lc + settings.lambda * colorshift_loss(&anchor, &t.positive, &t.negatives)?)
        }
        _ => Ok(lc),
    }
}

/// Tape version of [`total_loss`] with precomputed targets.
pub fn total_loss_tape(
    tape: &mut Tape,
    restored: Var,
    target: &Tensor,
    mask: &Tensor,
    targets: Option<&ColorShiftTargets>,
    extractor: &FeatureExtractor,
    settings: LossSettings,
) -> Result<Var> {
    let t = tape.constant(target.clone());
    let lc = tape.charbonnier(restored, t, settings.eps, settings.mode)?;
    match targets {
        Some(cs) if settings.lambda > 0.0 => {
            let anchor = feature_extract_tape(tape, restored, mask, extractor)?;
            let l = colorshift_loss_tape(tape, anchor, &cs.positive, &cs.negatives)?;
            let scaled = tape.scale(l, settings.lambda);
            tape.add(lc, scaled)
        }
        _ => Ok(lc),
    }
}

/// Checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub stage: u8,
    pub step: usize,
}

/// Writes `params` with a config echo to `path`.
pub fn save_checkpoint(path: &std::path::Path, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    let json = serde_json::to_string(header).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &json, params).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and validates every parameter shape against the
/// layout its config implies.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(CheckpointHeader, ParamSet)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (json, params) = read_checkpoint(std::io::BufReader::new(file), path)?;
    let header: CheckpointHeader = serde_json::from_str(&json).map_err(|e| Error::Corrupt {
        path: PathBuf::from(path),
        message: format!("header: {e}"),
    })?;
    init_params(&header.config)?.check_layout(&params)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charbonnier_fixtures() {
        let a = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.1);
        assert_eq!(charbonnier(&a, &a, 1e-3).unwrap(), 1e-3);
        let b = a.map(|v| v + 0.3);
        let want = (0.09f64 + 1e-6).sqrt();
        assert!((charbonnier(&a, &b, 1e-3).unwrap() - want).abs() < 1e-15);
        assert!(charbonnier(&a, &Tensor::zeros(&[3, 2, 1]), 1e-3).is_err());
        let g = charbonnier_with_mode(&a, &b, 1e-3, CharbonnierMode::GlobalNorm).unwrap();
        assert!((g - (12.0 * 0.09f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            channels: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let neg = ModelConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"chanels": 3}"#).is_err());
        let partial: ModelConfig = serde_json::from_str(r#"{"channels": 8}"#).unwrap();
        assert_eq!(partial.channels, 8);
        assert_eq!(partial.lambda, 0.01);
    }
}
