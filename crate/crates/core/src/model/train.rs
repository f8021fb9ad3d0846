use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::colorshift::{build_negative_set, FeatureExtractor};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::shadowlab::ShadowSample;

use super::net::{coarse_deshadow, coarse_tape, main_tape, COARSE_PREFIX, MAIN_PREFIX};
use super::optim::{cosine_lr, AdamW};
use super::params::{Binding, ParamSet};
use super::{init_params, total_loss_tape, CheckpointHeader, ColorShiftTargets, ModelConfig};

/// Loss trace of one training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    /// Mean loss over the whole dataset before the first update.
    pub initial_loss: f64,
    /// Mean loss over the whole dataset after the last update.
    pub final_loss: f64,
    /// Mini-batch loss at each step, before that step's update.
    pub step_losses: Vec<f64>,
    /// Samples whose contrastive term was skipped (no usable shadow).
    pub colorshift_skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// 0 = untrained, 1 = coarse unit trained, 2 = main body trained.
    pub stage: u8,
    pub step: usize,
    pub optimizer: AdamW,
    pub reports: Vec<StageReport>,
}

impl TrainState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(TrainState {
            optimizer: AdamW::new(config.optimizer),
            config,
            params,
            stage: 0,
            step: 0,
            reports: Vec::new(),
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
        }
    }
}

fn check_dataset(data: &[ShadowSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    Ok(())
}

fn batch(step: usize, n: usize, size: usize) -> Vec<usize> {
    let size = size.min(n);
    (0..size).map(|k| (step * size + k) % n).collect()
}

fn accumulate(grads: &mut BTreeMap<String, Tensor>, tape_grads: &crate::numerics::Gradients, b: &Binding, scale: f64) {
    for (name, &var) in b.iter() {
        if let Some(g) = tape_grads.get(var) {
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * v;
                    }
                }
                None => {
                    grads.insert(name.clone(), g.map(|v| scale * v));
                }
            }
        }
    }
}

fn check_finite(loss: f64, stage: u8, step: usize, sample: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            index: step,
            context: format!("stage {stage} loss {loss} at step {step}, sample {sample}"),
        })
    }
}

/// Stage-1 loss of one sample, optionally with gradients of the coarse unit.
fn stage1_sample(
    coarse_params: &ParamSet,
    s: &ShadowSample,
    cfg: &ModelConfig,
    grads: Option<(&mut BTreeMap<String, Tensor>, f64)>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let train = grads.is_some();
    let b = coarse_params.bind(&mut tape, |_| train);
    let (_, coarse) = coarse_tape(&mut tape, &b, &s.input, &s.mask, cfg)?;
    let t = tape.constant(s.target.clone());
    let loss = tape.charbonnier(coarse, t, cfg.charbonnier_eps, cfg.charbonnier_mode)?;
    let value = tape.value(loss).item();
    if let Some((acc, scale)) = grads {
        if value.is_finite() {
            let g = tape.backward(loss)?;
            accumulate(acc, &g, &b, scale);
        }
    }
    Ok(value)
}

/// Mean stage-1 Charbonnier of the coarse prediction over `data`.
pub fn evaluate_stage1(params: &ParamSet, data: &[ShadowSample], cfg: &ModelConfig) -> Result<f64> {
    check_dataset(data)?;
    let coarse = params.subset(COARSE_PREFIX);
    let mut total = 0.0;
    for s in data {
        total += stage1_sample(&coarse, s, cfg, None)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains the coarse unit alone on Charbonnier loss against the clean image.
pub fn train_stage1(data: &[ShadowSample], config: &ModelConfig) -> Result<TrainState> {
    check_dataset(data)?;
    let mut state = TrainState::new(config.clone())?;
    let cfg = state.config.clone();
    let mut report = StageReport {
        stage: 1,
        initial_loss: evaluate_stage1(&state.params, data, &cfg)?,
        ..Default::default()
    };
    for step in 0..cfg.stage1_steps {
        let idx = batch(step, data.len(), cfg.batch_size);
        let coarse = state.params.subset(COARSE_PREFIX);
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        let scale = 1.0 / idx.len() as f64;
        for &i in &idx {
            let l = stage1_sample(&coarse, &data[i], &cfg, Some((&mut grads, scale)))?;
            check_finite(l, 1, step, i)?;
            loss += scale * l;
        }
        report.step_losses.push(loss);
        let lr = cosine_lr(step, cfg.stage1_steps, cfg.learning_rate, cfg.min_learning_rate);
        state.optimizer.step(&mut state.params, &grads, lr)?;
        state.step += 1;
        log::debug!("stage 1 step {step}: loss {loss:.6} lr {lr:.2e}");
    }
    report.final_loss = evaluate_stage1(&state.params, data, &cfg)?;
    log::info!(
        "stage 1: loss {:.6} -> {:.6} over {} steps",
        report.initial_loss,
        report.final_loss,
        cfg.stage1_steps
    );
    state.stage = 1;
    state.reports.push(report);
    Ok(state)
}

/// Per-sample constants of stage 2: frozen coarse outputs and contrastive
/// targets.
struct Prepared {
    features: Tensor,
    coarse: Tensor,
    targets: Option<ColorShiftTargets>,
}

fn prepare(
    params: &ParamSet,
    data: &[ShadowSample],
    cfg: &ModelConfig,
    extractor: &FeatureExtractor,
) -> Result<(Vec<Prepared>, usize)> {
    let mut out = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (i, s) in data.iter().enumerate() {
        let (features, coarse) = coarse_deshadow(&s.input, &s.mask, params, cfg)?;
        let targets = if cfg.lambda > 0.0 {
            let clean = s.target.map(|v| v * 255.0);
            match build_negative_set(&clean, &s.mask, cfg.k_clusters, cfg.seed.wrapping_add(i as u64)) {
                Ok(set) => Some(ColorShiftTargets::new(&s.target, &s.mask, &set, extractor)?),
                Err(Error::NoShadow(why)) => {
                    log::info!("sample {i}: contrastive term skipped ({why})");
                    skipped += 1;
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        out.push(Prepared {
            features,
            coarse,
            targets,
        });
    }
    Ok((out, skipped))
}

fn stage2_sample(
    main_params: &ParamSet,
    s: &ShadowSample,
    p: &Prepared,
    cfg: &ModelConfig,
    extractor: &FeatureExtractor,
    grads: Option<(&mut BTreeMap<String, Tensor>, f64)>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let train = grads.is_some();
    let b = main_params.bind(&mut tape, |_| train);
    let f = tape.constant(p.features.clone());
    let coarse = tape.constant(p.coarse.clone());
    let out = main_tape(&mut tape, &b, &s.input, &s.mask, f, coarse, cfg)?;
    let loss = total_loss_tape(
        &mut tape,
        out.restored,
        &s.target,
        &s.mask,
        p.targets.as_ref(),
        extractor,
        cfg.loss_settings(),
    )?;
    let value = tape.value(loss).item();
    if let Some((acc, scale)) = grads {
        if value.is_finite() {
            let g = tape.backward(loss)?;
            accumulate(acc, &g, &b, scale);
        }
    }
    Ok(value)
}

fn mean_stage2(main: &ParamSet, data: &[ShadowSample], prep: &[Prepared], cfg: &ModelConfig, fe: &FeatureExtractor) -> Result<f64> {
    let mut total = 0.0;
    for (s, p) in data.iter().zip(prep) {
        total += stage2_sample(main, s, p, cfg, fe, None)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean stage-2 total loss of the full model over `data`.
pub fn evaluate_stage2(params: &ParamSet, data: &[ShadowSample], cfg: &ModelConfig) -> Result<f64> {
    check_dataset(data)?;
    let extractor = FeatureExtractor::from_source(&cfg.extractor)?;
    let (prep, _) = prepare(params, data, cfg, &extractor)?;
    mean_stage2(&params.subset(MAIN_PREFIX), data, &prep, cfg, &extractor)
}

/// Freezes the coarse unit and trains the main body on `L_C + λ·L_CS`.
pub fn train_stage2(data: &[ShadowSample], mut state: TrainState, config: &ModelConfig) -> Result<TrainState> {
    check_dataset(data)?;
    if state.stage < 1 {
        return Err(Error::contract("stage 2 needs a state that finished stage 1"));
    }
    init_params(config)?.check_layout(&state.params)?;
    state.config = config.clone();
    let cfg = config.clone();
    let extractor = FeatureExtractor::from_source(&cfg.extractor)?;
    let frozen = state.params.subset(COARSE_PREFIX);
    let (prep, skipped) = prepare(&state.params, data, &cfg, &extractor)?;
    let mut report = StageReport {
        stage: 2,
        initial_loss: mean_stage2(&state.params.subset(MAIN_PREFIX), data, &prep, &cfg, &extractor)?,
        colorshift_skipped: skipped,
        ..Default::default()
    };
    for step in 0..cfg.stage2_steps {
        let idx = batch(step, data.len(), cfg.batch_size);
        let main = state.params.subset(MAIN_PREFIX);
        let mut grads = BTreeMap::new();
        let mut loss = 0.0;
        let scale = 1.0 / idx.len() as f64;
        for &i in &idx {
            let l = stage2_sample(&main, &data[i], &prep[i], &cfg, &extractor, Some((&mut grads, scale)))?;
            check_finite(l, 2, step, i)?;
            loss += scale * l;
        }
        report.step_losses.push(loss);
        let lr = cosine_lr(step, cfg.stage2_steps, cfg.learning_rate, cfg.min_learning_rate);
        state.optimizer.step(&mut state.params, &grads, lr)?;
        state.step += 1;
        log::debug!("stage 2 step {step}: loss {loss:.6} lr {lr:.2e}");
    }
    if state.params.subset(COARSE_PREFIX) != frozen {
        return Err(Error::contract("coarse parameters changed during stage 2"));
    }
    report.final_loss = mean_stage2(&state.params.subset(MAIN_PREFIX), data, &prep, &cfg, &extractor)?;
    log::info!(
        "stage 2: loss {:.6} -> {:.6} over {} steps",
        report.initial_loss,
        report.final_loss,
        cfg.stage2_steps
    );
    state.stage = 2;
    state.reports.push(report);
    Ok(state)
}
