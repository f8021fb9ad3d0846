use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use deshadow_core::colorshift::build_negative_set;
use deshadow_core::diagnostics::{gradient_suites, scan_bench};
use deshadow_core::model::{
    forward_full, load_checkpoint, save_checkpoint, train_stage1, train_stage2, GateVariant, ModelConfig,
    StageReport, TrainState,
};
use deshadow_core::numerics::Tensor;
use deshadow_core::shadowlab::io::{read_mask, read_rgb, write_gray, write_mask, write_rgb};
use deshadow_core::shadowlab::{region_metrics, synth_shadow_sample, MetricsReport, ShadowSample};
use deshadow_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::{BenchArgs, TrainArgs};

/// Offset added to the training seed to pick the held-out sample.
const HELD_OUT_OFFSET: u64 = 1 << 32;

fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| contract(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One sample written by `synth`; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub seed: u64,
    pub input: String,
    pub mask: String,
    pub target: String,
    pub coverage: f64,
}

/// `manifest.json` of a `synth` output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub samples: Vec<SampleEntry>,
}

pub(crate) fn synth(n: usize, seed: u64, size: usize, out: &Path) -> Result<i32> {
    if n == 0 {
        return Err(contract("--n must be positive"));
    }
    create_dir(out)?;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let s = synth_shadow_sample(seed.wrapping_add(k as u64), size, size)?;
        let entry = SampleEntry {
            seed: s.seed,
            input: format!("{k:04}_input.png"),
            mask: format!("{k:04}_mask.pgm"),
            target: format!("{k:04}_target.png"),
            coverage: s.mask.mean(),
        };
        write_rgb(&out.join(&entry.input), &s.input)?;
        write_mask(&out.join(&entry.mask), &s.mask)?;
        write_rgb(&out.join(&entry.target), &s.target)?;
        samples.push(entry);
    }
    write_json(&out.join("manifest.json"), &DatasetManifest { seed, size, samples })?;
    println!("wrote {n} samples to {}", out.display());
    Ok(0)
}

fn load_dataset(dir: &Path) -> Result<Vec<ShadowSample>> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    manifest
        .samples
        .iter()
        .map(|e| {
            Ok(ShadowSample {
                input: read_rgb(&dir.join(&e.input))?,
                mask: read_mask(&dir.join(&e.mask))?,
                target: read_rgb(&dir.join(&e.target))?,
                seed: e.seed,
            })
        })
        .collect()
}

pub(crate) fn colorshift(image: &Path, mask: &Path, k: usize, seed: u64, out: &Path) -> Result<i32> {
    let img = read_rgb(image)?;
    let m = read_mask(mask)?;
    let set = build_negative_set(&img.map(|v| v * 255.0), &m, k, seed)?;
    create_dir(out)?;
    for (neg, idx) in set.negatives.iter().zip(&set.manifest.kept) {
        write_rgb(&out.join(format!("negative_{idx:02}.png")), &neg.map(|v| v / 255.0))?;
    }
    write_json(&out.join("manifest.json"), &set.manifest)?;
    println!(
        "kept {} of {k} negatives in {}",
        set.negatives.len(),
        out.display()
    );
    Ok(0)
}

/// A row of the gate ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Baseline,
    Gh,
    Gv,
    Full,
    NoOffset,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "baseline" => Self::Baseline,
            "gh" => Self::Gh,
            "gv" => Self::Gv,
            "full" => Self::Full,
            "no-offset" => Self::NoOffset,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?} (expected baseline, gh, gv, full, no-offset)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Gh => "gh",
            Self::Gv => "gv",
            Self::Full => "full",
            Self::NoOffset => "no-offset",
        }
    }

    /// `base` with this variant's gate settings.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Self::Baseline => cfg.gates = GateVariant::Baseline,
            Self::Gh => cfg.gates = GateVariant::HorizontalOnly,
            Self::Gv => cfg.gates = GateVariant::VerticalOnly,
            Self::Full => cfg.gates = GateVariant::Full,
            Self::NoOffset => {
                cfg.gates = GateVariant::Full;
                cfg.use_offsets = false;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    /// Variant name, or `null` when no ablation was requested.
    pub variant: Option<AblationVariant>,
    pub checkpoint: String,
    /// Held-out metrics of the final restored image.
    pub metrics: MetricsReport,
    pub stages: Vec<StageReport>,
}

/// `summary.json` of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub eval_seed: u64,
    pub train_samples: usize,
    /// Held-out metrics of the shadowed input itself.
    pub input_metrics: MetricsReport,
    /// Held-out metrics of the coarse prediction after stage 1.
    pub coarse_metrics: Option<MetricsReport>,
    pub stage1: Option<StageReport>,
    pub results: Vec<VariantResult>,
}

fn train_config(a: &TrainArgs) -> Result<ModelConfig> {
    let mut cfg = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(n) = a.stage1_steps {
        cfg.stage1_steps = n;
    }
    if let Some(n) = a.stage2_steps {
        cfg.stage2_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn variants(list: Option<&str>) -> Result<Vec<Option<AblationVariant>>> {
    let Some(list) = list else {
        return Ok(vec![None]);
    };
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let v = Some(AblationVariant::parse(part)?);
        if out.contains(&v) {
            return Err(Error::Config(format!("variant {} listed twice", part.trim())));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config("--ablate needs at least one variant".into()));
    }
    Ok(out)
}

fn held_out_metrics(state: &TrainState, s: &ShadowSample) -> Result<(MetricsReport, MetricsReport)> {
    let out = forward_full(&s.input, &s.mask, &state.params, &state.config)?;
    Ok((
        region_metrics(&out.restored, &s.target, &s.mask)?,
        region_metrics(&out.coarse.map(|v| v.clamp(0.0, 1.0)), &s.target, &s.mask)?,
    ))
}

pub(crate) fn train(a: &TrainArgs) -> Result<i32> {
    let cfg = train_config(a)?;
    let runs = variants(a.ablate.as_deref())?;
    let (do1, do2) = match a.stage.as_str() {
        "1" => (true, false),
        "2" => (false, true),
        "all" => (true, true),
        other => return Err(Error::Config(format!("--stage must be 1, 2 or all, got {other:?}"))),
    };
    if do1 == a.resume.is_some() {
        return Err(Error::Config(if do1 {
            "--resume only applies to --stage 2".into()
        } else {
            "--stage 2 needs --resume <stage-1 checkpoint>".into()
        }));
    }
    let data = match &a.data {
        Some(dir) => load_dataset(dir)?,
        None => (0..a.n)
            .map(|k| synth_shadow_sample(cfg.seed.wrapping_add(k as u64), a.size, a.size))
            .collect::<Result<_>>()?,
    };
    let (h, w) = data.first().ok_or_else(|| contract("no training samples"))?.mask.hw()?;
    let eval_seed = a.eval_seed.unwrap_or(cfg.seed.wrapping_add(HELD_OUT_OFFSET));
    let held_out = synth_shadow_sample(eval_seed, h, w)?;
    create_dir(&a.out)?;

    let base = match &a.resume {
        Some(path) => {
            let (header, params) = load_checkpoint(path)?;
            if header.stage < 1 {
                return Err(contract(format!("{} has not finished stage 1", path.display())));
            }
            let mut state = TrainState::new(header.config.clone())?;
            state.params = params;
            state.stage = header.stage;
            state.step = header.step;
            state
        }
        None => {
            let state = train_stage1(&data, &cfg)?;
            save_checkpoint(&a.out.join("stage1.ckpt"), &state.header(), &state.params)?;
            state
        }
    };
    let input_metrics = region_metrics(&held_out.input, &held_out.target, &held_out.mask)?;
    let coarse_metrics = Some(held_out_metrics(&base, &held_out)?.1);
    let mut summary = TrainSummary {
        seed: cfg.seed,
        eval_seed,
        train_samples: data.len(),
        input_metrics,
        coarse_metrics,
        stage1: base.reports.first().cloned(),
        results: Vec::new(),
    };
    if do2 {
        for variant in runs {
            let vcfg = variant.map_or_else(|| cfg.clone(), |v| v.apply(&cfg));
            let state = train_stage2(&data, base.clone(), &vcfg)?;
            let dir = match variant {
                Some(v) => a.out.join(v.name()),
                None => a.out.clone(),
            };
            create_dir(&dir)?;
            let ckpt = dir.join("model.ckpt");
            save_checkpoint(&ckpt, &state.header(), &state.params)?;
            let (metrics, _) = held_out_metrics(&state, &held_out)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            println!(
                "{}: stage-2 loss {:.6} -> {:.6}, held-out shadow LAB RMSE {}",
                variant.map_or("model", |v| v.name()),
                state.reports.last().map_or(f64::NAN, |r| r.initial_loss),
                state.reports.last().map_or(f64::NAN, |r| r.final_loss),
                metrics.lab_rmse_shadow.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            );
            summary.results.push(VariantResult {
                variant,
                checkpoint: relative(&ckpt, &a.out),
                metrics,
                stages: state.reports.clone(),
            });
        }
    } else if let Some(r) = &summary.stage1 {
        println!("stage 1: loss {:.6} -> {:.6}", r.initial_loss, r.final_loss);
    }
    write_json(&a.out.join("summary.json"), &summary)?;
    Ok(0)
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

/// Rescales a map to `[0,1]` by its own range; constant maps become zero.
fn normalize_map(m: &Tensor) -> Tensor {
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        m.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(m.shape())
    }
}

pub(crate) fn infer(checkpoint: &Path, image: &Path, mask: &Path, out: &Path, dump: Option<&Path>) -> Result<i32> {
    let (header, params) = load_checkpoint(checkpoint)?;
    let input = read_rgb(image)?;
    let m = read_mask(mask)?;
    let res = forward_full(&input, &m, &params, &header.config)?;
    write_rgb(out, &res.restored)?;
    if let Some(dir) = dump {
        create_dir(dir)?;
        write_rgb(&dir.join("coarse.png"), &res.coarse)?;
        match &res.gates {
            Some(g) => {
                write_gray(&dir.join("gate_h.png"), &normalize_map(&g.horizontal))?;
                write_gray(&dir.join("gate_v.png"), &normalize_map(&g.vertical))?;
            }
            None => log::warn!("checkpoint has no gates; only the coarse prediction was dumped"),
        }
    }
    Ok(0)
}

pub(crate) fn eval(pred: &Path, target: &Path, mask: &Path, out: Option<&Path>) -> Result<i32> {
    let report = region_metrics(&read_rgb(pred)?, &read_rgb(target)?, &read_mask(mask)?)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| contract(e.to_string()))?);
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(0)
}

pub(crate) fn gradcheck(seed: u64, json: bool) -> Result<i32> {
    let reports = gradient_suites(seed)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&reports).map_err(|e| contract(e.to_string()))?);
    } else {
        println!("{:<20} {:>12} {:>10} {:>8} {:>8}  status", "suite", "max_rel_err", "threshold", "checked", "skipped");
        for r in &reports {
            println!(
                "{:<20} {:>12.3e} {:>10.0e} {:>8} {:>8}  {}",
                r.name,
                r.max_rel_error,
                r.threshold,
                r.checked,
                r.skipped,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(if reports.iter().all(|r| r.passed()) { 0 } else { crate::EXIT_CONTRACT })
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad length {p:?} in --lengths")))
        })
        .collect()
}

pub(crate) fn bench(a: &BenchArgs) -> Result<i32> {
    let rows = scan_bench(&parse_lengths(&a.lengths)?, a.z, a.channels, a.reps, a.seed)?;
    let mut csv = String::from("L,Z,mode,ns_per_step\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.1}\n", r.l, r.z, r.mode, r.ns_per_step));
    }
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| Error::io(PathBuf::from(p), e))?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(0)
}
