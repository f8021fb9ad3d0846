//! Finite-difference gradient suites and scan throughput measurement.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::colorshift::{build_negative_set, colorshift_loss_tape, feature_extract_tape, FeatureExtractor};
use crate::crossgate::{crossgate_maps_tape, CrossGateConfig, CrossGateVars, CrossGateWeights};
use crate::error::{Error, Result};
use crate::model::{coarse_tape, init_params, main_tape, total_loss_tape, ColorShiftTargets, ModelConfig, ParamSet};
use crate::numerics::{finite_diff_check_subset, CharbonnierMode, Tape, Tensor, Var};
use crate::ssm::{scan_matrix_oracle, selective_scan, selective_scan_tape, ContinuousParams, ScanVars, ORACLE_MAX_LEN};

/// Relative-error bound for single operations.
pub const UNIT_THRESHOLD: f64 = 1e-4;
/// Relative-error bound for the whole model at 8×8.
pub const END_TO_END_THRESHOLD: f64 = 1e-3;
/// Fraction of model parameters perturbed by the end-to-end suite.
pub const END_TO_END_FRACTION: f64 = 0.01;

const STEP: f64 = 1e-5;
/// Coordinates whose central differences at `h` and `h/4` disagree by more
/// than this are treated as sitting on a kink and skipped.
const KINK_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub checked: usize,
    /// Coordinates skipped because the objective is not smooth there.
    pub skipped: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.threshold
    }
}

/// Objective over a flat parameter vector, returning value and gradient.
type Objective<'a> = Box<dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a>;

/// Wraps a tape builder over several leaf tensors as a flat objective.
fn objective<'a>(
    shapes: Vec<Vec<usize>>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a,
) -> Objective<'a> {
    Box::new(move |flat: &[f64]| {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut leaves = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            leaves.push(tape.leaf(Tensor::new(s, flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        let root = build(&mut tape, &leaves)?;
        let value = tape.value(root).item();
        let grads = tape.backward(root)?;
        let mut g = Vec::with_capacity(flat.len());
        for (&v, s) in leaves.iter().zip(&shapes) {
            match grads.get(v) {
                Some(t) => g.extend_from_slice(t.data()),
                None => g.extend(std::iter::repeat_n(0.0, s.iter().product())),
            }
        }
        Ok((value, g))
    })
}

fn flatten(parts: &[&Tensor]) -> (Vec<Vec<usize>>, Vec<f64>) {
    let shapes = parts.iter().map(|t| t.shape().to_vec()).collect();
    let flat = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    (shapes, flat)
}

/// Indices where the objective looks smooth at the scale of the step.
fn smooth_indices(f: &mut Objective, params: &[f64], candidates: &[usize]) -> Result<Vec<usize>> {
    let mut work = params.to_vec();
    let mut keep = Vec::with_capacity(candidates.len());
    let mut diff = |work: &mut Vec<f64>, i: usize, h: f64| -> Result<f64> {
        let orig = work[i];
        work[i] = orig + h;
        let p = f(work)?.0;
        work[i] = orig - h;
        let m = f(work)?.0;
        work[i] = orig;
        Ok((p - m) / (2.0 * h))
    };
    for &i in candidates {
        let coarse = diff(&mut work, i, STEP)?;
        let fine = diff(&mut work, i, STEP / 4.0)?;
        if (coarse - fine).abs() <= KINK_TOLERANCE * coarse.abs().max(1.0) {
            keep.push(i);
        }
    }
    Ok(keep)
}

fn run_suite(
    name: &str,
    threshold: f64,
    mut f: Objective,
    params: &[f64],
    candidates: Option<Vec<usize>>,
) -> Result<SuiteReport> {
    let candidates = candidates.unwrap_or_else(|| (0..params.len()).collect());
    let keep = smooth_indices(&mut f, params, &candidates)?;
    let report = finite_diff_check_subset(f, params, STEP, &keep)?;
    Ok(SuiteReport {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        threshold,
        checked: report.checked,
        skipped: candidates.len() - keep.len(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ w ⊙ y` with a fixed random `w`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn softplus_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = uniform(&mut rng, &[40], -6.0, 6.0);
    x.data_mut()[0] = 35.0;
    x.data_mut()[1] = -35.0;
    let (shapes, flat) = flatten(&[&x]);
    let f = objective(shapes, move |t, v| {
        let y = t.softplus(v[0]);
        weighted_sum(t, y, seed ^ 1)
    });
    run_suite("softplus", UNIT_THRESHOLD, f, &flat, None)
}

fn conv2d_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 6, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[6, 2, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[6], -0.5, 0.5);
    let dw = uniform(&mut rng, &[6, 1, 3, 3], -0.5, 0.5);
    let db = uniform(&mut rng, &[6], -0.5, 0.5);
    let (shapes, flat) = flatten(&[&x, &w, &b, &dw, &db]);
    let f = objective(shapes, move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1, 2)?;
        let z = t.conv2d(y, v[3], v[4], 1, 1, 6)?;
        weighted_sum(t, z, seed ^ 2)
    });
    run_suite("conv2d", UNIT_THRESHOLD, f, &flat, None)
}

fn layer_norm_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[5, 3, 4], -2.0, 2.0);
    let g = uniform(&mut rng, &[5], 0.5, 1.5);
    let b = uniform(&mut rng, &[5], -0.5, 0.5);
    let (shapes, flat) = flatten(&[&x, &g, &b]);
    let f = objective(shapes, move |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, seed ^ 3)
    });
    run_suite("layer_norm", UNIT_THRESHOLD, f, &flat, None)
}

fn bilinear_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = uniform(&mut rng, &[2, 5, 6], -1.0, 1.0);
    // keep sample points inside the image and off integer coordinates
    let grid = Tensor::from_fn(&[2, 3, 4], |i| {
        let cell = rng.random_range(0..if i < 12 { 5 } else { 4 });
        cell as f64 + rng.random_range(0.2..0.8)
    });
    let (shapes, flat) = flatten(&[&src, &grid]);
    let f = objective(shapes, move |t, v| {
        let y = t.bilinear_sample(v[0], v[1])?;
        weighted_sum(t, y, seed ^ 4)
    });
    run_suite("bilinear_sample_2d", UNIT_THRESHOLD, f, &flat, None)
}

fn scan_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, c, z) = (12, 3, 4);
    let mut p = ContinuousParams::init(c, z, &mut rng);
    p.dt_bias = rng.random_range(-1.0..0.5);
    p.gate_weight = rng.random_range(-0.5..0.5);
    for v in p.dt_proj.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    let x = uniform(&mut rng, &[l, c], -1.0, 1.0);
    let g = uniform(&mut rng, &[l], -1.0, 1.0);
    let parts = [
        x,
        g,
        Tensor::new(&[z], p.a.clone())?,
        p.b_proj.clone(),
        p.c_proj.clone(),
        Tensor::new(&[c], p.dt_proj.clone())?,
        Tensor::new(&[1], vec![p.dt_bias])?,
        Tensor::new(&[1], vec![p.gate_weight])?,
        Tensor::new(&[c], p.d.clone())?,
    ];
    let refs: Vec<&Tensor> = parts.iter().collect();
    let (shapes, flat) = flatten(&refs);
    let f = objective(shapes, move |t, v| {
        let vars = ScanVars {
            a: v[2],
            b_proj: v[3],
            c_proj: v[4],
            dt_proj: v[5],
            dt_bias: v[6],
            gate_weight: v[7],
            d: v[8],
        };
        let y = selective_scan_tape(t, v[0], &vars, Some(v[1]))?;
        weighted_sum(t, y, seed ^ 5)
    });
    run_suite("selective_scan", UNIT_THRESHOLD, f, &flat, None)
}

fn crossgate_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, qk, h, w) = (3, 2, 4, 4);
    let feat = uniform(&mut rng, &[c, h, w], -1.0, 1.0);
    let mask = loop {
        let m = Tensor::from_fn(&[h, w], |_| rng.random_bool(0.4) as u8 as f64);
        let s = m.sum();
        if s > 0.0 && s < (h * w) as f64 {
            break m;
        }
    };
    let mut wh = CrossGateWeights::init(c, qk, &mut rng);
    let mut wv = CrossGateWeights::init(c, qk, &mut rng);
    for wt in [&mut wh, &mut wv] {
        wt.offset_weight = uniform(&mut rng, wt.offset_weight.shape(), -0.4, 0.4);
        wt.offset_bias = uniform(&mut rng, &[2], -0.3, 0.3);
        wt.q_bias = uniform(&mut rng, &[qk], -0.2, 0.2);
        wt.k_bias = uniform(&mut rng, &[qk], -0.2, 0.2);
    }
    let gate_parts = |g: &CrossGateWeights| {
        [
            g.q_weight.clone(),
            g.q_bias.clone(),
            g.k_weight.clone(),
            g.k_bias.clone(),
            g.offset_weight.clone(),
            g.offset_bias.clone(),
        ]
    };
    let mut parts = vec![feat];
    parts.extend(gate_parts(&wh));
    parts.extend(gate_parts(&wv));
    let refs: Vec<&Tensor> = parts.iter().collect();
    let (shapes, flat) = flatten(&refs);
    let cfg = CrossGateConfig::default();
    let f = objective(shapes, move |t, v| {
        let vars = |o: usize| CrossGateVars {
            q_weight: v[o],
            q_bias: v[o + 1],
            k_weight: v[o + 2],
            k_bias: v[o + 3],
            offset_weight: v[o + 4],
            offset_bias: v[o + 5],
        };
        let (gh, gv) = crossgate_maps_tape(t, v[0], &mask, &vars(1), &vars(7), &cfg)?;
        let a = weighted_sum(t, gh, seed ^ 6)?;
        let b = weighted_sum(t, gv, seed ^ 7)?;
        t.add(a, b)
    });
    run_suite("crossgate", UNIT_THRESHOLD, f, &flat, None)
}

fn charbonnier_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let b = uniform(&mut rng, &[3, 4, 4], 0.0, 1.0);
    let (shapes, flat) = flatten(&[&a, &b]);
    let f = objective(shapes, |t, v| {
        let p = t.charbonnier(v[0], v[1], 1e-3, CharbonnierMode::PerPixel)?;
        let g = t.charbonnier(v[0], v[1], 1e-3, CharbonnierMode::GlobalNorm)?;
        t.add(p, g)
    });
    run_suite("charbonnier", UNIT_THRESHOLD, f, &flat, None)
}

/// Contrastive loss differentiated through the feature extractor down to
/// the restored image.
fn colorshift_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let fe = FeatureExtractor::seeded(seed);
    let mask = Tensor::from_fn(&[h, w], |p| ((2..6).contains(&(p / w)) && (1..5).contains(&(p % w))) as u8 as f64);
    let mk = |rng: &mut ChaCha8Rng| uniform(rng, &[3, h, w], 0.0, 1.0);
    let restored = mk(&mut rng);
    let positive = crate::colorshift::feature_extract(&mk(&mut rng), &mask, &fe)?;
    let negatives: Vec<(Tensor, f64)> = [0.5, 0.3, 0.2]
        .iter()
        .map(|&g| Ok((crate::colorshift::feature_extract(&mk(&mut rng), &mask, &fe)?, g)))
        .collect::<Result<_>>()?;
    let (shapes, flat) = flatten(&[&restored]);
    let f = objective(shapes, move |t, v| {
        let anchor = feature_extract_tape(t, v[0], &mask, &fe)?;
        colorshift_loss_tape(t, anchor, &positive, &negatives)
    });
    run_suite("colorshift_loss", UNIT_THRESHOLD, f, &flat, None)
}

/// A small shadowed scene at 8×8: smooth clean image, rectangular shadow.
pub fn tiny_scene(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.9));
    let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let n = h * w;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    let target = Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / n, i % n);
        q(base[ch] + slope[ch] * ((p / w + p % w) as f64))
    });
    let mask = Tensor::from_fn(&[h, w], |p| ((2..6).contains(&(p / w)) && (1..6).contains(&(p % w))) as u8 as f64);
    let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let input = Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / n, i % n);
        if mask.data()[p] == 1.0 {
            q(target.data()[i] * scale[ch])
        } else {
            target.data()[i]
        }
    });
    (input, mask, target)
}

/// `L_C + λ·L_CS` of the full model at 8×8 with respect to a random
/// subset of all parameters.
fn end_to_end_suite(seed: u64) -> Result<SuiteReport> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let params = init_params(&cfg)?;
    let (input, mask, target) = tiny_scene(seed);
    let fe = FeatureExtractor::from_source(&cfg.extractor)?;
    let set = build_negative_set(&target.map(|v| v * 255.0), &mask, cfg.k_clusters, seed)?;
    let targets = ColorShiftTargets::new(&target, &mask, &set, &fe)?;
    let names: Vec<String> = params.names().cloned().collect();
    let tensors: Vec<&Tensor> = names.iter().map(|n| params.get(n)).collect::<Result<_>>()?;
    let (shapes, flat) = flatten(&tensors);
    let settings = cfg.loss_settings();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let count = ((flat.len() as f64 * END_TO_END_FRACTION).ceil() as usize).max(1);
    let mut subset = sample(&mut rng, flat.len(), count).into_vec();
    subset.sort_unstable();
    let f: Objective = Box::new(move |flat: &[f64]| {
        let mut set = ParamSet::new();
        let mut offset = 0;
        for (n, s) in names.iter().zip(&shapes) {
            let len: usize = s.iter().product();
            set.insert(n.clone(), Tensor::new(s, flat[offset..offset + len].to_vec())?);
            offset += len;
        }
        let mut t = Tape::new();
        let b = set.bind(&mut t, |_| true);
        let (feat, coarse) = coarse_tape(&mut t, &b, &input, &mask, &cfg)?;
        let out = main_tape(&mut t, &b, &input, &mask, feat, coarse, &cfg)?;
        let loss = total_loss_tape(&mut t, out.restored, &target, &mask, Some(&targets), &fe, settings)?;
        let grads = t.backward(loss)?;
        let mut g = Vec::with_capacity(flat.len());
        for (n, s) in names.iter().zip(&shapes) {
            match grads.get(b.var(n)?) {
                Some(gt) => g.extend_from_slice(gt.data()),
                None => g.extend(std::iter::repeat_n(0.0, s.iter().product())),
            }
        }
        Ok((t.value(loss).item(), g))
    });
    run_suite("total_loss_8x8", END_TO_END_THRESHOLD, f, &flat, Some(subset))
}

/// Runs every gradient suite with inputs drawn from `seed`.
pub fn gradient_suites(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        softplus_suite(seed)?,
        conv2d_suite(seed)?,
        layer_norm_suite(seed)?,
        bilinear_suite(seed)?,
        scan_suite(seed)?,
        crossgate_suite(seed)?,
        charbonnier_suite(seed)?,
        colorshift_suite(seed)?,
        end_to_end_suite(seed)?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub l: usize,
    pub z: usize,
    pub mode: &'static str,
    pub ns_per_step: f64,
}

/// Wall-clock cost per sequence step of the recurrent scan and, up to
/// [`ORACLE_MAX_LEN`], of the matrix-form oracle.
pub fn scan_bench(lengths: &[usize], z: usize, channels: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps == 0 || z == 0 || channels == 0 {
        return Err(Error::contract("bench needs positive reps, state size and channels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ContinuousParams::init(channels, z, &mut rng);
    let mut rows = Vec::new();
    for &l in lengths {
        if l == 0 {
            return Err(Error::contract("bench lengths must be positive"));
        }
        let x = uniform(&mut rng, &[l, channels], -1.0, 1.0);
        let mut time = |mode: &'static str, run: &dyn Fn() -> Result<Tensor>| -> Result<()> {
            let start = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(run()?);
            }
            let ns = start.elapsed().as_nanos() as f64 / (reps * l) as f64;
            rows.push(BenchRow { l, z, mode, ns_per_step: ns });
            Ok(())
        };
        time("scan", &|| selective_scan(&x, &p, None))?;
        if l <= ORACLE_MAX_LEN {
            time("oracle", &|| scan_matrix_oracle(&x, &p, None))?;
        }
    }
    Ok(rows)
}
