//! Network definition. Every forward pass is recorded on a [`Tape`]; plain
//! inference binds the parameters as constants so nothing is differentiated.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::crossgate::{
    crossgate_maps_tape, horizontal_gate_tape, vertical_gate_tape, CrossGateVars, CrossGateWeights,
    GateMaps,
};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::ssm::{scan_image_4dir_tape, ContinuousParams, ScanVars};

use super::params::{Binding, ParamSet};
use super::{GateVariant, ModelConfig};

const SCAN_DIRS: [&str; 4] = ["rf", "rr", "cf", "cr"];
const SCAN_FIELDS: [&str; 7] = ["a", "b_proj", "c_proj", "dt_proj", "dt_bias", "gate_weight", "d"];
const GATE_FIELDS: [&str; 6] = ["q_weight", "q_bias", "k_weight", "k_bias", "offset_weight", "offset_bias"];

pub const COARSE_PREFIX: &str = "coarse.";
pub const MAIN_PREFIX: &str = "main.";

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn init_pointwise(ps: &mut ParamSet, name: &str, c_out: usize, c_in: usize, gain: f64, rng: &mut ChaCha8Rng) {
    ps.insert(
        format!("{name}.w"),
        normal(rng, &[c_out, c_in, 1, 1], gain / (c_in as f64).sqrt()),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn scan_prefixes(prefix: &str, shared: bool) -> [String; 4] {
    if shared {
        std::array::from_fn(|_| format!("{prefix}.scan.all"))
    } else {
        SCAN_DIRS.map(|d| format!("{prefix}.scan.{d}"))
    }
}

fn init_block(ps: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let (c, e) = (cfg.channels, cfg.expanded());
    ps.insert(format!("{prefix}.ln.g"), Tensor::full(&[c], 1.0));
    ps.insert(format!("{prefix}.ln.b"), Tensor::zeros(&[c]));
    init_pointwise(ps, &format!("{prefix}.in"), e, c, 1.0, rng);
    ps.insert(format!("{prefix}.dw.w"), normal(rng, &[e, 1, 3, 3], 1.0 / 3.0));
    ps.insert(format!("{prefix}.dw.b"), Tensor::zeros(&[e]));
    let mut seen = Vec::new();
    for sp in scan_prefixes(prefix, cfg.share_scan_params) {
        if seen.contains(&sp) {
            continue;
        }
        let p = ContinuousParams::init(e, cfg.state_dim, rng);
        let vec1 = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).expect("vector");
        ps.insert(format!("{sp}.a"), vec1(&p.a));
        ps.insert(format!("{sp}.b_proj"), p.b_proj);
        ps.insert(format!("{sp}.c_proj"), p.c_proj);
        ps.insert(format!("{sp}.dt_proj"), vec1(&p.dt_proj));
        ps.insert(format!("{sp}.dt_bias"), vec1(&[p.dt_bias]));
        ps.insert(format!("{sp}.gate_weight"), vec1(&[p.gate_weight]));
        ps.insert(format!("{sp}.d"), vec1(&p.d));
        seen.push(sp);
    }
    init_pointwise(ps, &format!("{prefix}.out"), c, e, 0.25, rng);
}

fn init_gate(ps: &mut ParamSet, prefix: &str, w: CrossGateWeights) {
    let parts = [
        w.q_weight,
        w.q_bias,
        w.k_weight,
        w.k_bias,
        w.offset_weight,
        w.offset_bias,
    ];
    for (field, t) in GATE_FIELDS.iter().zip(parts) {
        ps.insert(format!("{prefix}.{field}"), t);
    }
}

/// Fresh parameters for `cfg`, drawn from `cfg.seed`.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::new();
    let c = cfg.channels;
    init_pointwise(&mut ps, "coarse.in", c, 4, 1.0, &mut rng);
    for i in 0..super::COARSE_BLOCKS {
        init_block(&mut ps, &format!("coarse.block{i}"), cfg, &mut rng);
    }
    init_pointwise(&mut ps, "coarse.out", 3, c, 0.1, &mut rng);

    init_pointwise(&mut ps, "main.embed_input", c, 4, 1.0, &mut rng);
    ps.insert("main.embed_coarse.w", normal(&mut rng, &[c, 3, 1, 1], 1.0 / 3f64.sqrt()));
    init_gate(&mut ps, "main.gate_h", CrossGateWeights::init(c, cfg.qk_width(), &mut rng));
    init_gate(&mut ps, "main.gate_v", CrossGateWeights::init(c, cfg.qk_width(), &mut rng));
    for i in 0..cfg.encoder_blocks {
        init_block(&mut ps, &format!("main.enc{i}"), cfg, &mut rng);
    }
    ps.insert("main.down.w", normal(&mut rng, &[c, c, 3, 3], 1.0 / (9.0 * c as f64).sqrt()));
    ps.insert("main.down.b", Tensor::zeros(&[c]));
    for i in 0..cfg.decoder_blocks {
        init_block(&mut ps, &format!("main.dec{i}"), cfg, &mut rng);
    }
    init_pointwise(&mut ps, "main.out", 3, c, 0.1, &mut rng);
    Ok(ps)
}

fn scan_vars(b: &Binding, prefix: &str, shared: bool) -> Result<[ScanVars; 4]> {
    let mut out = Vec::with_capacity(4);
    for sp in scan_prefixes(prefix, shared) {
        let v = |f: &str| b.var(&format!("{sp}.{f}"));
        out.push(ScanVars {
            a: v(SCAN_FIELDS[0])?,
            b_proj: v(SCAN_FIELDS[1])?,
            c_proj: v(SCAN_FIELDS[2])?,
            dt_proj: v(SCAN_FIELDS[3])?,
            dt_bias: v(SCAN_FIELDS[4])?,
            gate_weight: v(SCAN_FIELDS[5])?,
            d: v(SCAN_FIELDS[6])?,
        });
    }
    Ok(out.try_into().expect("four paths"))
}

fn gate_vars(b: &Binding, prefix: &str) -> Result<CrossGateVars> {
    let v = |f: &str| b.var(&format!("{prefix}.{f}"));
    Ok(CrossGateVars {
        q_weight: v("q_weight")?,
        q_bias: v("q_bias")?,
        k_weight: v("k_weight")?,
        k_bias: v("k_bias")?,
        offset_weight: v("offset_weight")?,
        offset_bias: v("offset_bias")?,
    })
}

fn pointwise(tape: &mut Tape, b: &Binding, name: &str, x: Var) -> Result<Var> {
    tape.conv2d(x, b.var(&format!("{name}.w"))?, b.var(&format!("{name}.b"))?, 1, 0, 1)
}

/// Pre-norm block: norm, expand, depthwise 3×3, SiLU, four-path scan,
/// contract, residual.
pub fn mamba_block_tape(
    tape: &mut Tape,
    b: &Binding,
    prefix: &str,
    x: Var,
    gates: Option<(Var, Var)>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let e = cfg.expanded();
    let ln = tape.layer_norm(
        x,
        b.var(&format!("{prefix}.ln.g"))?,
        b.var(&format!("{prefix}.ln.b"))?,
        cfg.layer_norm_eps,
    )?;
    let expanded = pointwise(tape, b, &format!("{prefix}.in"), ln)?;
    let dw = tape.conv2d(
        expanded,
        b.var(&format!("{prefix}.dw.w"))?,
        b.var(&format!("{prefix}.dw.b"))?,
        1,
        1,
        e,
    )?;
    let act = tape.silu(dw);
    let scanned = scan_image_4dir_tape(tape, act, &scan_vars(b, prefix, cfg.share_scan_params)?, gates)?;
    let out = pointwise(tape, b, &format!("{prefix}.out"), scanned)?;
    tape.add(x, out)
}

fn check_inputs(image: &Tensor, mask: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("model input", &[3, h, w], image.shape()));
    }
    if mask.shape() != [h, w] {
        return Err(Error::shape("model mask", &[h, w], mask.shape()));
    }
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::contract(format!(
            "spatial extent {h}×{w} must be positive and divisible by 4"
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("shadow mask must be binary"));
    }
    Ok((h, w))
}

/// Coarse unit: `(F, I_coarse)` handles.
pub fn coarse_tape(
    tape: &mut Tape,
    b: &Binding,
    input: &Tensor,
    mask: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    check_inputs(input, mask)?;
    let x = tape.constant(Tensor::concat_channels(&[input, mask])?);
    let mut f = pointwise(tape, b, "coarse.in", x)?;
    for i in 0..super::COARSE_BLOCKS {
        f = mamba_block_tape(tape, b, &format!("coarse.block{i}"), f, None, cfg)?;
    }
    let delta = pointwise(tape, b, "coarse.out", f)?;
    let base = tape.constant(input.clone());
    let coarse = tape.add(base, delta)?;
    Ok((f, coarse))
}

fn upsample_indices(c: usize, h: usize, w: usize) -> Rc<Vec<usize>> {
    let (hl, wl) = (h / 2, w / 2);
    Rc::new(
        (0..c * h * w)
            .map(|idx| {
                let j = idx % w;
                let i = (idx / w) % h;
                let ch = idx / (h * w);
                (ch * hl + i / 2) * wl + j / 2
            })
            .collect(),
    )
}

/// Handles produced by [`main_tape`].
#[derive(Clone, Copy, Debug)]
pub struct MainOutputs {
    pub restored: Var,
    pub gates: Option<(Var, Var)>,
}

/// Main body on top of coarse features `f` and coarse prediction `coarse`.
pub fn main_tape(
    tape: &mut Tape,
    b: &Binding,
    input: &Tensor,
    mask: &Tensor,
    f: Var,
    coarse: Var,
    cfg: &ModelConfig,
) -> Result<MainOutputs> {
    let (h, w) = check_inputs(input, mask)?;
    let c = cfg.channels;
    let x = tape.constant(Tensor::concat_channels(&[input, mask])?);
    let e_in = pointwise(tape, b, "main.embed_input", x)?;
    let zero_bias = tape.constant(Tensor::zeros(&[c]));
    let e_co = tape.conv2d(coarse, b.var("main.embed_coarse.w")?, zero_bias, 1, 0, 1)?;
    let embed = tape.add(e_in, e_co)?;
    let mut x = tape.add(embed, f)?;

    let gcfg = cfg.crossgate_config();
    let gates = match cfg.gates {
        GateVariant::Baseline => None,
        GateVariant::Full => Some(crossgate_maps_tape(
            tape,
            f,
            mask,
            &gate_vars(b, "main.gate_h")?,
            &gate_vars(b, "main.gate_v")?,
            &gcfg,
        )?),
        GateVariant::HorizontalOnly => {
            let gh = horizontal_gate_tape(tape, f, mask, &gate_vars(b, "main.gate_h")?, &gcfg)?;
            Some((gh, tape.constant(Tensor::zeros(&[h, w]))))
        }
        GateVariant::VerticalOnly => {
            let gv = vertical_gate_tape(tape, f, mask, &gate_vars(b, "main.gate_v")?, &gcfg)?;
            Some((tape.constant(Tensor::zeros(&[h, w])), gv))
        }
    };

    for i in 0..cfg.encoder_blocks {
        x = mamba_block_tape(tape, b, &format!("main.enc{i}"), x, gates, cfg)?;
    }
    let skip = x;
    let mut low = tape.conv2d(x, b.var("main.down.w")?, b.var("main.down.b")?, 2, 1, 1)?;
    let low_gates = match gates {
        Some((gh, gv)) => Some((tape.avg_pool2(gh)?, tape.avg_pool2(gv)?)),
        None => None,
    };
    for i in 0..cfg.decoder_blocks {
        low = mamba_block_tape(tape, b, &format!("main.dec{i}"), low, low_gates, cfg)?;
    }
    let up = tape.gather(low, upsample_indices(c, h, w), &[c, h, w])?;
    let merged = tape.add(up, skip)?;
    let delta = pointwise(tape, b, "main.out", merged)?;
    let base = tape.constant(input.clone());
    let sum = tape.add(base, delta)?;
    let restored = tape.clamp(sum, 0.0, 1.0);
    Ok(MainOutputs { restored, gates })
}

/// Plain (non-differentiated) model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub restored: Tensor,
    pub coarse: Tensor,
    pub features: Tensor,
    pub gates: Option<GateMaps>,
}

pub fn forward_full(input: &Tensor, mask: &Tensor, params: &ParamSet, cfg: &ModelConfig) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, |_| false);
    let (f, coarse) = coarse_tape(&mut tape, &b, input, mask, cfg)?;
    let out = main_tape(&mut tape, &b, input, mask, f, coarse, cfg)?;
    Ok(ForwardOutput {
        restored: tape.value(out.restored).clone(),
        coarse: tape.value(coarse).clone(),
        features: tape.value(f).clone(),
        gates: out.gates.map(|(gh, gv)| GateMaps {
            horizontal: tape.value(gh).clone(),
            vertical: tape.value(gv).clone(),
        }),
    })
}

/// Coarse unit on plain tensors: `(F, I_coarse)`.
pub fn coarse_deshadow(
    input: &Tensor,
    mask: &Tensor,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let b = params.subset(COARSE_PREFIX).bind(&mut tape, |_| false);
    let (f, coarse) = coarse_tape(&mut tape, &b, input, mask, cfg)?;
    Ok((tape.value(f).clone(), tape.value(coarse).clone()))
}

/// One block applied to plain tensors; `prefix` names its parameters.
pub fn mamba_block(
    f: &Tensor,
    gates: Option<&GateMaps>,
    params: &ParamSet,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.subset(prefix).bind(&mut tape, |_| false);
    let x = tape.constant(f.clone());
    let g = match gates {
        Some(g) => Some((tape.constant(g.horizontal.clone()), tape.constant(g.vertical.clone()))),
        None => None,
    };
    let y = mamba_block_tape(&mut tape, &b, prefix, x, g, cfg)?;
    Ok(tape.value(y).clone())
}

/// Restored image `I_r ∈ [0,1]`.
pub fn forward(input: &Tensor, mask: &Tensor, params: &ParamSet, cfg: &ModelConfig) -> Result<Tensor> {
    Ok(forward_full(input, mask, params, cfg)?.restored)
}
