//! Selective state-space scan.
//!
//! One channel group per scan: the state is `Z × C` (a `Z`-dimensional state
//! per channel), `B_t`, `C_t` and the step `Δ_t` are shared by all channels of
//! the group and derived from the current input, `A` is diagonal.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::crossgate::GateMaps;
use crate::error::{Error, Result};
use crate::numerics::kernels::{sigmoid, softplus_scalar};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Below this `|ΔA|` the ZOH input factor uses its two-term series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Largest sequence the matrix-form oracle will materialize.
pub const ORACLE_MAX_LEN: usize = 512;

/// Continuous-time parameters of one selective scan path.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousParams {
    /// Diagonal of the transition matrix, length `Z`.
    pub a: Vec<f64>,
    /// `S_B`, `Z × C`.
    pub b_proj: Tensor,
    /// `S_C`, `Z × C`.
    pub c_proj: Tensor,
    /// `S_Δ`, length `C`.
    pub dt_proj: Vec<f64>,
    /// `θ_Δ`.
    pub dt_bias: f64,
    /// `S_G`, the weight applied to the external gate signal.
    pub gate_weight: f64,
    /// Per-channel feedthrough, length `C`.
    pub d: Vec<f64>,
}

impl ContinuousParams {
    /// Standard stable initialization: `A = −(1..=Z)`, `softplus(θ_Δ)` drawn
    /// log-uniformly from `[0.001, 0.1]`.
    pub fn init<R: Rng>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        assert!(state_dim >= 1 && channels >= 1);
        let proj = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("normal");
        let small = Normal::new(0.0, 0.1 / (channels as f64).sqrt()).expect("normal");
        let b_proj = Tensor::from_fn(&[state_dim, channels], |_| proj.sample(rng));
        let c_proj = Tensor::from_fn(&[state_dim, channels], |_| proj.sample(rng));
        let dt_proj = (0..channels).map(|_| small.sample(rng)).collect();
        let log_dt = rng.random_range(0.001f64.ln()..=0.1f64.ln());
        let dt = log_dt.exp();
        ContinuousParams {
            a: (1..=state_dim).map(|k| -(k as f64)).collect(),
            b_proj,
            c_proj,
            dt_proj,
            dt_bias: inverse_softplus(dt),
            gate_weight: 0.1,
            d: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.d.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let z = self.a.len();
        if z == 0 {
            return Err(Error::contract("state dimension must be at least 1"));
        }
        if self.b_proj.shape() != [z, channels] {
            return Err(Error::shape("scan b_proj", &[z, channels], self.b_proj.shape()));
        }
        if self.c_proj.shape() != [z, channels] {
            return Err(Error::shape("scan c_proj", &[z, channels], self.c_proj.shape()));
        }
        if self.dt_proj.len() != channels || self.d.len() != channels {
            return Err(Error::shape("scan dt_proj/d", &[channels], &[self.dt_proj.len()]));
        }
        Ok(())
    }
}

/// Inverse of softplus for positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Discrete parameters of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanStep {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub dt: f64,
}

/// `(e^{Δa} − 1)/a`, the factor multiplying `B` under zero-order hold.
#[inline]
fn zoh_factor(dt: f64, a: f64) -> f64 {
    let x = dt * a;
    if x.abs() < ZOH_SERIES_THRESHOLD {
        dt * (1.0 + 0.5 * x)
    } else {
        x.exp_m1() / a
    }
}

/// Partial derivatives of [`zoh_factor`] with respect to `Δ` and `a`.
#[inline]
fn zoh_factor_grads(dt: f64, a: f64) -> (f64, f64) {
    let x = dt * a;
    if x.abs() < ZOH_SERIES_THRESHOLD {
        (1.0 + x, 0.5 * dt * dt)
    } else if x.abs() < 1e-3 {
        let da = dt * dt * (0.5 + x * (1.0 / 3.0 + x * (0.125 + x / 30.0)));
        (x.exp(), da)
    } else {
        let e = x.exp();
        (e, (x * e - x.exp_m1()) / (a * a))
    }
}

/// Zero-order-hold discretization of a diagonal system.
pub fn discretize_zoh(a: &[f64], b: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("ZOH step must be positive, got {dt}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape("discretize_zoh", &[a.len()], &[b.len()]));
    }
    let a_bar = a.iter().map(|&ak| (dt * ak).exp()).collect();
    let b_bar = a
        .iter()
        .zip(b)
        .map(|(&ak, &bk)| zoh_factor(dt, ak) * bk)
        .collect();
    Ok((a_bar, b_bar))
}

#[derive(Clone, Debug)]
struct StepTrace {
    b: Vec<f64>,
    c: Vec<f64>,
    u: f64,
    dt: f64,
    a_bar: Vec<f64>,
    phi: Vec<f64>,
}

fn step_trace(x_t: &[f64], p: &ContinuousParams, gate: f64) -> StepTrace {
    let z = p.a.len();
    let ch = x_t.len();
    let proj = |m: &Tensor| -> Vec<f64> {
        (0..z)
            .map(|k| {
                m.data()[k * ch..(k + 1) * ch]
                    .iter()
                    .zip(x_t)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect()
    };
    let b = proj(&p.b_proj);
    let c = proj(&p.c_proj);
    let s_dt: f64 = p.dt_proj.iter().zip(x_t).map(|(w, x)| w * x).sum();
    let u = p.dt_bias + s_dt + p.gate_weight * gate;
    let dt = softplus_scalar(u);
    let a_bar = p.a.iter().map(|&ak| (dt * ak).exp()).collect();
    let phi = p.a.iter().map(|&ak| zoh_factor(dt, ak)).collect();
    StepTrace {
        b,
        c,
        u,
        dt,
        a_bar,
        phi,
    }
}

/// Input-dependent discrete parameters for one step: `B = S_B x`,
/// `C = S_C x`, `Δ = softplus(θ_Δ + S_Δ x + S_G g)`, then ZOH.
pub fn selective_params(x_t: &[f64], params: &ContinuousParams, gate: Option<f64>) -> Result<ScanStep> {
    params.validate(x_t.len())?;
    let tr = step_trace(x_t, params, gate.unwrap_or(0.0));
    let b_bar = tr.phi.iter().zip(&tr.b).map(|(f, b)| f * b).collect();
    Ok(ScanStep {
        a_bar: tr.a_bar,
        b_bar,
        c: tr.c,
        dt: tr.dt,
    })
}

fn check_sequence(x: &Tensor, params: &ContinuousParams, gates: Option<&[f64]>) -> Result<(usize, usize)> {
    let (l, c) = match x.shape()[..] {
        [l, c] => (l, c),
        _ => return Err(Error::contract(format!("scan input must be L×C, got {:?}", x.shape()))),
    };
    if l == 0 {
        return Err(Error::contract("scan needs at least one step"));
    }
    params.validate(c)?;
    if let Some(g) = gates {
        if g.len() != l {
            return Err(Error::shape("scan gates", &[l], &[g.len()]));
        }
    }
    Ok((l, c))
}

struct ScanTrace {
    y: Vec<f64>,
    steps: Vec<StepTrace>,
    /// `(L + 1) × Z × C`, starting with the zero initial state.
    h: Vec<f64>,
}

fn scan_forward(x: &[f64], l: usize, c: usize, p: &ContinuousParams, gates: Option<&[f64]>, keep: bool) -> ScanTrace {
    let z = p.a.len();
    let zc = z * c;
    let mut h = vec![0.0; zc];
    let mut hist = if keep { Vec::with_capacity((l + 1) * zc) } else { Vec::new() };
    if keep {
        hist.extend_from_slice(&h);
    }
    let mut steps = Vec::with_capacity(if keep { l } else { 0 });
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        let xt = &x[t * c..(t + 1) * c];
        let tr = step_trace(xt, p, gates.map_or(0.0, |g| g[t]));
        let yt = &mut y[t * c..(t + 1) * c];
        for (ch, yv) in yt.iter_mut().enumerate() {
            *yv = p.d[ch] * xt[ch];
        }
        for k in 0..z {
            let ab = tr.a_bar[k];
            let bb = tr.phi[k] * tr.b[k];
            let ck = tr.c[k];
            let hk = &mut h[k * c..(k + 1) * c];
            for ch in 0..c {
                hk[ch] = ab * hk[ch] + bb * xt[ch];
                yt[ch] += ck * hk[ch];
            }
        }
        if keep {
            hist.extend_from_slice(&h);
            steps.push(tr);
        }
    }
    ScanTrace { y, steps, h: hist }
}

/// Sequential selective scan over an `L × C` sequence with `h_0 = 0`:
/// `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t + D x_t`.
pub fn selective_scan(x: &Tensor, params: &ContinuousParams, gates: Option<&[f64]>) -> Result<Tensor> {
    let (l, c) = check_sequence(x, params, gates)?;
    let tr = scan_forward(x.data(), l, c, params, gates, false);
    Tensor::new(&[l, c], tr.y)
}

/// Materializes the causal mixing matrix
/// `M[t, s] = C_t · (∏_{k=s+1..t} Ā_k) · B̄_s` and returns `M x + D x`.
/// Quadratic in `L`; used as an independent check of [`selective_scan`].
pub fn scan_matrix_oracle(x: &Tensor, params: &ContinuousParams, gates: Option<&[f64]>) -> Result<Tensor> {
    let (l, c) = check_sequence(x, params, gates)?;
    if l > ORACLE_MAX_LEN {
        return Err(Error::contract(format!(
            "matrix oracle limited to L ≤ {ORACLE_MAX_LEN}, got {l}"
        )));
    }
    let steps: Vec<ScanStep> = (0..l)
        .map(|t| {
            selective_params(
                &x.data()[t * c..(t + 1) * c],
                params,
                gates.map(|g| g[t]),
            )
        })
        .collect::<Result<_>>()?;
    let z = params.a.len();
    let mut mix = vec![0.0; l * l];
    for s in 0..l {
        let mut decay = vec![1.0; z];
        for t in s..l {
            if t > s {
                for (d, a) in decay.iter_mut().zip(&steps[t].a_bar) {
                    *d *= a;
                }
            }
            mix[t * l + s] = (0..z)
                .map(|k| steps[t].c[k] * decay[k] * steps[s].b_bar[k])
                .sum();
        }
    }
    let xd = x.data();
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        for ch in 0..c {
            let mut acc = params.d[ch] * xd[t * c + ch];
            for s in 0..=t {
                acc += mix[t * l + s] * xd[s * c + ch];
            }
            y[t * c + ch] = acc;
        }
    }
    Tensor::new(&[l, c], y)
}

/// Tape handles for the parameters of one scan path.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    pub a: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub dt_proj: Var,
    /// shape `[1]`
    pub dt_bias: Var,
    /// shape `[1]`
    pub gate_weight: Var,
    pub d: Var,
}

impl ScanVars {
    /// Records `params` as differentiable leaves.
    pub fn leaves(tape: &mut Tape, params: &ContinuousParams) -> Self {
        let vec1 = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).expect("vector");
        ScanVars {
            a: tape.leaf(vec1(&params.a)),
            b_proj: tape.leaf(params.b_proj.clone()),
            c_proj: tape.leaf(params.c_proj.clone()),
            dt_proj: tape.leaf(vec1(&params.dt_proj)),
            dt_bias: tape.leaf(Tensor::new(&[1], vec![params.dt_bias]).expect("scalar")),
            gate_weight: tape.leaf(Tensor::new(&[1], vec![params.gate_weight]).expect("scalar")),
            d: tape.leaf(vec1(&params.d)),
        }
    }

    fn inputs(&self) -> [Var; 7] {
        [
            self.a,
            self.b_proj,
            self.c_proj,
            self.dt_proj,
            self.dt_bias,
            self.gate_weight,
            self.d,
        ]
    }

    pub fn values(&self, tape: &Tape) -> Result<ContinuousParams> {
        params_from_tensors(&self.inputs().map(|v| tape.value(v)))
    }
}

fn params_from_tensors(t: &[&Tensor]) -> Result<ContinuousParams> {
    let scalar = |x: &Tensor, name: &str| -> Result<f64> {
        if x.len() != 1 {
            return Err(Error::contract(format!("{name} must hold one value")));
        }
        Ok(x.data()[0])
    };
    Ok(ContinuousParams {
        a: t[0].data().to_vec(),
        b_proj: t[1].clone(),
        c_proj: t[2].clone(),
        dt_proj: t[3].data().to_vec(),
        dt_bias: scalar(t[4], "dt_bias")?,
        gate_weight: scalar(t[5], "gate_weight")?,
        d: t[6].data().to_vec(),
    })
}

struct ScanOp {
    l: usize,
    c: usize,
    has_gates: bool,
    trace: ScanTrace,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let p = params_from_tensors(&inputs[1..8]).expect("validated at record time");
        let gates = self.has_gates.then(|| inputs[8].data());
        let g = scan_backward(x.data(), self.l, self.c, &p, gates, &self.trace, grad.data());
        let vec1 = |v: Vec<f64>| Tensor::new(&[v.len()], v).expect("vector");
        let mut out = vec![
            Some(Tensor::new(x.shape(), g.x).expect("dx")),
            Some(vec1(g.a)),
            Some(Tensor::new(p.b_proj.shape(), g.b_proj).expect("db_proj")),
            Some(Tensor::new(p.c_proj.shape(), g.c_proj).expect("dc_proj")),
            Some(vec1(g.dt_proj)),
            Some(vec1(vec![g.dt_bias])),
            Some(vec1(vec![g.gate_weight])),
            Some(vec1(g.d)),
        ];
        if self.has_gates {
            out.push(Some(vec1(g.gates)));
        }
        out
    }
}

struct ScanGrads {
    x: Vec<f64>,
    a: Vec<f64>,
    b_proj: Vec<f64>,
    c_proj: Vec<f64>,
    dt_proj: Vec<f64>,
    dt_bias: f64,
    gate_weight: f64,
    d: Vec<f64>,
    gates: Vec<f64>,
}

fn scan_backward(
    x: &[f64],
    l: usize,
    c: usize,
    p: &ContinuousParams,
    gates: Option<&[f64]>,
    trace: &ScanTrace,
    dy: &[f64],
) -> ScanGrads {
    let z = p.a.len();
    let zc = z * c;
    let mut g = ScanGrads {
        x: vec![0.0; l * c],
        a: vec![0.0; z],
        b_proj: vec![0.0; zc],
        c_proj: vec![0.0; zc],
        dt_proj: vec![0.0; c],
        dt_bias: 0.0,
        gate_weight: 0.0,
        d: vec![0.0; c],
        gates: vec![0.0; l],
    };
    let mut carry = vec![0.0; zc];
    let mut dh = vec![0.0; zc];
    let mut d_abar = vec![0.0; z];
    let mut d_bbar = vec![0.0; z];
    let mut d_c = vec![0.0; z];
    let mut d_b = vec![0.0; z];
    for t in (0..l).rev() {
        let st = &trace.steps[t];
        let h_t = &trace.h[(t + 1) * zc..(t + 2) * zc];
        let h_prev = &trace.h[t * zc..(t + 1) * zc];
        let xt = &x[t * c..(t + 1) * c];
        let dyt = &dy[t * c..(t + 1) * c];
        let dxt = &mut g.x[t * c..(t + 1) * c];

        for ch in 0..c {
            g.d[ch] += dyt[ch] * xt[ch];
            dxt[ch] += p.d[ch] * dyt[ch];
        }
        for k in 0..z {
            let ck = st.c[k];
            let bb = st.phi[k] * st.b[k];
            let mut dc = 0.0;
            let mut da = 0.0;
            let mut dbb = 0.0;
            for ch in 0..c {
                let i = k * c + ch;
                dc += dyt[ch] * h_t[i];
                let dhi = carry[i] + ck * dyt[ch];
                dh[i] = dhi;
                da += dhi * h_prev[i];
                dbb += dhi * xt[ch];
                dxt[ch] += dhi * bb;
                carry[i] = st.a_bar[k] * dhi;
            }
            d_c[k] = dc;
            d_abar[k] = da;
            d_bbar[k] = dbb;
        }
        let mut ddt = 0.0;
        for k in 0..z {
            let (phi_dt, phi_a) = zoh_factor_grads(st.dt, p.a[k]);
            let ab = st.a_bar[k];
            ddt += d_abar[k] * ab * p.a[k] + d_bbar[k] * st.b[k] * phi_dt;
            g.a[k] += d_abar[k] * ab * st.dt + d_bbar[k] * st.b[k] * phi_a;
            d_b[k] = d_bbar[k] * st.phi[k];
        }
        for k in 0..z {
            for ch in 0..c {
                let i = k * c + ch;
                g.b_proj[i] += d_b[k] * xt[ch];
                g.c_proj[i] += d_c[k] * xt[ch];
                dxt[ch] += p.b_proj.data()[i] * d_b[k] + p.c_proj.data()[i] * d_c[k];
            }
        }
        let du = ddt * sigmoid(st.u);
        g.dt_bias += du;
        for ch in 0..c {
            g.dt_proj[ch] += du * xt[ch];
            dxt[ch] += du * p.dt_proj[ch];
        }
        if let Some(gs) = gates {
            g.gate_weight += du * gs[t];
            g.gates[t] = du * p.gate_weight;
        }
    }
    g
}

/// Records a selective scan of the `L × C` sequence `x` on the tape.
/// `gates`, when given, is a length-`L` vector.
pub fn selective_scan_tape(tape: &mut Tape, x: Var, params: &ScanVars, gates: Option<Var>) -> Result<Var> {
    let p = params.values(tape)?;
    let gvals = gates.map(|g| tape.value(g).data().to_vec());
    let xv = tape.value(x);
    let (l, c) = check_sequence(xv, &p, gvals.as_deref())?;
    let trace = scan_forward(xv.data(), l, c, &p, gvals.as_deref(), true);
    let y = Tensor::new(&[l, c], trace.y.clone())?;
    let mut inputs = vec![x];
    inputs.extend(params.inputs());
    if let Some(g) = gates {
        inputs.push(g);
    }
    Ok(tape.custom(
        inputs,
        y,
        Box::new(ScanOp {
            l,
            c,
            has_gates: gates.is_some(),
            trace,
        }),
    ))
}

/// The four flattening orders of an image scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowForward,
    RowReverse,
    ColumnForward,
    ColumnReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowReverse,
        ScanDirection::ColumnForward,
        ScanDirection::ColumnReverse,
    ];

    pub fn is_horizontal(self) -> bool {
        matches!(self, ScanDirection::RowForward | ScanDirection::RowReverse)
    }

    /// Pixel index (`i·W + j`) visited at each sequence position.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let column = |t: usize| (t % h) * w + t / h;
        match self {
            ScanDirection::RowForward => (0..n).collect(),
            ScanDirection::RowReverse => (0..n).rev().collect(),
            ScanDirection::ColumnForward => (0..n).map(column).collect(),
            ScanDirection::ColumnReverse => (0..n).rev().map(column).collect(),
        }
    }
}

/// Scan parameters for the four directions, in [`ScanDirection::ALL`] order.
pub type DirectionalParams = [ContinuousParams; 4];

fn check_gates(gates: Option<&GateMaps>, h: usize, w: usize) -> Result<()> {
    if let Some(g) = gates {
        for m in [&g.horizontal, &g.vertical] {
            if m.shape() != [h, w] {
                return Err(Error::shape("gate map", &[h, w], m.shape()));
            }
        }
    }
    Ok(())
}

/// Flattens `F` (`C×H×W`) along each of the four directions, scans each
/// sequence (horizontal gate on row paths, vertical gate on column paths),
/// restores the spatial layout and sums the four results.
pub fn scan_image_4dir(f: &Tensor, params: &DirectionalParams, gates: Option<&GateMaps>) -> Result<Tensor> {
    let (c, h, w) = f.chw()?;
    check_gates(gates, h, w)?;
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for (dir, p) in ScanDirection::ALL.into_iter().zip(params) {
        let order = dir.order(h, w);
        let seq = Tensor::from_fn(&[n, c], |i| f.data()[(i % c) * n + order[i / c]]);
        let gate_seq: Option<Vec<f64>> = gates.map(|g| {
            let m = if dir.is_horizontal() { &g.horizontal } else { &g.vertical };
            order.iter().map(|&pix| m.data()[pix]).collect()
        });
        let y = selective_scan(&seq, p, gate_seq.as_deref())?;
        for (t, &pix) in order.iter().enumerate() {
            for ch in 0..c {
                out[ch * n + pix] += y.data()[t * c + ch];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Tape version of [`scan_image_4dir`]; `gates` are `(G_h, G_v)` handles of
/// shape `H×W`.
pub fn scan_image_4dir_tape(
    tape: &mut Tape,
    f: Var,
    params: &[ScanVars; 4],
    gates: Option<(Var, Var)>,
) -> Result<Var> {
    let (c, h, w) = tape.value(f).chw()?;
    if let Some((gh, gv)) = gates {
        for g in [gh, gv] {
            if tape.value(g).shape() != [h, w] {
                return Err(Error::shape("gate map", &[h, w], tape.value(g).shape()));
            }
        }
    }
    let n = h * w;
    let mut total: Option<Var> = None;
    for (dir, p) in ScanDirection::ALL.into_iter().zip(params) {
        let order = dir.order(h, w);
        let to_seq: Vec<usize> = (0..n * c).map(|i| (i % c) * n + order[i / c]).collect();
        let seq = tape.gather(f, Rc::new(to_seq), &[n, c])?;
        let gate_seq = match gates {
            Some((gh, gv)) => {
                let src = if dir.is_horizontal() { gh } else { gv };
                Some(tape.gather(src, Rc::new(order.clone()), &[n])?)
            }
            None => None,
        };
        let y = selective_scan_tape(tape, seq, p, gate_seq)?;
        let mut inverse = vec![0; n];
        for (t, &pix) in order.iter().enumerate() {
            inverse[pix] = t;
        }
        let back: Vec<usize> = (0..c * n).map(|i| inverse[i % n] * c + i / n).collect();
        let img = tape.gather(y, Rc::new(back), &[c, h, w])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, img)?,
            None => img,
        });
    }
    Ok(total.expect("four directions"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, l: usize, c: usize, z: usize) -> (Tensor, ContinuousParams, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ContinuousParams::init(c, z, &mut rng);
        p.dt_bias = rng.random_range(-2.0..1.0);
        p.gate_weight = rng.random_range(-0.5..0.5);
        for v in p.dt_proj.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in p.d.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = Tensor::from_fn(&[l, c], |_| rng.random_range(-1.0..1.0));
        let gates = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        (x, p, gates)
    }

    #[test]
    fn zoh_fixtures() {
        let (a, b) = discretize_zoh(&[0.0], &[2.5], 0.3).unwrap();
        assert_eq!(a, vec![1.0]);
        assert!((b[0] - 0.75).abs() < 1e-15);

        let (a, b) = discretize_zoh(&[-1.0], &[1.0], std::f64::consts::LN_2).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
        assert!((b[0] - 0.5).abs() < 1e-15);

        let (a, _) = discretize_zoh(&[-10.0], &[1.0], 100.0).unwrap();
        assert!(a[0].abs() < 1e-12);

        assert!(discretize_zoh(&[-1.0], &[1.0], 0.0).is_err());
        assert!(discretize_zoh(&[-1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn zoh_series_branch_matches_closed_form() {
        // The dropped term is x²/6, so just below the threshold the series
        // agrees with the closed form to within ~1.7e-13 relative.
        for &a in &[-1.0f64, 1.0, -3.0] {
            let dt_in = 0.99e-6 / 3.0f64.max(a.abs());
            let series = zoh_factor(dt_in, a);
            let exact = (dt_in * a).exp_m1() / a;
            assert!(((series - exact) / exact).abs() < 1.7e-13);
        }
    }

    #[test]
    fn zoh_factor_derivatives() {
        for &(dt, a) in &[(0.5, -2.0), (1e-4, -1.0), (1e-8, -3.0), (0.01, -0.05), (2.0, -0.3)] {
            let (gd, ga) = zoh_factor_grads(dt, a);
            let h = 1e-6 * dt.max(1e-3);
            let nd = (zoh_factor(dt + h, a) - zoh_factor(dt - h, a)) / (2.0 * h);
            assert!((gd - nd).abs() <= 1e-6 * gd.abs().max(1.0), "dt={dt} a={a}");
            let ha = 1e-5;
            let na = (zoh_factor(dt, a + ha) - zoh_factor(dt, a - ha)) / (2.0 * ha);
            assert!((ga - na).abs() <= 1e-6 * ga.abs().max(1e-9) + 1e-12, "dt={dt} a={a}: {ga} vs {na}");
        }
    }

    #[test]
    fn selective_params_fixtures() {
        let mut p = ContinuousParams::init(3, 2, &mut ChaCha8Rng::seed_from_u64(1));
        p.dt_bias = 0.0;
        p.dt_proj = vec![0.0; 3];
        p.gate_weight = 1.0;
        let x = [0.3, -0.2, 0.9];
        let ungated = selective_params(&x, &p, None).unwrap();
        assert_eq!(ungated.dt, std::f64::consts::LN_2);
        assert_eq!(selective_params(&x, &p, Some(0.0)).unwrap(), ungated);
        let gated = selective_params(&x, &p, Some(2.0)).unwrap();
        assert!(gated.dt > ungated.dt);
        for ab in &gated.a_bar {
            assert!(*ab > 0.0 && *ab <= 1.0);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (_, p, gates) = random_instance(3, 6, 2, 3);
        let y = selective_scan(&Tensor::zeros(&[6, 2]), &p, Some(&gates)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_unrolls() {
        let (x, p, _) = random_instance(4, 1, 3, 4);
        let y = selective_scan(&x, &p, None).unwrap();
        let s = selective_params(x.data(), &p, None).unwrap();
        let cb: f64 = s.c.iter().zip(&s.b_bar).map(|(c, b)| c * b).sum();
        for ch in 0..3 {
            let expect = cb * x.data()[ch] + p.d[ch] * x.data()[ch];
            assert!((y.data()[ch] - expect).abs() < 1e-14);
        }
        let o = scan_matrix_oracle(&x, &p, None).unwrap();
        assert!(o.max_abs_diff(&y) < 1e-14);
    }

    #[test]
    fn oracle_memoryless_when_transitions_vanish() {
        let (x, mut p, _) = random_instance(5, 5, 2, 3);
        p.a = vec![-1e6; 3];
        p.dt_bias = 5.0;
        let o = scan_matrix_oracle(&x, &p, None).unwrap();
        for t in 0..5 {
            let s = selective_params(&x.data()[t * 2..t * 2 + 2], &p, None).unwrap();
            let cb: f64 = s.c.iter().zip(&s.b_bar).map(|(c, b)| c * b).sum();
            for ch in 0..2 {
                let xv = x.data()[t * 2 + ch];
                assert!((o.data()[t * 2 + ch] - (cb + p.d[ch]) * xv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_matches_scan_l8() {
        let (x, p, gates) = random_instance(8, 8, 3, 4);
        let y = selective_scan(&x, &p, Some(&gates)).unwrap();
        let o = scan_matrix_oracle(&x, &p, Some(&gates)).unwrap();
        assert!(y.max_abs_diff(&o) < 1e-9);
    }

    #[test]
    fn oracle_rejects_long_sequences() {
        let (_, p, _) = random_instance(9, 1, 1, 1);
        let x = Tensor::zeros(&[ORACLE_MAX_LEN + 1, 1]);
        assert!(matches!(scan_matrix_oracle(&x, &p, None), Err(Error::Contract(_))));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let (x, p, gates) = random_instance(11, 12, 3, 4);
        let dy = Tensor::from_fn(&[12, 3], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        let pack = |x: &Tensor, p: &ContinuousParams, g: &[f64]| -> Vec<f64> {
            let mut v = x.data().to_vec();
            v.extend(&p.a);
            v.extend(p.b_proj.data());
            v.extend(p.c_proj.data());
            v.extend(&p.dt_proj);
            v.push(p.dt_bias);
            v.push(p.gate_weight);
            v.extend(&p.d);
            v.extend(g);
            v
        };
        let base = pack(&x, &p, &gates);
        let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut off = 0;
            let mut take = |n: usize| {
                let s = v[off..off + n].to_vec();
                off += n;
                s
            };
            let xv = Tensor::new(&[12, 3], take(36))?;
            let q = ContinuousParams {
                a: take(4),
                b_proj: Tensor::new(&[4, 3], take(12))?,
                c_proj: Tensor::new(&[4, 3], take(12))?,
                dt_proj: take(3),
                dt_bias: take(1)[0],
                gate_weight: take(1)[0],
                d: take(3),
            };
            let gv = Tensor::new(&[12], take(12))?;
            let mut t = Tape::new();
            let xs = t.leaf(xv);
            let sv = ScanVars::leaves(&mut t, &q);
            let gs = t.leaf(gv);
            let y = selective_scan_tape(&mut t, xs, &sv, Some(gs))?;
            let w = t.constant(dy.clone());
            let prod = t.mul(y, w)?;
            let s = t.sum(prod);
            let g = t.backward(s)?;
            let grads = [xs, sv.a, sv.b_proj, sv.c_proj, sv.dt_proj, sv.dt_bias, sv.gate_weight, sv.d, gs]
                .iter()
                .flat_map(|&v| g.get_or_zeros(v, t.value(v)).into_data())
                .collect();
            Ok((t.value(s).item(), grads))
        };
        let r = finite_diff_check(f, &base, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn image_scan_single_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params: DirectionalParams = std::array::from_fn(|_| ContinuousParams::init(2, 3, &mut rng));
        let f = Tensor::new(&[2, 1, 1], vec![0.7, -0.4]).unwrap();
        let y = scan_image_4dir(&f, &params, None).unwrap();
        let x = Tensor::new(&[1, 2], vec![0.7, -0.4]).unwrap();
        let mut expect = [0.0; 2];
        for p in &params {
            let s = selective_scan(&x, p, None).unwrap();
            expect[0] += s.data()[0];
            expect[1] += s.data()[1];
        }
        assert!((y.data()[0] - expect[0]).abs() < 1e-15);
        assert!((y.data()[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn absent_gates_equal_zero_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params: DirectionalParams = std::array::from_fn(|_| ContinuousParams::init(3, 2, &mut rng));
        let f = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let zero = GateMaps::zeros(4, 5);
        let a = scan_image_4dir(&f, &params, None).unwrap();
        let b = scan_image_4dir(&f, &params, Some(&zero)).unwrap();
        assert_eq!(a, b);
        let bad = GateMaps::zeros(5, 4);
        assert!(scan_image_4dir(&f, &params, Some(&bad)).is_err());
    }

    #[test]
    fn image_scan_matches_oracle_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params: DirectionalParams = std::array::from_fn(|_| {
            let mut p = ContinuousParams::init(2, 3, &mut rng);
            p.gate_weight = 0.7;
            p
        });
        let (h, w, c) = (4, 4, 2);
        let f = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
        let gates = GateMaps {
            horizontal: Tensor::from_fn(&[h, w], |_| rng.random_range(-1.0..1.0)),
            vertical: Tensor::from_fn(&[h, w], |_| rng.random_range(-1.0..1.0)),
        };
        let y = scan_image_4dir(&f, &params, Some(&gates)).unwrap();

        // Independent re-assembly through explicit (i, j) loops.
        let mut expect = vec![0.0; c * h * w];
        for (k, p) in params.iter().enumerate() {
            let mut coords = Vec::new();
            match k {
                0 | 1 => {
                    for i in 0..h {
                        for j in 0..w {
                            coords.push((i, j));
                        }
                    }
                }
                _ => {
                    for j in 0..w {
                        for i in 0..h {
                            coords.push((i, j));
                        }
                    }
                }
            }
            if k % 2 == 1 {
                coords.reverse();
            }
            let gate_map = if k < 2 { &gates.horizontal } else { &gates.vertical };
            let seq = Tensor::from_fn(&[h * w, c], |idx| {
                let (i, j) = coords[idx / c];
                f.data()[(idx % c) * h * w + i * w + j]
            });
            let g: Vec<f64> = coords.iter().map(|&(i, j)| gate_map.data()[i * w + j]).collect();
            let o = scan_matrix_oracle(&seq, p, Some(&g)).unwrap();
            for (t, &(i, j)) in coords.iter().enumerate() {
                for ch in 0..c {
                    expect[ch * h * w + i * w + j] += o.data()[t * c + ch];
                }
            }
        }
        let expect = Tensor::new(&[c, h, w], expect).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn image_scan_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params: DirectionalParams = std::array::from_fn(|_| ContinuousParams::init(3, 2, &mut rng));
        let f = Tensor::from_fn(&[3, 3, 5], |_| rng.random_range(-1.0..1.0));
        let gates = GateMaps {
            horizontal: Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0)),
            vertical: Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0)),
        };
        let plain = scan_image_4dir(&f, &params, Some(&gates)).unwrap();
        let mut t = Tape::new();
        let fv = t.leaf(f.clone());
        let pv: [ScanVars; 4] = std::array::from_fn(|k| ScanVars::leaves(&mut t, &params[k]));
        let gh = t.leaf(gates.horizontal.clone());
        let gv = t.leaf(gates.vertical.clone());
        let y = scan_image_4dir_tape(&mut t, fv, &pv, Some((gh, gv))).unwrap();
        assert_eq!(t.value(y), &plain);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scan_is_causal(seed in 0u64..10_000, l in 2usize..24, t0 in 0usize..24, bump in -2.0f64..2.0) {
            let t0 = t0 % l;
            let (x, p, gates) = random_instance(seed, l, 2, 3);
            let y = selective_scan(&x, &p, Some(&gates)).unwrap();
            let mut x2 = x.clone();
            x2.data_mut()[t0 * 2] += bump;
            let y2 = selective_scan(&x2, &p, Some(&gates)).unwrap();
            prop_assert_eq!(&y.data()[..t0 * 2], &y2.data()[..t0 * 2]);
        }

        #[test]
        fn scan_matches_oracle(seed in 0u64..10_000, l in 1usize..=64, z in 1usize..=8, c in 1usize..=4) {
            let (x, p, gates) = random_instance(seed, l, c, z);
            let y = selective_scan(&x, &p, Some(&gates)).unwrap();
            let o = scan_matrix_oracle(&x, &p, Some(&gates)).unwrap();
            prop_assert!(y.max_abs_diff(&o) < 1e-9);
        }

        #[test]
        fn state_stays_bounded(seed in 0u64..10_000, l in 1usize..48) {
            let (x, p, gates) = random_instance(seed, l, 2, 4);
            let tr = scan_forward(x.data(), l, 2, &p, Some(&gates), true);
            let mut bound: f64 = 0.0;
            for (t, st) in tr.steps.iter().enumerate() {
                for k in 0..4 {
                    for ch in 0..2 {
                        bound = bound.max((st.phi[k] * st.b[k] * x.data()[t * 2 + ch]).abs());
                    }
                }
            }
            let hmax = tr.h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(hmax <= bound * l as f64 + 1e-12);
        }

        #[test]
        fn gate_increases_step(seed in 0u64..10_000, g in -3.0f64..3.0, dg in 0.01f64..3.0) {
            let (x, mut p, _) = random_instance(seed, 1, 3, 2);
            p.gate_weight = 0.8;
            let lo = selective_params(x.data(), &p, Some(g)).unwrap().dt;
            let hi = selective_params(x.data(), &p, Some(g + dg)).unwrap().dt;
            prop_assert!(hi > lo);
        }
    }
}
