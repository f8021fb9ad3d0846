//! Reverse-mode differentiation over a linear tape of coarse-grained ops.
//!
//! Values are recorded in execution order, so the node index is already a
//! topological order; `backward` walks it in reverse and accumulates input
//! gradients in tape order, which makes the result bit-reproducible.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels::{self, BilinearTap, ConvGeometry};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive defined outside this module.
///
/// `backward` receives the values of the op's inputs (in the order they were
/// passed to [`Tape::custom`]), the recorded output and the upstream gradient,
/// and returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// How the Charbonnier penalty reduces over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharbonnierMode {
    /// `mean(sqrt(d² + ε²))`
    #[default]
    PerPixel,
    /// `sqrt(‖d‖² + ε²)`
    GlobalNorm,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softplus(Var),
    Silu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    Gather(Var, Rc<Vec<usize>>),
    AvgPool2(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Bilinear {
        src: Var,
        grid: Var,
    },
    Charbonnier {
        a: Var,
        b: Var,
        eps: f64,
        mode: CharbonnierMode,
    },
    L1Distance(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
/// A tape is single-threaded; create one per sample or per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded value.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter or data we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as a constant: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = kernels::softplus(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = kernels::silu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Sums over the leading axis: `[n, rest..] -> [rest..]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::contract("sum_axis0 on a scalar"));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let mut out = vec![0.0; rest];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&x.data()[r * rest..(r + 1) * rest]) {
                *o += v;
            }
        }
        let v = Tensor::new(&shape[1..], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SumAxis0(a), rg))
    }

    /// `out[i] = a[indices[i]]`, reshaped to `shape`. Covers transposes,
    /// flips, flattening orders and nearest-neighbour upsampling.
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {} values",
                x.len()
            )));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Gather(a, indices), rg))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let v = kernels::avg_pool2(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::AvgPool2(a), rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::infer(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            groups,
        )?;
        let v = kernels::conv2d_with(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (v, xhat, inv_std) =
            kernels::layer_norm_stats(self.value(x), self.value(gain), self.value(shift), eps)?;
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn bilinear_sample(&mut self, src: Var, grid: Var) -> Result<Var> {
        let v = kernels::bilinear_sample_2d(self.value(src), self.value(grid))?;
        let rg = self.rg(&[src, grid]);
        Ok(self.push(v, Op::Bilinear { src, grid }, rg))
    }

    pub fn charbonnier(&mut self, a: Var, b: Var, eps: f64, mode: CharbonnierMode) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("charbonnier", x, y)?;
        let value = charbonnier_value(x.data(), y.data(), eps, mode);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(value), Op::Charbonnier { a, b, eps, mode }, rg))
    }

    /// `Σ |a − b|` over all entries.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("l1_distance", x, y)?;
        let d = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q).abs())
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::L1Distance(a, b), rg))
    }

    /// Records an externally defined primitive whose forward value was
    /// computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(&inputs);
        self.push(value, Op::Custom { inputs, op }, rg)
    }

    /// Exact reverse-mode gradients of the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "root {:?} is not on this tape ({} nodes)",
                root,
                self.nodes.len()
            )));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.input_grads(node, &g);
            grads[idx] = Some(g);
            for (input, dg) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], dg);
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip(g, val(*b), |d, y| d * y)),
                (*b, zip(g, val(*a), |d, x| d * x)),
            ],
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da = zip(g, y, |d, y| d / y);
                let db = Tensor::from_fn(y.shape(), |i| {
                    -g.data()[i] * x.data()[i] / (y.data()[i] * y.data()[i])
                });
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|d| d * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Softplus(a) => vec![(*a, zip(g, val(*a), |d, x| d * kernels::sigmoid(x)))],
            Op::Silu(a) => vec![(
                *a,
                zip(g, val(*a), |d, x| {
                    let s = kernels::sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                }),
            )],
            Op::Tanh(a) => vec![(*a, zip(g, &node.value, |d, t| d * (1.0 - t * t)))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                zip(g, val(*a), |d, x| if x < *lo || x > *hi { 0.0 } else { d }),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))]
            }
            Op::SumAxis0(a) => {
                let x = val(*a);
                let rest = g.len();
                let data = (0..x.len()).map(|i| g.data()[i % rest]).collect();
                vec![(*a, Tensor::new(x.shape(), data).expect("sum_axis0 grad"))]
            }
            Op::Gather(a, indices) => {
                let x = val(*a);
                let mut dx = vec![0.0; x.len()];
                for (o, &i) in indices.iter().enumerate() {
                    dx[i] += g.data()[o];
                }
                vec![(*a, Tensor::new(x.shape(), dx).expect("gather grad"))]
            }
            Op::AvgPool2(a) => vec![(*a, avg_pool2_backward(val(*a), g))],
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g.data());
                vec![
                    (*x, Tensor::new(val(*x).shape(), dx).expect("conv dx")),
                    (*w, Tensor::new(val(*w).shape(), dw).expect("conv dw")),
                    (*b, Tensor::new(val(*b).shape(), db).expect("conv db")),
                ]
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => layer_norm_backward(val(*x), val(*gain), xhat, inv_std, g)
                .into_iter()
                .zip([*x, *gain, *shift])
                .map(|(t, v)| (v, t))
                .collect(),
            Op::Bilinear { src, grid } => {
                let (ds, dg) = bilinear_backward(val(*src), val(*grid), g);
                vec![(*src, ds), (*grid, dg)]
            }
            Op::Charbonnier { a, b, eps, mode } => {
                let (x, y) = (val(*a), val(*b));
                let up = g.item();
                let da = match mode {
                    CharbonnierMode::PerPixel => {
                        let n = x.len() as f64;
                        zip(x, y, |p, q| {
                            let d = p - q;
                            up * d / (d.hypot(*eps) * n)
                        })
                    }
                    CharbonnierMode::GlobalNorm => {
                        let loss = node.value.item();
                        zip(x, y, |p, q| up * (p - q) / loss)
                    }
                };
                let db = da.map(|v| -v);
                vec![(*a, da), (*b, db)]
            }
            Op::L1Distance(a, b) => {
                let up = g.item();
                let da = zip(val(*a), val(*b), |p, q| up * sign(p - q));
                let db = da.map(|v| -v);
                vec![(*a, da), (*b, db)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                op.backward(&vals, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, v)| d.map(|d| (*v, d)))
                    .collect()
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).expect("gradient shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

pub(crate) fn charbonnier_value(a: &[f64], b: &[f64], eps: f64, mode: CharbonnierMode) -> f64 {
    match mode {
        CharbonnierMode::PerPixel => {
            // hypot keeps d = 0 exact (returns ε); the compensated sum keeps
            // the mean of equal terms exact
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for (p, q) in a.iter().zip(b) {
                let v = (p - q).hypot(eps);
                let t = sum + v;
                comp += if sum.abs() >= v { (sum - t) + v } else { (v - t) + sum };
                sum = t;
            }
            (sum + comp) / a.len() as f64
        }
        CharbonnierMode::GlobalNorm => {
            let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            (s + eps * eps).sqrt()
        }
    }
}

fn avg_pool2_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = match x.shape()[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => unreachable!("avg_pool2 validated rank"),
    };
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let d = 0.25 * g.data()[(ch * ho + i) * wo + j];
                let b = ch * h * w;
                dx[b + 2 * i * w + 2 * j] += d;
                dx[b + 2 * i * w + 2 * j + 1] += d;
                dx[b + (2 * i + 1) * w + 2 * j] += d;
                dx[b + (2 * i + 1) * w + 2 * j + 1] += d;
            }
        }
    }
    Tensor::new(x.shape(), dx).expect("avg_pool2 grad")
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    g: &Tensor,
) -> [Tensor; 3] {
    let c = x.shape()[0];
    let hw = x.len() / c;
    let gd = g.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for p in 0..hw {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let i = ch * hw + p;
            dgain[ch] += gd[i] * xhat[i];
            dshift[ch] += gd[i];
            let dxh = gd[i] * gain.data()[ch];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[i];
        }
        let n = c as f64;
        for ch in 0..c {
            let i = ch * hw + p;
            let dxh = gd[i] * gain.data()[ch];
            dx[i] = inv_std[p] * (dxh - sum_dxhat / n - xhat[i] * sum_dxhat_xhat / n);
        }
    }
    [
        Tensor::new(x.shape(), dx).expect("ln dx"),
        Tensor::new(&[c], dgain).expect("ln dgain"),
        Tensor::new(&[c], dshift).expect("ln dshift"),
    ]
}

fn bilinear_backward(src: &Tensor, grid: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let n = grid.len() / 2;
    let s = src.data();
    let gd = grid.data();
    let up = g.data();
    let mut dsrc = vec![0.0; src.len()];
    let mut dgrid = vec![0.0; grid.len()];
    for p in 0..n {
        let t: BilinearTap = kernels::bilinear_tap(gd[p], gd[n + p], h, w);
        let mut dx = 0.0;
        let mut dy = 0.0;
        for ch in 0..c {
            let d = up[ch * n + p];
            if d == 0.0 {
                continue;
            }
            let base = ch * h * w;
            let (i00, i01) = (base + t.y0 * w + t.x0, base + t.y0 * w + t.x1);
            let (i10, i11) = (base + t.y1 * w + t.x0, base + t.y1 * w + t.x1);
            dsrc[i00] += d * (1.0 - t.fy) * (1.0 - t.fx);
            dsrc[i01] += d * (1.0 - t.fy) * t.fx;
            dsrc[i10] += d * t.fy * (1.0 - t.fx);
            dsrc[i11] += d * t.fy * t.fx;
            if w > 1 {
                dx += d * ((1.0 - t.fy) * (s[i01] - s[i00]) + t.fy * (s[i11] - s[i10]));
            }
            if h > 1 {
                let top = (1.0 - t.fx) * s[i00] + t.fx * s[i01];
                let bot = (1.0 - t.fx) * s[i10] + t.fx * s[i11];
                dy += d * (bot - top);
            }
        }
        if t.x_inside {
            dgrid[p] = dx;
        }
        if t.y_inside {
            dgrid[n + p] = dy;
        }
    }
    (
        Tensor::new(src.shape(), dsrc).expect("bilinear dsrc"),
        Tensor::new(grid.shape(), dgrid).expect("bilinear dgrid"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_gradient_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.softplus(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn foreign_or_non_scalar_root_is_rejected() {
        let mut other = Tape::new();
        for _ in 0..5 {
            other.leaf(Tensor::scalar(1.0));
        }
        let far = other.leaf(Tensor::scalar(1.0));
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[3]));
        assert!(matches!(t.backward(far), Err(Error::Contract(_))));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[2], 3.0));
        let x = t.leaf(Tensor::full(&[2], 2.0));
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn gather_scatters_back() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[3], |i| i as f64));
        let y = t.gather(x, Rc::new(vec![2, 0, 2, 2]), &[4]).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 0.0, 2.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 3.0]);
        assert!(t.gather(x, Rc::new(vec![3]), &[1]).is_err());
    }
}
