//! Reference implementations written straight from the definitions, sharing
//! no code with the library beyond the tensor container.

use deshadow_core::crossgate::CrossGateWeights;
use deshadow_core::numerics::Tensor;
use deshadow_core::ssm::ContinuousParams;

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Plain recursion `h ← e^{Δa} h + ((e^{Δa} − 1)/a) B x`, `y = C·h + D x`,
/// one channel at a time.
pub fn scan_recursion(x: &Tensor, p: &ContinuousParams, gates: Option<&[f64]>) -> Vec<f64> {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let z = p.a.len();
    let xd = x.data();
    let mut y = vec![0.0; l * c];
    for ch in 0..c {
        let mut h = vec![0.0; z];
        for t in 0..l {
            let xt = &xd[t * c..(t + 1) * c];
            let dot = |row: &[f64]| row.iter().zip(xt).map(|(a, b)| a * b).sum::<f64>();
            let g = gates.map_or(0.0, |g| g[t]);
            let dt = softplus(p.dt_bias + dot(&p.dt_proj) + p.gate_weight * g);
            let mut out = p.d[ch] * xt[ch];
            for k in 0..z {
                let b = dot(&p.b_proj.data()[k * c..(k + 1) * c]);
                let cc = dot(&p.c_proj.data()[k * c..(k + 1) * c]);
                let a = p.a[k];
                let phi = if (dt * a).abs() < 1e-8 { dt } else { (dt * a).exp_m1() / a };
                h[k] = (dt * a).exp() * h[k] + phi * b * xt[ch];
                out += cc * h[k];
            }
            y[t * c + ch] = out;
        }
    }
    y
}

fn at(t: &Tensor, c: usize, i: usize, j: usize) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    t.data()[(c * h + i) * w + j]
}

/// Border-clamped bilinear read of channel `c` at row `y`, column `x`.
fn bilinear(t: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy, xx| at(t, c, yy, xx);
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// Gate maps by explicit loops over output row, output column, key index and
/// channel. The vertical map is written in original coordinates: its keys run
/// down the column and its offset kernel is applied transposed.
pub fn crossgate_loops(
    f: &Tensor,
    mask: &Tensor,
    wh: &CrossGateWeights,
    wv: &CrossGateWeights,
    use_offsets: bool,
    frac: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (cin, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let m = |i: usize, j: usize| mask.data()[i * w + j];
    let project = |wt: &Tensor, b: &Tensor| {
        let q = wt.shape()[0];
        Tensor::from_fn(&[q, h, w], |idx| {
            let (o, p) = (idx / (h * w), idx % (h * w));
            b.data()[o] + (0..cin).map(|c| wt.data()[o * cin + c] * f.data()[c * h * w + p]).sum::<f64>()
        })
    };
    let mask3 = Tensor::new(&[1, h, w], mask.data().to_vec()).unwrap();

    let mut out = [vec![0.0; h * w], vec![0.0; h * w]];
    for (dir, wt) in [wh, wv].into_iter().enumerate() {
        let q = project(&wt.q_weight, &wt.q_bias);
        let k = project(&wt.k_weight, &wt.k_bias);
        let qc = q.shape()[0];
        // conv3×3 of Q with zero padding; for the vertical gate the kernel
        // taps are read transposed
        let raw = |o: usize, i: usize, j: usize| {
            let mut s = wt.offset_bias.data()[o];
            for c in 0..qc {
                for a in 0..3 {
                    for b in 0..3 {
                        let (ii, jj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        let (ka, kb) = if dir == 0 { (a, b) } else { (b, a) };
                        s += wt.offset_weight.data()[((o * qc + c) * 3 + ka) * 3 + kb] * at(&q, c, ii as usize, jj as usize);
                    }
                }
            }
            s
        };
        // (row, column) displacement at a key position
        let disp = |i: usize, j: usize| -> (f64, f64) {
            if !use_offsets {
                return (0.0, 0.0);
            }
            if dir == 0 {
                ((h as f64 * frac) * raw(1, i, j).tanh(), (w as f64 * frac) * raw(0, i, j).tanh())
            } else {
                ((h as f64 * frac) * raw(0, i, j).tanh(), (w as f64 * frac) * raw(1, i, j).tanh())
            }
        };
        let len = if dir == 0 { w } else { h };
        for i in 0..h {
            for j in 0..w {
                if m(i, j) != 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for r in 0..len {
                    let (ki, kj) = if dir == 0 { (i, r) } else { (r, j) };
                    let (dy, dx) = disp(ki, kj);
                    let (sy, sx) = (ki as f64 + dy, kj as f64 + dx);
                    let warped = if bilinear(&mask3, 0, sy, sx) >= 0.5 { 1.0 } else { 0.0 };
                    if warped == m(i, j) {
                        continue;
                    }
                    for c in 0..qc {
                        acc += at(&q, c, i, j) * bilinear(&k, c, sy, sx);
                    }
                }
                out[dir][i * w + j] = acc / len as f64;
            }
        }
    }
    let [gh, gv] = out;
    (gh, gv)
}

/// `d⁺ / (d⁺ + Σ γ d⁻ + 1e-12)` with L1 distances, element by element.
pub fn colorshift_scalar(anchor: &[f64], positive: &[f64], negatives: &[(Vec<f64>, f64)]) -> f64 {
    let mut d_pos = 0.0;
    for i in 0..anchor.len() {
        d_pos += (anchor[i] - positive[i]).abs();
    }
    let mut d_neg = 0.0;
    for (n, g) in negatives {
        let mut d = 0.0;
        for i in 0..anchor.len() {
            d += (anchor[i] - n[i]).abs();
        }
        d_neg += g * d;
    }
    d_pos / (d_pos + d_neg + 1e-12)
}

/// CIELAB references for sRGB white, black and red (D65).
pub const LAB_WHITE: [f64; 3] = [100.0, 0.0, 0.0];
pub const LAB_BLACK: [f64; 3] = [0.0, 0.0, 0.0];
pub const LAB_RED: [f64; 3] = [53.24, 80.09, 67.20];
