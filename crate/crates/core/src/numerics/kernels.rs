//! Forward kernels shared by the plain (no-gradient) path and the tape.

use crate::error::{Error, Result};

use super::Tensor;

/// Above this input the softplus is evaluated as `x + ln(1 + e^-x)`.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_THRESHOLD {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Elementwise `ln(1 + e^x)`, overflow-safe, strictly positive on finite input.
pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn infer(
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = x.chw()?;
        let (c_out, cpg, k, k2) = match weight.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::contract("conv2d weight must be C_out×C_in/g×k×k")),
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel must be odd and square, got {k}×{k2}")));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::contract(format!(
                "conv2d groups={groups} incompatible with C_in={c_in}, C_out={c_out}"
            )));
        }
        if cpg != c_in / groups {
            return Err(Error::shape("conv2d channels", &[c_in / groups], &[cpg]));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape("conv2d bias", &[c_out], bias.shape()));
        }
        let h_out = conv_out_extent(h, k, stride, pad)
            .ok_or_else(|| Error::contract("conv2d input smaller than kernel"))?;
        let w_out = conv_out_extent(w, k, stride, pad)
            .ok_or_else(|| Error::contract("conv2d input smaller than kernel"))?;
        Ok(ConvGeometry {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            groups,
            h_out,
            w_out,
        })
    }
}

/// Grouped cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::infer(x, weight, bias, stride, pad, groups)?;
    Ok(conv2d_with(&g, x.data(), weight.data(), bias.data()))
}

pub(crate) fn conv2d_with(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Tensor {
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let hw_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * hw_out];
    for oc in 0..g.c_out {
        let grp = oc / cout_g;
        let plane = &mut out[oc * hw_out..(oc + 1) * hw_out];
        plane.fill(b[oc]);
        for icg in 0..cin_g {
            let ic = grp * cin_g + icg;
            let xin = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = w[((oc * cin_g + icg) * g.k + ki) * g.k + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let row = &xin[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let orow = &mut plane[oi * g.w_out..(oi + 1) * g.w_out];
                        for (oj, o) in orow.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *o += wv * row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.h_out, g.w_out], out).expect("conv2d output shape")
}

/// Gradients of a grouped convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let hw_out = g.h_out * g.w_out;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    for oc in 0..g.c_out {
        let grp = oc / cout_g;
        let dplane = &dy[oc * hw_out..(oc + 1) * hw_out];
        db[oc] = dplane.iter().sum();
        for icg in 0..cin_g {
            let ic = grp * cin_g + icg;
            let base = ic * g.h * g.w;
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let widx = ((oc * cin_g + icg) * g.k + ki) * g.k + kj;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for oi in 0..g.h_out {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let rbase = base + ii as usize * g.w;
                        for oj in 0..g.w_out {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            let d = dplane[oi * g.w_out + oj];
                            let xi = rbase + jj as usize;
                            acc += d * x[xi];
                            dx[xi] += d * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Normalizes every spatial position across the channel axis, then applies
/// per-channel gain and shift.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_stats(x, gain, shift, eps)?.0)
}

/// Forward layer norm that also returns the normalized values and the
/// per-position inverse standard deviation.
pub(crate) fn layer_norm_stats(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (c, h, w) = x.chw()?;
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape("layer_norm affine", &[c], gain.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; hw];
    for p in 0..hw {
        let mean = (0..c).map(|ch| xd[ch * hw + p]).sum::<f64>() / c as f64;
        let var = (0..c)
            .map(|ch| {
                let d = xd[ch * hw + p] - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        for ch in 0..c {
            let n = (xd[ch * hw + p] - mean) * is;
            xhat[ch * hw + p] = n;
            out[ch * hw + p] = n * gain.data()[ch] + shift.data()[ch];
        }
    }
    Ok((
        Tensor::new(&[c, h, w], out)?,
        xhat,
        inv_std,
    ))
}

/// Sampling footprint of one bilinear tap: the four neighbor indices, their
/// weights, and the clamp status of each coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the raw coordinate lay inside the sampling range (derivative passes through).
    pub x_inside: bool,
    pub y_inside: bool,
}

#[inline]
fn axis_tap(coord: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&coord);
    let c = coord.clamp(0.0, hi);
    if n == 1 {
        return (0, 0, 0.0, inside);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

#[inline]
pub(crate) fn bilinear_tap(x: f64, y: f64, h: usize, w: usize) -> BilinearTap {
    let (x0, x1, fx, x_inside) = axis_tap(x, w);
    let (y0, y1, fy, y_inside) = axis_tap(y, h);
    BilinearTap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        x_inside,
        y_inside,
    }
}

/// Bilinear interpolation of `src` (`C×H×W`) at absolute coordinates given by
/// `grid` (`2×H'×W'`, channel 0 = column `x`, channel 1 = row `y`).
/// Coordinates outside the image are clamped to the border.
pub fn bilinear_sample_2d(src: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (c, h, w) = src.chw()?;
    if src.is_empty() {
        return Err(Error::contract("bilinear_sample_2d on an empty source"));
    }
    let (gc, ho, wo) = grid.chw()?;
    if gc != 2 {
        return Err(Error::shape("bilinear_sample_2d grid", &[2, ho, wo], grid.shape()));
    }
    let s = src.data();
    let gd = grid.data();
    let n = ho * wo;
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let t = bilinear_tap(gd[p], gd[n + p], h, w);
        for ch in 0..c {
            let plane = &s[ch * h * w..];
            let top = (1.0 - t.fx) * plane[t.y0 * w + t.x0] + t.fx * plane[t.y0 * w + t.x1];
            let bot = (1.0 - t.fx) * plane[t.y1 * w + t.x0] + t.fx * plane[t.y1 * w + t.x1];
            out[ch * n + p] = (1.0 - t.fy) * top + t.fy * bot;
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// The sampling grid that maps every pixel onto itself.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[2, h, w], |idx| {
        let p = idx % n;
        if idx < n {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w, rank2) = match x.shape()[..] {
        [h, w] => (1, h, w, true),
        [c, h, w] => (c, h, w, false),
        _ => return Err(Error::contract("avg_pool2 needs rank 2 or 3")),
    };
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let b = ch * h * w;
                let s = d[b + 2 * i * w + 2 * j]
                    + d[b + 2 * i * w + 2 * j + 1]
                    + d[b + (2 * i + 1) * w + 2 * j]
                    + d[b + (2 * i + 1) * w + 2 * j + 1];
                out[(ch * ho + i) * wo + j] = 0.25 * s;
            }
        }
    }
    if rank2 {
        Tensor::new(&[ho, wo], out)
    } else {
        Tensor::new(&[c, ho, wo], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_fixtures() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_scalar(100.0) - 100.0).abs() < 1e-12);
        // ln(1 + e) to 12 digits
        assert!((softplus_scalar(1.0) - 1.313_261_687_518_22).abs() < 1e-12);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!(softplus_scalar(-30.0) > 0.0);
    }

    #[test]
    fn softplus_branch_is_continuous() {
        let below = softplus_scalar(SOFTPLUS_LINEAR_THRESHOLD - 1e-9);
        let above = softplus_scalar(SOFTPLUS_LINEAR_THRESHOLD + 1e-9);
        assert!((above - below).abs() < 1e-8);
    }

    #[test]
    fn conv_identity_and_bias() {
        let x = Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0, 1).unwrap();
        assert_eq!(y, x);

        let zero = Tensor::zeros(&[2, 5, 5]);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f64);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&zero, &w, &b, 1, 1, 1).unwrap();
        for ch in 0..3 {
            assert!(y.data()[ch * 25..(ch + 1) * 25].iter().all(|&v| v == b.data()[ch]));
        }
    }

    #[test]
    fn conv_three_by_three_sum() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1, 1).unwrap();
        // direct summation: the center sees all nine ones, corners four, edges six
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_output_extent_with_stride() {
        let x = Tensor::zeros(&[2, 7, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[4]), 2, 1, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_is_contract_error() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0, 1).is_err());
        let w = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0, 1).is_err());
    }

    #[test]
    fn layer_norm_fixtures() {
        let g = Tensor::full(&[2], 1.0);
        let s = Tensor::zeros(&[2]);
        let x = Tensor::new(&[2, 1, 1], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &g, &s, 1e-5).unwrap();
        // variance 1, so the output is ±1/sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);

        let c = Tensor::full(&[2, 2, 2], 3.5);
        let shift = Tensor::new(&[2], vec![0.25, -0.5]).unwrap();
        let y = layer_norm(&c, &g, &shift, 1e-5).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 0.25));
        assert!(y.data()[4..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn layer_norm_zero_mean_over_channels() {
        let x = Tensor::from_fn(&[5, 2, 3], |i| ((i * 37) % 11) as f64 - 4.0);
        let y = layer_norm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), 1e-5).unwrap();
        for p in 0..6 {
            let m: f64 = (0..5).map(|c| y.data()[c * 6 + p]).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_identity_midpoint_and_clamp() {
        let src = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin());
        assert_eq!(bilinear_sample_2d(&src, &identity_grid(3, 4)).unwrap(), src);

        let src = Tensor::new(&[1, 1, 2], vec![2.0, 5.0]).unwrap();
        let grid = Tensor::new(&[2, 1, 1], vec![0.5, 0.0]).unwrap();
        assert_eq!(bilinear_sample_2d(&src, &grid).unwrap().data(), &[3.5]);

        let grid = Tensor::new(&[2, 1, 1], vec![-3.0, 0.0]).unwrap();
        assert_eq!(bilinear_sample_2d(&src, &grid).unwrap().data(), &[2.0]);
        let grid = Tensor::new(&[2, 1, 1], vec![7.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample_2d(&src, &grid).unwrap().data(), &[5.0]);
    }

    #[test]
    fn bilinear_rejects_bad_grid() {
        let src = Tensor::zeros(&[1, 2, 2]);
        assert!(bilinear_sample_2d(&src, &Tensor::zeros(&[3, 2, 2])).is_err());
        assert!(bilinear_sample_2d(&src, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::from_fn(&[4, 4], |i| i as f64);
        let y = avg_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data()[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
