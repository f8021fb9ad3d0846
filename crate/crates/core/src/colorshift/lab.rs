//! sRGB (D65) to CIELAB.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// D65 reference white.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

#[inline]
fn linearize(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one pixel with channel values in `[0, 255]` to `(L*, a*, b*)`.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| linearize(v / 255.0));
    let xyz: [f64; 3] = std::array::from_fn(|r| {
        RGB_TO_XYZ[r][0] * lin[0] + RGB_TO_XYZ[r][1] * lin[1] + RGB_TO_XYZ[r][2] * lin[2]
    });
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a `3×H×W` sRGB image (values in `[0, 255]`) to `L*a*b*`.
pub fn srgb_to_lab(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("srgb_to_lab", &[3, h, w], image.shape()));
    }
    let n = h * w;
    let d = image.data();
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        let lab = srgb_pixel_to_lab([d[p], d[n + p], d[2 * n + p]]);
        for ch in 0..3 {
            out[ch * n + p] = lab[ch];
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Root-mean-square LAB difference over the selected pixels (all pixels when
/// `select` is `None`) and the three LAB channels. `None` when nothing is
/// selected.
pub fn lab_rmse_selected(a: &Tensor, b: &Tensor, select: Option<&[bool]>) -> Result<Option<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("lab_rmse", a.shape(), b.shape()));
    }
    let la = srgb_to_lab(a)?;
    let lb = srgb_to_lab(b)?;
    let n = a.len() / 3;
    if let Some(s) = select {
        if s.len() != n {
            return Err(Error::shape("lab_rmse selection", &[n], &[s.len()]));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if select.is_some_and(|s| !s[p]) {
            continue;
        }
        for ch in 0..3 {
            let d = la.data()[ch * n + p] - lb.data()[ch * n + p];
            sum += d * d;
        }
        count += 3;
    }
    Ok((count > 0).then(|| (sum / count as f64).sqrt()))
}

/// `sqrt(mean over pixels and LAB channels of squared difference)`.
pub fn lab_rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    lab_rmse_selected(a, b, None)?.ok_or_else(|| Error::contract("lab_rmse on empty images"))
}
