use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::colorshift::lab_rmse_selected;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::contract(format!("{op} on empty images")));
    }
    Ok(())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `10·log10(1/MSE)` for images in `[0,1]`; `+∞` when they are identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let sse = compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)));
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = match img.shape()[..] {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::contract("ssim needs an H×W or C×H×W image")),
    };
    let n = h * w;
    let d = img.data();
    let gray = (0..n)
        .map(|p| (0..c).map(|ch| d[ch * n + p]).sum::<f64>() / c as f64)
        .collect();
    Ok((gray, h, w))
}

/// Mean SSIM over non-overlapping `wh×ww` windows of two grayscale planes.
fn windowed_ssim(x: &[f64], y: &[f64], h: usize, w: usize, wh: usize, ww: usize) -> f64 {
    let k = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for wi in 0..h / wh {
        for wj in 0..w / ww {
            let idx: Vec<usize> = (0..wh * ww)
                .map(|t| (wi * wh + t / ww) * w + wj * ww + t % ww)
                .collect();
            let mx = idx.iter().map(|&p| x[p]).sum::<f64>() / k;
            let my = idx.iter().map(|&p| y[p]).sum::<f64>() / k;
            let vx = idx.iter().map(|&p| (x[p] - mx) * (x[p] - mx)).sum::<f64>() / k;
            let vy = idx.iter().map(|&p| (y[p] - my) * (y[p] - my)).sum::<f64>() / k;
            let cxy = idx.iter().map(|&p| (x[p] - mx) * (y[p] - my)).sum::<f64>() / k;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over non-overlapping 8×8 windows of the channel-mean images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (x, h, w) = grayscale(a)?;
    let (y, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    Ok(windowed_ssim(&x, &y, h, w, SSIM_WINDOW, SSIM_WINDOW))
}

/// [`ssim`], or a single whole-image window for images smaller than one
/// window.
fn report_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (x, h, w) = grayscale(a)?;
    if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        return ssim(a, b);
    }
    let (y, _, _) = grayscale(b)?;
    Ok(windowed_ssim(&x, &y, h, w, h, w))
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
    }
}

/// Region-wise LAB RMSE plus full-image PSNR and SSIM. An RMSE over an
/// empty region is `None` (JSON `null`); an infinite PSNR is the string
/// `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub lab_rmse_shadow: Option<f64>,
    pub lab_rmse_nonshadow: Option<f64>,
    pub lab_rmse_all: f64,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub shadow_pixels: usize,
    pub nonshadow_pixels: usize,
}

/// Metrics of a restored image against the clean one; images in `[0,1]`.
/// Images smaller than one SSIM window get a single whole-image window.
pub fn region_metrics(restored: &Tensor, target: &Tensor, mask: &Tensor) -> Result<MetricsReport> {
    same_shape("region_metrics", restored, target)?;
    let (_, h, w) = restored.chw()?;
    if mask.shape() != [h, w] {
        return Err(Error::shape("region_metrics mask", &[h, w], mask.shape()));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("region_metrics mask must be binary"));
    }
    let a = restored.map(|v| v * 255.0);
    let b = target.map(|v| v * 255.0);
    let shadow: Vec<bool> = mask.data().iter().map(|&m| m == 1.0).collect();
    let nonshadow: Vec<bool> = shadow.iter().map(|s| !s).collect();
    let shadow_pixels = shadow.iter().filter(|&&s| s).count();
    Ok(MetricsReport {
        lab_rmse_shadow: lab_rmse_selected(&a, &b, Some(&shadow))?,
        lab_rmse_nonshadow: lab_rmse_selected(&a, &b, Some(&nonshadow))?,
        lab_rmse_all: lab_rmse_selected(&a, &b, None)?.expect("non-empty image"),
        psnr: psnr(restored, target)?,
        ssim: report_ssim(restored, target)?,
        shadow_pixels,
        nonshadow_pixels: h * w - shadow_pixels,
    })
}
