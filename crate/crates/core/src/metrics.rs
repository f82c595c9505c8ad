//! Image quality metrics. Inputs are expected in `[0, 1]`; use
//! [`to_unit_range`] for network outputs in `[−1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Which peak value PSNR divides by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsnrMax {
    /// Maximum pixel of the generated image.
    #[default]
    Generated,
    /// The data range, 1.0.
    Range,
}

/// Maps `[−1, 1]` to `[0, 1]`.
pub fn to_unit_range(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| (v + 1.0) * 0.5).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn pairs<'a>(op: &'static str, a: &'a Tensor, b: &'a Tensor) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::shape(op, "empty image"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64, y as f64)))
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let n = pred.numel() as f64;
    Ok(pairs("mae", pred, target)?.map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let n = pred.numel() as f64;
    Ok(pairs("mse", pred, target)?.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

pub fn psnr(pred: &Tensor, target: &Tensor, max: PsnrMax) -> Result<f64> {
    let err = mse(pred, target)?;
    if err == 0.0 {
        return Err(Error::IdenticalImages);
    }
    let peak = match max {
        PsnrMax::Generated => pred.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)),
        PsnrMax::Range => 1.0,
    };
    if peak <= 0.0 {
        return Err(Error::Domain(format!("PSNR peak {peak} is not positive")));
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Single-window SSIM over the whole image. Not clamped; it can be negative.
pub fn ssim(pred: &Tensor, target: &Tensor, c1: f64, c2: f64) -> Result<f64> {
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::InvalidArgument("SSIM constants must be positive".into()));
    }
    let n = pred.numel() as f64;
    let (sa, sb) = pairs("ssim", pred, target)?.fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (ma, mb) = (sa / n, sb / n);
    let (va, vb, cov) = pairs("ssim", pred, target)?.fold((0.0, 0.0, 0.0), |(va, vb, c), (x, y)| {
        let (dx, dy) = (x - ma, y - mb);
        (va + dx * dx, vb + dy * dy, c + dx * dy)
    });
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mae: f64,
    /// NaN when undefined (identical images or non-positive peak).
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics of a `[−1, 1]` prediction against its `[−1, 1]` target.
pub fn evaluate_pair(pred: &Tensor, target: &Tensor, max: PsnrMax) -> Result<SampleMetrics> {
    let (p, t) = (to_unit_range(pred), to_unit_range(target));
    let psnr = match psnr(&p, &t, max) {
        Ok(v) => v,
        Err(Error::IdenticalImages | Error::Domain(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(SampleMetrics { mae: mae(&p, &t)?, psnr, ssim: ssim(&p, &t, SSIM_C1, SSIM_C2)? })
}

/// Mean and sample standard deviation, ignoring NaN entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return Summary { n: 0, mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { n: v.len(), mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mae: Summary,
    pub psnr: Summary,
    pub ssim: Summary,
}

impl MetricsSummary {
    pub fn of<'a>(samples: impl IntoIterator<Item = &'a SampleMetrics> + Clone) -> Self {
        MetricsSummary {
            mae: Summary::of(samples.clone().into_iter().map(|m| m.mae)),
            psnr: Summary::of(samples.clone().into_iter().map(|m| m.psnr)),
            ssim: Summary::of(samples.into_iter().map(|m| m.ssim)),
        }
    }
}
