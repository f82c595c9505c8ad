//! CycleGAN objective terms, evaluated on given tensors.

use crate::error::{Error, Result};
use crate::tensor::{l1_distance, Tensor};

/// Discriminator probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn mean_log(t: &Tensor, complement: bool) -> Result<f64> {
    let mut sum = 0.0f64;
    for &v in t.data() {
        let p = v as f64;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum += if complement { (1.0 - p).ln() } else { p.ln() };
    }
    Ok(sum / t.numel() as f64)
}

/// `mean[log D(real)] + mean[log(1 − D(fake))]`.
pub fn adversarial_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<f64> {
    Ok(mean_log(d_real, false)? + mean_log(d_fake, true)?)
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|`.
pub fn cycle_consistency_loss(x: &Tensor, f_g_x: &Tensor, y: &Tensor, g_f_y: &Tensor) -> Result<f64> {
    Ok(l1_distance(f_g_x, x)? + l1_distance(g_f_y, y)?)
}

/// `mean|G(x) − x| + mean|F(y) − y|`.
pub fn identity_loss(g_x: &Tensor, x: &Tensor, f_y: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(l1_distance(g_x, x)? + l1_distance(f_y, y)?)
}

pub fn cyclegan_total_loss(adv: f64, cyc: f64, idt: f64, lambda_cycle: f64, lambda_identity: f64) -> Result<f64> {
    if lambda_cycle < 0.0 || lambda_identity < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    Ok(adv + lambda_cycle * cyc + lambda_identity * idt)
}
