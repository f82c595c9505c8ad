use crate::error::{Error, Result};

/// Nearest-rank percentile: the value at 1-based index `⌈p·N/100⌉` of the sorted errors.
pub fn calibrate_threshold(errors: &[f64], percentile: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile {percentile} not in (0, 100)")));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidArgument("calibration errors must be finite".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (percentile * sorted.len() as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Adaptation fires only when the output error strictly exceeds `tau`.
pub fn trigger(eps_y: f64, tau: f64) -> bool {
    eps_y > tau
}
