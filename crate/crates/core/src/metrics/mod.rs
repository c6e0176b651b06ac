//! Objective metrics and grid-wise reports.

mod report;
mod stoi;

pub use report::{
    evaluate, CellSummary, Enhancer, MetricReport, MetricRow, SummaryRow, SummaryTable,
};
pub use stoi::{
    remove_silent_frames, resample, resample_filter, stoi, third_octave_bands, STOI_RATE,
    TOO_SHORT_SCORE,
};

use crate::error::{Error, Result};

/// SI-SDR values are clamped to `±SI_SDR_LIMIT` dB.
pub const SI_SDR_LIMIT: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(
            "si_sdr",
            &[reference.len()],
            &[estimate.len()],
        ));
    }
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::invalid("si_sdr: reference is all zeros"));
    }
    let alpha = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| r * e)
        .sum::<f64>()
        / energy;
    let (mut target, mut error) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let s = alpha * r;
        target += s * s;
        error += (e - s) * (e - s);
    }
    let db = if error == 0.0 {
        SI_SDR_LIMIT
    } else if target == 0.0 {
        -SI_SDR_LIMIT
    } else {
        10.0 * (target / error).log10()
    };
    Ok(db.clamp(-SI_SDR_LIMIT, SI_SDR_LIMIT))
}
