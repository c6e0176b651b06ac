use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

/// `10^(−60/10)`: bounds the training SI-SDR to `[−60, 60]` dB.
pub const SOFT_CLAMP: f64 = 1e-6;
/// Keeps `|X|` differentiable at zero in the magnitude term.
const MAGNITUDE_FLOOR: f64 = 1e-12;
/// Makes an all-zero estimate score 0 dB instead of `0/0`.
const RATIO_GUARD: f64 = 1e-300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Negative SI-SDR of the resynthesized waveforms, mean over channels.
    #[default]
    NegSiSdr,
    /// Complex-plane MSE plus magnitude MSE, equal weights.
    SpectralMse,
}

fn split_planes(planes: &Var) -> Result<(Var, Var)> {
    let s = planes.shape();
    if s.len() != 4 || s[1] % 2 != 0 {
        return Err(Error::shape("loss planes", s, &[0, 2, 0, 0]));
    }
    let m = s[1] / 2;
    Ok((planes.narrow(1, 0, m)?, planes.narrow(1, m, m)?))
}

/// Per-signal SI-SDR in dB over the last axis of `[B, M, L]` waveforms,
/// soft-clamped so a perfect estimate gives exactly 60 dB and an orthogonal
/// one −60 dB.
pub fn si_sdr_db(estimate: &Var, reference: &Var) -> Result<Var> {
    if estimate.shape() != reference.shape() {
        return Err(Error::shape(
            "si_sdr loss",
            estimate.shape(),
            reference.shape(),
        ));
    }
    let axis = reference.shape().len() - 1;
    let energy = reference.square().sum_axis(axis)?;
    if energy.value().data().iter().any(|e| *e == 0.0) {
        return Err(Error::invalid("loss target has zero power"));
    }
    let alpha = estimate.mul(reference)?.sum_axis(axis)?.div(&energy)?;
    let projection = reference.mul(&alpha)?;
    let error = estimate.sub(&projection)?;
    let target_power = projection.square().sum_axis(axis)?;
    let error_power = error.square().sum_axis(axis)?;
    let num = target_power
        .add(&error_power.scale(SOFT_CLAMP))?
        .add_scalar(RATIO_GUARD);
    let den = error_power
        .add(&target_power.scale(SOFT_CLAMP))?
        .add_scalar(RATIO_GUARD);
    Ok(num.div(&den)?.ln().scale(10.0 / std::f64::consts::LN_10))
}

/// Scalar training loss between `[B, 2M, T, F]` estimate and target planes.
pub fn loss(kind: LossKind, predicted: &Var, target: &Var) -> Result<Var> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape("loss", predicted.shape(), target.shape()));
    }
    let (pr, pi) = split_planes(predicted)?;
    let (tr, ti) = split_planes(target)?;
    match kind {
        LossKind::NegSiSdr => {
            let est = Var::istft(&pr, &pi)?;
            let reference = Var::istft(&tr, &ti)?;
            Ok(si_sdr_db(&est, &reference)?.mean().neg())
        }
        LossKind::SpectralMse => {
            if target.value().data().iter().all(|v| *v == 0.0) {
                return Err(Error::invalid("loss target has zero power"));
            }
            let complex = predicted.sub(target)?.square().mean();
            let magnitude = |re: &Var, im: &Var| -> Result<Var> {
                Ok(re
                    .square()
                    .add(&im.square())?
                    .add_scalar(MAGNITUDE_FLOOR)
                    .sqrt())
            };
            let mag = magnitude(&pr, &pi)?
                .sub(&magnitude(&tr, &ti)?)?
                .square()
                .mean();
            complex.add(&mag)
        }
    }
}
