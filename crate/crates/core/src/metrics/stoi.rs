//! Short-time objective intelligibility, numerically aligned with the
//! reference MATLAB/pystoi pipeline.

use std::sync::OnceLock;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per intermediate intelligibility segment (384 ms).
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
/// Score returned when fewer than [`SEGMENT`] frames survive silence removal.
pub const TOO_SHORT_SCORE: f64 = 1e-5;

/// Zeroth-order modified Bessel function of the first kind, by power series.
fn bessel_i0(x: f64) -> f64 {
    let (mut term, mut sum, q) = (1.0, 1.0, x * x / 4.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc anti-aliasing filter of Octave's `resample`,
/// normalized to unit sum.
pub fn resample_filter(up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (p, q) = ((up / g) as f64, (down / g) as f64);
    let rejection_db = 60.0;
    let cutoff = 1.0 / (2.0 * p.max(q));
    let roll_off = cutoff / 10.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let n = 2 * half + 1;
    let i0_beta = bessel_i0(beta);
    let h: Vec<f64> = (-half..=half)
        .enumerate()
        .map(|(i, t)| {
            let x = 2.0 * cutoff * t as f64;
            let sinc = if t == 0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            kaiser * 2.0 * p * cutoff * sinc
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

/// Polyphase rational resampling by `up/down` with [`resample_filter`],
/// output aligned to the filter center; `ceil(n·up/down)` samples.
pub fn resample(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (p, q) = (up / g, down / g);
    if p == q {
        return x.to_vec();
    }
    let h = resample_filter(p, q);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * p).div_ceil(q);
    (0..n_out)
        .map(|m| {
            // Upsampled index u = n·p contributes h[half + m·q − n·p].
            let center = half + m * q;
            let n_lo = (center + 1).saturating_sub(h.len()).div_ceil(p);
            let n_hi = (center / p).min(x.len().saturating_sub(1));
            let mut acc = 0.0;
            if x.is_empty() {
                return acc;
            }
            for n in n_lo..=n_hi {
                acc += x[n] * h[center - n * p];
            }
            acc * p as f64
        })
        .collect()
}

/// `hanning(N)` of MATLAB: the symmetric Hann window without its zero ends.
fn hanning() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (1..=FRAME)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (FRAME + 1) as f64).cos())
            .collect()
    })
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

/// Drops frames of both signals where the clean frame is more than 40 dB
/// below the loudest clean frame, then overlap-adds the survivors.
pub fn remove_silent_frames(clean: &[f64], degraded: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hanning();
    let starts: Vec<usize> = frame_starts(clean.len()).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|k| (w[k] * clean[s + k]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, e)| max - DYN_RANGE_DB - **e < 0.0)
        .map(|(s, _)| *s)
        .collect();
    let len = if kept.is_empty() {
        0
    } else {
        (kept.len() - 1) * HOP + FRAME
    };
    let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
    for (j, &s) in kept.iter().enumerate() {
        for k in 0..FRAME {
            a[j * HOP + k] += w[k] * clean[s + k];
            b[j * HOP + k] += w[k] * degraded[s + k];
        }
    }
    (a, b)
}

fn fft_plan() -> &'static Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(NFFT))
}

/// Power spectra `|X|²` of Hann-windowed frames, 257 bins each.
fn power_frames(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hanning();
    let fft = fft_plan();
    frame_starts(x.len())
        .map(|s| {
            let mut buf = vec![Complex64::default(); NFFT];
            for k in 0..FRAME {
                buf[k].re = w[k] * x[s + k];
            }
            fft.process(&mut buf);
            buf[..=NFFT / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Bin ranges `[lo, hi)` of the fifteen one-third octave bands, edges
/// snapped to the nearest FFT bin.
pub fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins: Vec<f64> = (0..=NFFT / 2)
        .map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64)
        .collect();
    let nearest = |f: f64| {
        let mut best = 0;
        for (i, b) in bins.iter().enumerate() {
            if (b - f).powi(2) < (bins[best] - f).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn band_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let frames = power_frames(x);
    third_octave_bands()
        .iter()
        .map(|&(lo, hi)| {
            frames
                .iter()
                .map(|p| p[lo..hi].iter().sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalized correlation; zero when either side has no variation.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let den = (aa * bb).sqrt();
    if den > 0.0 {
        ab / den
    } else {
        0.0
    }
}

/// STOI of `degraded` against `clean`, both at `sample_rate`, in `[-1, 1]`.
pub fn stoi(clean: &[f64], degraded: &[f64], sample_rate: u32) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::shape("stoi", &[clean.len()], &[degraded.len()]));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if clean.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("stoi: clean signal is silent"));
    }
    let (x, y) = if sample_rate == STOI_RATE {
        (clean.to_vec(), degraded.to_vec())
    } else {
        let (p, q) = (STOI_RATE as usize, sample_rate as usize);
        (resample(clean, p, q), resample(degraded, p, q))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let (xe, ye) = (band_envelopes(&x), band_envelopes(&y));
    let frames = xe[0].len();
    if frames < SEGMENT {
        return Ok(TOO_SHORT_SCORE);
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for end in SEGMENT..=frames {
        for (xb, yb) in xe.iter().zip(&ye) {
            let xs = &xb[end - SEGMENT..end];
            let ys = &yb[end - SEGMENT..end];
            let (nx, ny) = (norm(xs), norm(ys));
            let scale = if ny > 0.0 { nx / ny } else { 0.0 };
            let clipped: Vec<f64> = xs
                .iter()
                .zip(ys)
                .map(|(a, b)| (b * scale).min(a * clip))
                .collect();
            total += correlation(xs, &clipped);
            count += 1;
        }
    }
    Ok(total / count as f64)
}
