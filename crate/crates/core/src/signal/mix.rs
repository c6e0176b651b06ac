use super::{fft_convolve, generate_rir, MultichannelWave, SceneConfig};
use crate::error::{Error, Result};

/// Speech-activity frame length in seconds and threshold below the loudest frame.
const VAD_FRAME_S: f64 = 0.010;
const VAD_RANGE_DB: f64 = 40.0;

/// A synthesized scene and its exact decomposition.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: MultichannelWave,
    /// Direct-path speech image per microphone.
    pub target: MultichannelWave,
    /// Reverberant speech image per microphone.
    pub speech_image: MultichannelWave,
    /// Scaled reverberant noise image, defined as `mixture − speech_image`.
    pub noise_image: MultichannelWave,
    /// Speech-active samples at the reference microphone.
    pub active: Vec<bool>,
}

/// Samples inside 10 ms frames whose energy is within 40 dB of the loudest frame.
pub fn active_mask(x: &[f64], sample_rate: u32) -> Vec<bool> {
    let frame = ((VAD_FRAME_S * sample_rate as f64).round() as usize).max(1);
    let energies: Vec<f64> = x
        .chunks(frame)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    let floor = peak * 10f64.powf(-VAD_RANGE_DB / 10.0);
    let mut mask = Vec::with_capacity(x.len());
    for (c, e) in x.chunks(frame).zip(&energies) {
        mask.extend(std::iter::repeat(peak > 0.0 && *e >= floor).take(c.len()));
    }
    mask
}

/// Mean square of `x` over the masked samples.
pub fn power_over(x: &[f64], mask: &[bool]) -> f64 {
    let (sum, n) = x
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn convolve_crop(x: &[f64], rirs: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    rirs.iter()
        .map(|h| {
            let mut y = fft_convolve(x, h);
            y.truncate(n);
            y.resize(n, 0.0);
            y
        })
        .collect()
}

/// Reverberant noisy mixture `y_m = h_m * s + v_m` for every microphone.
///
/// Noise shorter than the speech is looped; longer noise is cropped. The noise
/// is scaled so that the reverberant-speech to noise power ratio at microphone
/// 0, measured over speech-active samples, equals `scene.snr_db`.
pub fn mix_scene(
    speech: &[f64],
    noise: &[f64],
    scene: &SceneConfig,
    sample_rate: u32,
) -> Result<Mixture> {
    let n = speech.len();
    if n == 0 || speech.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("speech is silent; SNR is undefined"));
    }
    if noise.is_empty() || noise.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("noise is silent; SNR is undefined"));
    }
    let noise: Vec<f64> = noise.iter().cycle().take(n).cloned().collect();
    let length = ((scene.rt60 * sample_rate as f64).ceil() as usize).max(1024);

    let speech_rirs = generate_rir(scene, scene.source_position(), None, length, sample_rate)?;
    let direct_rirs = generate_rir(scene, scene.source_position(), Some(0), length, sample_rate)?;
    let noise_rirs = generate_rir(scene, scene.noise_position, None, length, sample_rate)?;

    let speech_image = convolve_crop(speech, &speech_rirs, n);
    let target = convolve_crop(speech, &direct_rirs, n);
    let noise_raw = convolve_crop(&noise, &noise_rirs, n);

    let active = active_mask(&speech_image[0], sample_rate);
    let ps = power_over(&speech_image[0], &active);
    let pn = power_over(&noise_raw[0], &active);
    if ps <= 0.0 {
        return Err(Error::invalid(
            "reverberant speech has no power at the reference microphone",
        ));
    }
    if pn <= 0.0 {
        return Err(Error::invalid(
            "noise has no power over the speech-active samples",
        ));
    }
    let gain = (ps / (pn * 10f64.powf(scene.snr_db / 10.0))).sqrt();

    let mixture: Vec<Vec<f64>> = speech_image
        .iter()
        .zip(&noise_raw)
        .map(|(s, v)| s.iter().zip(v).map(|(a, b)| a + gain * b).collect())
        .collect();
    let noise_image: Vec<Vec<f64>> = mixture
        .iter()
        .zip(&speech_image)
        .map(|(m, s)| m.iter().zip(s).map(|(a, b)| a - b).collect())
        .collect();
    Ok(Mixture {
        mixture: MultichannelWave::new(sample_rate, mixture)?,
        target: MultichannelWave::new(sample_rate, target)?,
        speech_image: MultichannelWave::new(sample_rate, speech_image)?,
        noise_image: MultichannelWave::new(sample_rate, noise_image)?,
        active,
    })
}
