//! Time-frequency analysis, room acoustics and mixture synthesis.

mod dataset;
mod mix;
mod rir;
mod stft;
mod synth;

pub use dataset::{
    read_manifest, scene_grid, seed_for_row, synthesize_dataset, write_manifest, DatasetConfig,
    ManifestRow, MANIFEST_FILE,
};
pub use mix::{active_mask, mix_scene, power_over, Mixture};
pub use rir::{
    calibrated_reflection, eyring_reflection, generate_rir, image_rir, remove_dc, schroeder_t60,
    SceneConfig, SPEED_OF_SOUND,
};
pub use stft::{
    analysis_frames, analyze, istft, sine_window, stft, synthesize, Spectrogram, ANALYSIS_PAD,
    BINS, HOP, WIN_LEN,
};
pub use synth::{pink_noise, synthetic_speech};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// STFT frames per second of audio.
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / stft::HOP as f64;

/// Equal-length channels of audio at one sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelWave {
    sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl MultichannelWave {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if channels.is_empty() {
            return Err(Error::invalid("a wave needs at least one channel"));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("channels differ in length"));
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        Self::new(sample_rate, vec![samples])
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }
}

/// Linear convolution via FFT, `len(a) + len(b) − 1` samples.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut v = vec![Complex64::default(); n];
        for (d, &s) in v.iter_mut().zip(x) {
            d.re = s;
        }
        v
    };
    let (mut fa, mut fb) = (load(a), load(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}
