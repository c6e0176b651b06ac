//! Seeded stand-ins for speech and noise corpora.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// (F1, F2, F3) in Hz for five cardinal vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];

/// Voiced syllables separated by pauses: a glottal harmonic series with a
/// drifting pitch, shaped by Gaussian formant resonances and a Hann envelope,
/// with an occasional fricative onset. Peak amplitude is 0.5.
pub fn synthetic_speech<R: Rng + ?Sized>(
    samples: usize,
    sample_rate: u32,
    rng: &mut R,
) -> Vec<f64> {
    let fs = sample_rate as f64;
    let nyq = 0.45 * fs;
    let mut out = vec![0.0; samples];
    let base_f0: f64 = rng.random_range(95.0..210.0);
    let mut t = (rng.random_range(0.02..0.15) * fs) as usize;
    while t < samples {
        let dur = (rng.random_range(0.12..0.32) * fs) as usize;
        let end = (t + dur).min(samples);
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let shift = rng.random_range(0.9..1.1);
        let formants = vowel.map(|f| f * shift);
        let f0_start = base_f0 * rng.random_range(0.9..1.15);
        let f0_end = base_f0 * rng.random_range(0.85..1.1);
        let loud = rng.random_range(0.5..1.0);

        if rng.random_bool(0.4) {
            let burst = ((rng.random_range(0.02..0.06) * fs) as usize).min(end - t);
            let mut prev = 0.0;
            for k in 0..burst {
                let w: f64 = rng.sample(StandardNormal);
                let env = (std::f64::consts::PI * k as f64 / burst as f64).sin();
                out[t + k] += 0.08 * loud * (w - prev) * env;
                prev = w;
            }
        }

        let len = end - t;
        let harmonics = (nyq / f0_start.min(f0_end)) as usize;
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| {
                let f = h as f64 * base_f0;
                let res: f64 = formants
                    .iter()
                    .enumerate()
                    .map(|(i, &fm)| {
                        let bw = 90.0 + 40.0 * i as f64;
                        (1.0 / (i + 1) as f64) * (-((f - fm) / bw).powi(2)).exp()
                    })
                    .sum();
                (res + 0.02) / (h as f64).sqrt()
            })
            .collect();
        let mut phase = 0.0;
        for k in 0..len {
            let frac = k as f64 / len.max(1) as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += 2.0 * std::f64::consts::PI * f0 / fs;
            let env = (std::f64::consts::PI * frac).sin().powi(2);
            let mut v = 0.0;
            for (h, a) in amps.iter().enumerate() {
                let hf = (h + 1) as f64 * f0;
                if hf >= nyq {
                    break;
                }
                v += a * ((h + 1) as f64 * phase).sin();
            }
            out[t + k] += loud * env * v;
        }
        let gap = rng.random_range(0.04..0.22);
        let pause = if rng.random_bool(0.15) {
            rng.random_range(0.2..0.4)
        } else {
            0.0
        };
        t = end + ((gap + pause) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= 0.5 / peak;
        }
    }
    out
}

/// Gaussian noise with a 1/f power spectrum, RMS 0.1.
pub fn pink_noise<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> Vec<f64> {
    if samples == 0 {
        return Vec::new();
    }
    let n = samples.next_power_of_two().max(2);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::default();
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf[..samples].iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / samples as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v *= 0.1 / rms;
        }
    }
    out
}
