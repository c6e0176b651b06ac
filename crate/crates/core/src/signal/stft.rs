use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::MultichannelWave;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const WIN_LEN: usize = 400;
pub const HOP: usize = 200;
pub const BINS: usize = WIN_LEN / 2 + 1;

/// `sin(π(k + ½)/N)`; its square overlap-adds to one at 50 % overlap.
pub fn sine_window() -> &'static [f64] {
    static WIN: OnceLock<Vec<f64>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WIN_LEN)
            .map(|k| (std::f64::consts::PI * (k as f64 + 0.5) / WIN_LEN as f64).sin())
            .collect()
    })
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans() -> &'static Plans {
    static PLANS: OnceLock<Plans> = OnceLock::new();
    PLANS.get_or_init(|| {
        let mut p = FftPlanner::new();
        Plans {
            forward: p.plan_fft_forward(WIN_LEN),
            inverse: p.plan_fft_inverse(WIN_LEN),
        }
    })
}

/// One-sided DFT of a real frame of length [`WIN_LEN`].
fn rfft(frame: &[f64], buf: &mut [Complex64], re: &mut [f64], im: &mut [f64]) {
    for (b, &x) in buf.iter_mut().zip(frame) {
        *b = Complex64::new(x, 0.0);
    }
    plans().forward.process(buf);
    for k in 0..BINS {
        re[k] = buf[k].re;
        im[k] = buf[k].im;
    }
}

/// Inverse of [`rfft`] with the imaginary parts at DC and Nyquist ignored.
fn irfft(re: &[f64], im: &[f64], buf: &mut [Complex64], out: &mut [f64]) {
    buf[0] = Complex64::new(re[0], 0.0);
    buf[BINS - 1] = Complex64::new(re[BINS - 1], 0.0);
    for k in 1..BINS - 1 {
        buf[k] = Complex64::new(re[k], im[k]);
        buf[WIN_LEN - k] = Complex64::new(re[k], -im[k]);
    }
    plans().inverse.process(buf);
    let scale = 1.0 / WIN_LEN as f64;
    for (o, b) in out.iter_mut().zip(buf.iter()) {
        *o = b.re * scale;
    }
}

/// Complex spectrogram stored as real and imaginary planes, each `[M, T, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrogram {
    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[2]
    }

    /// Network layout `[1, 2M, T, F]`: real planes then imaginary planes.
    pub fn to_planes(&self) -> Tensor {
        let mut data = self.re.data().to_vec();
        data.extend_from_slice(self.im.data());
        Tensor::new(
            vec![1, 2 * self.channels(), self.frames(), self.bins()],
            data,
        )
        .expect("plane layout")
    }

    /// Inverse of [`Spectrogram::to_planes`] for a batch-1 `[1, 2M, T, F]` tensor.
    pub fn from_planes(planes: &Tensor) -> Result<Self> {
        let s = planes.shape();
        if s.len() != 4 || s[0] != 1 || s[1] % 2 != 0 {
            return Err(Error::shape("spectrogram planes", s, &[1, 2, 0, BINS]));
        }
        let m = s[1] / 2;
        let half = m * s[2] * s[3];
        let d = planes.data();
        Ok(Self {
            re: Tensor::new(vec![m, s[2], s[3]], d[..half].to_vec())?,
            im: Tensor::new(vec![m, s[2], s[3]], d[half..].to_vec())?,
        })
    }
}

fn frame_count(len: usize) -> Result<usize> {
    if len < WIN_LEN {
        return Err(Error::invalid(format!(
            "signal of {len} samples is shorter than one {WIN_LEN}-sample window"
        )));
    }
    Ok(1 + (len - WIN_LEN) / HOP)
}

/// Frame `t` covers samples `[t·HOP, t·HOP + WIN_LEN)`; trailing samples that
/// do not fill a frame are dropped.
pub fn stft(wave: &MultichannelWave) -> Result<Spectrogram> {
    let m = wave.num_channels();
    let frames = frame_count(wave.len())?;
    let win = sine_window();
    let mut re = vec![0.0; m * frames * BINS];
    let mut im = vec![0.0; m * frames * BINS];
    let mut buf = vec![Complex64::default(); WIN_LEN];
    let mut frame = vec![0.0; WIN_LEN];
    for (c, ch) in wave.channels().iter().enumerate() {
        for t in 0..frames {
            for (k, f) in frame.iter_mut().enumerate() {
                *f = ch[t * HOP + k] * win[k];
            }
            let o = (c * frames + t) * BINS;
            let (r, i) = (&mut re[o..o + BINS], &mut im[o..o + BINS]);
            rfft(&frame, &mut buf, r, i);
        }
    }
    Ok(Spectrogram {
        re: Tensor::new(vec![m, frames, BINS], re)?,
        im: Tensor::new(vec![m, frames, BINS], im)?,
    })
}

/// Weighted overlap-add with the sine synthesis window. Output length is
/// `(T − 1)·HOP + WIN_LEN`; samples covered by two frames are reconstructed
/// exactly.
pub fn istft(spec: &Spectrogram, sample_rate: u32) -> Result<MultichannelWave> {
    if spec.re.shape() != spec.im.shape() || spec.re.rank() != 3 || spec.bins() != BINS {
        return Err(Error::shape("istft", spec.re.shape(), spec.im.shape()));
    }
    let (m, frames) = (spec.channels(), spec.frames());
    if frames == 0 {
        return Err(Error::invalid("istft of an empty spectrogram"));
    }
    let len = (frames - 1) * HOP + WIN_LEN;
    let mut out = vec![vec![0.0; len]; m];
    let win = sine_window();
    let mut buf = vec![Complex64::default(); WIN_LEN];
    let mut frame = vec![0.0; WIN_LEN];
    for (c, ch) in out.iter_mut().enumerate() {
        for t in 0..frames {
            let o = (c * frames + t) * BINS;
            irfft(
                &spec.re.data()[o..o + BINS],
                &spec.im.data()[o..o + BINS],
                &mut buf,
                &mut frame,
            );
            for k in 0..WIN_LEN {
                ch[t * HOP + k] += win[k] * frame[k];
            }
        }
    }
    MultichannelWave::new(sample_rate, out)
}

/// Leading zero padding applied by [`analyze`].
pub const ANALYSIS_PAD: usize = HOP;

fn padded_len(n: usize) -> usize {
    ANALYSIS_PAD + n + HOP + (HOP - n % HOP) % HOP
}

/// STFT of a zero-padded copy so that every original sample lies in two
/// frames; [`synthesize`] inverts it exactly.
pub fn analyze(wave: &MultichannelWave) -> Result<Spectrogram> {
    let n = wave.len();
    let total = padded_len(n);
    let chans = wave
        .channels()
        .iter()
        .map(|ch| {
            let mut v = vec![0.0; total];
            v[ANALYSIS_PAD..ANALYSIS_PAD + n].copy_from_slice(ch);
            v
        })
        .collect();
    stft(&MultichannelWave::new(wave.sample_rate(), chans)?)
}

/// Number of frames [`analyze`] produces for `n` samples.
pub fn analysis_frames(n: usize) -> usize {
    1 + (padded_len(n) - WIN_LEN) / HOP
}

/// Inverse of [`analyze`], cropped back to `n` samples.
pub fn synthesize(spec: &Spectrogram, n: usize, sample_rate: u32) -> Result<MultichannelWave> {
    let full = istft(spec, sample_rate)?;
    if full.len() < ANALYSIS_PAD + n {
        return Err(Error::invalid(format!(
            "{} frames cannot cover {n} samples",
            spec.frames()
        )));
    }
    let chans = full
        .channels()
        .iter()
        .map(|ch| ch[ANALYSIS_PAD..ANALYSIS_PAD + n].to_vec())
        .collect();
    MultichannelWave::new(sample_rate, chans)
}

impl Var {
    /// Differentiable overlap-add inverse over `[..., T, F]` real and imaginary
    /// planes, producing `[..., (T − 1)·HOP + WIN_LEN]`.
    pub fn istft(re: &Var, im: &Var) -> Result<Var> {
        let s = re.shape().to_vec();
        if s != im.shape() || s.len() < 2 || s[s.len() - 1] != BINS {
            return Err(Error::shape("istft", &s, im.shape()));
        }
        let frames = s[s.len() - 2];
        if frames == 0 {
            return Err(Error::invalid("istft of an empty spectrogram"));
        }
        let lead: usize = s[..s.len() - 2].iter().product();
        let len = (frames - 1) * HOP + WIN_LEN;
        let win = sine_window();
        let mut out = vec![0.0; lead * len];
        let mut buf = vec![Complex64::default(); WIN_LEN];
        let mut frame = vec![0.0; WIN_LEN];
        let (rd, id) = (re.value().data(), im.value().data());
        for l in 0..lead {
            let dst = &mut out[l * len..(l + 1) * len];
            for t in 0..frames {
                let o = (l * frames + t) * BINS;
                irfft(&rd[o..o + BINS], &id[o..o + BINS], &mut buf, &mut frame);
                for k in 0..WIN_LEN {
                    dst[t * HOP + k] += win[k] * frame[k];
                }
            }
        }
        let mut out_shape = s[..s.len() - 2].to_vec();
        out_shape.push(len);
        let (need_re, need_im) = (re.requires_grad(), im.requires_grad());
        let value = Tensor::new(out_shape, out)?;
        Ok(re.tape().op(value, &[re, im], move |g| {
            let gd = g.data();
            let mut gre = vec![0.0; lead * frames * BINS];
            let mut gim = vec![0.0; lead * frames * BINS];
            let mut buf = vec![Complex64::default(); WIN_LEN];
            let mut frame = vec![0.0; WIN_LEN];
            let (mut fr, mut fi) = (vec![0.0; BINS], vec![0.0; BINS]);
            let n = WIN_LEN as f64;
            for l in 0..lead {
                for t in 0..frames {
                    for k in 0..WIN_LEN {
                        frame[k] = win[k] * gd[l * len + t * HOP + k];
                    }
                    rfft(&frame, &mut buf, &mut fr, &mut fi);
                    let o = (l * frames + t) * BINS;
                    for k in 0..BINS {
                        let edge = k == 0 || k == BINS - 1;
                        let c = if edge { 1.0 } else { 2.0 };
                        gre[o + k] = c / n * fr[k];
                        gim[o + k] = if edge { 0.0 } else { c / n * fi[k] };
                    }
                }
            }
            vec![
                need_re.then(|| Tensor::from_parts(s.clone(), gre)),
                need_im.then(|| Tensor::from_parts(s.clone(), gim)),
            ]
        }))
    }
}
