use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width of the fractional-delay kernel; the kernel has `2·HALF_TAPS` taps.
const HALF_TAPS: usize = 8;

/// Shoebox room with a horizontal uniform circular array, one speech source
/// and one point noise source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub room_dims: [f64; 3],
    pub array_center: [f64; 3],
    pub array_radius: f64,
    pub num_mics: usize,
    /// Speech source distance from the array center, in the array plane.
    pub source_distance: f64,
    pub source_azimuth_deg: f64,
    pub noise_position: [f64; 3],
    pub rt60: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_dims: [6.0, 5.0, 4.0],
            array_center: [3.0, 2.5, 1.5],
            array_radius: 0.035,
            num_mics: 16,
            source_distance: 1.0,
            source_azimuth_deg: 30.0,
            noise_position: [1.2, 4.0, 1.7],
            rt60: 0.5,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn mic_positions(&self) -> Vec<[f64; 3]> {
        let c = self.array_center;
        (0..self.num_mics)
            .map(|m| {
                let a = 2.0 * std::f64::consts::PI * m as f64 / self.num_mics as f64;
                [
                    c[0] + self.array_radius * a.cos(),
                    c[1] + self.array_radius * a.sin(),
                    c[2],
                ]
            })
            .collect()
    }

    pub fn source_position(&self) -> [f64; 3] {
        let a = self.source_azimuth_deg.to_radians();
        let c = self.array_center;
        [
            c[0] + self.source_distance * a.cos(),
            c[1] + self.source_distance * a.sin(),
            c[2],
        ]
    }

    fn inside(&self, p: &[f64; 3]) -> bool {
        p.iter()
            .zip(&self.room_dims)
            .all(|(x, l)| *x > 0.0 && x < l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("room dimensions must be positive"));
        }
        if self.num_mics == 0 {
            return Err(Error::invalid("scene needs at least one microphone"));
        }
        if !(self.rt60 > 0.0) {
            return Err(Error::invalid(format!(
                "rt60 must be positive, got {}",
                self.rt60
            )));
        }
        for (what, p) in self
            .mic_positions()
            .iter()
            .map(|p| ("microphone", *p))
            .chain([
                ("source", self.source_position()),
                ("noise source", self.noise_position),
            ])
        {
            if !self.inside(&p) {
                return Err(Error::invalid(format!(
                    "{what} at {p:?} is outside the room"
                )));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.room_dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.room_dims;
        2.0 * (x * y + x * z + y * z)
    }
}

/// Uniform pressure reflection coefficient from Eyring's reverberation formula.
pub fn eyring_reflection(scene: &SceneConfig) -> Result<f64> {
    let k = 24.0 * std::f64::consts::LN_10 / SPEED_OF_SOUND;
    let alpha = 1.0 - (-k * scene.volume() / (scene.surface() * scene.rt60)).exp();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "rt60 {} s needs absorption {alpha}, outside (0, 1) for this room",
            scene.rt60
        )));
    }
    Ok((1.0 - alpha).sqrt())
}

/// Uniform pressure reflection coefficient whose image-method decay, read off
/// the Schroeder curve between −5 and −25 dB, matches `scene.rt60`.
///
/// Images arriving from direction `u` after time `t` have undergone about
/// `c·t·Σ|u_i|/L_i` reflections, so the late energy is a sphere average of
/// exponentials rather than the single exponential Eyring assumes, and the
/// slow grazing directions stretch the decay. With `a = −ln β` the curve is a
/// function of `a·t` alone, so one quadrature gives the exact `a`.
pub fn calibrated_reflection(scene: &SceneConfig) -> Result<f64> {
    scene.validate()?;
    let dirs = fibonacci_octant(2048);
    let rates: Vec<f64> = dirs
        .iter()
        .map(|u| 2.0 * SPEED_OF_SOUND * (0..3).map(|i| u[i] / scene.room_dims[i]).sum::<f64>())
        .collect();
    // Backward-integrated energy at a·t = tau, each direction contributing exp(−r·tau)/r.
    let edc = |tau: f64| rates.iter().map(|r| (-r * tau).exp() / r).sum::<f64>();
    let total = edc(0.0);
    let level = |tau: f64| 10.0 * (edc(tau) / total).log10();
    let crossing = |db: f64| {
        let (mut lo, mut hi) = (0.0, 1.0);
        while level(hi) > db {
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if level(mid) > db {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let (t5, t25) = (crossing(-5.0), crossing(-25.0));
    let n = 64;
    let (mut st, mut sd, mut stt, mut std_) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let t = t5 + (t25 - t5) * i as f64 / (n - 1) as f64;
        let d = level(t);
        st += t;
        sd += d;
        stt += t * t;
        std_ += t * d;
    }
    let nf = n as f64;
    let slope = (nf * std_ - st * sd) / (nf * stt - st * st);
    // At a = 1 the fitted decay time is −60/slope; it scales as 1/a.
    let a = -60.0 / slope / scene.rt60;
    Ok((-a).exp())
}

/// Near-uniform unit vectors in the positive octant.
fn fibonacci_octant(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let total = 8 * n;
    (0..total)
        .filter_map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / total as f64 * 2.0;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let u = [r * phi.cos(), r * phi.sin(), z];
            u.iter().all(|c| *c >= 0.0).then_some(u)
        })
        .collect()
}

/// Image offsets and reflection counts along one axis.
fn axis_images(src: f64, len: f64, reach: f64) -> Vec<(f64, usize)> {
    let n_max = (reach / (2.0 * len)).ceil() as i64 + 1;
    let mut out = Vec::with_capacity((4 * n_max + 2) as usize);
    for n in -n_max..=n_max {
        for q in 0..2i64 {
            let pos = (1 - 2 * q) as f64 * src + 2.0 * n as f64 * len;
            let refl = (n - q).unsigned_abs() + n.unsigned_abs();
            out.push((pos, refl as usize));
        }
    }
    out
}

/// Adds a Hann-windowed sinc impulse of total weight `amp` centered at `delay` samples.
fn add_fractional_impulse(h: &mut [f64], delay: f64, amp: f64, hann_cos: &[(f64, f64)]) {
    let base = delay.floor();
    let frac = delay - base;
    let base = base as i64;
    let (s_frac, pi) = ((std::f64::consts::PI * frac).sin(), std::f64::consts::PI);
    let (cf, sf) = (
        (pi * frac / HALF_TAPS as f64).cos(),
        (pi * frac / HALF_TAPS as f64).sin(),
    );
    let mut taps = [0.0; 2 * HALF_TAPS];
    let mut sum = 0.0;
    for (j, tap) in taps.iter_mut().enumerate() {
        let m = j as i64 - (HALF_TAPS as i64 - 1);
        let x = m as f64 - frac;
        let sinc = if x == 0.0 {
            1.0
        } else {
            let sign = if m.rem_euclid(2) == 0 { -1.0 } else { 1.0 };
            sign * s_frac / (pi * x)
        };
        // cos(π(m − f)/H) from the tabulated cos/sin of πm/H.
        let (cm, sm) = hann_cos[j];
        let win = 0.5 * (1.0 + cm * cf + sm * sf);
        *tap = sinc * win;
        sum += *tap;
    }
    let scale = amp / sum;
    for (j, tap) in taps.iter().enumerate() {
        let idx = base + j as i64 - (HALF_TAPS as i64 - 1);
        if idx >= 0 && (idx as usize) < h.len() {
            h[idx as usize] += tap * scale;
        }
    }
}

/// Image-method impulse responses from `source` to every microphone, high-passed
/// with [`remove_dc`].
pub fn generate_rir(
    scene: &SceneConfig,
    source: [f64; 3],
    max_order: Option<usize>,
    length: usize,
    sample_rate: u32,
) -> Result<Vec<Vec<f64>>> {
    let mut rirs = image_rir(scene, source, max_order, length, sample_rate)?;
    for h in &mut rirs {
        remove_dc(h, sample_rate);
    }
    Ok(rirs)
}

/// Second-order 100 Hz high-pass of Allen and Berkley. Every image arrives
/// with positive sign, so the unfiltered sum carries a growing low-frequency
/// bias that stretches the decay far past the target.
pub fn remove_dc(h: &mut [f64], sample_rate: u32) {
    let w = 2.0 * std::f64::consts::PI * 100.0 / sample_rate as f64;
    let r1 = (-w).exp();
    let (b1, b2, a1) = (2.0 * r1 * w.cos(), -r1 * r1, -(1.0 + r1));
    let mut y = [0.0f64; 3];
    for v in h.iter_mut() {
        y[2] = y[1];
        y[1] = y[0];
        y[0] = b1 * y[1] + b2 * y[2] + *v;
        *v = y[0] + a1 * y[1] + r1 * y[2];
    }
}

/// Unfiltered image-method impulse responses from `source` to every microphone.
///
/// Each image contributes `β^k / (4πd)` at delay `d/c` seconds, with `k` its
/// reflection count and `β` from [`calibrated_reflection`]. Images with `k >
/// max_order` (when given) or arriving after `length` samples are skipped.
pub fn image_rir(
    scene: &SceneConfig,
    source: [f64; 3],
    max_order: Option<usize>,
    length: usize,
    sample_rate: u32,
) -> Result<Vec<Vec<f64>>> {
    scene.validate()?;
    if !scene.inside(&source) {
        return Err(Error::invalid(format!(
            "source at {source:?} is outside the room"
        )));
    }
    let beta = calibrated_reflection(scene)?;
    let fs = sample_rate as f64;
    let reach = (length + HALF_TAPS) as f64 / fs * SPEED_OF_SOUND;
    let axes: Vec<Vec<(f64, usize)>> = (0..3)
        .map(|a| axis_images(source[a], scene.room_dims[a], reach))
        .collect();
    let max_refl = axes
        .iter()
        .map(|v| v.iter().map(|e| e.1).max().unwrap_or(0))
        .sum::<usize>();
    let beta_pow: Vec<f64> = (0..=max_refl).map(|k| beta.powi(k as i32)).collect();
    let order_cap = max_order.unwrap_or(usize::MAX);
    let hann_cos: Vec<(f64, f64)> = (0..2 * HALF_TAPS)
        .map(|j| {
            let m = j as f64 - (HALF_TAPS as f64 - 1.0);
            let a = std::f64::consts::PI * m / HALF_TAPS as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let reach2 = reach * reach;
    let four_pi = 4.0 * std::f64::consts::PI;

    let rir_for = |mic: &[f64; 3]| {
        let mut h = vec![0.0; length];
        for &(x, rx) in &axes[0] {
            let dx2 = (x - mic[0]).powi(2);
            if dx2 > reach2 || rx > order_cap {
                continue;
            }
            for &(y, ry) in &axes[1] {
                let dxy2 = dx2 + (y - mic[1]).powi(2);
                if dxy2 > reach2 || rx + ry > order_cap {
                    continue;
                }
                for &(z, rz) in &axes[2] {
                    let d2 = dxy2 + (z - mic[2]).powi(2);
                    let order = rx + ry + rz;
                    if d2 > reach2 || order > order_cap {
                        continue;
                    }
                    let d = d2.sqrt();
                    add_fractional_impulse(
                        &mut h,
                        d / SPEED_OF_SOUND * fs,
                        beta_pow[order] / (four_pi * d),
                        &hann_cos,
                    );
                }
            }
        }
        h
    };
    use rayon::prelude::*;
    Ok(scene.mic_positions().par_iter().map(rir_for).collect())
}

/// Decay time from Schroeder backward integration, fitted between −5 and
/// −25 dB and extrapolated to 60 dB.
pub fn schroeder_t60(h: &[f64], sample_rate: u32) -> Result<f64> {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    if acc <= 0.0 {
        return Err(Error::invalid("impulse response has no energy"));
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / acc).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0);
    let end = db.iter().position(|&d| d <= -25.0);
    let (Some(start), Some(end)) = (start, end) else {
        return Err(Error::invalid("decay curve never reaches -25 dB"));
    };
    let n = (end - start + 1) as f64;
    let fs = sample_rate as f64;
    let (mut st, mut sd, mut stt, mut std_) = (0.0, 0.0, 0.0, 0.0);
    for (i, d) in db.iter().enumerate().take(end + 1).skip(start) {
        let t = i as f64 / fs;
        st += t;
        sd += d;
        stt += t * t;
        std_ += t * d;
    }
    let slope = (n * std_ - st * sd) / (n * stt - st * st);
    if !(slope < 0.0) {
        return Err(Error::invalid("decay curve is not decreasing"));
    }
    Ok(-60.0 / slope)
}
