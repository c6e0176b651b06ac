use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix_scene, pink_noise, synthetic_speech, SceneConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::io::wav::{read_wav_at, write_wav, WavFormat};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory of clean speech WAVs; synthetic speech when absent.
    pub corpus_dir: Option<PathBuf>,
    /// Directory of noise WAVs; seeded pink noise when absent.
    pub noise_dir: Option<PathBuf>,
    pub snr_db: Vec<f64>,
    pub rt60_s: Vec<f64>,
    pub count: usize,
    pub mics: usize,
    pub seconds: f64,
    pub seed: u64,
    pub format: WavFormat,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            noise_dir: None,
            snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            rt60_s: (2..=10).map(|k| k as f64 / 10.0).collect(),
            count: 50,
            mics: 16,
            seconds: 3.0,
            seed: 0,
            format: WavFormat::Float32,
        }
    }
}

/// One synthesized (mixture, target, scene) triple. Paths are relative to
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub mixture_path: String,
    pub target_path: String,
    pub snr_db: f64,
    pub rt60_s: f64,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl ManifestRow {
    pub fn mixture(&self, base: &Path) -> PathBuf {
        base.join(&self.mixture_path)
    }

    pub fn target(&self, base: &Path) -> PathBuf {
        base.join(&self.target_path)
    }
}

/// Every (SNR, RT60) pair with SNR varying fastest, so any run of
/// `snr_db.len()` consecutive rows covers every SNR.
pub fn scene_grid(snr_db: &[f64], rt60_s: &[f64]) -> Vec<(f64, f64)> {
    rt60_s
        .iter()
        .flat_map(|&r| snr_db.iter().map(move |&s| (s, r)))
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-row seed derived from the root seed.
pub fn seed_for_row(seed: u64, row: usize) -> u64 {
    splitmix64(seed ^ splitmix64(row as u64))
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no .wav files under {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// First channel of a random corpus file, randomly cropped to `n` samples.
fn corpus_clip(files: &[PathBuf], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let path = &files[rng.random_range(0..files.len())];
    let wave = read_wav_at(path, SAMPLE_RATE)?;
    let x = wave.channel(0);
    if x.len() <= n {
        return Ok(x.to_vec());
    }
    let start = rng.random_range(0..=x.len() - n);
    Ok(x[start..start + n].to_vec())
}

fn random_scene(
    cfg: &DatasetConfig,
    snr: f64,
    rt60: f64,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> SceneConfig {
    let mut scene = SceneConfig {
        num_mics: cfg.mics,
        snr_db: snr,
        rt60,
        seed,
        ..SceneConfig::default()
    };
    let [lx, ly, _] = scene.room_dims;
    scene.array_center = [
        rng.random_range(1.5..lx - 1.5),
        rng.random_range(1.5..ly - 1.5),
        rng.random_range(1.2..1.8),
    ];
    scene.source_azimuth_deg = rng.random_range(0.0..360.0);
    let c = scene.array_center;
    scene.noise_position = loop {
        let p = [
            rng.random_range(0.3..scene.room_dims[0] - 0.3),
            rng.random_range(0.3..scene.room_dims[1] - 0.3),
            rng.random_range(0.3..scene.room_dims[2] - 0.3),
        ];
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        if d >= 0.5 {
            break p;
        }
    };
    scene
}

/// Deterministically synthesizes `cfg.count` scenes into `out_dir` and writes
/// the manifest. Row `i` uses grid cell `i mod cells` and seed
/// [`seed_for_row`]`(cfg.seed, i)`, so rows are independent of each other and
/// of the worker count.
pub fn synthesize_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    if cfg.count == 0 {
        return Err(Error::invalid("dataset count must be positive"));
    }
    if cfg.mics == 0 || !(cfg.seconds > 0.0) {
        return Err(Error::invalid(
            "dataset needs mics >= 1 and positive duration",
        ));
    }
    let grid = scene_grid(&cfg.snr_db, &cfg.rt60_s);
    if grid.is_empty() {
        return Err(Error::invalid("SNR x RT60 grid is empty"));
    }
    let speech_files = cfg.corpus_dir.as_deref().map(list_wavs).transpose()?;
    let noise_files = cfg.noise_dir.as_deref().map(list_wavs).transpose()?;
    for sub in ["mixtures", "targets"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n = (cfg.seconds * SAMPLE_RATE as f64).round() as usize;

    let rows: Vec<Result<ManifestRow>> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let seed = seed_for_row(cfg.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (snr, rt60) = grid[i % grid.len()];
            let scene = random_scene(cfg, snr, rt60, seed, &mut rng);
            let speech = match &speech_files {
                Some(f) => corpus_clip(f, n, &mut rng)?,
                None => synthetic_speech(n, SAMPLE_RATE, &mut rng),
            };
            let noise = match &noise_files {
                Some(f) => corpus_clip(f, speech.len(), &mut rng)?,
                None => pink_noise(speech.len(), &mut rng),
            };
            let mix = mix_scene(&speech, &noise, &scene, SAMPLE_RATE)?;
            let id = format!("row{i:05}");
            let mixture_path = format!("mixtures/{id}.wav");
            let target_path = format!("targets/{id}.wav");
            write_wav(&out_dir.join(&mixture_path), &mix.mixture, cfg.format)?;
            write_wav(&out_dir.join(&target_path), &mix.target, cfg.format)?;
            Ok(ManifestRow {
                id,
                mixture_path,
                target_path,
                snr_db: snr,
                rt60_s: rt60,
                seed,
                scene,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}
