//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]` and
//! `[split]` sections on top of a model preset, plus `section.key=value`
//! overrides. Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::signal::{DatasetConfig, ManifestRow};
use crate::training::TrainConfig;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const SEED_FILE: &str = "seed.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Full,
    Dpcrn,
    Tiny,
    Desk,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full(),
            Preset::Dpcrn => ModelConfig::dpcrn(),
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

/// Fractions of a manifest held out for validation and test; the rest
/// trains. Rows are assigned in manifest order: train, then validation,
/// then test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

pub struct Split<'a> {
    pub train: &'a [ManifestRow],
    pub val: &'a [ManifestRow],
    pub test: &'a [ManifestRow],
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.val_fraction)
            || !ok(self.test_fraction)
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return Err(Error::config(
                "split fractions must be in [0, 1) and sum to less than 1",
            ));
        }
        Ok(())
    }

    /// Non-empty validation and test parts whenever the fractions are
    /// positive and there are at least three rows.
    pub fn apply<'a>(&self, rows: &'a [ManifestRow]) -> Split<'a> {
        let n = rows.len();
        let count = |f: f64| {
            if f > 0.0 && n >= 3 {
                ((f * n as f64).round() as usize).max(1)
            } else {
                0
            }
        };
        let test = count(self.test_fraction);
        let val = count(self.val_fraction).min(n.saturating_sub(test + 1));
        let train = n - val - test;
        Split {
            train: &rows[..train],
            val: &rows[train..train + val],
            test: &rows[train + val..],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed for data synthesis, initialization and training order.
    pub seed: u64,
    /// Base model configuration that `[model]` keys override.
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Full)
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses `section.key=value`; the value is read as a TOML literal, or as a
/// bare string when it is not one.
pub fn parse_override(text: &str) -> Result<Table> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {text:?} is not key=value")))?;
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override {text:?} has an empty key")));
    }
    let mut v = value;
    for k in keys.iter().rev() {
        let mut t = Table::new();
        t.insert(k.to_string(), v);
        v = Value::Table(t);
    }
    match v {
        Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let model = preset.config();
        let data = DatasetConfig {
            mics: model.mics,
            ..DatasetConfig::default()
        };
        let train = match preset {
            // 1 s windows keep attention activations within a few GB; one
            // window per step at 3e-3 gave the lowest validation loss.
            Preset::Desk => TrainConfig {
                lr: 3e-3,
                epochs: 5,
                batch_size: 1,
                segment_seconds: 1.0,
                ..TrainConfig::default()
            },
            _ => TrainConfig::default(),
        };
        Self {
            seed: 0,
            preset,
            model,
            train,
            data,
            split: SplitConfig::default(),
        }
    }

    /// File contents (may be empty) merged over the preset, then overrides.
    pub fn from_toml(text: &str, overrides: &[Table]) -> Result<Self> {
        let mut user: Table =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            merge(&mut user, o);
        }
        let preset: Preset = match user.get("preset") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut merged =
            Table::try_from(Self::for_preset(preset)).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, &user);
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        // Section seeds are derived; an echoed config carries them equal to the root.
        for section in ["train", "data"] {
            if let Some(v) = user.get(section).and_then(|s| s.get("seed")) {
                if v.as_integer() != Some(cfg.seed as i64) {
                    return Err(Error::config(format!(
                        "{section}.seed is derived; set the top-level seed instead"
                    )));
                }
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.data.seed = cfg.seed;
        if user.get("data").and_then(|d| d.get("mics")).is_none() {
            cfg.data.mics = cfg.model.mics;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[Table]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(format!(
                "seed {} does not fit a TOML integer",
                self.seed
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        let d = &self.data;
        if d.count == 0 || !(d.seconds > 0.0) || d.snr_db.is_empty() || d.rt60_s.is_empty() {
            return Err(Error::config(
                "data needs count >= 1, seconds > 0 and non-empty snr_db and rt60_s",
            ));
        }
        if self.data.mics != self.model.mics {
            return Err(Error::config(format!(
                "data.mics = {} but model.mics = {}",
                self.data.mics, self.model.mics
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes `effective_config.toml` and `seed.txt` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (EFFECTIVE_CONFIG_FILE, self.to_toml()),
            (SEED_FILE, format!("{}\n", self.seed)),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
