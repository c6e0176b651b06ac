use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{si_sdr, stoi};
use crate::error::{Error, Result};
use crate::io::wav::read_wav;
use crate::models::Model;
use crate::nn::ParamStore;
use crate::signal::{analyze, synthesize, ManifestRow, MultichannelWave};

/// What produces the estimate for each mixture.
#[derive(Clone, Copy)]
pub enum Enhancer<'a> {
    Network {
        model: &'a Model,
        store: &'a ParamStore,
    },
    /// The mixture itself: the "Unprocessed" row.
    Passthrough,
    /// The target itself; an upper-bound sanity row.
    OracleTarget,
}

impl Enhancer<'_> {
    pub fn label(&self) -> String {
        match self {
            Enhancer::Network { model, .. } => model.config.method_label(),
            Enhancer::Passthrough => "Unprocessed".to_string(),
            Enhancer::OracleTarget => "Oracle".to_string(),
        }
    }

    pub fn enhance(
        &self,
        mixture: &MultichannelWave,
        target: &MultichannelWave,
    ) -> Result<MultichannelWave> {
        match self {
            Enhancer::Network { model, store } => {
                let spec = analyze(mixture)?;
                let out = model.enhance(store, &spec)?;
                synthesize(&out, mixture.len(), mixture.sample_rate())
            }
            Enhancer::Passthrough => Ok(mixture.clone()),
            Enhancer::OracleTarget => Ok(target.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub snr_db: f64,
    pub rt60_s: f64,
    /// Mean over output channels, in `[-1, 1]`.
    pub stoi: f64,
    /// Mean over output channels.
    pub si_sdr_db: f64,
}

/// Means over the rows of one grid cell or marginal. `None` marks the
/// marginalized coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub snr_db: Option<f64>,
    pub rt60_s: Option<f64>,
    pub count: usize,
    pub stoi_pct: f64,
    pub si_sdr_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<MetricRow>,
    /// `(row id, error)` for rows that could not be scored.
    pub failures: Vec<(String, String)>,
}

fn summarize(rows: &[&MetricRow], snr_db: Option<f64>, rt60_s: Option<f64>) -> CellSummary {
    let n = rows.len() as f64;
    CellSummary {
        snr_db,
        rt60_s,
        count: rows.len(),
        stoi_pct: 100.0 * rows.iter().map(|r| r.stoi).sum::<f64>() / n,
        si_sdr_db: rows.iter().map(|r| r.si_sdr_db).sum::<f64>() / n,
    }
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

impl MetricReport {
    pub fn snr_values(&self) -> Vec<f64> {
        distinct(self.rows.iter().map(|r| r.snr_db))
    }

    pub fn rt60_values(&self) -> Vec<f64> {
        distinct(self.rows.iter().map(|r| r.rt60_s))
    }

    pub fn overall(&self) -> Option<CellSummary> {
        (!self.rows.is_empty())
            .then(|| summarize(&self.rows.iter().collect::<Vec<_>>(), None, None))
    }

    /// Every populated (SNR, RT60) cell, SNR-major.
    pub fn cells(&self) -> Vec<CellSummary> {
        let mut out = Vec::new();
        for snr in self.snr_values() {
            for rt in self.rt60_values() {
                let rows: Vec<&MetricRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.snr_db == snr && r.rt60_s == rt)
                    .collect();
                if !rows.is_empty() {
                    out.push(summarize(&rows, Some(snr), Some(rt)));
                }
            }
        }
        out
    }

    pub fn by_snr(&self) -> Vec<CellSummary> {
        self.snr_values()
            .into_iter()
            .map(|snr| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.snr_db == snr).collect();
                summarize(&rows, Some(snr), None)
            })
            .collect()
    }

    pub fn by_rt60(&self) -> Vec<CellSummary> {
        self.rt60_values()
            .into_iter()
            .map(|rt| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.rt60_s == rt).collect();
                summarize(&rows, None, Some(rt))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,snr_db,rt60_s,stoi_pct,si_sdr_db\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6}",
                r.id,
                r.snr_db,
                r.rt60_s,
                100.0 * r.stoi,
                r.si_sdr_db
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores one manifest row: metrics are averaged over the M channels.
fn score_row(enhancer: &Enhancer, row: &ManifestRow, base: &Path) -> Result<MetricRow> {
    let mixture = read_wav(&row.mixture(base))?;
    let target = read_wav(&row.target(base))?;
    if mixture.num_channels() != target.num_channels() || mixture.len() != target.len() {
        return Err(Error::format(
            &row.mixture(base),
            format!(
                "mixture {}x{} does not match target {}x{}",
                mixture.num_channels(),
                mixture.len(),
                target.num_channels(),
                target.len()
            ),
        ));
    }
    let estimate = enhancer.enhance(&mixture, &target)?;
    let m = target.num_channels();
    let (mut st, mut sd) = (0.0, 0.0);
    for c in 0..m {
        st += stoi(target.channel(c), estimate.channel(c), target.sample_rate())?;
        sd += si_sdr(target.channel(c), estimate.channel(c))?;
    }
    Ok(MetricRow {
        id: row.id.clone(),
        snr_db: row.snr_db,
        rt60_s: row.rt60_s,
        stoi: st / m as f64,
        si_sdr_db: sd / m as f64,
    })
}

/// Scores every row in parallel. Output order follows the manifest.
pub fn evaluate(enhancer: &Enhancer, rows: &[ManifestRow], base: &Path) -> MetricReport {
    let results: Vec<Result<MetricRow>> = rows
        .par_iter()
        .map(|r| score_row(enhancer, r, base))
        .collect();
    let mut report = MetricReport {
        method: enhancer.label(),
        ..Default::default()
    };
    for (row, res) in rows.iter().zip(results) {
        match res {
            Ok(m) => report.rows.push(m),
            Err(e) => report.failures.push((row.id.clone(), e.to_string())),
        }
    }
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    /// One entry per SNR column; `None` where the method has no rows.
    pub stoi_pct: Vec<Option<f64>>,
    pub si_sdr_db: Vec<Option<f64>>,
    pub mean_stoi_pct: f64,
    pub mean_si_sdr_db: f64,
}

/// Methods × SNR grid of mean STOI (%) and SI-SDR (dB).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub snr_db: Vec<f64>,
    pub rt60_s: Vec<f64>,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn from_reports(reports: &[&MetricReport]) -> Self {
        let snr = distinct(reports.iter().flat_map(|r| r.rows.iter().map(|x| x.snr_db)));
        let rt60 = distinct(reports.iter().flat_map(|r| r.rows.iter().map(|x| x.rt60_s)));
        let rows = reports
            .iter()
            .map(|r| {
                let marg = r.by_snr();
                let pick = |s: f64, f: fn(&CellSummary) -> f64| {
                    marg.iter().find(|c| c.snr_db == Some(s)).map(f)
                };
                let overall = r.overall();
                SummaryRow {
                    method: r.method.clone(),
                    stoi_pct: snr.iter().map(|&s| pick(s, |c| c.stoi_pct)).collect(),
                    si_sdr_db: snr.iter().map(|&s| pick(s, |c| c.si_sdr_db)).collect(),
                    mean_stoi_pct: overall.as_ref().map_or(f64::NAN, |c| c.stoi_pct),
                    mean_si_sdr_db: overall.as_ref().map_or(f64::NAN, |c| c.si_sdr_db),
                }
            })
            .collect();
        Self {
            snr_db: snr,
            rt60_s: rt60,
            rows,
        }
    }

    pub fn row(&self, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for (title, pick) in [
            (
                "STOI (%)",
                (|r: &SummaryRow| (r.stoi_pct.clone(), r.mean_stoi_pct))
                    as fn(&SummaryRow) -> (Vec<Option<f64>>, f64),
            ),
            ("SI-SDR (dB)", |r: &SummaryRow| {
                (r.si_sdr_db.clone(), r.mean_si_sdr_db)
            }),
        ] {
            let _ = write!(s, "| {title} |");
            for snr in &self.snr_db {
                let _ = write!(s, " {snr} dB |");
            }
            s.push_str(" Avg. |\n|---|");
            s.push_str(&"---|".repeat(self.snr_db.len() + 1));
            s.push('\n');
            for r in &self.rows {
                let (vals, mean) = pick(r);
                let _ = write!(s, "| {} |", r.method);
                for v in vals {
                    match v {
                        Some(v) => {
                            let _ = write!(s, " {v:.2} |");
                        }
                        None => s.push_str(" - |"),
                    }
                }
                let _ = writeln!(s, " {mean:.2} |");
            }
            s.push('\n');
        }
        s
    }
}
