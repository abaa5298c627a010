//! Post-processing of finished runs: seed-aggregated plot tables and the
//! flip-detection diagnosis of a trained model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_pairs, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{flip_detection, FlipDetection};
use crate::metrics::mean_trust;
use crate::model::VariantKind;
use crate::train::load_checkpoint;

/// Metric columns of the results table that get a plot file each.
pub const PLOT_METRICS: [&str; 6] = [
    "mig",
    "r2",
    "kappa",
    "p_s_below_1",
    "flip_detection_precision",
    "flip_detection_recall",
];

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub variant: String,
    pub noise_kind: String,
    pub noise_level: f64,
    pub seed: u64,
    pub ok: bool,
    pub metrics: BTreeMap<String, Option<f64>>,
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(format!("missing column {name}")))
    };
    let (c_ds, c_var, c_kind, c_level, c_seed, c_status) = (
        col("dataset")?,
        col("variant")?,
        col("noise_kind")?,
        col("noise_level")?,
        col("seed")?,
        col("status")?,
    );
    let metric_cols: Vec<(String, usize)> = PLOT_METRICS
        .iter()
        .filter_map(|m| {
            headers
                .iter()
                .position(|h| h == *m)
                .map(|c| (m.to_string(), c))
        })
        .collect();
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let line = k + 2;
        let num = |c: usize| -> Result<Option<f64>> {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() || s == "NA" {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|e| parse_err(format!("line {line}: {e}")))
            }
        };
        let mut metrics = BTreeMap::new();
        for (name, c) in &metric_cols {
            metrics.insert(name.clone(), num(*c)?);
        }
        rows.push(ResultRow {
            dataset: rec[c_ds].to_string(),
            variant: rec[c_var].to_string(),
            noise_kind: rec[c_kind].to_string(),
            noise_level: num(c_level)?
                .ok_or_else(|| parse_err(format!("line {line}: missing noise level")))?,
            seed: rec[c_seed]
                .parse()
                .map_err(|e| parse_err(format!("line {line}: {e}")))?,
            ok: &rec[c_status] == "ok",
            metrics,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlotSummary {
    pub files: Vec<PathBuf>,
    /// `(file, noise level, variant)` entries emitted as gaps.
    pub gaps: Vec<String>,
}

/// Writes one table per (dataset, metric) with columns
/// `noise_kind,noise_level,variant,median,q25,q75,n_seeds` and, when the
/// run directory holds trust histograms, one histogram table per noise level.
/// Grid points without any value are written with `NA` statistics; those
/// without a completed cell are also reported as gaps.
pub fn emit_plotdata(results: &Path, out_dir: &Path) -> Result<PlotSummary> {
    let rows = read_results(results)?;
    std::fs::create_dir_all(out_dir)?;
    let mut summary = PlotSummary::default();
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    for dataset in datasets {
        let rows: Vec<&ResultRow> = rows.iter().filter(|r| r.dataset == dataset).collect();
        let mut points: Vec<(String, u64, String)> = Vec::new();
        for r in &rows {
            let key = (
                r.noise_kind.clone(),
                r.noise_level.to_bits(),
                r.variant.clone(),
            );
            if !points.contains(&key) {
                points.push(key);
            }
        }
        for metric in PLOT_METRICS {
            // Variants that never report this metric (e.g. trust statistics of
            // models without trust) are left out rather than marked as gaps.
            let reporting: BTreeSet<&str> = rows
                .iter()
                .filter(|r| r.metrics.get(metric).copied().flatten().is_some())
                .map(|r| r.variant.as_str())
                .collect();
            if reporting.is_empty() {
                continue;
            }
            let name = format!("{dataset}_{metric}.csv");
            let mut text = String::from("noise_kind,noise_level,variant,median,q25,q75,n_seeds\n");
            for (kind, level_bits, variant) in &points {
                if !reporting.contains(variant.as_str()) {
                    continue;
                }
                let level = f64::from_bits(*level_bits);
                let completed: Vec<&&ResultRow> = rows
                    .iter()
                    .filter(|r| {
                        &r.noise_kind == kind
                            && r.noise_level.to_bits() == *level_bits
                            && &r.variant == variant
                    })
                    .filter(|r| r.ok)
                    .collect();
                let mut values: Vec<f64> = completed
                    .iter()
                    .filter_map(|r| r.metrics.get(metric).copied().flatten())
                    .collect();
                if values.is_empty() {
                    // Completed cells with an undefined metric (e.g. recall
                    // without flips) are not gaps.
                    if completed.is_empty() {
                        log::warn!("{name}: no completed cells for {variant} at {kind} {level}");
                        summary
                            .gaps
                            .push(format!("{name}: {variant} at {kind} {level}"));
                    }
                    let _ = writeln!(text, "{kind},{level},{variant},NA,NA,NA,0");
                    continue;
                }
                values.sort_by(f64::total_cmp);
                let _ = writeln!(
                    text,
                    "{kind},{level},{variant},{},{},{},{}",
                    quantile(&values, 0.5),
                    quantile(&values, 0.25),
                    quantile(&values, 0.75),
                    values.len()
                );
            }
            let path = out_dir.join(&name);
            std::fs::write(&path, text)?;
            summary.files.push(path);
        }
    }
    if let Some(cells) = results.parent().map(|p| p.join("cells")) {
        summary
            .files
            .extend(emit_trust_histograms(&cells, out_dir)?);
    }
    Ok(summary)
}

/// Sums the per-seed trust histograms of each noise level into
/// `trust_hist_<kind>_<level>.csv` with log-scale helper columns.
fn emit_trust_histograms(cells: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<String, Vec<(f64, f64, u64)>> = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(cells) else {
        return Ok(Vec::new());
    };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for dir in dirs {
        let hist = dir.join("trust_hist.csv");
        let Some(name) = dir.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !hist.is_file() {
            continue;
        }
        // Directory names are `<variant>_<kind>_<level>_s<seed>`.
        let parts: Vec<&str> = name.rsplitn(4, '_').collect();
        if parts.len() != 4 {
            continue;
        }
        let key = format!("{}_{}", parts[2], parts[1]);
        let mut reader = csv::Reader::from_path(&hist).map_err(|e| Error::Parse {
            path: hist.clone(),
            message: e.to_string(),
        })?;
        let bins = groups.entry(key).or_default();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                path: hist.clone(),
                message: e.to_string(),
            })?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| Error::Parse {
                        path: hist.clone(),
                        message: e.to_string(),
                    })
            };
            let (l, r, c) = (parse(0)?, parse(1)?, parse(2)? as u64);
            match bins.get_mut(k) {
                Some(bin) => bin.2 += c,
                None => bins.push((l, r, c)),
            }
        }
    }
    let mut files = Vec::new();
    for (key, bins) in groups {
        let total: u64 = bins.iter().map(|b| b.2).sum();
        let mut text =
            String::from("bin_left,bin_right,bin_center,log10_center,count,density_per_decade\n");
        for (l, r, c) in bins {
            let center = (l * r).sqrt();
            let width = (r / l).log10();
            let density = if total == 0 {
                0.0
            } else {
                c as f64 / total as f64 / width
            };
            let _ = writeln!(text, "{l},{r},{center},{},{c},{density}", center.log10());
        }
        let path = out_dir.join(format!("trust_hist_{key}.csv"));
        std::fs::write(&path, text)?;
        files.push(path);
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub pairs: usize,
    pub detection: FlipDetection,
}

impl Diagnosis {
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.4}"));
        format!(
            "pairs: {}\nflipped: {}\nflagged (mean s < 1): {}\nprecision: {}\nrecall: {}\nfraction_below_1: {:.4}\n",
            self.pairs,
            self.detection.flipped,
            self.detection.flagged,
            fmt(self.detection.precision),
            fmt(self.detection.recall),
            self.detection.fraction_below_1
        )
    }
}

/// Flags pairs whose posterior mean trust is below 1 and scores the flags
/// against the recorded flips.
pub fn diagnose_trust(checkpoint: &Path, pairs: &Path, dataset: &Path) -> Result<Diagnosis> {
    let params = load_checkpoint(checkpoint, None)?;
    if params.variant != VariantKind::Rovae {
        return Err(Error::UnsupportedVariant {
            found: params.variant.to_string(),
            reason: "only ROVAE checkpoints carry a trust posterior".into(),
        });
    }
    let pairs = load_pairs(pairs)?;
    let dataset = Dataset::load(dataset)?;
    let mean_s = mean_trust(&params, &dataset, &pairs)?;
    Ok(Diagnosis {
        pairs: pairs.len(),
        detection: flip_detection(&mean_s, &pairs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_edges() {
        assert_eq!(quantile(&[3.0], 0.25), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
    }
}
