use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{Manifest, SeedRecord};
use super::{io_err, ExperimentError, Result};
use crate::aggregation::AggregationStrategy;
use crate::train::mean_std;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

/// Per-seed records reduced to mean and standard deviation per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub strategy: AggregationStrategy,
    pub depth: usize,
    pub length: usize,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl EvalReport {
    pub fn metric(&self, key: &str) -> Option<&MetricSummary> {
        self.metrics.get(key)
    }
}

fn flatten(r: &SeedRecord) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("train.final_loss".to_string(), r.final_train_loss);
    if let Some(o) = &r.open_world {
        m.insert("open_world.base_acc".into(), o.base_acc);
        m.insert("open_world.new_acc".into(), o.new_acc);
        m.insert("open_world.hm".into(), o.hm);
        m.insert("open_world.open_world_acc".into(), o.open_world_acc);
        m.insert("open_world.closed_base_acc".into(), o.closed_base_acc);
        m.insert("open_world.closed_new_acc".into(), o.closed_new_acc);
    }
    if let Some(c) = &r.cross_dataset {
        m.insert("cross_dataset.source".into(), c.source_acc);
        for (k, v) in &c.targets {
            m.insert(format!("cross_dataset.target.{k}"), *v);
        }
        m.insert("cross_dataset.average".into(), c.average);
    }
    if let Some(d) = &r.domain {
        m.insert("domain.source".into(), d.source_acc);
        for (k, v) in &d.variants {
            m.insert(format!("domain.variant.{k}"), *v);
        }
        m.insert("domain.ood_average".into(), d.ood_average);
    }
    if let Some(c) = &r.corollary {
        m.insert("corollary.loss_independent".into(), c.loss_independent);
        m.insert("corollary.loss_bmip_step0".into(), c.loss_bmip_step0);
        m.insert("corollary.loss_bmip_final".into(), c.loss_bmip_final);
    }
    m
}

/// Mean and standard deviation of every metric across the seed records.
pub fn summarize(records: &[SeedRecord]) -> Result<EvalReport> {
    let first = records
        .first()
        .ok_or_else(|| ExperimentError::Report("no seed records to summarise".into()))?;
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.config_digest != first.config_digest {
            return Err(ExperimentError::Report(format!(
                "seed {} was produced by config {}, not {}",
                r.seed, r.config_digest, first.config_digest
            )));
        }
        for (k, v) in flatten(r) {
            columns.entry(k).or_default().push(v);
        }
    }
    let metrics = columns
        .into_iter()
        .map(|(k, values)| {
            let (mean, std) = mean_std(&values);
            (k, MetricSummary { mean, std, values })
        })
        .collect();
    Ok(EvalReport {
        config_digest: first.config_digest.clone(),
        strategy: first.strategy,
        depth: first.depth,
        length: first.length,
        seeds: records.iter().map(|r| r.seed).collect(),
        metrics,
    })
}

/// Percent with two decimals, halves rounded up. The small offset keeps
/// decimal halves such as 0.12345 (stored just below the half) rounding up.
pub fn fmt_pct(x: f64) -> String {
    let hundredths = (x * 10_000.0 + 0.5 + 1e-7).floor();
    format!("{:.2}", hundredths / 100.0)
}

fn cell(m: Option<&MetricSummary>) -> String {
    match m {
        Some(m) => format!("{} ± {}", fmt_pct(m.mean), fmt_pct(m.std)),
        None => "-".to_string(),
    }
}

fn loss_cell(m: Option<&MetricSummary>) -> String {
    match m {
        Some(m) => format!("{:.6} ± {:.6}", m.mean, m.std),
        None => "-".to_string(),
    }
}

fn table(out: &mut String, headers: &[String], row: &[String]) {
    let widths: Vec<usize> = headers
        .iter()
        .zip(row)
        .map(|(h, c)| h.chars().count().max(c.chars().count()))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "  {}", line(headers));
    let _ = writeln!(out, "  {}", line(row));
}

fn group(report: &EvalReport, prefix: &str) -> Vec<(String, String)> {
    report
        .metrics
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|name| (name.to_string(), cell(Some(v)))))
        .collect()
}

/// Aligned text rendering; every number is a rounded mean or standard deviation.
pub fn render_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(|x| x.to_string()).collect();
    let _ = writeln!(
        s,
        "{} (J={}, b={})  config {}  seeds {}",
        report.strategy.label(),
        report.depth,
        report.length,
        &report.config_digest[..12.min(report.config_digest.len())],
        seeds.join(",")
    );
    let m = |k: &str| report.metric(k);
    if m("open_world.hm").is_some() {
        let _ = writeln!(s, "\nOpen-world generalization (accuracy %, mean ± std)");
        table(
            &mut s,
            &["Base".into(), "New".into(), "HM".into(), "Open-world".into()],
            &[
                cell(m("open_world.base_acc")),
                cell(m("open_world.new_acc")),
                cell(m("open_world.hm")),
                cell(m("open_world.open_world_acc")),
            ],
        );
    }
    if m("cross_dataset.source").is_some() {
        let _ = writeln!(s, "\nCross-dataset transfer (accuracy %)");
        let targets = group(report, "cross_dataset.target.");
        let mut headers = vec!["Source".to_string()];
        let mut row = vec![cell(m("cross_dataset.source"))];
        for (name, c) in targets {
            headers.push(name);
            row.push(c);
        }
        headers.push("Average".into());
        row.push(cell(m("cross_dataset.average")));
        table(&mut s, &headers, &row);
    }
    if m("domain.source").is_some() {
        let _ = writeln!(s, "\nDomain generalization (accuracy %)");
        let variants = group(report, "domain.variant.");
        let mut headers = vec!["Source".to_string()];
        let mut row = vec![cell(m("domain.source"))];
        for (name, c) in variants {
            headers.push(name);
            row.push(c);
        }
        headers.push("OOD Average".into());
        row.push(cell(m("domain.ood_average")));
        table(&mut s, &headers, &row);
    }
    if m("corollary.loss_independent").is_some() {
        let _ = writeln!(s, "\nWarm-started gated training (training loss)");
        table(
            &mut s,
            &["Independent".into(), "Gated step 0".into(), "Gated final".into()],
            &[
                loss_cell(m("corollary.loss_independent")),
                loss_cell(m("corollary.loss_bmip_step0")),
                loss_cell(m("corollary.loss_bmip_final")),
            ],
        );
    }
    s
}

/// Whether one strategy beats another on a metric by more than a pooled standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub metric: String,
    pub strategy: AggregationStrategy,
    pub against: AggregationStrategy,
    pub mean: f64,
    pub against_mean: f64,
    pub margin: f64,
    /// `sqrt(s₁²/n₁ + s₂²/n₂)`
    pub pooled_se: f64,
    pub met: bool,
}

pub fn directional_check(metric: &str, a: &EvalReport, b: &EvalReport) -> Option<DirectionalCheck> {
    let (x, y) = (a.metric(metric)?, b.metric(metric)?);
    let pooled_se = (x.std.powi(2) / x.values.len() as f64 + y.std.powi(2) / y.values.len() as f64).sqrt();
    let margin = x.mean - y.mean;
    Some(DirectionalCheck {
        metric: metric.to_string(),
        strategy: a.strategy,
        against: b.strategy,
        mean: x.mean,
        against_mean: y.mean,
        margin,
        pooled_se,
        met: margin > pooled_se,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<EvalReport>,
    pub directional: Vec<DirectionalCheck>,
    /// True when an expected ordering was not observed.
    pub flagged: bool,
}

/// One row per configuration, in the layout of an aggregation ablation table.
pub fn render_sweep(sweep: &SweepReport) -> String {
    let mut s = String::new();
    let headers = ["Method", "J", "b", "Base", "New", "HM"];
    let rows: Vec<[String; 6]> = sweep
        .rows
        .iter()
        .map(|r| {
            [
                r.strategy.label().to_string(),
                r.depth.to_string(),
                r.length.to_string(),
                cell(r.metric("open_world.base_acc")),
                cell(r.metric("open_world.new_acc")),
                cell(r.metric("open_world.hm")),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w = widths[i];
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(s, "Aggregation ablation (open-world accuracy %, mean ± std)");
    let _ = writeln!(s, "{}", fmt_row(headers.to_vec()));
    for r in &rows {
        let _ = writeln!(s, "{}", fmt_row(r.iter().map(String::as_str).collect()));
    }
    if !sweep.directional.is_empty() {
        let _ = writeln!(s);
        for d in &sweep.directional {
            let _ = writeln!(
                s,
                "{} {} vs {}: margin {} pts, pooled SE {} pts -> {}",
                d.metric,
                d.strategy.label(),
                d.against.label(),
                fmt_pct(d.margin),
                fmt_pct(d.pooled_se),
                if d.met { "met" } else { "NOT MET" }
            );
        }
    }
    if sweep.flagged {
        let _ = writeln!(s, "\nFLAGGED: expected ordering not observed at this scale");
    }
    s
}

/// Manifest and per-seed records of a run directory, digest-checked.
pub fn load_run(dir: &Path) -> Result<(Manifest, Vec<SeedRecord>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    let cfg_path = dir.join("config.toml");
    let cfg = super::ExperimentConfig::load(&cfg_path)?;
    if cfg.digest() != manifest.config_digest {
        return Err(ExperimentError::Digest {
            path: cfg_path,
            expected: manifest.config_digest.clone(),
            found: cfg.digest(),
        });
    }
    let mut records = Vec::new();
    for s in manifest.seeds.iter().filter(|s| s.ok) {
        let p = dir.join(format!("seed-{}", s.seed)).join("metrics.json");
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let r: SeedRecord = serde_json::from_str(&text).map_err(|e| io_err(&p, e))?;
        if r.config_digest != manifest.config_digest {
            return Err(ExperimentError::Digest {
                path: p,
                expected: manifest.config_digest.clone(),
                found: r.config_digest,
            });
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(ExperimentError::Report(format!(
            "{}: no completed seeds to report",
            dir.display()
        )));
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::harmonic_mean;

    #[test]
    fn pct_rounding() {
        assert_eq!(fmt_pct(harmonic_mean(0.8, 0.7)), "74.67");
        assert_eq!(fmt_pct(0.0), "0.00");
        assert_eq!(fmt_pct(0.12345), "12.35");
        assert_eq!(fmt_pct(1.0), "100.00");
    }
}
