//! Report stage: merge RunRecords from several run directories into one
//! comparison table plus the standard pictures (exclusivity versus mask
//! rate, clean/triggered entropy histograms).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use crate::plot;
use crate::stages::RunRecord;

/// One row per run directory; metrics of all stage records found in the
/// directory are folded together (later stages never overwrite earlier
/// populated values with n/a).
#[derive(Debug)]
pub struct ReportRow {
    pub name: String,
    pub cda: Option<f64>,
    pub asr: Option<f64>,
    pub excl: Option<f64>,
    pub nc_index: Option<f64>,
    pub strip_overlap: Option<f64>,
    pub mask_rate: Option<f64>,
    pub strip_verdict: Option<PathBuf>,
}

fn fold(dst: &mut Option<f64>, src: Option<f64>) {
    if dst.is_none() {
        *dst = src;
    }
}

/// Collects every `run.json` under `dir` (the directory itself plus one
/// level of children, so a parent directory of runs works too).
fn record_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let direct = dir.join("run.json");
    if direct.exists() {
        found.push(direct);
    }
    if dir.is_dir() {
        let mut children: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("list {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path().join("run.json"))
            .filter(|p| p.exists())
            .collect();
        children.sort();
        found.extend(children);
    }
    Ok(found)
}

pub fn gather_rows(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let paths = record_paths(dir)?;
        if paths.is_empty() {
            bail!("{}: no run.json found", dir.display());
        }
        // Group records by their containing directory: one row per run dir.
        let mut by_dir: Vec<(PathBuf, Vec<RunRecord>)> = Vec::new();
        for path in paths {
            let record = RunRecord::load(&path)?;
            let parent = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            match by_dir.iter_mut().find(|(d, _)| *d == parent) {
                Some((_, list)) => list.push(record),
                None => by_dir.push((parent, vec![record])),
            }
        }
        for (run_dir, records) in by_dir {
            let name = run_dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| run_dir.display().to_string());
            let mut row = ReportRow {
                name,
                cda: None,
                asr: None,
                excl: None,
                nc_index: None,
                strip_overlap: None,
                mask_rate: None,
                strip_verdict: None,
            };
            for record in &records {
                fold(&mut row.cda, record.metrics.cda);
                fold(&mut row.asr, record.metrics.asr);
                fold(&mut row.excl, record.metrics.excl);
                fold(&mut row.nc_index, record.metrics.nc_index);
                fold(&mut row.strip_overlap, record.metrics.strip_overlap);
                if row.mask_rate.is_none() {
                    row.mask_rate = record
                        .params
                        .get("mask_rate")
                        .and_then(serde_json::Value::as_f64);
                }
                if row.strip_verdict.is_none() {
                    if let Some(p) = record.artifacts.get("strip_verdict") {
                        let p = if p.is_absolute() {
                            p.clone()
                        } else {
                            run_dir.join(p)
                        };
                        row.strip_verdict = Some(p);
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".to_string(),
    }
}

pub fn write_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let rows = gather_rows(run_dirs)?;
    if rows.is_empty() {
        bail!("no run records found in the given directories");
    }
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create report dir {}", out_dir.display()))?;
    let mut produced = Vec::new();

    let mut table = String::new();
    table.push_str("| run | CDA | ASR | Excl | NC | STRIP |\n");
    table.push_str("|---|---|---|---|---|---|\n");
    for row in &rows {
        table.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            row.name,
            cell(row.cda),
            cell(row.asr),
            cell(row.excl),
            cell(row.nc_index),
            cell(row.strip_overlap),
        ));
    }
    let table_path = out_dir.join("report.md");
    fs::write(&table_path, &table)?;
    produced.push(table_path);

    // Exclusivity versus mask rate, when at least two runs carry both.
    let sweep: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.mask_rate?, r.excl?)))
        .collect();
    if sweep.len() >= 2 {
        let path = out_dir.join("excl_vs_mask_rate.png");
        plot::write_line_plot(&sweep, &path)?;
        produced.push(path);
    }

    // Entropy histograms for every run that kept its screening verdict.
    #[derive(Deserialize)]
    struct Entropies {
        clean_entropies: Vec<f64>,
        trigger_entropies: Vec<f64>,
    }
    for row in &rows {
        if let Some(verdict_path) = &row.strip_verdict {
            let text = fs::read_to_string(verdict_path)
                .with_context(|| format!("read {}", verdict_path.display()))?;
            let v: Entropies = serde_json::from_str(&text)
                .with_context(|| format!("parse {}", verdict_path.display()))?;
            let path = out_dir.join(format!("entropy_hist_{}.png", row.name));
            plot::write_dual_histogram(&v.clean_entropies, &v.trigger_entropies, 20, &path)?;
            produced.push(path);
        }
    }
    Ok(produced)
}
