//! Singular-value analysis of trained adapter factors.
//!
//! For every `(layer, target)` adapter the report carries the full
//! spectra of `A`, `B`, and the scaled product `alpha * A * B`, plus
//! effective-rank counts. Grids export the spectra as rectangular tables
//! (singular-value index by layer/target column) for external
//! heat-mapping.

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::model::{adapter_delta, LoraAdapter, Target};
use crate::params::ParamStore;
use crate::svd::singular_values;

pub const DEFAULT_EFFECTIVE_RANK_TAU: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct AdapterSvd {
    pub layer: usize,
    pub target: Target,
    pub rank: usize,
    pub a_svals: Vec<f64>,
    pub b_svals: Vec<f64>,
    /// Spectrum of the effective update `alpha * A * B`.
    pub ab_svals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SvdReport {
    pub entries: Vec<AdapterSvd>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    NoAdapters,
    EmptyReport,
    Io(String),
    Parse { line: usize, message: String },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::NoAdapters => write!(f, "no adapters found in parameter store"),
            AnalysisError::EmptyReport => write!(f, "empty SVD report"),
            AnalysisError::Io(e) => write!(f, "grid file i/o: {e}"),
            AnalysisError::Parse { line, message } => write!(f, "grid file line {line}: {message}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

fn parse_adapter_name(name: &str) -> Option<(usize, Target)> {
    // enc.{layer}.{target}.lora_a
    let mut parts = name.split('.');
    if parts.next() != Some("enc") {
        return None;
    }
    let layer: usize = parts.next()?.parse().ok()?;
    let target = match parts.next()? {
        "q" => Target::Query,
        "k" => Target::Key,
        "v" => Target::Value,
        "out" => Target::OutProj,
        _ => return None,
    };
    if parts.next() != Some("lora_a") || parts.next().is_some() {
        return None;
    }
    Some((layer, target))
}

/// Extract every adapter pair from a parameter store by name.
pub fn adapters_in_store(store: &ParamStore, alpha: f64) -> Result<Vec<LoraAdapter>, AnalysisError> {
    let mut found: Vec<(usize, Target)> = store
        .iter()
        .filter_map(|(name, _)| parse_adapter_name(name))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(AnalysisError::NoAdapters);
    }
    let mut out = Vec::with_capacity(found.len());
    for (layer, target) in found {
        let a = store
            .tensor(&format!("enc.{layer}.{target}.lora_a"))
            .expect("matched by scan")
            .clone();
        let b = store
            .tensor(&format!("enc.{layer}.{target}.lora_b"))
            .map_err(|e| AnalysisError::Parse {
                line: 0,
                message: e.to_string(),
            })?
            .clone();
        let rank = a.cols();
        out.push(LoraAdapter {
            a,
            b,
            rank,
            alpha,
            target,
            layer_index: layer,
        });
    }
    Ok(out)
}

/// Full SVD of every adapter's factors and scaled product, ordered by
/// (layer, target).
pub fn svd_adapters(store: &ParamStore, alpha: f64) -> Result<SvdReport, AnalysisError> {
    let adapters = adapters_in_store(store, alpha)?;
    let entries = adapters
        .iter()
        .map(|ad| AdapterSvd {
            layer: ad.layer_index,
            target: ad.target,
            rank: ad.rank,
            a_svals: singular_values(&ad.a),
            b_svals: singular_values(&ad.b),
            ab_svals: singular_values(&adapter_delta(ad)),
        })
        .collect();
    Ok(SvdReport { entries })
}

/// Number of singular values at or above `tau` times the largest; 0 for
/// an all-zero spectrum.
pub fn effective_rank(svals: &[f64], tau: f64) -> usize {
    let top = svals.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s >= tau * top).count()
}

/// Per-adapter effective ranks of (A, B, alpha*A*B) at threshold `tau`.
pub fn effective_rank_summary(report: &SvdReport, tau: f64) -> Vec<(usize, Target, usize, usize, usize)> {
    report
        .entries
        .iter()
        .map(|e| {
            (
                e.layer,
                e.target,
                effective_rank(&e.a_svals, tau),
                effective_rank(&e.b_svals, tau),
                effective_rank(&e.ab_svals, tau),
            )
        })
        .collect()
}

/// Rectangular grids, one per factor kind: `values[factor][i][col]` is
/// the i-th singular value of the factor at column `col` (columns ordered
/// by layer then target), zero-padded to the maximal adapter rank.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrids {
    pub rows: usize,
    pub columns: Vec<(usize, Target)>,
    /// Factor kinds in fixed order: A, B, AB.
    pub values: [Vec<Vec<f64>>; 3],
}

pub const FACTOR_NAMES: [&str; 3] = ["A", "B", "AB"];

/// Flatten a report into export-ready grids. The product spectrum is
/// truncated to the adapter rank (entries beyond it are zero for a
/// rank-r product up to rounding).
pub fn heatmap_grids(report: &SvdReport) -> Result<HeatmapGrids, AnalysisError> {
    if report.entries.is_empty() {
        return Err(AnalysisError::EmptyReport);
    }
    let rows = report.entries.iter().map(|e| e.rank).max().unwrap();
    let columns: Vec<(usize, Target)> = report.entries.iter().map(|e| (e.layer, e.target)).collect();
    let grid_of = |pick: fn(&AdapterSvd) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|i| {
                report
                    .entries
                    .iter()
                    .map(|e| pick(e).get(i).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect()
    };
    Ok(HeatmapGrids {
        rows,
        columns,
        values: [
            grid_of(|e| &e.a_svals),
            grid_of(|e| &e.b_svals),
            grid_of(|e| &e.ab_svals),
        ],
    })
}

impl HeatmapGrids {
    /// Tab-separated text with one block per factor kind. Numbers use the
    /// shortest round-trip float form, so import reproduces the exact
    /// values.
    pub fn write_file(&self, path: &Path) -> Result<(), AnalysisError> {
        let file = std::fs::File::create(path).map_err(|e| AnalysisError::Io(e.to_string()))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| AnalysisError::Io(e.to_string());
        let cols: Vec<String> = self
            .columns
            .iter()
            .map(|(l, t)| format!("{l}.{t}"))
            .collect();
        writeln!(w, "rows\t{}", self.rows).map_err(io)?;
        writeln!(w, "columns\t{}", cols.join("\t")).map_err(io)?;
        for (f, grid) in self.values.iter().enumerate() {
            writeln!(w, "factor\t{}", FACTOR_NAMES[f]).map_err(io)?;
            for (i, row) in grid.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{i}\t{}", cells.join("\t")).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<HeatmapGrids, AnalysisError> {
        let text = std::fs::read_to_string(path).map_err(|e| AnalysisError::Io(e.to_string()))?;
        let parse_err = |line: usize, message: &str| AnalysisError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate();

        let (ln, rows_line) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
        let rows: usize = rows_line
            .strip_prefix("rows\t")
            .ok_or_else(|| parse_err(ln + 1, "expected `rows`"))?
            .parse()
            .map_err(|_| parse_err(ln + 1, "bad row count"))?;

        let (ln, cols_line) = lines.next().ok_or_else(|| parse_err(2, "missing columns"))?;
        let cols_txt = cols_line
            .strip_prefix("columns\t")
            .ok_or_else(|| parse_err(ln + 1, "expected `columns`"))?;
        let mut columns = Vec::new();
        for c in cols_txt.split('\t') {
            let (l, t) = c
                .split_once('.')
                .ok_or_else(|| parse_err(ln + 1, "bad column key"))?;
            let layer: usize = l.parse().map_err(|_| parse_err(ln + 1, "bad layer"))?;
            let target = match t {
                "q" => Target::Query,
                "k" => Target::Key,
                "v" => Target::Value,
                "out" => Target::OutProj,
                _ => return Err(parse_err(ln + 1, "bad target")),
            };
            columns.push((layer, target));
        }

        let mut values: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut current: Option<usize> = None;
        for (ln, line) in lines {
            if let Some(name) = line.strip_prefix("factor\t") {
                current = Some(
                    FACTOR_NAMES
                        .iter()
                        .position(|&f| f == name)
                        .ok_or_else(|| parse_err(ln + 1, "unknown factor"))?,
                );
                continue;
            }
            let f = current.ok_or_else(|| parse_err(ln + 1, "row before factor header"))?;
            let mut cells = line.split('\t');
            let _index = cells.next();
            let row: Vec<f64> = cells
                .map(|c| c.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(ln + 1, "bad float"))?;
            if row.len() != columns.len() {
                return Err(parse_err(ln + 1, "row width mismatch"));
            }
            values[f].push(row);
        }
        for grid in &values {
            if grid.len() != rows {
                return Err(parse_err(0, "grid height mismatch"));
            }
        }
        Ok(HeatmapGrids {
            rows,
            columns,
            values,
        })
    }
}
