//! Rank diagnostics, comparison mismatches and rank sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{knn_complete, singular_values, svd_complete, truncate_rank, KnnConfig};
use crate::comparisons::{extract_comparisons, ComparisonSet};
use crate::error::{Error, Result};
use crate::model::{recover_matrix, Hyperparams, ModelParams};
use crate::optimizer::{train, TrainOptions};
use crate::ratings::RatingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularDiagnostics {
    /// The `r`-th largest singular value.
    pub sigma_r_max: f64,
    /// `sigma_r_max` divided by the largest singular value.
    pub sigma_ratio: f64,
}

/// `r`-th largest singular value of `matrix` and its ratio to the largest.
/// The ratio of an all-zero matrix is reported as 0.
pub fn singular_diagnostics(matrix: &DMatrix<f64>, r: usize) -> Result<SingularDiagnostics> {
    let max = matrix.nrows().min(matrix.ncols());
    if r == 0 || r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let sigma = singular_values(matrix);
    let sigma_r_max = sigma[r - 1];
    let sigma_ratio = if sigma[0] > 0.0 {
        (sigma_r_max / sigma[0]).clamp(0.0, 1.0)
    } else {
        warn!("singular diagnostics of a zero matrix; ratio set to 0");
        0.0
    };
    Ok(SingularDiagnostics {
        sigma_r_max,
        sigma_ratio,
    })
}

/// Number of comparisons whose orientation `recovered` violates. Ties count
/// as violations.
pub fn count_mismatches(recovered: &DMatrix<f64>, set: &ComparisonSet) -> Result<usize> {
    if recovered.shape() != (set.num_users(), set.num_items()) {
        return Err(Error::DimensionMismatch(format!(
            "recovered matrix is {}x{} but comparisons are over {}x{}",
            recovered.nrows(),
            recovered.ncols(),
            set.num_users(),
            set.num_items()
        )));
    }
    let items = set
        .item_comparisons()
        .iter()
        .filter(|c| recovered[(c.user, c.preferred)] <= recovered[(c.user, c.other)])
        .count();
    let users = set
        .user_comparisons()
        .iter()
        .filter(|c| recovered[(c.stronger, c.item)] <= recovered[(c.weaker, c.item)])
        .count();
    Ok(items + users)
}

/// Index of the largest relative drop `trace[i] / trace[i + 1]`; ties go to
/// the smaller index. If the trace contains a zero, the first zero's index is
/// returned.
pub fn detect_knee(trace: &[f64]) -> Result<usize> {
    if trace.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "knee detection needs at least 3 points, got {}",
            trace.len()
        )));
    }
    if trace.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(
            "knee detection needs a finite nonnegative trace".into(),
        ));
    }
    if let Some(zero) = trace.iter().position(|&v| v == 0.0) {
        return Ok(zero);
    }
    let mut best = 0;
    let mut best_drop = trace[0] / trace[1];
    for i in 1..trace.len() - 1 {
        let drop = trace[i] / trace[i + 1];
        if drop > best_drop * (1.0 + 1e-12) {
            best = i;
            best_drop = drop;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Cpr,
    Knn,
    Svd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cpr, Method::Knn, Method::Svd];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Cpr => "cpr",
            Method::Knn => "knn",
            Method::Svd => "svd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpr" => Ok(Method::Cpr),
            "knn" => Ok(Method::Knn),
            "svd" => Ok(Method::Svd),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected cpr, knn or svd)"
            ))),
        }
    }
}

/// Per-rank metrics of one method. `None` marks a cell that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub method: Method,
    pub ranks: Vec<usize>,
    pub sigma_r_max: Vec<Option<f64>>,
    pub sigma_ratio: Vec<Option<f64>>,
    /// Mismatch counts; a mean when several runs were averaged.
    pub mismatches: Vec<Option<f64>>,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn value_at(&self, rank: usize, pick: impl Fn(&Self) -> &[Option<f64>]) -> Option<f64> {
        let i = self.ranks.iter().position(|&r| r == rank)?;
        pick(self)[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    FirstElement,
    Reference(f64),
}

/// Divides `trace` by its first element or by a fixed reference.
pub fn normalize_trace(name: &str, trace: &[Option<f64>], mode: Normalization) -> Result<Vec<Option<f64>>> {
    let reference = match mode {
        Normalization::FirstElement => trace.first().copied().flatten(),
        Normalization::Reference(v) => Some(v),
    };
    match reference {
        Some(v) if v != 0.0 && v.is_finite() => Ok(trace.iter().map(|x| x.map(|x| x / v)).collect()),
        _ => Err(Error::ZeroReference {
            trace: name.to_string(),
        }),
    }
}

/// Applies `mode` to every trace of `series`.
pub fn normalize_series(series: &MetricSeries, mode: Normalization) -> Result<MetricSeries> {
    let name = |t: &str| format!("{}.{t}", series.method);
    Ok(MetricSeries {
        method: series.method,
        ranks: series.ranks.clone(),
        sigma_r_max: normalize_trace(&name("sigma_r_max"), &series.sigma_r_max, mode)?,
        sigma_ratio: normalize_trace(&name("sigma_ratio"), &series.sigma_ratio, mode)?,
        mismatches: normalize_trace(&name("mismatches"), &series.mismatches, mode)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub knn: KnnConfig,
    pub train: TrainOptions,
    /// Run (method, rank) cells on the rayon pool. Cells are independently
    /// seeded, so the result does not depend on this flag.
    pub parallel: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            knn: KnnConfig::default(),
            train: TrainOptions::default(),
            parallel: true,
        }
    }
}

/// Outcome of one (method, rank) cell.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub method: Method,
    pub rank: usize,
    pub result: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct CellMetrics {
    pub diagnostics: SingularDiagnostics,
    pub mismatches: usize,
    /// Trained factors, for the comparison-trained method only.
    pub params: Option<ModelParams>,
    pub epochs_run: Option<usize>,
}

/// The dense estimate a method produces at `rank`. kNN completions are
/// projected onto their best rank-`rank` approximation so that every method
/// is judged as a rank-`rank` recovery.
fn run_cell(
    method: Method,
    rank: usize,
    ratings: &RatingMatrix,
    set: &ComparisonSet,
    knn: Option<&DMatrix<f64>>,
    hyper: &Hyperparams,
    options: &SweepOptions,
) -> Result<CellMetrics> {
    let (recovered, params, epochs_run) = match method {
        Method::Cpr => {
            let hyper = Hyperparams { rank, ..*hyper };
            let report = train(set, &hyper, &options.train)?;
            (
                recover_matrix(&report.final_params),
                Some(report.final_params),
                Some(report.epochs_run),
            )
        }
        Method::Svd => (svd_complete(ratings, rank)?, None, None),
        Method::Knn => {
            let knn = knn.ok_or_else(|| Error::InvalidInput("kNN completion unavailable".into()))?;
            (truncate_rank(knn, rank)?, None, None)
        }
    };
    Ok(CellMetrics {
        diagnostics: singular_diagnostics(&recovered, rank)?,
        mismatches: count_mismatches(&recovered, set)?,
        params,
        epochs_run,
    })
}

/// Every (method, rank) cell in method-major order, with failures kept as
/// error messages.
pub fn sweep_cells(
    ratings: &RatingMatrix,
    set: &ComparisonSet,
    methods: &[Method],
    ranks: &[usize],
    hyper: &Hyperparams,
    options: &SweepOptions,
) -> Result<Vec<SweepCell>> {
    if !methods.is_empty() && ranks.is_empty() {
        return Err(Error::Config("rank sweep needs at least one rank".into()));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::Config(format!("invalid sweep rank {bad}")));
    }
    let knn = if methods.contains(&Method::Knn) {
        Some(knn_complete(ratings, &options.knn))
    } else {
        None
    };
    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| ranks.iter().map(move |&r| (m, r)))
        .collect();
    let run = |&(method, rank): &(Method, usize)| {
        let knn = match &knn {
            Some(Ok(m)) => Some(m),
            Some(Err(e)) if method == Method::Knn => {
                return SweepCell {
                    method,
                    rank,
                    result: Err(e.to_string()),
                };
            }
            _ => None,
        };
        let result = run_cell(method, rank, ratings, set, knn, hyper, options).map_err(|e| {
            warn!("{method} at rank {rank} failed: {e}");
            e.to_string()
        });
        SweepCell { method, rank, result }
    };
    Ok(if options.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    })
}

/// Folds sweep cells into one series per method.
pub fn collect_series(cells: &[SweepCell], methods: &[Method], ranks: &[usize]) -> Vec<MetricSeries> {
    methods
        .iter()
        .map(|&method| {
            let mut series = MetricSeries {
                method,
                ranks: ranks.to_vec(),
                sigma_r_max: Vec::with_capacity(ranks.len()),
                sigma_ratio: Vec::with_capacity(ranks.len()),
                mismatches: Vec::with_capacity(ranks.len()),
            };
            for &rank in ranks {
                let cell = cells
                    .iter()
                    .find(|c| c.method == method && c.rank == rank)
                    .and_then(|c| c.result.as_ref().ok());
                series.sigma_r_max.push(cell.map(|c| c.diagnostics.sigma_r_max));
                series.sigma_ratio.push(cell.map(|c| c.diagnostics.sigma_ratio));
                series.mismatches.push(cell.map(|c| c.mismatches as f64));
            }
            series
        })
        .collect()
}

/// Trains or completes with every method at every rank and measures the
/// recovered matrices against the comparisons extracted from `ratings`.
pub fn rank_sweep(
    ratings: &RatingMatrix,
    methods: &[Method],
    ranks: &[usize],
    hyper: &Hyperparams,
    options: &SweepOptions,
) -> Result<Vec<MetricSeries>> {
    if methods.is_empty() {
        return Ok(Vec::new());
    }
    let set = extract_comparisons(ratings, false)?;
    let cells = sweep_cells(ratings, &set, methods, ranks, hyper, options)?;
    Ok(collect_series(&cells, methods, ranks))
}

/// Element-wise mean over runs of identically shaped series. A cell is
/// missing only if it is missing in every run.
pub fn average_series(runs: &[Vec<MetricSeries>]) -> Result<Vec<MetricSeries>> {
    let Some(first) = runs.first() else {
        return Ok(Vec::new());
    };
    let shape = |run: &Vec<MetricSeries>| -> Vec<(Method, Vec<usize>)> {
        run.iter().map(|s| (s.method, s.ranks.clone())).collect()
    };
    if runs.iter().any(|run| shape(run) != shape(first)) {
        return Err(Error::DimensionMismatch("runs disagree on methods or ranks".into()));
    }
    let mean = |values: Vec<Option<f64>>| -> Option<f64> {
        let present: Vec<f64> = values.into_iter().flatten().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    };
    Ok(first
        .iter()
        .enumerate()
        .map(|(s, series)| {
            let avg = |pick: fn(&MetricSeries) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
                (0..series.len())
                    .map(|i| mean(runs.iter().map(|run| pick(&run[s])[i]).collect()))
                    .collect()
            };
            MetricSeries {
                method: series.method,
                ranks: series.ranks.clone(),
                sigma_r_max: avg(|s| &s.sigma_r_max),
                sigma_ratio: avg(|s| &s.sigma_ratio),
                mismatches: avg(|s| &s.mismatches),
            }
        })
        .collect())
}

/// Raw series together with their presentation-normalised counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub raw: Vec<MetricSeries>,
    pub normalized: Vec<MetricSeries>,
}

/// Singular-value traces are divided by their own first element; mismatch
/// traces by the first mismatch value of the comparison-trained method when
/// it is present (otherwise by their own first element). A trace whose
/// reference is zero or missing is left unnormalised (all `None`).
pub fn normalize_for_report(raw: &[MetricSeries]) -> MetricReport {
    let mismatch_mode = raw
        .iter()
        .find(|s| s.method == Method::Cpr)
        .and_then(|s| s.mismatches.first().copied().flatten())
        .map(Normalization::Reference)
        .unwrap_or(Normalization::FirstElement);
    let soft = |name: String, trace: &[Option<f64>], mode| {
        normalize_trace(&name, trace, mode).unwrap_or_else(|e| {
            warn!("{e}");
            vec![None; trace.len()]
        })
    };
    let normalized = raw
        .iter()
        .map(|s| MetricSeries {
            method: s.method,
            ranks: s.ranks.clone(),
            sigma_r_max: soft(
                format!("{}.sigma_r_max", s.method),
                &s.sigma_r_max,
                Normalization::FirstElement,
            ),
            sigma_ratio: soft(
                format!("{}.sigma_ratio", s.method),
                &s.sigma_ratio,
                Normalization::FirstElement,
            ),
            mismatches: soft(format!("{}.mismatches", s.method), &s.mismatches, mismatch_mode),
        })
        .collect();
    MetricReport {
        raw: raw.to_vec(),
        normalized,
    }
}

pub const CSV_HEADER: &str =
    "method,rank,sigma_r_max,sigma_ratio,mismatches,sigma_r_max_norm,sigma_ratio_norm,mismatches_norm";

fn csv_value(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

/// One row per (method, rank); missing cells are empty fields.
pub fn write_metrics_csv<W: Write>(report: &MetricReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (raw, norm) in report.raw.iter().zip(&report.normalized) {
        for i in 0..raw.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                raw.method,
                raw.ranks[i],
                csv_value(raw.sigma_r_max[i]),
                csv_value(raw.sigma_ratio[i]),
                csv_value(raw.mismatches[i]),
                csv_value(norm.sigma_r_max[i]),
                csv_value(norm.sigma_ratio[i]),
                csv_value(norm.mismatches[i]),
            )?;
        }
    }
    out.flush()
}

pub fn metrics_json(report: &MetricReport) -> String {
    serde_json::to_string_pretty(report).expect("metrics serialize")
}
