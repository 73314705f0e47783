//! Cross-metric evaluation of worst-case shifts, oracle-ratio curves, and
//! CSV / SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{find_worst_case, fw_inner, FwParams, PoolSampler, WorstCaseReport};
use crate::error::{Error, Result};
use crate::losses::{decision_loss, LossSpec};
use crate::oracle::{enumerate_problems, exact_expected_dl, oracle_maximize_from, DEFAULT_CAP};
use crate::predictors::ScoredCohort;
use crate::rng::{keyed_rng, Stream};
use crate::uncertainty::{HierarchicalShift, UncertaintyBudget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Instances drawn from the instance-level distribution.
    pub instances: usize,
    /// Problems drawn per sampled instance.
    pub problems: usize,
    pub draw_size: Option<usize>,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            instances: 200,
            problems: 4_000,
            draw_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error across sampled instances.
    pub std_error: f64,
}

/// Expected `DL` under a shift: instances from `Q_xi`, then problems from the
/// chosen pool's `Q_j`.
pub fn evaluate_shift(
    scored: &ScoredCohort,
    spec: &LossSpec,
    shift: &HierarchicalShift,
    eval: &EvalParams,
) -> Result<Estimate> {
    if eval.instances == 0 || eval.problems == 0 {
        return Err(Error::argument("evaluation needs at least one instance and one problem"));
    }
    if shift.w_ind.len() != scored.pools.len() || shift.w_xi.len() != scored.pools.len() {
        return Err(Error::argument(format!(
            "shift covers {} instances but the cohort has {}",
            shift.w_xi.len(),
            scored.pools.len()
        )));
    }
    let q_xi = shift.instance_distribution()?;
    let pool_qs = (0..scored.pools.len())
        .map(|j| shift.pool_distribution(j))
        .collect::<Result<Vec<_>>>()?;
    let mut samplers = Vec::with_capacity(scored.pools.len());
    for (pool, q) in scored.pools.iter().zip(&pool_qs) {
        let n = eval.draw_size.unwrap_or(pool.len());
        spec.validate_for(scored, n)?;
        samplers.push(PoolSampler::new(pool, q, n)?);
    }
    let chooser = WeightedIndex::new(&q_xi).map_err(|e| Error::InfeasibleOffset(e.to_string()))?;

    let means = (0..eval.instances)
        .into_par_iter()
        .map(|d| -> Result<f64> {
            let mut rng = keyed_rng(eval.seed, Stream::EvaluationInstance, 0, 0, d as u64);
            let j = chooser.sample(&mut rng);
            let mut total = 0.0;
            for p in 0..eval.problems {
                let mut rng = keyed_rng(eval.seed, Stream::Evaluation, d as u64, 0, p as u64);
                total += decision_loss(spec, &samplers[j].draw(&mut rng))?;
            }
            Ok(total / eval.problems as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_error(&means))
}

fn mean_and_error(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std_error = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    Estimate { mean, std_error }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMetricMatrix {
    /// Metric each row's shift maximizes.
    pub row_metrics: Vec<String>,
    /// Metric each column evaluates.
    pub col_metrics: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub std_errors: Option<Vec<Vec<f64>>>,
    /// Columns normalized as `diagonal / value`.
    pub inverted: Vec<bool>,
    pub normalized: bool,
}

impl CrossMetricMatrix {
    pub fn check_finite(&self) -> Result<()> {
        for (r, row) in self.values.iter().enumerate() {
            if row.len() != self.col_metrics.len() {
                return Err(Error::argument(format!("row {r} has {} cells", row.len())));
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
        Ok(())
    }
}

/// Unique labels: repeated metric names get a `#2`, `#3`, ... suffix.
pub fn metric_labels(metrics: &[LossSpec]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(metrics.len());
    for m in metrics {
        let base = m.name();
        let seen = metrics.iter().take(out.len()).filter(|x| x.name() == base).count();
        out.push(if seen == 0 { base.to_string() } else { format!("{base}#{}", seen + 1) });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossMetricRun {
    pub matrix: CrossMetricMatrix,
    pub reports: Vec<WorstCaseReport>,
}

/// Evaluates every shift in `reports` on every metric.
pub fn cross_evaluate(
    scored: &ScoredCohort,
    reports: &[WorstCaseReport],
    metrics: &[LossSpec],
    eval: &EvalParams,
) -> Result<CrossMetricMatrix> {
    for m in metrics {
        if !m.applies_to(scored.task) {
            return Err(Error::argument(format!("{} does not apply to {:?} tasks", m.name(), scored.task)));
        }
    }
    let cells = reports
        .par_iter()
        .map(|r| {
            metrics
                .iter()
                .map(|m| evaluate_shift(scored, m, &r.shift, eval))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let row_specs: Vec<LossSpec> = reports.iter().map(|r| r.loss.clone()).collect();
    Ok(CrossMetricMatrix {
        row_metrics: metric_labels(&row_specs),
        col_metrics: metric_labels(metrics),
        values: cells.iter().map(|row| row.iter().map(|e| e.mean).collect()).collect(),
        std_errors: Some(cells.iter().map(|row| row.iter().map(|e| e.std_error).collect()).collect()),
        inverted: metrics.iter().map(LossSpec::is_inverted).collect(),
        normalized: false,
    })
}

/// One worst case per metric, each evaluated on all metrics.
pub fn cross_metric_matrix(
    scored: &ScoredCohort,
    metrics: &[LossSpec],
    budget: &UncertaintyBudget,
    params: &FwParams,
    eval: &EvalParams,
) -> Result<CrossMetricRun> {
    if metrics.is_empty() {
        return Err(Error::argument("metric set is empty"));
    }
    for m in metrics {
        if !m.applies_to(scored.task) {
            return Err(Error::argument(format!("{} does not apply to {:?} tasks", m.name(), scored.task)));
        }
    }
    let reports = metrics
        .par_iter()
        .map(|m| find_worst_case(scored, m, budget, params))
        .collect::<Result<Vec<_>>>()?;
    let matrix = cross_evaluate(scored, &reports, metrics, eval)?;
    Ok(CrossMetricRun { matrix, reports })
}

/// Divides each column by its diagonal entry (or the diagonal by each entry
/// for inverted columns).
pub fn diagonal_normalize(m: &CrossMetricMatrix) -> Result<CrossMetricMatrix> {
    m.check_finite()?;
    let k = m.col_metrics.len();
    if m.values.len() != k {
        return Err(Error::argument("diagonal normalization needs a square matrix"));
    }
    let mut values = m.values.clone();
    let mut errors = m.std_errors.clone();
    for c in 0..k {
        let d = m.values[c][c];
        if d == 0.0 {
            return Err(Error::Normalization {
                column: m.col_metrics[c].clone(),
            });
        }
        for r in 0..k {
            let v = m.values[r][c];
            let out = if r == c {
                1.0
            } else if m.inverted[c] {
                d / v
            } else {
                v / d
            };
            if !out.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
            values[r][c] = out;
            if let (Some(errs), Some(src)) = (errors.as_mut(), m.std_errors.as_ref()) {
                errs[r][c] = if r == c {
                    0.0
                } else {
                    let (sv, sd) = (src[r][c], src[c][c]);
                    let (num, den, s_num, s_den) = if m.inverted[c] { (d, v, sd, sv) } else { (v, d, sv, sd) };
                    ((s_num / den).powi(2) + (num * s_den / (den * den)).powi(2)).sqrt()
                };
            }
        }
    }
    Ok(CrossMetricMatrix {
        values,
        std_errors: errors,
        normalized: true,
        ..m.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMatrix {
    pub mean: CrossMetricMatrix,
    /// Half-width of a normal-approximation 95% interval across replicates.
    pub half_width: Vec<Vec<f64>>,
}

pub fn aggregate_matrices(ms: &[CrossMetricMatrix]) -> Result<AggregateMatrix> {
    let first = ms.first().ok_or_else(|| Error::argument("no matrices to aggregate"))?;
    for m in ms {
        if m.row_metrics != first.row_metrics || m.col_metrics != first.col_metrics {
            return Err(Error::argument("replicate matrices disagree on metric labels"));
        }
        m.check_finite()?;
    }
    let (rows, cols) = (first.row_metrics.len(), first.col_metrics.len());
    let mut mean = vec![vec![0.0; cols]; rows];
    let mut half = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        for c in 0..cols {
            let xs: Vec<f64> = ms.iter().map(|m| m.values[r][c]).collect();
            let e = mean_and_error(&xs);
            mean[r][c] = e.mean;
            half[r][c] = 1.96 * e.std_error;
        }
    }
    Ok(AggregateMatrix {
        mean: CrossMetricMatrix {
            values: mean,
            std_errors: None,
            ..first.clone()
        },
        half_width: half,
    })
}

/// Magnitudes below this count as zero in [`value_ratio`].
pub const RATIO_ZERO: f64 = 1e-12;

/// `fw / oracle` for positive optima and `oracle / fw` for negative ones, so
/// that values in `(0, 1]` always mean "FW reached this share of the optimum".
/// A zero optimum counts as reached when FW is also zero.
pub fn value_ratio(fw: f64, oracle: f64) -> f64 {
    if oracle > RATIO_ZERO {
        fw / oracle
    } else if oracle < -RATIO_ZERO {
        oracle / fw
    } else if fw.abs() <= RATIO_ZERO {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub instance_id: String,
    pub metric: String,
    pub seed: u64,
    pub num_samples: usize,
    /// Exact expected `DL` at the FW solution.
    pub fw_value: f64,
    /// Exact expected `DL` at the oracle solution.
    pub oracle_value: f64,
    pub ratio: f64,
}

/// For every pool: FW at each grid sample count and seed, scored exactly,
/// against one multi-start oracle run that also starts from every FW solution.
pub fn oracle_ratio_curve(
    scored: &ScoredCohort,
    spec: &LossSpec,
    rho_ind: f64,
    grid: &[usize],
    params: &FwParams,
    seeds: &[u64],
    restarts: usize,
) -> Result<Vec<RatioPoint>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::argument("sample grid and seed list must be non-empty"));
    }
    let per_pool = scored
        .pools
        .par_iter()
        .enumerate()
        .map(|(j, pool)| -> Result<Vec<RatioPoint>> {
            let n = params.draw_size_for(pool);
            spec.validate_for(scored, n)?;
            let e = enumerate_problems(pool, spec, n, DEFAULT_CAP)?;
            let runs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| grid.iter().map(move |&g| (s, g))).collect();
            let fw_qs = runs
                .iter()
                .map(|&(seed, samples)| {
                    let p = FwParams {
                        num_samples: samples,
                        seed,
                        ..params.clone()
                    };
                    Ok(fw_inner(pool, spec, rho_ind, &p, j)?.distribution())
                })
                .collect::<Result<Vec<_>>>()?;
            let best = oracle_maximize_from(&e, rho_ind, restarts, params.seed, &fw_qs)?;
            let oracle_value = exact_expected_dl(&e, &best.q)?;
            runs.iter()
                .zip(&fw_qs)
                .map(|(&(seed, samples), q)| {
                    let fw_value = exact_expected_dl(&e, q)?;
                    Ok(RatioPoint {
                        instance_id: pool.instance_id.clone(),
                        metric: spec.name().to_string(),
                        seed,
                        num_samples: samples,
                        fw_value,
                        oracle_value,
                        ratio: value_ratio(fw_value, oracle_value),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_pool.into_iter().flatten().collect())
}

/// Mean ratio per grid point, in grid order.
pub fn mean_curve(points: &[RatioPoint], grid: &[usize]) -> Vec<(usize, f64)> {
    grid.iter()
        .map(|&g| {
            let xs: Vec<f64> = points.iter().filter(|p| p.num_samples == g).map(|p| p.ratio).collect();
            (g, xs.iter().sum::<f64>() / xs.len().max(1) as f64)
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn matrix_csv(m: &CrossMetricMatrix) -> Result<Vec<u8>> {
    m.check_finite()?;
    let mut header = vec!["metric".to_string()];
    header.extend(m.col_metrics.iter().cloned());
    let rows: Vec<Vec<String>> = m
        .row_metrics
        .iter()
        .zip(&m.values)
        .map(|(name, row)| std::iter::once(name.clone()).chain(row.iter().map(|v| v.to_string())).collect())
        .collect();
    csv_bytes(&header, &rows)
}

pub fn emit_matrix_csv(m: &CrossMetricMatrix, path: &Path) -> Result<()> {
    write_file(path, &matrix_csv(m)?)
}

/// Reads a matrix written by [`emit_matrix_csv`]. Inversion flags are
/// recovered from the column names.
pub fn parse_matrix_csv(text: &str) -> Result<CrossMetricMatrix> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let col_metrics: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_metrics = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        row_metrics.push(rec.get(0).unwrap_or_default().to_string());
        let row = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(c, s)| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: i + 1,
                    column: col_metrics.get(c).cloned().unwrap_or_default(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    let m = CrossMetricMatrix {
        inverted: col_metrics.iter().map(|c| c.starts_with("cross-entropy")).collect(),
        row_metrics,
        col_metrics,
        values,
        std_errors: None,
        normalized: false,
    };
    m.check_finite()?;
    Ok(m)
}

pub fn read_matrix_csv(path: &Path) -> Result<CrossMetricMatrix> {
    parse_matrix_csv(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
}

pub fn curve_csv(points: &[RatioPoint]) -> Result<Vec<u8>> {
    let header: Vec<String> = ["instance_id", "metric", "seed", "num_samples", "fw_value", "oracle_value", "ratio"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.instance_id.clone(),
                p.metric.clone(),
                p.seed.to_string(),
                p.num_samples.to_string(),
                p.fw_value.to_string(),
                p.oracle_value.to_string(),
                p.ratio.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn emit_curve_csv(points: &[RatioPoint], path: &Path) -> Result<()> {
    write_file(path, &curve_csv(points)?)
}

pub fn trace_csv(report: &WorstCaseReport) -> Result<Vec<u8>> {
    let header: Vec<String> = ["instance_id", "iteration", "objective", "gradient_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = report
        .trace_rows()
        .map(|(id, t)| {
            vec![
                id.to_string(),
                t.iteration.to_string(),
                t.objective.to_string(),
                t.gradient_norm.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn emit_trace_csv(report: &WorstCaseReport, path: &Path) -> Result<()> {
    write_file(path, &trace_csv(report)?)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heat map with one annotated square per cell.
pub fn heatmap_svg(m: &CrossMetricMatrix) -> Result<String> {
    m.check_finite()?;
    const CELL: usize = 72;
    const LEFT: usize = 120;
    const TOP: usize = 110;
    let (rows, cols) = (m.row_metrics.len(), m.col_metrics.len());
    let hi = m.values.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let mut s = String::new();
    let (w, h) = (LEFT + cols * CELL + 10, TOP + rows * CELL + 10);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    for (c, name) in m.col_metrics.iter().enumerate() {
        let x = LEFT + c * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-45 {x} {})">{}</text>"#,
            TOP - 8,
            TOP - 8,
            escape(name)
        );
    }
    for (r, name) in m.row_metrics.iter().enumerate() {
        let y = TOP + r * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            y + CELL / 2 + 4,
            escape(name)
        );
        for (c, v) in m.values[r].iter().enumerate() {
            let t = (v.abs() / hi).clamp(0.0, 1.0);
            let shade = |lo: f64, top: f64| (lo + (top - lo) * t).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(247.0, 8.0), shade(251.0, 81.0), shade(255.0, 156.0));
            let ink = if t > 0.5 { "#ffffff" } else { "#000000" };
            let x = LEFT + c * CELL;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="white"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.2}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_heatmap(m: &CrossMetricMatrix, path: &Path) -> Result<()> {
    write_file(path, heatmap_svg(m)?.as_bytes())
}
