//! Decision losses and their exact downstream solvers.
//!
//! Every loss is bounded above by 1, so the shifted loss `DL - 1` is
//! non-positive. That sign is what makes the worst-case objective
//! DR-submodular in the offset variables.

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::predictors::{ScoredCohort, ScoredPool};

/// Guard used for logs and divisions.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LossSpec {
    /// Regret of a top-k allocation, divided by k.
    TopK { k: usize },
    /// Regret of a 0/1 knapsack allocation over integer costs, divided by
    /// `max(optimum, 1)`.
    Knapsack {
        budget: f64,
        #[serde(default = "default_true")]
        use_costs: bool,
    },
    /// Gini coefficient of per-group true-positive rates of the top-k decision.
    FairnessGini { k: usize },
    /// Relative regret of a water-filling cash allocation under Nash welfare.
    NashWelfare { budget: f64, constant: f64 },
    MisclassRate {
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    /// `-1 / CE`.
    CrossEntropy {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// `min(1, log2(MSE) / scale)`.
    Mse { scale: f64 },
}

fn default_true() -> bool {
    true
}
fn default_threshold() -> f64 {
    0.5
}
fn default_eps() -> f64 {
    EPS
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::TopK { .. } => "top-k",
            LossSpec::Knapsack { .. } => "knapsack",
            LossSpec::FairnessGini { .. } => "fairness-gini",
            LossSpec::NashWelfare { .. } => "nash-welfare",
            LossSpec::MisclassRate { .. } => "misclass-rate",
            LossSpec::CrossEntropy { .. } => "cross-entropy",
            LossSpec::Mse { .. } => "mse",
        }
    }

    /// Losses defined through an allocation over the joint set of individuals.
    pub fn is_decision_based(&self) -> bool {
        matches!(
            self,
            LossSpec::TopK { .. } | LossSpec::Knapsack { .. } | LossSpec::FairnessGini { .. } | LossSpec::NashWelfare { .. }
        )
    }

    /// Cross-entropy values are negative, so normalized views divide the other way.
    pub fn is_inverted(&self) -> bool {
        matches!(self, LossSpec::CrossEntropy { .. })
    }

    pub fn applies_to(&self, task: TaskKind) -> bool {
        match self {
            LossSpec::NashWelfare { .. } | LossSpec::Mse { .. } => task == TaskKind::Regression,
            _ => task == TaskKind::BinaryClassification,
        }
    }

    /// The normalization constant applied to the raw regret or score.
    pub fn normalizer(&self) -> f64 {
        match self {
            LossSpec::TopK { k } | LossSpec::FairnessGini { k } => *k as f64,
            LossSpec::Mse { scale } => *scale,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::argument(format!("{}: {msg}", self.name())));
        match *self {
            LossSpec::TopK { k } | LossSpec::FairnessGini { k } if k == 0 => bad("k must be at least 1"),
            LossSpec::Knapsack { budget, .. } if !(budget > 0.0) || !budget.is_finite() => bad("budget must be positive"),
            LossSpec::NashWelfare { budget, constant } => {
                if !(budget >= 0.0) || !budget.is_finite() {
                    bad("budget must be non-negative")
                } else if !(constant > 0.0) || !constant.is_finite() {
                    bad("constant must be positive")
                } else {
                    Ok(())
                }
            }
            LossSpec::MisclassRate { threshold } if !(threshold > 0.0 && threshold < 1.0) => bad("threshold must lie in (0, 1)"),
            LossSpec::CrossEntropy { eps } if !(eps > 0.0) => bad("eps must be positive"),
            LossSpec::Mse { scale } if !(scale > 0.0) || !scale.is_finite() => bad("scale must be positive"),
            _ => Ok(()),
        }
    }

    /// Checks the spec against a scored cohort and a draw size.
    pub fn validate_for(&self, cohort: &ScoredCohort, draw_size: usize) -> Result<()> {
        self.validate()?;
        if !self.applies_to(cohort.task) {
            return Err(Error::argument(format!(
                "{} does not apply to {:?} tasks",
                self.name(),
                cohort.task
            )));
        }
        match *self {
            LossSpec::TopK { k } | LossSpec::FairnessGini { k } if k > draw_size => Err(Error::argument(format!(
                "{}: k = {k} exceeds the draw size {draw_size}",
                self.name()
            ))),
            LossSpec::NashWelfare { constant, .. } => {
                let min = cohort.min_label();
                if !(min > 0.0) {
                    Err(Error::argument("nash-welfare needs strictly positive incomes"))
                } else if constant > min {
                    Err(Error::argument(format!(
                        "nash-welfare constant {constant} exceeds the smallest income {min}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Parameter defaults for a named metric, resolved against a cohort.
    ///
    /// `top-k` and `fairness-gini` use `k = max(1, n/4)`; `knapsack` spends half
    /// the expected total cost of a draw; `nash-welfare` hands out a tenth of the
    /// expected total income, with the constant at the smallest observed income.
    pub fn default_for(name: &str, cohort: &ScoredCohort, draw_size: usize) -> Result<Self> {
        let k = (draw_size / 4).max(1);
        let spec = match name {
            "top-k" | "topk" => LossSpec::TopK { k },
            "knapsack" => LossSpec::Knapsack {
                budget: (draw_size as f64 * cohort.mean_cost() / 2.0).floor().max(1.0),
                use_costs: true,
            },
            "fairness-gini" | "fairness" => LossSpec::FairnessGini { k },
            "nash-welfare" | "nash" | "utility" => LossSpec::NashWelfare {
                budget: 0.1 * draw_size as f64 * cohort.mean_label(),
                constant: cohort.min_label(),
            },
            "misclass-rate" | "misclass" | "acc" => LossSpec::MisclassRate { threshold: 0.5 },
            "cross-entropy" | "ce" => LossSpec::CrossEntropy { eps: EPS },
            "mse" => LossSpec::Mse { scale: 32.0 },
            other => return Err(Error::argument(format!("unknown metric `{other}`"))),
        };
        Ok(spec)
    }

    /// Every metric that applies to the task, with defaults.
    pub fn applicable_defaults(cohort: &ScoredCohort, draw_size: usize) -> Result<Vec<Self>> {
        let names: &[&str] = match cohort.task {
            TaskKind::BinaryClassification => &["top-k", "knapsack", "fairness-gini", "misclass-rate", "cross-entropy"],
            TaskKind::Regression => &["nash-welfare", "mse"],
        };
        names.iter().map(|n| Self::default_for(n, cohort, draw_size)).collect()
    }
}

/// One sampled allocation problem: a multiset of individuals from a pool.
///
/// Indices are kept sorted so that the loss depends only on which individuals
/// were drawn and how often, never on draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawnProblem {
    pub indices: Vec<usize>,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    pub costs: Vec<f64>,
    pub groups: Vec<u32>,
}

impl DrawnProblem {
    pub fn from_indices(pool: &ScoredPool, mut indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= pool.len()) {
            return Err(Error::argument(format!(
                "index {bad} out of bounds for pool `{}` of size {}",
                pool.instance_id,
                pool.len()
            )));
        }
        indices.sort_unstable();
        Ok(DrawnProblem {
            predictions: indices.iter().map(|&i| pool.predictions[i]).collect(),
            labels: indices.iter().map(|&i| pool.labels[i]).collect(),
            costs: indices.iter().map(|&i| pool.costs[i]).collect(),
            groups: indices.iter().map(|&i| pool.groups[i]).collect(),
            indices,
        })
    }

    /// A problem over explicit values; every individual gets unit cost and group 0
    /// unless overwritten.
    pub fn from_parts(predictions: Vec<f64>, labels: Vec<f64>) -> Self {
        let n = predictions.len();
        DrawnProblem {
            indices: (0..n).collect(),
            predictions,
            labels,
            costs: vec![1.0; n],
            groups: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The `k` highest scores, ties to the smaller index; returned ascending.
pub fn solve_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::argument(format!("k = {k} exceeds {} items", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Exact 0/1 knapsack by dynamic programming over integer capacity.
///
/// Among optimal sets the one preferring lower indices is returned (the
/// indicator vector is lexicographically largest), which for positive values is
/// the lexicographically smallest index sequence.
pub fn solve_knapsack(values: &[f64], costs: &[i64], budget: i64) -> Result<Vec<usize>> {
    if values.len() != costs.len() {
        return Err(Error::argument("values and costs differ in length"));
    }
    if let Some(c) = costs.iter().find(|&&c| c < 0) {
        return Err(Error::argument(format!("negative cost {c}")));
    }
    if budget < 0 {
        return Err(Error::argument("budget must be non-negative"));
    }
    let n = values.len();
    let total: i64 = costs.iter().sum();
    let cap = budget.min(total) as usize;
    let width = cap + 1;
    // best[i * width + c]: optimum over items i.. with capacity c
    let mut best = vec![0.0f64; (n + 1) * width];
    for i in (0..n).rev() {
        let w = costs[i] as usize;
        for c in 0..width {
            let skip = best[(i + 1) * width + c];
            let take = if w <= c {
                values[i] + best[(i + 1) * width + c - w]
            } else {
                f64::NEG_INFINITY
            };
            best[i * width + c] = skip.max(take);
        }
    }
    let mut chosen = Vec::new();
    let mut c = cap;
    for i in 0..n {
        let w = costs[i] as usize;
        if w > c {
            continue;
        }
        let target = best[i * width + c];
        let take = values[i] + best[(i + 1) * width + c - w];
        if take >= target - 1e-12 * (1.0 + target.abs()) {
            chosen.push(i);
            c -= w;
        }
    }
    Ok(chosen)
}

/// Water level allocation: `z_i = max(0, L - x_i)` with `sum z = budget`.
fn waterfill_levels(levels: &[f64], budget: f64) -> Vec<f64> {
    let n = levels.len();
    if n == 0 || budget <= 0.0 {
        return vec![0.0; n];
    }
    let mut sorted: Vec<f64> = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut prefix = 0.0;
    let mut level = f64::NAN;
    for r in 0..n {
        prefix += sorted[r];
        let candidate = (budget + prefix) / (r + 1) as f64;
        if r + 1 == n || candidate <= sorted[r + 1] {
            level = candidate;
            break;
        }
    }
    levels.iter().map(|&x| (level - x).max(0.0)).collect()
}

/// Splits `budget` to maximize `sum log(income_i + z_i)`.
pub fn allocate_waterfill(incomes: &[f64], budget: f64) -> Result<Vec<f64>> {
    if let Some(x) = incomes.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::argument(format!("income must be positive, got {x}")));
    }
    if !(budget >= 0.0) || !budget.is_finite() {
        return Err(Error::argument("budget must be non-negative"));
    }
    Ok(waterfill_levels(incomes, budget))
}

/// Gini coefficient `sum_a sum_b |v_a - v_b| / (2 g^2 mean)`; zero when the mean is zero.
pub fn gini(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::argument("gini of an empty vector"));
    }
    if let Some(v) = values.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::argument(format!("gini needs non-negative values, got {v}")));
    }
    let g = values.len() as f64;
    let mean = values.iter().sum::<f64>() / g;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for a in values {
        for b in values {
            total += (a - b).abs();
        }
    }
    Ok(total / (2.0 * g * g * mean))
}

fn selected_sum(labels: &[f64], chosen: &[usize]) -> f64 {
    chosen.iter().map(|&i| labels[i]).sum()
}

fn integer_costs(problem: &DrawnProblem, use_costs: bool) -> Vec<i64> {
    if use_costs {
        problem.costs.iter().map(|c| c.round() as i64).collect()
    } else {
        vec![1; problem.len()]
    }
}

/// Decision loss `DL` of one drawn problem; always `<= 1`.
pub fn decision_loss(spec: &LossSpec, problem: &DrawnProblem) -> Result<f64> {
    let n = problem.len();
    if n == 0 {
        return Err(Error::argument("empty problem"));
    }
    let preds = &problem.predictions;
    let labels = &problem.labels;
    let dl = match *spec {
        LossSpec::TopK { k } => {
            let by_pred = solve_topk(preds, k)?;
            let by_label = solve_topk(labels, k)?;
            (selected_sum(labels, &by_label) - selected_sum(labels, &by_pred)) / k as f64
        }
        LossSpec::Knapsack { budget, use_costs } => {
            let costs = integer_costs(problem, use_costs);
            let cap = (budget + 1e-9).floor() as i64;
            let by_pred = solve_knapsack(preds, &costs, cap)?;
            let by_label = solve_knapsack(labels, &costs, cap)?;
            let best = selected_sum(labels, &by_label);
            (best - selected_sum(labels, &by_pred)) / best.max(1.0)
        }
        LossSpec::FairnessGini { k } => {
            if problem.groups.len() != n {
                return Err(Error::argument("fairness-gini needs a group code per individual"));
            }
            let chosen = solve_topk(preds, k)?;
            let mut picked = vec![false; n];
            for &i in &chosen {
                picked[i] = true;
            }
            let groups = problem.groups.iter().copied().max().map_or(0, |g| g as usize + 1);
            if groups == 0 {
                return Err(Error::argument("fairness-gini with zero groups"));
            }
            let mut positives = vec![0usize; groups];
            let mut hits = vec![0usize; groups];
            for i in 0..n {
                if labels[i] == 1.0 {
                    let g = problem.groups[i] as usize;
                    positives[g] += 1;
                    if picked[i] {
                        hits[g] += 1;
                    }
                }
            }
            let tprs: Vec<f64> = positives
                .iter()
                .zip(&hits)
                .filter(|(&p, _)| p > 0)
                .map(|(&p, &h)| h as f64 / p as f64)
                .collect();
            if tprs.len() < 2 {
                0.0
            } else {
                gini(&tprs)?
            }
        }
        LossSpec::NashWelfare { budget, constant } => {
            if let Some(y) = labels.iter().find(|&&y| y < constant || !(y > 0.0)) {
                return Err(Error::argument(format!(
                    "nash-welfare income {y} is below the constant {constant}"
                )));
            }
            let welfare = |z: &[f64]| -> f64 { labels.iter().zip(z).map(|(y, z)| ((y + z) / constant).ln()).sum() };
            let ideal = welfare(&allocate_waterfill(labels, budget)?);
            let realized = welfare(&waterfill_levels(preds, budget));
            if ideal <= EPS {
                0.0
            } else {
                (1.0 - realized / ideal).clamp(0.0, 1.0)
            }
        }
        LossSpec::MisclassRate { threshold } => {
            preds
                .iter()
                .zip(labels)
                .filter(|(&p, &y)| (p >= threshold) != (y == 1.0))
                .count() as f64
                / n as f64
        }
        LossSpec::CrossEntropy { eps } => {
            let ce = preds
                .iter()
                .zip(labels)
                .map(|(&p, &y)| {
                    let p = p.clamp(eps, 1.0 - eps);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n as f64;
            -1.0 / ce.max(eps)
        }
        LossSpec::Mse { scale } => {
            let mse = preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n as f64;
            (mse.max(EPS).log2() / scale).min(1.0)
        }
    };
    Ok(dl)
}

/// `DL - 1`, which is never positive.
pub fn shifted_loss(spec: &LossSpec, problem: &DrawnProblem) -> Result<f64> {
    Ok(decision_loss(spec, problem)? - 1.0)
}
