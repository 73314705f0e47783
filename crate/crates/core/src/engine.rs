//! Frank-Wolfe search for the worst-case hierarchical shift.
//!
//! Inside each instance the objective `E_{X,Y ~ q}[DL']` is a polynomial in
//! the sampling probabilities with non-positive mixed second derivatives, so a
//! non-monotone Frank-Wolfe run with step `1/T` from the zero offset gives a
//! constant-factor approximation. Gradients come from the score-function
//! identity `d/dq_a E[DL'] = E[DL' * count_a / q_a]`. The instance-level
//! problem is linear in `Q_xi` and solved exactly by [`gradmax`].

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{shifted_loss, DrawnProblem, LossSpec};
use crate::predictors::{score_cohort, ScoredCohort, ScoredPool};
use crate::rng::{keyed_rng, Stream};
use crate::uncertainty::{distribution_to_offset, gradmax, offset_to_distribution, uniform, HierarchicalShift, UncertaintyBudget};
use crate::{data::Cohort, predictors::Predictor};

/// Samples per parallel work unit. Partial sums are combined in unit order.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FwParams {
    pub iterations: usize,
    /// Problems sampled per gradient estimate.
    pub num_samples: usize,
    /// Problems sampled for each per-instance loss estimate.
    pub num_samples2: usize,
    /// Weight on the fresh gradient in the momentum average.
    pub momentum: f64,
    /// Individuals per drawn problem; `None` uses the pool size.
    pub draw_size: Option<usize>,
    pub seed: u64,
    /// Feed `-gradient` to the linear maximizer. Off by default: that
    /// direction descends. Kept for comparison runs.
    pub literal_sign: bool,
    /// Step along the `DL`-weighted estimate instead of the `DL'`-weighted
    /// one. The two differ in expectation by the same constant in every
    /// coordinate, which the linear maximizer ignores, but the `DL` form drops
    /// the `-count / q` noise term.
    pub centered: bool,
}

impl Default for FwParams {
    fn default() -> Self {
        FwParams {
            iterations: 15,
            num_samples: 35_000,
            num_samples2: 4_000,
            momentum: 0.7,
            draw_size: None,
            seed: 0,
            literal_sign: false,
            centered: false,
        }
    }
}

impl FwParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.num_samples == 0 {
            return Err(Error::config("num_samples", "must be at least 1"));
        }
        if self.num_samples2 == 0 {
            return Err(Error::config("num_samples2", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1], got {}", self.momentum)));
        }
        if self.draw_size == Some(0) {
            return Err(Error::config("draw_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn draw_size_for(&self, pool: &ScoredPool) -> usize {
        self.draw_size.unwrap_or(pool.len())
    }
}

/// Draws `n` individuals i.i.d. from a fixed distribution over a pool.
pub struct PoolSampler<'a> {
    pool: &'a ScoredPool,
    dist: WeightedIndex<f64>,
    n: usize,
}

impl<'a> PoolSampler<'a> {
    pub fn new(pool: &'a ScoredPool, q: &[f64], n: usize) -> Result<Self> {
        if q.len() != pool.len() {
            return Err(Error::argument(format!(
                "distribution has {} entries but pool `{}` has {}",
                q.len(),
                pool.instance_id,
                pool.len()
            )));
        }
        if n == 0 {
            return Err(Error::argument("draw size must be at least 1"));
        }
        let s: f64 = q.iter().sum();
        if q.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InfeasibleOffset(format!(
                "sampling distribution for pool `{}` is not a probability vector",
                pool.instance_id
            )));
        }
        let dist = WeightedIndex::new(q).map_err(|e| Error::InfeasibleOffset(e.to_string()))?;
        Ok(PoolSampler { pool, dist, n })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DrawnProblem {
        let indices: Vec<usize> = (0..self.n).map(|_| self.dist.sample(rng)).collect();
        DrawnProblem::from_indices(self.pool, indices).expect("sampled indices are in range")
    }
}

/// One problem of `n` draws with replacement from `q`.
pub fn sample_problem<R: Rng + ?Sized>(pool: &ScoredPool, q: &[f64], n: usize, rng: &mut R) -> Result<DrawnProblem> {
    Ok(PoolSampler::new(pool, q, n)?.draw(rng))
}

/// Keys one Monte-Carlo phase: every sample index maps to its own stream.
#[derive(Debug, Clone, Copy)]
pub struct SampleKey {
    pub seed: u64,
    pub instance: u64,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    /// Mean of `DL * count_a / q_a`: `gradient + n` in expectation.
    pub centered: Vec<f64>,
    /// Mean `DL'` over the same samples.
    pub objective: f64,
}

/// Score-function estimate of `d E_q[DL'] / dq`.
pub fn estimate_gradient(
    pool: &ScoredPool,
    spec: &LossSpec,
    q: &[f64],
    num_samples: usize,
    n: usize,
    key: SampleKey,
) -> Result<GradientEstimate> {
    if num_samples == 0 {
        return Err(Error::argument("num_samples must be at least 1"));
    }
    let sampler = PoolSampler::new(pool, q, n)?;
    let m = pool.len();
    let chunks = num_samples.div_ceil(CHUNK);
    let partials = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(Vec<f64>, Vec<f64>, f64)> {
            let mut grad = vec![0.0; m];
            let mut centered = vec![0.0; m];
            let mut objective = 0.0;
            for s in c * CHUNK..((c + 1) * CHUNK).min(num_samples) {
                let mut rng = keyed_rng(key.seed, Stream::Gradient, key.instance, key.iteration, s as u64);
                let problem = sampler.draw(&mut rng);
                let loss = shifted_loss(spec, &problem)?;
                objective += loss;
                // indices are sorted: run-length count each distinct individual
                let mut i = 0;
                while i < problem.indices.len() {
                    let a = problem.indices[i];
                    let mut count = 1;
                    while i + count < problem.indices.len() && problem.indices[i + count] == a {
                        count += 1;
                    }
                    grad[a] += loss * count as f64 / q[a];
                    centered[a] += (loss + 1.0) * count as f64 / q[a];
                    i += count;
                }
            }
            Ok((grad, centered, objective))
        })
        .collect::<Vec<_>>();
    let mut gradient = vec![0.0; m];
    let mut centered = vec![0.0; m];
    let mut objective = 0.0;
    for part in partials {
        let (g, c, o) = part?;
        for (acc, v) in gradient.iter_mut().zip(g) {
            *acc += v;
        }
        for (acc, v) in centered.iter_mut().zip(c) {
            *acc += v;
        }
        objective += o;
    }
    let scale = 1.0 / num_samples as f64;
    gradient.iter_mut().for_each(|g| *g *= scale);
    centered.iter_mut().for_each(|g| *g *= scale);
    Ok(GradientEstimate {
        gradient,
        centered,
        objective: objective * scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Sampled `E[DL']` at the iterate before the step.
    pub objective: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub offset: Vec<f64>,
    pub trace: Vec<IterationDiagnostics>,
    /// Offsets after every step, including the final one.
    pub iterates: Vec<Vec<f64>>,
}

impl InnerResult {
    pub fn distribution(&self) -> Vec<f64> {
        let m = self.offset.len() as f64;
        self.offset.iter().map(|w| (w + 1.0 / m).max(0.0)).collect()
    }
}

/// Frank-Wolfe with momentum over one pool's offset, starting at zero.
///
/// After `T` steps of size `1/T` the induced distribution is the average of the
/// `T` linear-maximizer outputs, so it stays inside the ball.
pub fn fw_inner(
    pool: &ScoredPool,
    spec: &LossSpec,
    rho_ind: f64,
    params: &FwParams,
    instance: usize,
) -> Result<InnerResult> {
    params.validate()?;
    if !(rho_ind >= 0.0) {
        return Err(Error::config("rho_ind", "must be non-negative"));
    }
    let m = pool.len();
    let n = params.draw_size_for(pool);
    let center = uniform(m);
    let step = 1.0 / params.iterations as f64;
    let mut offset = vec![0.0; m];
    let mut velocity = vec![0.0; m];
    let mut trace = Vec::with_capacity(params.iterations);
    let mut iterates = Vec::with_capacity(params.iterations);

    for t in 0..params.iterations {
        let q: Vec<f64> = offset.iter().map(|w| w + 1.0 / m as f64).collect();
        let estimate = estimate_gradient(
            pool,
            spec,
            &q,
            params.num_samples,
            n,
            SampleKey {
                seed: params.seed,
                instance: instance as u64,
                iteration: t as u64,
            },
        )?;
        let sign = if params.literal_sign { -1.0 } else { 1.0 };
        let direction = if params.centered { &estimate.centered } else { &estimate.gradient };
        for (v, g) in velocity.iter_mut().zip(direction) {
            *v = params.momentum * sign * g + (1.0 - params.momentum) * *v;
        }
        let target = gradmax(&velocity, &center, rho_ind)?;
        for (w, s) in offset.iter_mut().zip(&target) {
            *w += step * (s - 1.0 / m as f64);
        }
        trace.push(IterationDiagnostics {
            iteration: t,
            objective: estimate.objective,
            gradient_norm: estimate.gradient.iter().map(|g| g * g).sum::<f64>().sqrt(),
        });
        iterates.push(offset.clone());
    }
    // Re-center so the offset sums to zero exactly up to rounding.
    let drift = offset.iter().sum::<f64>() / m as f64;
    offset.iter_mut().for_each(|w| *w -= drift);
    Ok(InnerResult { offset, trace, iterates })
}

/// Mean `DL'` over `num_samples2` problems drawn from the shifted pool.
pub fn estimate_instance_loss(
    pool: &ScoredPool,
    spec: &LossSpec,
    offset: &[f64],
    num_samples2: usize,
    n: usize,
    key: SampleKey,
) -> Result<f64> {
    if num_samples2 == 0 {
        return Err(Error::argument("num_samples2 must be at least 1"));
    }
    let q = offset_to_distribution(offset)?;
    let sampler = PoolSampler::new(pool, &q, n)?;
    let chunks = num_samples2.div_ceil(CHUNK);
    let partials = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<f64> {
            let mut total = 0.0;
            for s in c * CHUNK..((c + 1) * CHUNK).min(num_samples2) {
                let mut rng = keyed_rng(key.seed, Stream::InstanceLoss, key.instance, key.iteration, s as u64);
                total += shifted_loss(spec, &sampler.draw(&mut rng))?;
            }
            Ok(total)
        })
        .collect::<Vec<_>>();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / num_samples2 as f64)
}

/// Instance-level offset: the maximizer of `<lambda, Q_xi>` over the ball.
pub fn fw_outer(lambda: &[f64], rho_xi: f64) -> Result<Vec<f64>> {
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::argument("lambda must be finite"));
    }
    let k = lambda.len();
    let q = gradmax(lambda, &uniform(k), rho_xi)?;
    let mut w = distribution_to_offset(&q);
    let drift = w.iter().sum::<f64>() / k as f64;
    w.iter_mut().for_each(|x| *x -= drift);
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDiagnostics {
    pub instance_id: String,
    pub draw_size: usize,
    pub trace: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseReport {
    pub loss: LossSpec,
    pub budget: UncertaintyBudget,
    pub params: FwParams,
    pub shift: HierarchicalShift,
    /// Estimated `E[DL']` per instance under its shifted pool.
    pub lambda: Vec<f64>,
    /// Worst-case expected `DL`: `<Q_xi, lambda> + 1`.
    pub value: f64,
    pub diagnostics: Vec<InstanceDiagnostics>,
}

impl WorstCaseReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `iteration` trace rows as `(instance_id, diagnostics)`.
    pub fn trace_rows(&self) -> impl Iterator<Item = (&str, &IterationDiagnostics)> {
        self.diagnostics
            .iter()
            .flat_map(|d| d.trace.iter().map(move |t| (d.instance_id.as_str(), t)))
    }
}

/// Runs the inner search per instance (in parallel), estimates each
/// instance's loss, then solves the instance-level step.
pub fn find_worst_case(
    scored: &ScoredCohort,
    spec: &LossSpec,
    budget: &UncertaintyBudget,
    params: &FwParams,
) -> Result<WorstCaseReport> {
    params.validate()?;
    budget.validate()?;
    if scored.pools.is_empty() {
        return Err(Error::EmptyCohort);
    }
    for pool in &scored.pools {
        spec.validate_for(scored, params.draw_size_for(pool))?;
    }

    let per_instance = scored
        .pools
        .par_iter()
        .enumerate()
        .map(|(j, pool)| -> Result<(InnerResult, f64)> {
            let wrap = |e: Error| Error::Instance {
                instance_id: pool.instance_id.clone(),
                source: Box::new(e),
            };
            let inner = fw_inner(pool, spec, budget.rho_ind, params, j).map_err(wrap)?;
            let lambda = estimate_instance_loss(
                pool,
                spec,
                &inner.offset,
                params.num_samples2,
                params.draw_size_for(pool),
                SampleKey {
                    seed: params.seed,
                    instance: j as u64,
                    iteration: 0,
                },
            )
            .map_err(wrap)?;
            Ok((inner, lambda))
        })
        .collect::<Vec<_>>();

    let mut offsets = Vec::with_capacity(per_instance.len());
    let mut lambda = Vec::with_capacity(per_instance.len());
    let mut diagnostics = Vec::with_capacity(per_instance.len());
    for (pool, result) in scored.pools.iter().zip(per_instance) {
        let (inner, l) = result?;
        diagnostics.push(InstanceDiagnostics {
            instance_id: pool.instance_id.clone(),
            draw_size: params.draw_size_for(pool),
            trace: inner.trace,
        });
        offsets.push(inner.offset);
        lambda.push(l);
    }
    let w_xi = fw_outer(&lambda, budget.rho_xi)?;
    let q_xi = offset_to_distribution(&w_xi)?;
    let value = q_xi.iter().zip(&lambda).map(|(q, l)| q * l).sum::<f64>() + 1.0;
    Ok(WorstCaseReport {
        loss: spec.clone(),
        budget: *budget,
        params: params.clone(),
        shift: HierarchicalShift {
            instance_ids: scored.pools.iter().map(|p| p.instance_id.clone()).collect(),
            w_xi,
            w_ind: offsets,
        },
        lambda,
        value,
        diagnostics,
    })
}

/// Scores the cohort once, then searches.
pub fn find_worst_case_for(
    cohort: &Cohort,
    predictor: &Predictor,
    spec: &LossSpec,
    budget: &UncertaintyBudget,
    params: &FwParams,
) -> Result<WorstCaseReport> {
    let scored = score_cohort(cohort, predictor)?;
    find_worst_case(&scored, spec, budget, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::uncertainty::is_feasible;

    pub(crate) fn pool(preds: &[f64], labels: &[f64]) -> ScoredPool {
        ScoredPool {
            instance_id: "p".into(),
            predictions: preds.to_vec(),
            labels: labels.to_vec(),
            costs: vec![1.0; preds.len()],
            groups: vec![0; preds.len()],
        }
    }

    fn key(seed: u64) -> SampleKey {
        SampleKey {
            seed,
            instance: 0,
            iteration: 0,
        }
    }

    #[test]
    fn point_mass_sampling() {
        let p = pool(&[0.1, 0.2], &[0.0, 1.0]);
        let mut rng = keyed_rng(1, Stream::Gradient, 0, 0, 0);
        let prob = sample_problem(&p, &[1.0, 0.0], 3, &mut rng).unwrap();
        assert_eq!(prob.indices, vec![0, 0, 0]);
        assert!(sample_problem(&p, &[0.7, 0.7], 3, &mut rng).is_err());
        assert!(sample_problem(&p, &[0.5, 0.5, 0.0], 3, &mut rng).is_err());
    }

    #[test]
    fn uniform_sampling_frequency() {
        let p = pool(&[0.1, 0.2], &[0.0, 1.0]);
        let mut rng = keyed_rng(2, Stream::Gradient, 0, 0, 0);
        let prob = sample_problem(&p, &[0.5, 0.5], 100_000, &mut rng).unwrap();
        let zeros = prob.indices.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        // sd = 0.0016; [0.49, 0.51] is a 6-sigma band
        assert!((0.49..=0.51).contains(&zeros), "{zeros}");
    }

    #[test]
    fn replayed_rng_gives_same_problem() {
        let p = pool(&[0.1, 0.2, 0.3], &[0.0, 1.0, 1.0]);
        let q = [0.2, 0.3, 0.5];
        let a = sample_problem(&p, &q, 5, &mut keyed_rng(3, Stream::Gradient, 1, 2, 3)).unwrap();
        let b = sample_problem(&p, &q, 5, &mut keyed_rng(3, Stream::Gradient, 1, 2, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_loss_gradient_is_minus_n() {
        // Predictions rank labels correctly, so top-k regret is always 0 and DL' = -1.
        let p = pool(&[0.9, 0.1, 0.5], &[1.0, 0.0, 0.0]);
        let spec = LossSpec::TopK { k: 1 };
        let q = [0.2, 0.5, 0.3];
        let est = estimate_gradient(&p, &spec, &q, 200_000, 2, key(4)).unwrap();
        assert_eq!(est.objective, -1.0);
        for g in est.gradient {
            assert!((g + 2.0).abs() < 0.05, "{g}");
        }
        assert!(est.centered.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn two_point_gradient() {
        // n = 1: individual A alone has DL = 1 (DL' = 0), B alone has DL = 0.
        // Misclassification with A misclassified and B correct.
        let p = pool(&[0.9, 0.1], &[0.0, 0.0]);
        let spec = LossSpec::MisclassRate { threshold: 0.5 };
        let est = estimate_gradient(&p, &spec, &[0.5, 0.5], 100_000, 1, key(5)).unwrap();
        // exact objective is q_A * 0 + q_B * (-1)
        assert_eq!(est.gradient[0], 0.0);
        assert!((est.gradient[1] + 1.0).abs() < 0.02, "{:?}", est.gradient);
        // DL weights: A alone contributes 1 / q_A per draw, B nothing
        assert!((est.centered[0] - 1.0).abs() < 0.02, "{:?}", est.centered);
        assert_eq!(est.centered[1], 0.0);
    }

    #[test]
    fn centered_inner_concentrates_too() {
        let p = pool(&[0.9, 0.1], &[0.0, 0.0]);
        let spec = LossSpec::MisclassRate { threshold: 0.5 };
        let params = FwParams {
            num_samples: 2_000,
            draw_size: Some(1),
            centered: true,
            ..FwParams::default()
        };
        let q = fw_inner(&p, &spec, 10.0, &params, 0).unwrap().distribution();
        assert!(q[0] >= 0.99, "{q:?}");
    }

    #[test]
    fn inner_concentrates_on_the_damaging_individual() {
        let p = pool(&[0.9, 0.1], &[0.0, 0.0]);
        let spec = LossSpec::MisclassRate { threshold: 0.5 };
        let params = FwParams {
            num_samples: 2_000,
            draw_size: Some(1),
            ..FwParams::default()
        };
        let inner = fw_inner(&p, &spec, 10.0, &params, 0).unwrap();
        let q = inner.distribution();
        assert!(q[0] >= 0.99, "{q:?}");
        let lambda = estimate_instance_loss(&p, &spec, &inner.offset, 4_000, 1, key(0)).unwrap();
        assert!(lambda + 1.0 >= 0.99);
    }

    #[test]
    fn zero_radius_keeps_offset_zero() {
        let p = pool(&[0.9, 0.1, 0.4], &[0.0, 1.0, 1.0]);
        let params = FwParams {
            num_samples: 500,
            ..FwParams::default()
        };
        let inner = fw_inner(&p, &LossSpec::TopK { k: 1 }, 0.0, &params, 0).unwrap();
        assert!(inner.offset.iter().all(|&w| w == 0.0), "{:?}", inner.offset);
    }

    #[test]
    fn flat_objective_reports_constant() {
        let p = pool(&[0.9, 0.1, 0.5], &[1.0, 0.0, 0.0]);
        let params = FwParams {
            num_samples: 300,
            ..FwParams::default()
        };
        let inner = fw_inner(&p, &LossSpec::TopK { k: 1 }, 2.0, &params, 0).unwrap();
        assert!(inner.trace.iter().all(|t| t.objective == -1.0));
    }

    #[test]
    fn every_iterate_is_feasible() {
        let p = pool(&[0.9, 0.2, 0.6, 0.3], &[0.0, 1.0, 1.0, 0.0]);
        let params = FwParams {
            num_samples: 1_000,
            ..FwParams::default()
        };
        let budget = UncertaintyBudget::new(0.8, 0.0).unwrap();
        let inner = fw_inner(&p, &LossSpec::TopK { k: 2 }, budget.rho_ind, &params, 0).unwrap();
        for w in &inner.iterates {
            let mut w = w.clone();
            let drift = w.iter().sum::<f64>() / 4.0;
            w.iter_mut().for_each(|x| *x -= drift);
            let shift = HierarchicalShift {
                instance_ids: vec!["p".into()],
                w_xi: vec![0.0],
                w_ind: vec![w],
            };
            assert!(is_feasible(&shift, &budget).feasible);
        }
    }

    #[test]
    fn outer_examples() {
        let w = fw_outer(&[-0.2, -0.9], 100.0).unwrap();
        assert_eq!(offset_to_distribution(&w).unwrap(), vec![1.0, 0.0]);
        assert_eq!(fw_outer(&[-0.5, -0.5, -0.5], 3.0).unwrap(), vec![0.0; 3]);
        assert_eq!(fw_outer(&[-0.2, -0.9], 0.0).unwrap(), vec![0.0; 2]);
    }

    fn two_instance_cohort() -> ScoredCohort {
        ScoredCohort {
            task: TaskKind::BinaryClassification,
            num_groups: 1,
            pools: vec![
                ScoredPool {
                    instance_id: "a".into(),
                    ..pool(&[0.9, 0.1], &[0.0, 0.0])
                },
                ScoredPool {
                    instance_id: "b".into(),
                    ..pool(&[0.9, 0.1, 0.7, 0.2], &[0.0, 0.0, 1.0, 1.0])
                },
            ],
        }
    }

    #[test]
    fn report_value_matches_lambda() {
        let scored = two_instance_cohort();
        let params = FwParams {
            num_samples: 500,
            num_samples2: 500,
            draw_size: Some(2),
            seed: 3,
            ..FwParams::default()
        };
        let spec = LossSpec::MisclassRate { threshold: 0.5 };
        let budget = UncertaintyBudget::new(2.0, 1.0).unwrap();
        let report = find_worst_case(&scored, &spec, &budget, &params).unwrap();
        let q = offset_to_distribution(&report.shift.w_xi).unwrap();
        let value: f64 = q.iter().zip(&report.lambda).map(|(a, b)| a * b).sum::<f64>() + 1.0;
        assert!((value - report.value).abs() < 1e-9);
        assert!(is_feasible(&report.shift, &budget).feasible);
        let again = find_worst_case(&scored, &spec, &budget, &params).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn rejects_bad_params() {
        let scored = two_instance_cohort();
        let spec = LossSpec::TopK { k: 3 };
        let params = FwParams {
            draw_size: Some(2),
            ..FwParams::default()
        };
        assert!(find_worst_case(&scored, &spec, &UncertaintyBudget::new(1.0, 1.0).unwrap(), &params).is_err());
        let params = FwParams {
            momentum: 1.5,
            ..FwParams::default()
        };
        assert!(matches!(params.validate(), Err(Error::Config { .. })));
    }
}
