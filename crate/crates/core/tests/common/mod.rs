#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wcshift::data::{generate_synthetic, SyntheticSpec, TaskKind};
use wcshift::losses::LossSpec;
use wcshift::predictors::{score_cohort, train, PredictorKind, ScoredCohort, ScoredPool, TrainConfig};
use wcshift::rng::{keyed_rng, Stream};

pub fn rng(seed: u64) -> ChaCha8Rng {
    keyed_rng(seed, Stream::Synthetic, 0xacc, 0, 0)
}

pub fn binary_pool(rng: &mut impl Rng, id: &str, m: usize) -> ScoredPool {
    ScoredPool {
        instance_id: id.into(),
        predictions: (0..m).map(|_| rng.random_range(0.02..0.98)).collect(),
        labels: (0..m).map(|_| f64::from(rng.random_bool(0.5))).collect(),
        costs: (0..m).map(|_| rng.random_range(1..4) as f64).collect(),
        groups: (0..m).map(|_| rng.random_range(0..2)).collect(),
    }
}

pub fn regression_pool(rng: &mut impl Rng, id: &str, m: usize) -> ScoredPool {
    ScoredPool {
        instance_id: id.into(),
        predictions: (0..m).map(|_| rng.random_range(1.0..6.0)).collect(),
        labels: (0..m).map(|_| rng.random_range(1.0..6.0)).collect(),
        costs: vec![1.0; m],
        groups: vec![0; m],
    }
}

/// All seven losses with parameters that fit draws of up to three individuals.
/// The flag marks regression losses.
pub fn seven_losses() -> Vec<(LossSpec, bool)> {
    vec![
        (LossSpec::TopK { k: 1 }, false),
        (LossSpec::Knapsack { budget: 3.0, use_costs: true }, false),
        (LossSpec::FairnessGini { k: 1 }, false),
        (LossSpec::MisclassRate { threshold: 0.5 }, false),
        (LossSpec::CrossEntropy { eps: 1e-12 }, false),
        (LossSpec::NashWelfare { budget: 2.0, constant: 1.0 }, true),
        (LossSpec::Mse { scale: 32.0 }, true),
    ]
}

pub fn pool_for(rng: &mut impl Rng, regression: bool, m: usize) -> ScoredPool {
    if regression {
        regression_pool(rng, "r", m)
    } else {
        binary_pool(rng, "b", m)
    }
}

/// Strictly positive point, entries at least `0.2 / m` before normalization.
pub fn interior_point(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

pub fn scored(task: TaskKind, pools: Vec<ScoredPool>) -> ScoredCohort {
    ScoredCohort {
        task,
        num_groups: 2,
        pools,
    }
}

/// Synthetic binary cohort with a trained logistic predictor.
pub fn synthetic_scored(instances: usize, pool_size: usize, seed: u64) -> ScoredCohort {
    let cohort = generate_synthetic(
        &SyntheticSpec::new(instances, pool_size, 3, TaskKind::BinaryClassification),
        seed,
    )
    .unwrap();
    let trained = train(&cohort, PredictorKind::Logistic, &TrainConfig::default(), seed).unwrap();
    score_cohort(&cohort, &trained.predictor).unwrap()
}

/// Two pools that separate a ranking loss from cross-entropy.
///
/// Pool `mixed` holds a positive scored just below a negative, both near 0.5:
/// top-1 picks the wrong one whenever both are drawn, yet neither prediction is
/// confident. Pool `negatives` has no positives, so top-1 regret is always
/// zero, but one individual is confidently wrong.
pub fn separating_cohort() -> ScoredCohort {
    let pool = |id: &str, preds: &[f64], labels: &[f64]| ScoredPool {
        instance_id: id.into(),
        predictions: preds.to_vec(),
        labels: labels.to_vec(),
        costs: vec![1.0; preds.len()],
        groups: vec![0; preds.len()],
    };
    ScoredCohort {
        task: TaskKind::BinaryClassification,
        num_groups: 1,
        pools: vec![
            pool("mixed", &[0.45, 0.55], &[1.0, 0.0]),
            pool("negatives", &[0.99, 0.5], &[0.0, 0.0]),
        ],
    }
}
