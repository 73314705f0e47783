//! Black-box score providers.
//!
//! The search engine only ever sees one score per individual, computed once
//! up front into a [`ScoredCohort`]. Models here are deliberately small: a
//! logistic/linear model, a ReLU network with categorical embeddings, and a
//! lookup table for predictions produced elsewhere.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, IndividualRecord, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Stream};

/// Row-major dense matrix with explicit shape, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Matrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    fn check(&self) -> Result<()> {
        if self.data.len() != self.shape[0] * self.shape[1] {
            return Err(Error::argument(format!(
                "matrix shape {:?} does not match {} stored values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Maps the raw network output to a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub task: TaskKind,
    /// Regression targets are trained in standardized units.
    pub target_mean: f64,
    pub target_scale: f64,
}

impl OutputHead {
    fn apply(&self, z: f64) -> f64 {
        match self.task {
            TaskKind::BinaryClassification => sigmoid(z),
            TaskKind::Regression => self.target_mean + self.target_scale * z,
        }
    }
}

/// Feed-forward network over standardized numeric features concatenated with
/// one embedding per categorical feature. With no hidden layers this is a
/// logistic (or linear) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub numeric_features: usize,
    /// One `levels x width` table per categorical feature.
    pub embeddings: Vec<Matrix>,
    /// Hidden layers followed by the single-output layer.
    pub layers: Vec<Dense>,
    pub head: OutputHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TablePredictor {
    pub task: TaskKind,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Predictor {
    Logistic(Network),
    Mlp(Network),
    Table(TablePredictor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainLoss {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embedding_width: usize,
    /// When set, must agree with the task (cross-entropy for binary, MSE for regression).
    pub loss: Option<TrainLoss>,
    /// When set, must equal the cohort's numeric feature count.
    pub numeric_features: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            learning_rate: 0.5,
            hidden: vec![16, 16],
            embedding_width: 4,
            loss: None,
            numeric_features: None,
        }
    }
}

/// Outcome of training: the model plus the full-batch loss after each epoch.
#[derive(Debug, Clone)]
pub struct Trained {
    pub predictor: Predictor,
    pub losses: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Network {
    fn input_dim(&self) -> usize {
        self.numeric_features + self.embeddings.iter().map(Matrix::cols).sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        for e in &self.embeddings {
            e.check()?;
        }
        let mut width = self.input_dim();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.weights.check()?;
            if layer.weights.cols() != width || layer.bias.len() != layer.weights.rows() {
                return Err(Error::argument(format!("layer {l} has inconsistent shape")));
            }
            width = layer.weights.rows();
        }
        if width != 1 {
            return Err(Error::argument("network must end in a single output"));
        }
        Ok(())
    }

    fn encode(&self, numeric: &[f64], categorical: &[u32]) -> Result<Vec<f64>> {
        if numeric.len() != self.numeric_features || categorical.len() != self.embeddings.len() {
            return Err(Error::argument(format!(
                "predictor expects {} numeric and {} categorical features, got {} and {}",
                self.numeric_features,
                self.embeddings.len(),
                numeric.len(),
                categorical.len()
            )));
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(numeric);
        for (f, (&code, table)) in categorical.iter().zip(&self.embeddings).enumerate() {
            if code as usize >= table.rows() {
                return Err(Error::Lookup(format!(
                    "unknown code {code} for categorical feature {f}"
                )));
            }
            input.extend_from_slice(table.row(code as usize));
        }
        Ok(input)
    }

    fn forward(&self, input: Vec<f64>) -> (f64, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<f64> = (0..layer.weights.rows())
                .map(|r| {
                    layer.weights.row(r).iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + layer.bias[r]
                })
                .collect();
            inputs.push(h);
            h = if l == last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
        }
        (h[0], Trace { inputs, pre })
    }

    fn raw(&self, numeric: &[f64], categorical: &[u32]) -> Result<f64> {
        let input = self.encode(numeric, categorical)?;
        Ok(self.forward(input).0)
    }

    fn score(&self, x: &IndividualRecord) -> Result<f64> {
        Ok(self.head.apply(self.raw(&x.numeric_features, &x.categorical_features)?))
    }

    fn zero_like(&self) -> Network {
        Network {
            numeric_features: self.numeric_features,
            embeddings: self.embeddings.iter().map(|e| Matrix::zeros(e.rows(), e.cols())).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            head: self.head.clone(),
        }
    }

    /// Accumulates `scale * d raw / d params` into `grad`.
    fn backward(&self, trace: &Trace, categorical: &[u32], scale: f64, grad: &mut Network) {
        let mut delta = vec![scale];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grad.layers[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                for (gw, x) in g.weights.row_mut(r).iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            let mut back = vec![0.0; layer.weights.cols()];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (b, w) in back.iter_mut().zip(layer.weights.row(r)) {
                    *b += d * w;
                }
            }
            if l > 0 {
                for (b, z) in back.iter_mut().zip(&trace.pre[l - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            delta = back;
        }
        let mut offset = self.numeric_features;
        for (f, &code) in categorical.iter().enumerate() {
            let width = self.embeddings[f].cols();
            for (ge, d) in grad.embeddings[f]
                .row_mut(code as usize)
                .iter_mut()
                .zip(&delta[offset..offset + width])
            {
                *ge += d;
            }
            offset += width;
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embeddings
            .iter_mut()
            .flat_map(|e| e.data.iter_mut())
            .chain(
                self.layers
                    .iter_mut()
                    .flat_map(|l| l.weights.data.iter_mut().chain(l.bias.iter_mut())),
            )
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.embeddings
            .iter()
            .flat_map(|e| e.data.iter())
            .chain(self.layers.iter().flat_map(|l| l.weights.data.iter().chain(l.bias.iter())))
    }
}

impl Predictor {
    pub fn task(&self) -> TaskKind {
        match self {
            Predictor::Logistic(n) | Predictor::Mlp(n) => n.head.task,
            Predictor::Table(t) => t.task,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Predictor::Logistic(_) => "logistic",
            Predictor::Mlp(_) => "mlp",
            Predictor::Table(_) => "table",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Predictor::Logistic(n) | Predictor::Mlp(n) => n.validate(),
            Predictor::Table(t) => {
                for (id, &s) in &t.scores {
                    if !s.is_finite() {
                        return Err(Error::argument(format!("table score for `{id}` is not finite")));
                    }
                    if t.task == TaskKind::BinaryClassification && !(0.0..=1.0).contains(&s) {
                        return Err(Error::argument(format!(
                            "binary table score for `{id}` must lie in [0, 1], got {s}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Predictor = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// Reads a two-column `id,score` file (header row optional).
    pub fn load_table(path: &Path, task: TaskKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse_table(&text, task)
    }

    pub fn parse_table(text: &str, task: TaskKind) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_reader(text.as_bytes());
        let mut scores = BTreeMap::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Parse {
                    row: i + 1,
                    column: "score".into(),
                    message: format!("expected 2 columns, found {}", record.len()),
                });
            }
            let id = record[0].trim().to_string();
            let raw = record[1].trim();
            let score: f64 = match raw.parse() {
                Ok(v) => v,
                Err(_) if i == 0 => continue,
                Err(_) => {
                    return Err(Error::Parse {
                        row: i + 1,
                        column: "score".into(),
                        message: format!("`{raw}` is not a number"),
                    })
                }
            };
            scores.insert(id, score);
        }
        let p = Predictor::Table(TablePredictor { task, scores });
        p.validate()?;
        Ok(p)
    }
}

/// Scores one individual.
pub fn predict(p: &Predictor, x: &IndividualRecord) -> Result<f64> {
    match p {
        Predictor::Logistic(n) | Predictor::Mlp(n) => n.score(x),
        Predictor::Table(t) => t
            .scores
            .get(&x.id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no stored score for id `{}`", x.id))),
    }
}

fn build_network(
    cohort: &Cohort,
    kind: PredictorKind,
    hyper: &TrainConfig,
    head: OutputHead,
    seed: u64,
) -> Network {
    let d = cohort.schema.numeric_names.len();
    let cards = cohort.schema.categorical_cardinalities();
    let mut rng = keyed_rng(seed, Stream::Training, 0, 0, 0);
    match kind {
        PredictorKind::Logistic => {
            let embeddings: Vec<Matrix> = cards.iter().map(|&c| Matrix::zeros(c.max(1), 1)).collect();
            let input = d + embeddings.len();
            Network {
                numeric_features: d,
                embeddings,
                layers: vec![Dense {
                    weights: Matrix::zeros(1, input),
                    bias: vec![0.0],
                }],
                head,
            }
        }
        PredictorKind::Mlp => {
            let emb_init = Normal::new(0.0, 0.1).expect("valid normal");
            let embeddings: Vec<Matrix> = cards
                .iter()
                .map(|&c| {
                    let mut m = Matrix::zeros(c.max(1), hyper.embedding_width);
                    m.data.iter_mut().for_each(|v| *v = emb_init.sample(&mut rng));
                    m
                })
                .collect();
            let mut width = d + embeddings.len() * hyper.embedding_width;
            let mut layers = Vec::new();
            for &h in hyper.hidden.iter().chain(std::iter::once(&1)) {
                let bound = (6.0 / (width + h) as f64).sqrt();
                let mut w = Matrix::zeros(h, width);
                w.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                layers.push(Dense {
                    weights: w,
                    bias: vec![0.0; h],
                });
                width = h;
            }
            Network {
                numeric_features: d,
                embeddings,
                layers,
                head,
            }
        }
    }
}

/// Full-batch gradient descent on cross-entropy (binary) or MSE (regression).
///
/// A step that would raise the training loss is rejected and retried with half
/// the learning rate, so the recorded losses never increase.
pub fn train(cohort: &Cohort, kind: PredictorKind, hyper: &TrainConfig, seed: u64) -> Result<Trained> {
    let task = cohort.task;
    match (hyper.loss, task) {
        (Some(TrainLoss::CrossEntropy), TaskKind::Regression) | (Some(TrainLoss::Mse), TaskKind::BinaryClassification) => {
            return Err(Error::argument("training loss does not match the task kind"));
        }
        _ => {}
    }
    if let Some(d) = hyper.numeric_features {
        if d != cohort.schema.numeric_names.len() {
            return Err(Error::argument(format!(
                "config expects {d} numeric features but the cohort has {}",
                cohort.schema.numeric_names.len()
            )));
        }
    }
    if kind == PredictorKind::Mlp && (hyper.embedding_width == 0 || hyper.hidden.contains(&0)) {
        return Err(Error::argument("hidden and embedding widths must be positive"));
    }
    if !(hyper.learning_rate > 0.0) {
        return Err(Error::argument("learning_rate must be positive"));
    }
    let rows: Vec<&IndividualRecord> = cohort.individuals().collect();
    if rows.is_empty() {
        return Err(Error::EmptyCohort);
    }

    let head = match task {
        TaskKind::BinaryClassification => OutputHead {
            task,
            target_mean: 0.0,
            target_scale: 1.0,
        },
        TaskKind::Regression => {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r.label).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.label - mean).powi(2)).sum::<f64>() / n;
            OutputHead {
                task,
                target_mean: mean,
                target_scale: if var > 0.0 { var.sqrt() } else { 1.0 },
            }
        }
    };
    let targets: Vec<f64> = rows
        .iter()
        .map(|r| match task {
            TaskKind::BinaryClassification => r.label,
            TaskKind::Regression => (r.label - head.target_mean) / head.target_scale,
        })
        .collect();
    let inputs = {
        let probe = build_network(cohort, kind, hyper, head.clone(), seed);
        rows.iter()
            .map(|r| probe.encode(&r.numeric_features, &r.categorical_features))
            .collect::<Result<Vec<_>>>()?
    };
    let mut net = build_network(cohort, kind, hyper, head, seed);

    let n = rows.len() as f64;
    let loss_of = |net: &Network| -> f64 {
        rows.iter()
            .zip(&targets)
            .map(|(r, &t)| {
                let input = net.encode(&r.numeric_features, &r.categorical_features).expect("encoded");
                let z = net.forward(input).0;
                match task {
                    TaskKind::BinaryClassification => {
                        // log(1 + e^z) - t z, written to avoid overflow
                        z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z
                    }
                    TaskKind::Regression => (z - t).powi(2),
                }
            })
            .sum::<f64>()
            / n
    };

    let mut lr = hyper.learning_rate;
    let mut current = loss_of(&net);
    let mut losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        let mut grad = net.zero_like();
        for ((r, input), &t) in rows.iter().zip(&inputs).zip(&targets) {
            let (z, trace) = net.forward(input.clone());
            let dz = match task {
                TaskKind::BinaryClassification => sigmoid(z) - t,
                TaskKind::Regression => 2.0 * (z - t),
            };
            net.backward(&trace, &r.categorical_features, dz / n, &mut grad);
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut candidate = net.clone();
            for (p, g) in candidate.params_mut().zip(grad.params()) {
                *p -= lr * g;
            }
            let loss = loss_of(&candidate);
            if loss <= current {
                net = candidate;
                current = loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        losses.push(current);
        if !accepted {
            break;
        }
    }

    let predictor = match kind {
        PredictorKind::Logistic => Predictor::Logistic(net),
        PredictorKind::Mlp => Predictor::Mlp(net),
    };
    Ok(Trained { predictor, losses })
}

/// Cached scores, labels and allocation attributes of one pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPool {
    pub instance_id: String,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
    pub costs: Vec<f64>,
    pub groups: Vec<u32>,
}

impl ScoredPool {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCohort {
    pub task: TaskKind,
    pub num_groups: usize,
    pub pools: Vec<ScoredPool>,
}

impl ScoredCohort {
    /// Smallest label in the cohort; the default Nash-welfare constant.
    pub fn min_label(&self) -> f64 {
        self.pools
            .iter()
            .flat_map(|p| p.labels.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean_cost(&self) -> f64 {
        let (sum, n) = self
            .pools
            .iter()
            .flat_map(|p| p.costs.iter())
            .fold((0.0, 0usize), |(s, n), c| (s + c, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn mean_label(&self) -> f64 {
        let (sum, n) = self
            .pools
            .iter()
            .flat_map(|p| p.labels.iter())
            .fold((0.0, 0usize), |(s, n), c| (s + c, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Runs the predictor exactly once per individual.
pub fn score_cohort(cohort: &Cohort, predictor: &Predictor) -> Result<ScoredCohort> {
    if predictor.task() != cohort.task {
        return Err(Error::argument("predictor task does not match the cohort task"));
    }
    let pools = cohort
        .pools
        .iter()
        .map(|pool| {
            let predictions = pool
                .individuals
                .iter()
                .map(|x| predict(predictor, x))
                .collect::<Result<Vec<_>>>()?;
            Ok(ScoredPool {
                instance_id: pool.instance_id.clone(),
                predictions,
                labels: pool.individuals.iter().map(|x| x.label).collect(),
                costs: pool.individuals.iter().map(|x| x.cost).collect(),
                groups: pool.individuals.iter().map(|x| x.group).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredCohort {
        task: cohort.task,
        num_groups: cohort.schema.num_groups(),
        pools,
    })
}
