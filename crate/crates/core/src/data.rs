//! Cohorts of individuals grouped into allocation instances.
//!
//! Each observed instance (a day at a hospital, a state, a region) becomes an
//! [`InstancePool`]. Pools are treated as disjoint universes: an individual that
//! happens to appear in two pools is two unrelated records.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: String,
    /// Standardized numeric features.
    pub numeric_features: Vec<f64>,
    pub categorical_features: Vec<u32>,
    pub label: f64,
    pub cost: f64,
    pub group: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePool {
    pub instance_id: String,
    pub individuals: Vec<IndividualRecord>,
}

impl InstancePool {
    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }
}

/// Per-column affine transform applied to numeric features at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    fn fit(columns: &[Vec<f64>]) -> Self {
        let mut means = Vec::with_capacity(columns.len());
        let mut stds = Vec::with_capacity(columns.len());
        for col in columns {
            let n = col.len().max(1) as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            means.push(mean);
            stds.push(if std > 0.0 { std } else { 1.0 });
        }
        Standardization { means, stds }
    }

    /// Maps raw feature values into the standardized space of the cohort.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.means.len() {
            return Err(Error::argument(format!(
                "expected {} numeric features, got {}",
                self.means.len(),
                raw.len()
            )));
        }
        Ok(raw
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

/// Column metadata shared by every pool of a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CohortSchema {
    pub numeric_names: Vec<String>,
    pub categorical_names: Vec<String>,
    /// Raw level strings per categorical column; the code is the index.
    pub categorical_levels: Vec<Vec<String>>,
    pub group_levels: Vec<String>,
    pub standardization: Standardization,
}

impl CohortSchema {
    pub fn num_groups(&self) -> usize {
        self.group_levels.len().max(1)
    }

    pub fn categorical_cardinalities(&self) -> Vec<usize> {
        self.categorical_levels.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub task: TaskKind,
    pub schema: CohortSchema,
    pub pools: Vec<InstancePool>,
}

impl Cohort {
    pub fn num_instances(&self) -> usize {
        self.pools.len()
    }

    pub fn num_individuals(&self) -> usize {
        self.pools.iter().map(InstancePool::len).sum()
    }

    pub fn individuals(&self) -> impl Iterator<Item = &IndividualRecord> {
        self.pools.iter().flat_map(|p| p.individuals.iter())
    }

    pub fn instance_ids(&self) -> Vec<String> {
        self.pools.iter().map(|p| p.instance_id.clone()).collect()
    }

    /// Checks the structural invariants: non-empty pools, unique ids within
    /// each pool, non-negative costs, binary labels for classification tasks.
    pub fn validate(&self) -> Result<()> {
        if self.pools.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let n_num = self.schema.numeric_names.len();
        let n_cat = self.schema.categorical_names.len();
        for pool in &self.pools {
            if pool.individuals.is_empty() {
                return Err(Error::Schema(format!(
                    "instance `{}` has no individuals",
                    pool.instance_id
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for ind in &pool.individuals {
                if !seen.insert(ind.id.as_str()) {
                    return Err(Error::Schema(format!(
                        "duplicate individual id `{}` in instance `{}`",
                        ind.id, pool.instance_id
                    )));
                }
                if ind.numeric_features.len() != n_num || ind.categorical_features.len() != n_cat {
                    return Err(Error::Schema(format!(
                        "individual `{}` does not match the cohort feature schema",
                        ind.id
                    )));
                }
                if !(ind.cost >= 0.0) {
                    return Err(Error::Schema(format!("individual `{}` has negative cost", ind.id)));
                }
                if self.task == TaskKind::BinaryClassification && ind.label != 0.0 && ind.label != 1.0 {
                    return Err(Error::Schema(format!(
                        "individual `{}` has non-binary label {}",
                        ind.id, ind.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cohort: Cohort = serde_json::from_str(text)?;
        cohort.validate()?;
        Ok(cohort)
    }
}

/// Names the columns of a delimited cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub instance_id: String,
    #[serde(default)]
    pub id: Option<String>,
    pub label: String,
    #[serde(default)]
    pub numeric_features: Vec<String>,
    #[serde(default)]
    pub categorical_features: Vec<String>,
    #[serde(default)]
    pub cost: Option<String>,
    #[serde(default)]
    pub group: Option<String>,
    pub task: TaskKind,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl SchemaConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Assigns dense codes to raw strings in first-appearance order.
#[derive(Default)]
struct Coder {
    codes: HashMap<String, u32>,
    levels: Vec<String>,
}

impl Coder {
    fn code(&mut self, raw: &str) -> u32 {
        if let Some(&c) = self.codes.get(raw) {
            return c;
        }
        let c = self.levels.len() as u32;
        self.codes.insert(raw.to_string(), c);
        self.levels.push(raw.to_string());
        c
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

fn parse_number(raw: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = raw.trim();
    let value: f64 = trimmed.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{trimmed}` is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{trimmed}` is not finite"),
        });
    }
    Ok(value)
}

/// Reads a delimited file with a header row into a cohort.
///
/// Row indices in errors are 1-based data rows (the header is not counted).
pub fn load_cohort(path: &Path, schema: &SchemaConfig) -> Result<Cohort> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_cohort(&text, schema)
}

pub fn parse_cohort(text: &str, schema: &SchemaConfig) -> Result<Cohort> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Schema("delimiter must be an ASCII character".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyCohort);
    }

    let inst_col = column_index(&headers, &schema.instance_id)?;
    let label_col = column_index(&headers, &schema.label)?;
    let id_col = schema.id.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let cost_col = schema.cost.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let group_col = schema.group.as_deref().map(|c| column_index(&headers, c)).transpose()?;
    let num_cols = schema
        .numeric_features
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let cat_cols = schema
        .categorical_features
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut cat_coders: Vec<Coder> = cat_cols.iter().map(|_| Coder::default()).collect();
    let mut group_coder = Coder::default();
    let mut pool_order: Vec<String> = Vec::new();
    let mut pool_index: HashMap<String, usize> = HashMap::new();
    let mut raw_pools: Vec<Vec<IndividualRecord>> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |col: usize, name: &str| -> Result<String> {
            let value = record.get(col).map(str::trim).unwrap_or("");
            if value.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    message: "missing value".into(),
                });
            }
            Ok(value.to_string())
        };

        let instance = field(inst_col, &schema.instance_id)?;
        let label = parse_number(&field(label_col, &schema.label)?, row, &schema.label)?;
        if schema.task == TaskKind::BinaryClassification && label != 0.0 && label != 1.0 {
            return Err(Error::Parse {
                row,
                column: schema.label.clone(),
                message: format!("binary label must be 0 or 1, got {label}"),
            });
        }
        let cost = match (cost_col, schema.cost.as_deref()) {
            (Some(c), Some(name)) => {
                let v = parse_number(&field(c, name)?, row, name)?;
                if v < 0.0 {
                    return Err(Error::Parse {
                        row,
                        column: name.to_string(),
                        message: "cost must be non-negative".into(),
                    });
                }
                v
            }
            _ => 1.0,
        };
        let group = match (group_col, schema.group.as_deref()) {
            (Some(c), Some(name)) => group_coder.code(&field(c, name)?),
            _ => 0,
        };
        let numeric = num_cols
            .iter()
            .zip(&schema.numeric_features)
            .map(|(&c, name)| parse_number(&field(c, name)?, row, name))
            .collect::<Result<Vec<_>>>()?;
        let categorical = cat_cols
            .iter()
            .zip(&schema.categorical_features)
            .zip(cat_coders.iter_mut())
            .map(|((&c, name), coder)| Ok(coder.code(&field(c, name)?)))
            .collect::<Result<Vec<_>>>()?;

        let slot = *pool_index.entry(instance.clone()).or_insert_with(|| {
            pool_order.push(instance.clone());
            raw_pools.push(Vec::new());
            raw_pools.len() - 1
        });
        let id = match (id_col, schema.id.as_deref()) {
            (Some(c), Some(name)) => field(c, name)?,
            _ => row.to_string(),
        };
        raw_pools[slot].push(IndividualRecord {
            id,
            numeric_features: numeric,
            categorical_features: categorical,
            label,
            cost,
            group,
        });
    }

    if raw_pools.is_empty() {
        return Err(Error::EmptyCohort);
    }

    let group_levels = if schema.group.is_some() {
        group_coder.levels
    } else {
        vec!["all".to_string()]
    };
    let mut cohort = Cohort {
        task: schema.task,
        schema: CohortSchema {
            numeric_names: schema.numeric_features.clone(),
            categorical_names: schema.categorical_features.clone(),
            categorical_levels: cat_coders.into_iter().map(|c| c.levels).collect(),
            group_levels,
            standardization: Standardization::default(),
        },
        pools: pool_order
            .into_iter()
            .zip(raw_pools)
            .map(|(instance_id, individuals)| InstancePool {
                instance_id,
                individuals,
            })
            .collect(),
    };
    standardize_in_place(&mut cohort);
    cohort.validate()?;
    Ok(cohort)
}

fn standardize_in_place(cohort: &mut Cohort) {
    let d = cohort.schema.numeric_names.len();
    let columns: Vec<Vec<f64>> = (0..d)
        .map(|f| cohort.individuals().map(|ind| ind.numeric_features[f]).collect())
        .collect();
    let standardization = Standardization::fit(&columns);
    for pool in &mut cohort.pools {
        for ind in &mut pool.individuals {
            for (f, v) in ind.numeric_features.iter_mut().enumerate() {
                *v = (*v - standardization.means[f]) / standardization.stds[f];
            }
        }
    }
    cohort.schema.standardization = standardization;
}

/// Writes the canonical JSON form of a cohort.
pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    fs::write(path, cohort.to_json()?).map_err(|e| Error::file(path, e))
}

/// Reads a cohort from its canonical JSON form.
pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Cohort::from_json(&text)
}

/// Parameters of the two-level synthetic generator.
///
/// Each instance draws a latent shift `xi ~ U(latent_low, latent_high)`; its
/// individuals are then i.i.d. given `xi`. Numeric features center on `xi`,
/// group membership and labels depend on both features and `xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub instances: usize,
    pub pool_size: usize,
    pub features: usize,
    pub task: TaskKind,
    #[serde(default = "default_latent_low")]
    pub latent_low: f64,
    #[serde(default = "default_latent_high")]
    pub latent_high: f64,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_max_cost")]
    pub max_cost: u32,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
}

fn default_latent_low() -> f64 {
    -1.0
}
fn default_latent_high() -> f64 {
    1.0
}
fn default_groups() -> usize {
    2
}
fn default_max_cost() -> u32 {
    5
}
fn default_label_noise() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(instances: usize, pool_size: usize, features: usize, task: TaskKind) -> Self {
        SyntheticSpec {
            instances,
            pool_size,
            features,
            task,
            latent_low: default_latent_low(),
            latent_high: default_latent_high(),
            groups: default_groups(),
            max_cost: default_max_cost(),
            label_noise: default_label_noise(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draws a cohort from the two-level generator. Deterministic for a fixed seed.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Cohort> {
    if spec.instances == 0 || spec.pool_size == 0 || spec.features == 0 {
        return Err(Error::argument("instances, pool_size and features must be positive"));
    }
    if spec.groups == 0 || spec.max_cost == 0 {
        return Err(Error::argument("groups and max_cost must be positive"));
    }
    if !(spec.latent_low <= spec.latent_high) || !spec.label_noise.is_finite() || spec.label_noise < 0.0 {
        return Err(Error::argument("latent range must satisfy low <= high and noise must be >= 0"));
    }
    let coef: Vec<f64> = (0..spec.features)
        .map(|f| if f % 2 == 0 { 1.0 } else { -0.5 } / (1.0 + f as f64 / 2.0))
        .collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let unit = Uniform::new(0.0f64, 1.0).expect("unit interval");

    let pools = (0..spec.instances)
        .map(|j| {
            let mut rng = keyed_rng(seed, Stream::Synthetic, j as u64, 0, 0);
            let xi = if spec.latent_high > spec.latent_low {
                rng.random_range(spec.latent_low..spec.latent_high)
            } else {
                spec.latent_low
            };
            let individuals = (0..spec.pool_size)
                .map(|i| {
                    let x: Vec<f64> = (0..spec.features)
                        .map(|_| xi + std_normal.sample(&mut rng))
                        .collect();
                    let linear: f64 = coef.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>();
                    // Group skews with the latent shift.
                    let group = if spec.groups > 1 {
                        let u: f64 = unit.sample(&mut rng);
                        let tilt = sigmoid(xi + 0.5 * x[0]);
                        if u < tilt {
                            let rest = (spec.groups - 1) as f64;
                            1 + ((u / tilt * rest) as u32).min(spec.groups as u32 - 2)
                        } else {
                            0
                        }
                    } else {
                        0
                    };
                    let noise = spec.label_noise * std_normal.sample(&mut rng);
                    let label = match spec.task {
                        TaskKind::BinaryClassification => {
                            let p = sigmoid(1.5 * linear - 0.5 * xi + 0.3 * group as f64 + 0.5 * noise);
                            if unit.sample(&mut rng) < p {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        TaskKind::Regression => (1.0 + 0.3 * linear + 0.2 * xi + 0.25 * noise).exp(),
                    };
                    let cost = 1 + rng.random_range(0..spec.max_cost);
                    IndividualRecord {
                        id: format!("{j}-{i}"),
                        numeric_features: x,
                        categorical_features: vec![group],
                        label,
                        cost: cost as f64,
                        group,
                    }
                })
                .collect();
            InstancePool {
                instance_id: format!("inst{j}"),
                individuals,
            }
        })
        .collect();

    let mut cohort = Cohort {
        task: spec.task,
        schema: CohortSchema {
            numeric_names: (0..spec.features).map(|f| format!("x{f}")).collect(),
            categorical_names: vec!["segment".to_string()],
            categorical_levels: vec![(0..spec.groups).map(|g| format!("s{g}")).collect()],
            group_levels: (0..spec.groups).map(|g| format!("g{g}")).collect(),
            standardization: Standardization::default(),
        },
        pools,
    };
    standardize_in_place(&mut cohort);
    cohort.validate()?;
    Ok(cohort)
}
