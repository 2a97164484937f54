//! Batch sources: seeded synthetic generation and CSV ingestion with the
//! scaling conventions the attack assumes (features to a known box, targets
//! optionally standardized).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::Dist;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{Batch, FeatureBox, Targets};

/// Target rule of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum SyntheticTargets {
    /// `y = θ·x + 0.1·noise` with `θ` drawn once from the seed.
    LinearNoise,
    /// Uniform class labels in `0..classes`.
    Classes { classes: usize },
}

/// Task of a CSV ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Where a batch comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        dim: usize,
        batch_size: usize,
        seed: u64,
        #[serde(flatten)]
        targets: SyntheticTargets,
        /// Feature distribution; defaults to uniform on [0, 1].
        #[serde(default)]
        feature_distribution: Option<Dist>,
    },
    Csv {
        path: PathBuf,
        /// Feature columns by header name; defaults to every column except
        /// the target.
        #[serde(default)]
        feature_columns: Option<Vec<String>>,
        target_column: String,
        task: TaskKind,
    },
}

/// Feature scaling applied after ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingKind {
    /// Per-feature min-max rescaling to [0, 1].
    Minmax01,
    /// Per-feature rescaling to [-1, 1].
    Symmetric11,
    #[default]
    None,
}

/// Full description of a dataset: source, scaling, target convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default)]
    pub scaling: ScalingKind,
    #[serde(default)]
    pub target_standardize: bool,
}

/// Per-column scaling record, kept to invert the transform for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ColumnScale {
    Identity,
    MinMax01 { min: f64, max: f64 },
    Symmetric11 { min: f64, max: f64 },
}

impl ColumnScale {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            ColumnScale::Identity => v,
            ColumnScale::MinMax01 { min, max } => {
                if max > min {
                    (v - min) / (max - min)
                } else {
                    0.0
                }
            }
            ColumnScale::Symmetric11 { min, max } => {
                if max > min {
                    2.0 * (v - min) / (max - min) - 1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn invert(&self, v: f64) -> f64 {
        match *self {
            ColumnScale::Identity => v,
            ColumnScale::MinMax01 { min, max } => {
                if max > min {
                    min + v * (max - min)
                } else {
                    min
                }
            }
            ColumnScale::Symmetric11 { min, max } => {
                if max > min {
                    min + (v + 1.0) * (max - min) / 2.0
                } else {
                    min
                }
            }
        }
    }
}

/// Standardization parameters of a scalar target column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStandardization {
    pub mean: f64,
    pub std: f64,
}

/// Everything needed to map reconstructed records back to raw units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingMeta {
    pub columns: Vec<ColumnScale>,
    pub target: Option<TargetStandardization>,
    /// Post-encoding column names (one-hot columns are `col=value`).
    pub feature_names: Vec<String>,
}

impl ScalingMeta {
    pub fn unscale_feature(&self, col: usize, v: f64) -> f64 {
        self.columns[col].invert(v)
    }

    pub fn unscale_target(&self, y: f64) -> f64 {
        match self.target {
            Some(t) => y * t.std + t.mean,
            None => y,
        }
    }
}

/// A loaded batch plus the bounds and scaling records the attack consumes.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub batch: Batch,
    pub feature_box: FeatureBox,
    pub meta: ScalingMeta,
    /// Exact duplicate feature rows `(first_index, duplicate_index)`; kept in
    /// the batch but reported, since their shared slab can never certify.
    pub duplicate_pairs: Vec<(usize, usize)>,
    /// Class count for classification tasks.
    pub classes: Option<usize>,
}

/// Generates a synthetic batch: i.i.d. features (uniform on `[0,1]` by
/// default), deterministic per seed, duplicate rows rejected so every pair of
/// samples stays linearly independent with probability 1.
pub fn gen_synthetic(dim: usize, batch_size: usize, seed: u64, rule: SyntheticTargets) -> Result<Batch> {
    gen_synthetic_dist(dim, batch_size, seed, rule, None)
}

pub fn gen_synthetic_dist(
    dim: usize,
    batch_size: usize,
    seed: u64,
    rule: SyntheticTargets,
    feature_distribution: Option<Dist>,
) -> Result<Batch> {
    if dim == 0 || batch_size == 0 {
        return Err(Error::Config("synthetic batch needs dim >= 1 and batch_size >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(batch_size);
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(batch_size);
    let mut attempts = 0usize;
    while rows.len() < batch_size {
        attempts += 1;
        if attempts > batch_size.saturating_mul(16) + 1024 {
            return Err(Error::Config(
                "cannot draw the requested number of distinct rows".into(),
            ));
        }
        let row: Vec<f64> = (0..dim)
            .map(|_| match &feature_distribution {
                None => rng.gen_range(0.0..1.0),
                Some(d) => d.sample(&mut rng),
            })
            .collect();
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        if seen.contains_key(&key) {
            continue;
        }
        seen.insert(key, rows.len());
        rows.push(row);
    }

    let targets = match rule {
        SyntheticTargets::LinearNoise => {
            let noise = Normal::new(0.0, 1.0).unwrap();
            Targets::Scalar(
                rows.iter()
                    .map(|x| crate::linalg::dot(&theta, x) + 0.1 * noise.sample(&mut rng))
                    .collect(),
            )
        }
        SyntheticTargets::Classes { classes } => {
            if classes < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
            Targets::Class((0..batch_size).map(|_| rng.gen_range(0..classes)).collect())
        }
    };
    Batch::new(Mat::from_rows(rows), targets)
}

fn empirical_bounds(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let dim = rows[0].len();
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
    for row in rows {
        for (b, v) in bounds.iter_mut().zip(row) {
            b.0 = b.0.min(*v);
            b.1 = b.1.max(*v);
        }
    }
    bounds
}

fn find_duplicates(rows: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut dups = Vec::new();
    for (j, row) in rows.iter().enumerate() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        match seen.get(&key) {
            Some(&first) => dups.push((first, j)),
            None => {
                seen.insert(key, j);
            }
        }
    }
    dups
}

/// Loads a batch per the spec: scales features, derives the feature box the
/// attack will assume, and retains the metadata needed to invert target
/// standardization for reporting.
pub fn load(spec: &DatasetSpec) -> Result<LoadedDataset> {
    let (rows, targets, names, classes) = match &spec.source {
        DataSource::Synthetic { dim, batch_size, seed, targets, feature_distribution } => {
            let batch =
                gen_synthetic_dist(*dim, *batch_size, *seed, *targets, *feature_distribution)?;
            let rows: Vec<Vec<f64>> =
                (0..batch.len()).map(|j| batch.sample(j).to_vec()).collect();
            let names = (0..*dim).map(|i| format!("x{i}")).collect();
            let classes = match targets {
                SyntheticTargets::Classes { classes } => Some(*classes),
                SyntheticTargets::LinearNoise => None,
            };
            (rows, batch.targets().clone(), names, classes)
        }
        DataSource::Csv { path, feature_columns, target_column, task } => {
            let (rows, targets, names) =
                read_csv(path, feature_columns.as_deref(), target_column, *task)?;
            let classes = match &targets {
                Targets::Class(idx) => Some(idx.iter().max().map_or(0, |m| m + 1)),
                Targets::Scalar(_) => None,
            };
            (rows, targets, names, classes)
        }
    };

    // scale features
    let raw_bounds = empirical_bounds(&rows);
    let columns: Vec<ColumnScale> = raw_bounds
        .iter()
        .enumerate()
        .map(|(i, &(min, max))| {
            if max <= min && spec.scaling != ScalingKind::None {
                log::warn!("feature column {} ({}) is constant; mapped to 0", i, names[i]);
            }
            match spec.scaling {
                ScalingKind::None => ColumnScale::Identity,
                ScalingKind::Minmax01 => ColumnScale::MinMax01 { min, max },
                ScalingKind::Symmetric11 => ColumnScale::Symmetric11 { min, max },
            }
        })
        .collect();
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&columns).map(|(v, c)| c.apply(*v)).collect())
        .collect();

    // the attacker's known bounds: the scaling codomain where one exists,
    // otherwise the observed bounds
    let feature_box = FeatureBox(match spec.scaling {
        ScalingKind::Minmax01 => vec![(0.0, 1.0); columns.len()],
        ScalingKind::Symmetric11 => vec![(-1.0, 1.0); columns.len()],
        ScalingKind::None => empirical_bounds(&scaled),
    });

    // standardize scalar targets
    let (targets, target_meta) = match (&targets, spec.target_standardize) {
        (Targets::Scalar(ys), true) => {
            let n = ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            if var == 0.0 {
                log::warn!("target column is constant; standardization keeps it at 0");
            }
            (
                Targets::Scalar(ys.iter().map(|y| (y - mean) / std).collect()),
                Some(TargetStandardization { mean, std }),
            )
        }
        _ => (targets.clone(), None),
    };

    let duplicate_pairs = find_duplicates(&scaled);
    for &(a, b) in &duplicate_pairs {
        log::warn!("rows {a} and {b} are exact duplicates; their shared slab cannot certify");
    }

    let batch = Batch::new(Mat::from_rows(scaled), targets)?;
    Ok(LoadedDataset {
        batch,
        feature_box,
        meta: ScalingMeta { columns, target: target_meta, feature_names: names },
        duplicate_pairs,
        classes,
    })
}

/// CSV ingestion: comma-separated, header row required, UTF-8, decimal-point
/// floats. Non-numeric feature columns are one-hot encoded (column order
/// preserved, category values alphabetical within a column).
fn read_csv(
    path: &std::path::Path,
    feature_columns: Option<&[String]>,
    target_column: &str,
    task: TaskKind,
) -> Result<(Vec<Vec<f64>>, Targets, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?
            .iter()
            .map(|h| h.to_string())
            .collect();

    let target_idx = headers.iter().position(|h| h == target_column).ok_or_else(|| {
        Error::Csv { line: 1, msg: format!("target column '{target_column}' not in header") }
    })?;
    let feature_idx: Vec<usize> = match feature_columns {
        Some(cols) => cols
            .iter()
            .map(|c| {
                headers.iter().position(|h| h == c).ok_or_else(|| Error::Csv {
                    line: 1,
                    msg: format!("feature column '{c}' not in header"),
                })
            })
            .collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != target_idx).collect(),
    };

    // first pass: collect raw cells
    let mut raw: Vec<Vec<String>> = Vec::new();
    let mut target_raw: Vec<String> = Vec::new();
    for (rec_no, record) in reader.records().enumerate() {
        let line = rec_no + 2; // header is line 1
        let record = record.map_err(|e| Error::Csv { line, msg: e.to_string() })?;
        let mut cells = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let cell = record.get(i).ok_or_else(|| Error::Csv {
                line,
                msg: format!("missing column {} ({})", i, headers[i]),
            })?;
            cells.push(cell.to_string());
        }
        let t = record.get(target_idx).ok_or_else(|| Error::Csv {
            line,
            msg: format!("missing target column {target_column}"),
        })?;
        target_raw.push(t.to_string());
        raw.push(cells);
    }
    if raw.is_empty() {
        return Err(Error::Csv { line: 2, msg: "no data rows".into() });
    }

    // column typing: numeric unless any cell fails to parse
    let ncols = feature_idx.len();
    let mut categorical: Vec<Option<BTreeSet<String>>> = vec![None; ncols];
    for c in 0..ncols {
        if raw.iter().any(|row| row[c].parse::<f64>().is_err()) {
            let values: BTreeSet<String> = raw.iter().map(|row| row[c].clone()).collect();
            categorical[c] = Some(values);
        }
    }

    // encode
    let mut names: Vec<String> = Vec::new();
    for c in 0..ncols {
        let base = &headers[feature_idx[c]];
        match &categorical[c] {
            None => names.push(base.clone()),
            Some(values) => {
                for v in values {
                    names.push(format!("{base}={v}"));
                }
            }
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
    for (rec_no, cells) in raw.iter().enumerate() {
        let line = rec_no + 2;
        let mut row = Vec::with_capacity(names.len());
        for c in 0..ncols {
            match &categorical[c] {
                None => {
                    let v: f64 = cells[c].parse().map_err(|_| Error::Csv {
                        line,
                        msg: format!("'{}' is not a number in column {}", cells[c], headers[feature_idx[c]]),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Csv { line, msg: "non-finite feature value".into() });
                    }
                    row.push(v);
                }
                Some(values) => {
                    for v in values {
                        row.push(if *v == cells[c] { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        rows.push(row);
    }

    let targets = match task {
        TaskKind::Regression => {
            let mut ys = Vec::with_capacity(target_raw.len());
            for (rec_no, t) in target_raw.iter().enumerate() {
                let line = rec_no + 2;
                let y: f64 = t.parse().map_err(|_| Error::Csv {
                    line,
                    msg: format!("target '{t}' is not a number"),
                })?;
                ys.push(y);
            }
            Targets::Scalar(ys)
        }
        TaskKind::Classification => {
            let classes: BTreeMap<String, usize> = target_raw
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v.clone(), i))
                .collect();
            Targets::Class(target_raw.iter().map(|t| classes[t]).collect())
        }
    };
    Ok((rows, targets, names))
}
