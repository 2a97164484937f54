//! Experimenter-side machinery: ground-truth scoring, paired experiment
//! cells, seed sweeps with a worker pool, and CSV/JSON result export.
//!
//! Scoring is attack-blind: it sees only emitted reconstructions and the
//! truth batch, never attack internals.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{run_vgia, AttackConfig, AttackOutcome, Certificate, ReconstructionRecord, RoundTrace};
use crate::ctp::{epsilon_w, run_ctp, CtpConfig, CtpVariant};
use crate::data::{self, DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::fl::{ClientConfig, ClientMode};
use crate::nn::{Batch, LossKind, ModelShape, TargetValue};

/// Default input-correctness tolerance (squared-distance form is exact).
pub const INPUT_TOLERANCE: f64 = 1e-9;
/// Default scalar-target correctness tolerance.
pub const TARGET_TOLERANCE: f64 = 1e-8;

/// Ground-truth comparison of one run's emissions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_correct: usize,
    pub n_spurious: usize,
    /// Spurious fraction of emitted reconstructions (0 when nothing emitted).
    pub reconstruction_error_fraction: f64,
    pub rounds_to_verifiability: Option<usize>,
    /// Certified records that do not match a true sample.
    pub false_positive_certificates: usize,
    /// Correct records whose recovered target also matches.
    pub n_target_correct: usize,
}

/// Per-reconstruction scoring detail.
#[derive(Debug, Clone)]
pub struct RecordScore {
    /// Matched truth row, if any.
    pub matched: Option<usize>,
    pub input_correct: bool,
    pub target_correct: Option<bool>,
    pub distance: f64,
}

/// Greedy nearest-pair matching of reconstructions to truth rows.
///
/// Pairs are consumed globally smallest distance first; at the default
/// tolerance matches are unambiguous, so greedy equals optimal.
pub fn score(
    reconstructions: &[ReconstructionRecord],
    truth: &Batch,
    input_tol: f64,
    target_tol: f64,
) -> (RunMetrics, Vec<RecordScore>) {
    let nr = reconstructions.len();
    let nt = truth.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(nr * nt);
    for (i, rec) in reconstructions.iter().enumerate() {
        for j in 0..nt {
            let d = l2(&rec.x_hat, truth.sample(j));
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let mut rec_used = vec![false; nr];
    let mut truth_used = vec![false; nt];
    let mut scores: Vec<RecordScore> = (0..nr)
        .map(|_| RecordScore { matched: None, input_correct: false, target_correct: None, distance: f64::INFINITY })
        .collect();
    for (d, i, j) in pairs {
        if rec_used[i] || truth_used[j] {
            continue;
        }
        rec_used[i] = true;
        truth_used[j] = true;
        scores[i].matched = Some(j);
        scores[i].distance = d;
    }

    let mut n_correct = 0;
    let mut n_target_correct = 0;
    let mut fp = 0;
    for (i, s) in scores.iter_mut().enumerate() {
        if let Some(j) = s.matched {
            if s.distance < input_tol {
                s.input_correct = true;
                n_correct += 1;
                let tc = match (truth.target(j), &reconstructions[i].y_hat) {
                    (TargetValue::Scalar(y), TargetValue::Scalar(yh)) => (y - yh).abs() < target_tol,
                    (TargetValue::Class(y), TargetValue::Class(yh)) => y == *yh,
                    _ => false,
                };
                s.target_correct = Some(tc);
                if tc {
                    n_target_correct += 1;
                }
            }
        }
        if !s.input_correct && reconstructions[i].certificate == Certificate::SpanCertified {
            fp += 1;
        }
    }
    let n_spurious = nr - n_correct;
    let metrics = RunMetrics {
        n_correct,
        n_spurious,
        reconstruction_error_fraction: if nr == 0 { 0.0 } else { n_spurious as f64 / nr as f64 },
        rounds_to_verifiability: None,
        false_positive_certificates: fp,
        n_target_correct,
    };
    (metrics, scores)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Which attack a cell runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Vgia,
    Ctp {
        variant: CtpVariant,
        /// Explicit epsilon; when absent, derived from the true projection
        /// gap by the variant's convention.
        epsilon: Option<f64>,
    },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Vgia => "vgia".into(),
            Method::Ctp { variant, .. } => variant.label().into(),
        }
    }
}

/// One point of an experiment grid.
#[derive(Debug, Clone)]
pub struct ExperimentCell {
    /// Dataset label written to the results table.
    pub dataset_label: String,
    pub method: Method,
    pub dataset: DatasetSpec,
    pub shape: ModelShape,
    pub loss: LossKind,
    pub client: ClientConfig,
    /// Attack configuration; the seed and feature box are resolved per run.
    pub attack: AttackConfig,
    pub rounds_budget: usize,
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub batch_size: usize,
    pub dim: usize,
    pub attack_neurons: usize,
    pub rounds_budget: usize,
    pub n_correct: usize,
    pub n_spurious: usize,
    pub rounds_to_verifiability: Option<usize>,
    pub fp_certificates: usize,
    pub eps: Option<f64>,
    pub eps_w: Option<f64>,
    pub wall_ms: f64,
}

impl ResultRow {
    /// CSV header, fixed order.
    pub const HEADER: [&'static str; 14] = [
        "method",
        "dataset",
        "seed",
        "B",
        "d",
        "N",
        "rounds_budget",
        "n_correct",
        "n_spurious",
        "rounds_to_verifiability",
        "fp_certificates",
        "eps",
        "eps_w",
        "wall_ms",
    ];

    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.dataset.clone(),
            self.seed.to_string(),
            self.batch_size.to_string(),
            self.dim.to_string(),
            self.attack_neurons.to_string(),
            self.rounds_budget.to_string(),
            self.n_correct.to_string(),
            self.n_spurious.to_string(),
            self.rounds_to_verifiability.map(|r| r.to_string()).unwrap_or_default(),
            self.fp_certificates.to_string(),
            self.eps.map(|e| format!("{e}")).unwrap_or_default(),
            self.eps_w.map(|e| format!("{e}")).unwrap_or_default(),
            format!("{}", self.wall_ms),
        ]
    }

    /// The row minus its timing field; byte-identical across reruns of the
    /// same configuration and seed.
    pub fn deterministic_fields(&self) -> Vec<String> {
        let mut r = self.to_record();
        r.pop();
        r
    }
}

/// A finished run: its table row, per-round trace, and raw outcome.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub row: ResultRow,
    pub trace: Vec<RoundTrace>,
    pub metrics: RunMetrics,
    pub outcome: AttackOutcome,
}

pub(crate) fn mix_seed(base: u64, run_seed: u64) -> u64 {
    base ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

fn per_seed_dataset(spec: &DatasetSpec, run_seed: u64) -> DatasetSpec {
    let mut out = spec.clone();
    if let DataSource::Synthetic { seed, .. } = &mut out.source {
        *seed = mix_seed(*seed, run_seed);
    }
    out
}

/// Runs one cell at one seed. Paired methods sharing a cell's dataset and
/// attack seeds see the same direction `w` and victim batch `D`.
///
/// The model's input width and output count are resolved from the loaded
/// data, so CSV sources with discovered encodings work without declaring
/// dimensions up front.
pub fn run_cell(cell: &ExperimentCell, run_seed: u64) -> Result<CellRun> {
    let started = Instant::now();
    let dataset = per_seed_dataset(&cell.dataset, run_seed);
    let loaded = data::load(&dataset)?;
    let batch = &loaded.batch;

    let shape = ModelShape {
        input_dim: batch.dim(),
        attack_neurons: cell.shape.attack_neurons,
        hidden: cell.shape.hidden.clone(),
        outputs: loaded.classes.unwrap_or(1),
    };
    match (cell.loss, loaded.classes) {
        (LossKind::SquaredError, None) | (LossKind::CrossEntropy, Some(_)) => {}
        (loss, _) => {
            return Err(Error::Config(format!(
                "loss {loss:?} does not match the dataset's target kind"
            )))
        }
    }

    let mut attack = cell.attack.clone();
    attack.seed = mix_seed(attack.seed, run_seed);
    attack.feature_box = loaded.feature_box.clone();

    let w = attack.direction(batch.dim());
    let eps_w = if batch.len() >= 2 { Some(epsilon_w(batch, &w)?) } else { None };

    let (outcome, eps) = match &cell.method {
        Method::Vgia => {
            let out =
                run_vgia(&shape, batch, &attack, &cell.client, cell.loss, cell.rounds_budget)?;
            (out, None)
        }
        Method::Ctp { variant, epsilon } => {
            let eps = match epsilon {
                Some(e) => *e,
                None => {
                    let gap = eps_w.ok_or_else(|| {
                        Error::Config("epsilon derivation needs at least two samples".into())
                    })?;
                    if gap <= 0.0 {
                        return Err(Error::Config(
                            "epsilon derivation hit duplicate projections (gap 0)".into(),
                        ));
                    }
                    variant.epsilon_from(gap)
                }
            };
            let ctp =
                CtpConfig { epsilon: eps, variant: *variant, budget: shape.attack_neurons };
            let out = run_ctp(
                &shape,
                batch,
                &ctp,
                &attack,
                &cell.client,
                cell.loss,
                cell.rounds_budget,
            )?;
            (out, Some(eps))
        }
    };

    let (mut metrics, _scores) = score(&outcome.reconstructions, batch, INPUT_TOLERANCE, TARGET_TOLERANCE);
    metrics.rounds_to_verifiability = outcome.rounds_to_verifiability;

    // Certificate soundness audit: exact gradients must never yield a
    // certified record that fails ground truth.
    if cell.client.mode == ClientMode::FedsgdFullbatch
        && metrics.false_positive_certificates > 0
    {
        return Err(Error::Config(format!(
            "soundness audit failed: {} certified records do not match any true sample",
            metrics.false_positive_certificates
        )));
    }

    let row = ResultRow {
        method: cell.method.label(),
        dataset: cell.dataset_label.clone(),
        seed: run_seed,
        batch_size: batch.len(),
        dim: batch.dim(),
        attack_neurons: shape.attack_neurons,
        rounds_budget: cell.rounds_budget,
        n_correct: metrics.n_correct,
        n_spurious: metrics.n_spurious,
        rounds_to_verifiability: metrics.rounds_to_verifiability,
        fp_certificates: metrics.false_positive_certificates,
        eps,
        eps_w,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(CellRun { row, trace: outcome.trace.clone(), metrics, outcome })
}

/// A swept grid's output: per-(cell, seed) rows in deterministic order plus
/// recorded failures.
#[derive(Debug)]
pub struct SweepResult {
    pub runs: Vec<CellRun>,
    /// `(run label, error message)` for cells that failed; failures never
    /// abort the sweep.
    pub failures: Vec<(String, String)>,
    /// Mean/std aggregate rows, one pair per cell with at least one run.
    pub aggregates: Vec<AggregateRow>,
}

/// Mean or standard deviation over one cell's seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub stat: &'static str,
    pub n_correct: f64,
    pub n_spurious: f64,
    pub rounds_to_verifiability: Option<f64>,
    pub fp_certificates: f64,
    pub wall_ms: f64,
}

pub fn run_label(cell: &ExperimentCell, seed: u64) -> String {
    format!("{}_{}_s{}", cell.method.label(), cell.dataset_label, seed)
}

/// Runs every (cell, seed) combination, up to `workers` at a time.
///
/// Output order is the input order regardless of scheduling; each run is
/// internally seeded, so the table is byte-stable apart from wall times.
pub fn sweep(cells: &[ExperimentCell], seeds: &[u64], workers: usize) -> Result<SweepResult> {
    let jobs: Vec<(usize, &ExperimentCell, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| seeds.iter().map(move |&s| (i, c, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(usize, u64, Result<CellRun>)> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(i, cell, seed)| (i, seed, run_cell(cell, seed))).collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut per_cell: Vec<Vec<usize>> = vec![Vec::new(); cells.len()];
    for (i, seed, res) in results {
        match res {
            Ok(run) => {
                per_cell[i].push(runs.len());
                runs.push(run);
            }
            Err(e) => failures.push((run_label(&cells[i], seed), e.to_string())),
        }
    }

    let mut aggregates = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        if per_cell[i].is_empty() {
            continue;
        }
        let rows: Vec<&ResultRow> = per_cell[i].iter().map(|&k| &runs[k].row).collect();
        let mean = |f: &dyn Fn(&ResultRow) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        let std = |f: &dyn Fn(&ResultRow) -> f64, m: f64| {
            (rows.iter().map(|r| (f(r) - m) * (f(r) - m)).sum::<f64>() / rows.len() as f64).sqrt()
        };
        let verif: Vec<f64> =
            rows.iter().filter_map(|r| r.rounds_to_verifiability).map(|v| v as f64).collect();
        let verif_mean = if verif.len() == rows.len() {
            Some(verif.iter().sum::<f64>() / verif.len() as f64)
        } else {
            None
        };
        let fns: [(&dyn Fn(&ResultRow) -> f64, &str); 4] = [
            (&|r: &ResultRow| r.n_correct as f64, "n_correct"),
            (&|r: &ResultRow| r.n_spurious as f64, "n_spurious"),
            (&|r: &ResultRow| r.fp_certificates as f64, "fp"),
            (&|r: &ResultRow| r.wall_ms, "wall"),
        ];
        let means: Vec<f64> = fns.iter().map(|(f, _)| mean(f)).collect();
        let stds: Vec<f64> = fns.iter().zip(&means).map(|((f, _), m)| std(f, *m)).collect();
        let verif_std = verif_mean.map(|m| {
            (verif.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / verif.len() as f64).sqrt()
        });
        aggregates.push(AggregateRow {
            method: cell.method.label(),
            dataset: cell.dataset_label.clone(),
            stat: "mean",
            n_correct: means[0],
            n_spurious: means[1],
            rounds_to_verifiability: verif_mean,
            fp_certificates: means[2],
            wall_ms: means[3],
        });
        aggregates.push(AggregateRow {
            method: cell.method.label(),
            dataset: cell.dataset_label.clone(),
            stat: "std",
            n_correct: stds[0],
            n_spurious: stds[1],
            rounds_to_verifiability: verif_std,
            fp_certificates: stds[2],
            wall_ms: stds[3],
        });
    }

    Ok(SweepResult { runs, failures, aggregates })
}

/// Writes the results table: one row per run, then the aggregate rows with
/// `mean`/`std` in the seed column.
pub fn write_results_csv(
    path: &Path,
    rows: &[ResultRow],
    aggregates: &[AggregateRow],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(ResultRow::HEADER).map_err(csv_io)?;
    for row in rows {
        w.write_record(row.to_record()).map_err(csv_io)?;
    }
    for agg in aggregates {
        w.write_record([
            agg.method.clone(),
            agg.dataset.clone(),
            agg.stat.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{}", agg.n_correct),
            format!("{}", agg.n_spurious),
            agg.rounds_to_verifiability.map(|v| format!("{v}")).unwrap_or_default(),
            format!("{}", agg.fp_certificates),
            String::new(),
            String::new(),
            format!("{}", agg.wall_ms),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Csv { line: 0, msg: e.to_string() }
}

/// Writes one run's per-round trace as a JSON array.
pub fn write_trace(path: &Path, trace: &[RoundTrace]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let body = serde_json::to_string_pretty(trace)
        .map_err(|e| Error::Config(format!("trace serialization: {e}")))?;
    f.write_all(body.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
