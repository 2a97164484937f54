//! `gia-lab`: config-driven driver for single attack runs, paired
//! vgia-vs-baseline comparisons, grid sweeps, and a built-in selftest.

mod config;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{load_config, parse_method, resolve_workers, FileConfig};
use gia_core::data::DataSource;
use gia_core::eval::{self, ExperimentCell, Method};
use gia_core::fl::ClientMode;
use gia_core::nn::ModelShape;

#[derive(Parser)]
#[command(name = "gia-lab", version, about = "Federated-learning inversion attack lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured attack (and the baseline when `[ctp]` is present).
    Run(RunArgs),
    /// Paired comparison: the attack and the baseline share `w` and the
    /// victim batch per seed. Requires a `[ctp]` section.
    Compare(RunArgs),
    /// Expand the `[sweep]` grid over methods and client parameters.
    Sweep(RunArgs),
    /// Built-in correctness checks on a fixed internal configuration.
    Selftest {
        /// Override selftest parameters (e.g. `attack.span_tolerance=1e-7`).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value by dotted path (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `run.outdir`).
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Parallel worker count (overrides `run.workers` and `GIA_LAB_WORKERS`).
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => drive(args, Mode::Run),
        Cmd::Compare(args) => drive(args, Mode::Compare),
        Cmd::Sweep(args) => drive(args, Mode::Sweep),
        Cmd::Selftest { set } => selftest::run(&set),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[derive(PartialEq, Clone, Copy)]
enum Mode {
    Run,
    Compare,
    Sweep,
}

fn dataset_label(cfg: &FileConfig) -> String {
    match &cfg.dataset.source {
        DataSource::Synthetic { dim, batch_size, .. } => format!("synthetic-d{dim}-B{batch_size}"),
        DataSource::Csv { path, .. } => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    }
}

fn build_cells(cfg: &FileConfig, mode: Mode) -> Result<Vec<ExperimentCell>> {
    let label = dataset_label(cfg);
    let base = ExperimentCell {
        dataset_label: label.clone(),
        method: Method::Vgia,
        dataset: cfg.dataset.clone(),
        shape: ModelShape {
            input_dim: 0, // resolved from the loaded data
            attack_neurons: cfg.model.attack_neurons,
            hidden: cfg.model.hidden.clone(),
            outputs: 0,
        },
        loss: cfg.loss.kind,
        client: cfg.client.clone(),
        attack: cfg.attack.to_config(),
        rounds_budget: cfg.run.rounds_budget,
    };

    let ctp_method = cfg
        .ctp
        .as_ref()
        .map(|c| Method::Ctp { variant: c.variant, epsilon: c.epsilon });

    let mut cells = Vec::new();
    match mode {
        Mode::Run => {
            cells.push(base.clone());
            if let Some(m) = ctp_method {
                cells.push(ExperimentCell { method: m, ..base });
            }
        }
        Mode::Compare => {
            let m = ctp_method
                .ok_or_else(|| anyhow::anyhow!("compare needs a [ctp] section in the config"))?;
            cells.push(base.clone());
            cells.push(ExperimentCell { method: m, ..base });
        }
        Mode::Sweep => {
            let sweep = cfg
                .sweep
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("sweep needs a [sweep] section in the config"))?;
            let methods: Vec<Method> = if sweep.methods.is_empty() {
                let mut m = vec![Method::Vgia];
                m.extend(ctp_method);
                m
            } else {
                sweep.methods.iter().map(|n| parse_method(n)).collect::<Result<_>>()?
            };
            let epochs =
                if sweep.local_epochs.is_empty() { vec![cfg.client.local_epochs] } else { sweep.local_epochs.clone() };
            let batches = if sweep.local_batch_size.is_empty() {
                vec![cfg.client.local_batch_size]
            } else {
                sweep.local_batch_size.clone()
            };
            if cfg.client.mode != ClientMode::Fedavg
                && (epochs.len() > 1 || batches.len() > 1)
            {
                bail!("sweeping local_epochs/local_batch_size needs client.mode = \"fedavg\"");
            }
            for method in &methods {
                for &e in &epochs {
                    for &b in &batches {
                        let mut cell = base.clone();
                        cell.method = method.clone();
                        cell.client.local_epochs = e;
                        cell.client.local_batch_size = b;
                        if epochs.len() > 1 || batches.len() > 1 {
                            cell.dataset_label = format!("{label}-E{e}-bs{b}");
                        }
                        cells.push(cell);
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn drive(args: RunArgs, mode: Mode) -> Result<bool> {
    let (cfg, doc) = load_config(
        &args.config,
        &args.set,
        args.seed,
        args.outdir.as_deref(),
        args.workers,
    )?;
    let cells = build_cells(&cfg, mode)?;
    let workers = args.workers.unwrap_or_else(|| resolve_workers(&cfg.run));

    let outdir = cfg.run.outdir.clone();
    std::fs::create_dir_all(&outdir)
        .with_context(|| format!("cannot create outdir {}", outdir.display()))?;
    write_effective_config(&outdir, &doc)?;

    let result = eval::sweep(&cells, &cfg.run.seeds, workers)?;

    let rows: Vec<_> = result.runs.iter().map(|r| r.row.clone()).collect();
    eval::write_results_csv(&outdir.join("results.csv"), &rows, &result.aggregates)?;
    for run in &result.runs {
        let name = format!("trace_{}_{}_s{}.json", run.row.method, run.row.dataset, run.row.seed);
        eval::write_trace(&outdir.join(name), &run.trace)?;
    }

    for run in &result.runs {
        let r = &run.row;
        println!(
            "{:8} {:24} seed {:>3}: correct {:>4} spurious {:>3} fp {:>3} rounds {}",
            r.method,
            r.dataset,
            r.seed,
            r.n_correct,
            r.n_spurious,
            r.fp_certificates,
            r.rounds_to_verifiability.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        );
    }
    if mode == Mode::Compare {
        summarize_pairs(&result);
    }

    if result.failures.is_empty() {
        println!("results written to {}", outdir.display());
        Ok(true)
    } else {
        let log = outdir.join("failures.log");
        let body: String = result
            .failures
            .iter()
            .map(|(label, err)| format!("{label}: {err}\n"))
            .collect();
        std::fs::write(&log, body)?;
        for (label, err) in &result.failures {
            eprintln!("failed: {label}: {err}");
        }
        eprintln!(
            "{} of {} runs failed (see {})",
            result.failures.len(),
            result.failures.len() + result.runs.len(),
            log.display()
        );
        Ok(false)
    }
}

fn summarize_pairs(result: &eval::SweepResult) {
    use std::collections::BTreeMap;
    let mut by_seed: BTreeMap<u64, Vec<&eval::CellRun>> = BTreeMap::new();
    for run in &result.runs {
        by_seed.entry(run.row.seed).or_default().push(run);
    }
    for (seed, runs) in by_seed {
        let vgia = runs.iter().find(|r| r.row.method == "vgia");
        let ctp = runs.iter().find(|r| r.row.method != "vgia");
        if let (Some(v), Some(c)) = (vgia, ctp) {
            println!(
                "paired seed {seed}: shared eps_w {} | vgia rounds {:?} vs {} rounds {:?}",
                v.row.eps_w.map(|e| format!("{e:.3e}")).unwrap_or_default(),
                v.row.rounds_to_verifiability,
                c.row.method,
                c.row.rounds_to_verifiability,
            );
        }
    }
}

fn write_effective_config(outdir: &Path, doc: &toml::Value) -> Result<()> {
    let body = toml::to_string_pretty(doc).context("serializing effective config")?;
    std::fs::write(outdir.join("effective_config.toml"), body)?;
    Ok(())
}
