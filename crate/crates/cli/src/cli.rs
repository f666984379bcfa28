//! Command line entry points.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::experiments::{
    bench_flops_table, run_diag, run_distill_experiment, run_gen, run_oracle_experiment_full,
    run_search_experiment, write_confusion_csv, HarnessError,
};
use crate::report::write_report_csv;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TILESPARSE_OUT";

#[derive(Parser)]
#[command(
    name = "tilesparse",
    about = "Tile-sparse attention experiments: oracle masks, distilled tile scoring, tiling search",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $TILESPARSE_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the synthetic head suite and write tensors plus a manifest.
    Gen,
    /// Mask-quality sweep: oracle, estimator (with checkpoint), random.
    Oracle,
    /// Train the tile-score estimator per pool mode; write curves and checkpoints.
    Distill,
    /// Per-head tiling search over factorizations of the tile size.
    Search,
    /// Evaluate a trained checkpoint against oracle and random masks.
    Eval {
        /// Checkpoint path; overrides the config entry.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print FLOPs accounting across the sparsity sweep.
    BenchFlops,
    /// Randomized diagnostics sweeps; exits nonzero on any violation.
    Diag {
        /// Cases per check.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders its own usage/help text.
            let _ = err.print();
            return if err.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    match cli.command {
        Command::Gen => {
            let files = run_gen(&cfg, &out_dir)?;
            println!("wrote {} files under {}", files.len(), out_dir.display());
            Ok(0)
        }
        Command::Oracle => {
            let outcome = run_oracle_experiment_full(&cfg)?;
            let path = write_rows(&out_dir, "oracle_report.csv", &outcome.rows)?;
            write_confusion_csv(out_dir.join("oracle_confusion.csv"), &outcome.confusion)?;
            println!("oracle sweep: {} rows -> {}", outcome.rows.len(), path.display());
            Ok(0)
        }
        Command::Distill => {
            let outcome = run_distill_experiment(&cfg, Some(&out_dir))?;
            let path = write_rows(&out_dir, "distill_report.csv", &outcome.rows)?;
            println!(
                "distill: {} rows, {} artifacts -> {}",
                outcome.rows.len(),
                outcome.artifacts.len(),
                path.display()
            );
            for row in &outcome.rows {
                println!(
                    "  {} {} recall {:.3} loss {:.5}",
                    row.family,
                    row.head_id,
                    row.recall,
                    row.loss.unwrap_or(f64::NAN)
                );
            }
            Ok(0)
        }
        Command::Search => {
            let (rows, entries) = run_search_experiment(&cfg)?;
            let path = write_rows(&out_dir, "search_report.csv", &rows)?;
            let json_path = out_dir.join("search_results.json");
            let tmp = json_path.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_string_pretty(&entries)?)?;
            std::fs::rename(&tmp, &json_path)?;
            for entry in &entries {
                println!("{} -> best {} ({} ties)", entry.head_id, entry.best, entry.ties.len());
            }
            println!("search: {} heads -> {}, {}", entries.len(), path.display(), json_path.display());
            Ok(0)
        }
        Command::Eval { checkpoint } => {
            if let Some(path) = checkpoint {
                cfg.checkpoint = Some(path);
            }
            if cfg.checkpoint.is_none() {
                return Err(HarnessError::CheckpointRequired);
            }
            let outcome = run_oracle_experiment_full(&cfg)?;
            let path = write_rows(&out_dir, "eval_report.csv", &outcome.rows)?;
            write_confusion_csv(out_dir.join("eval_confusion.csv"), &outcome.confusion)?;
            println!("eval: {} rows -> {}", outcome.rows.len(), path.display());
            Ok(0)
        }
        Command::BenchFlops => {
            println!("n = {}, d = {}, tile size = {}, tiles = {}", cfg.shape.n(), cfg.d, cfg.tile_size, cfg.n_tiles());
            println!("{:>10} {:>4} {:>16} {:>16} {:>8}", "sparsity", "k", "full_flops", "sparse_flops", "ratio");
            for (s, k, report) in bench_flops_table(&cfg) {
                println!(
                    "{:>10} {:>4} {:>16} {:>16} {:>8}",
                    s, k, report.full_flops, report.sparse_flops, report.ratio()
                );
            }
            Ok(0)
        }
        Command::Diag { cases } => {
            let report = run_diag(&cfg, cases)?;
            std::fs::create_dir_all(&out_dir)?;
            let json_path = out_dir.join("diag_report.json");
            let tmp = json_path.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_string_pretty(&report)?)?;
            std::fs::rename(&tmp, &json_path)?;
            println!("seed {}", report.seed);
            println!("{:>20} {:>6} {:>10} {:>14}", "check", "cases", "violations", "worst margin");
            for check in &report.checks {
                println!(
                    "{:>20} {:>6} {:>10} {:>14.3e}",
                    check.name, check.cases, check.violations, check.worst_margin
                );
            }
            println!(
                "{:>20} rank correlation {:.3} (threshold {})",
                "stat_score", report.stat_score_spearman, report.spearman_threshold
            );
            if report.violations() > 0 {
                eprintln!("diagnostics failed with {} violations", report.violations());
                return Ok(3);
            }
            println!("all diagnostics clean");
            Ok(0)
        }
    }
}

fn write_rows(
    out_dir: &Path,
    name: &str,
    rows: &[crate::report::ReportRow],
) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(name);
    write_report_csv(&path, rows)?;
    Ok(path)
}
