use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edit_harness::config::{ExperimentConfig, Protocol};
use edit_harness::elastic::elastic_chain;
use edit_harness::error::{HarnessError, Result};
use edit_harness::metrics::{write_csv, write_file, write_jsonl, RunStatus};
use edit_harness::report::{report, write_report};
use edit_harness::runner::{evaluate_checks, layer_sizes, run_experiment, write_outputs};
use edit_harness::sweep::lr_sweep;
use edit_sim::timing::{calibrate, Injector};

const DEFAULT_LR_GRID: [f64; 5] = [3e-5, 6e-5, 1.5e-4, 3e-4, 6e-4];
const DEFAULT_WORKERS: [usize; 3] = [1, 2, 4];

#[derive(Parser)]
#[command(name = "edit-sim", version, about = "EDiT / A-EDiT local-SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this protocol.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol x scenario x seed matrix.
    Run {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 if the config's checks fail.
        #[arg(long)]
        check: bool,
    },
    /// Learning-rate sweep across worker counts.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Chained runs over the config's worker-count phases.
    Elastic {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize run directories into tables and plot data.
    Report {
        /// Run directories or summary.csv files.
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Fit the timing cost model to baseline throughput targets.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = &common.protocol {
        cfg.protocols = vec![p.parse::<Protocol>()?];
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name));
    Ok((cfg, out))
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        println!("{}", msg.as_ref());
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn cmd_run(common: &Common, check: bool) -> Result<()> {
    let (cfg, out) = load(common)?;
    let result = run_experiment(&cfg)?;
    write_outputs(&result, &out)?;
    for s in result.summaries() {
        say(
            common.quiet,
            format!(
                "{:<48} {:?}  final_train {}  final_val {}  retention {}",
                s.run_id,
                s.status,
                fmt_opt(s.final_train_loss),
                fmt_opt(s.final_val_loss),
                fmt_opt(s.retention)
            ),
        );
    }
    say(common.quiet, format!("wrote {}", out.display()));
    if check {
        evaluate_checks(&cfg, &result)?;
    }
    let failed = result.failed();
    if failed > 0 {
        return Err(HarnessError::Runtime(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn cmd_sweep(common: &Common) -> Result<()> {
    let (cfg, out) = load(common)?;
    let (grid, workers) = match &cfg.sweep {
        Some(s) => (s.lr_grid.clone(), s.workers.clone()),
        None => (DEFAULT_LR_GRID.to_vec(), DEFAULT_WORKERS.to_vec()),
    };
    let table = lr_sweep(&cfg, &grid, &workers)?;
    write_csv(&out.join("sweep.csv"), &table.csv_rows())?;
    say(common.quiet, table.render());
    for p in &cfg.protocols {
        say(
            common.quiet,
            format!(
                "{p}: argmin stable within one slot: {:?}, non-decreasing in workers: {:?}",
                table.stable(*p),
                table.non_decreasing(*p)
            ),
        );
    }
    Ok(())
}

fn cmd_elastic(common: &Common) -> Result<()> {
    let (cfg, out) = load(common)?;
    let phases = cfg
        .elastic
        .as_ref()
        .ok_or_else(|| HarnessError::Config("elastic: block required for this command".into()))?
        .phases
        .clone();
    let result = elastic_chain(&cfg, &phases)?;
    let mut summaries = Vec::new();
    for run in &result.runs {
        for ph in &run.phases {
            write_jsonl(&out.join("metrics").join(format!("{}.jsonl", ph.summary.run_id)), &ph.records)?;
            summaries.push(ph.summary.clone());
        }
    }
    write_csv(&out.join("summary.csv"), &summaries)?;
    let cmp = result.comparison();
    write_csv(&out.join("elastic.csv"), &cmp)?;
    for c in &cmp {
        say(common.quiet, format!("{:<15} final_val {}", c.protocol, fmt_opt(c.final_val_loss)));
    }
    let failed = summaries.iter().filter(|s| s.status == RunStatus::Failed).count();
    if failed > 0 {
        return Err(HarnessError::Runtime(format!("{failed} phase(s) failed")));
    }
    Ok(())
}

fn cmd_report(paths: &[PathBuf], out: &Path, quiet: bool) -> Result<()> {
    let r = report(paths)?;
    write_report(&r, out)?;
    for row in &r.rows {
        say(
            quiet,
            format!(
                "{:<15} {:<8} {:<22} {:>6}  runs {} failed {}  final_val {}  samples/s {}",
                row.protocol,
                row.ablation,
                row.scenario,
                row.magnitude,
                row.runs,
                row.failed,
                fmt_opt(row.final_val_loss),
                fmt_opt(row.samples_per_sec)
            ),
        );
    }
    say(quiet, format!("{} summary rows -> {}", r.rows.len(), out.display()));
    Ok(())
}

fn cmd_calibrate(common: &Common) -> Result<()> {
    let (cfg, out) = load(common)?;
    let targets = cfg
        .calibration
        .clone()
        .ok_or_else(|| HarnessError::Config("calibration: block required for this command".into()))?;
    let task = cfg.task.build()?;
    let template = cfg
        .timing_scenario(Protocol::Baseline, &Injector::None, &layer_sizes(&task))
        .ok_or_else(|| HarnessError::Config("timing: block required for this command".into()))?;
    let rep = calibrate(&template, &targets)?;
    let json = serde_json::to_string_pretty(&rep).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_file(&out.join("calibration.json"), json.as_bytes())?;
    for (lag, target, got) in &rep.lag_fit {
        say(common.quiet, format!("lag {lag}: target {target:.4} achieved {got:.4}"));
    }
    let (repeat, target, got) = rep.bandwidth_fit;
    say(common.quiet, format!("repeat {repeat}: target {target:.4} achieved {got:.4}"));
    say(common.quiet, json);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, check } => cmd_run(common, *check),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Elastic { common } => cmd_elastic(common),
        Command::Report { paths, out, quiet } => cmd_report(paths, out, *quiet),
        Command::Calibrate { common } => cmd_calibrate(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edit-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
