use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trilora::config::RunConfig;
use trilora::experiments::gradcheck::GradcheckConfig;
use trilora::experiments::params::ParamsConfig;
use trilora::experiments::scaling::ScalingConfig;
use trilora::experiments::{self, load_or_default, SweepResult};
use trilora::Error;

#[derive(Parser)]
#[command(name = "trilora", version, about = "Tri-matrix adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per configured seed.
    Train(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck(Common),
    /// Tabulate trainable parameters per method and rank.
    Params(Common),
    /// Measure gradient-norm scaling with width.
    Scaling(Common),
    /// Sweep the eq8 ratio base.
    RatioSweep(Common),
    /// Compare LoRA, B-only and ABC adapters across ranks.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's output_path).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum concurrent runs.
    #[arg(long)]
    workers: Option<usize>,
    /// Validate the config and build models without training.
    #[arg(long)]
    dry_run: bool,
}

enum Failure {
    Config(String),
    Hard(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Hard(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Hard(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run_config(c: &Common) -> Result<RunConfig, Failure> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::from_path(path)?;
    cfg.apply_overrides(c.seed, c.workers, c.out.as_deref())?;
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| Path::new("runs").join(default))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(c) => {
            let cfg = run_config(&c)?;
            if c.dry_run {
                let n = experiments::dry_run(&experiments::train_jobs(&cfg))?;
                println!("config ok: {n} run(s) validated, 0 epochs trained");
                return Ok(());
            }
            let runs = experiments::cmd_train(&cfg, &cfg.output_path)?;
            let mut failed = 0;
            for r in &runs {
                if r.ok() {
                    println!(
                        "seed {}: final val_acc {:.4} val_mcc {:.4} val_loss {:.4}, best epoch {} ({:.4}), {} adapter params",
                        r.seed,
                        r.final_val_acc.unwrap_or(f64::NAN),
                        r.final_val_mcc.unwrap_or(f64::NAN),
                        r.final_val_loss.unwrap_or(f64::NAN),
                        r.best_epoch.unwrap_or(0),
                        r.best_val_acc.unwrap_or(f64::NAN),
                        r.trainable_params.unwrap_or(0)
                    );
                } else {
                    failed += 1;
                    eprintln!("seed {}: {}", r.seed, r.status);
                }
            }
            if failed > 0 {
                return Err(Failure::Hard(format!("{failed} of {} run(s) failed", runs.len())));
            }
            Ok(())
        }
        Command::RatioSweep(c) => sweep(&c, true),
        Command::Compare(c) => sweep(&c, false),
        Command::Gradcheck(c) => {
            let mut cfg: GradcheckConfig = load_or_default(c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            if c.dry_run {
                println!("config ok: {} adapter cases planned", 4 * cfg.cases_per_mode);
                return Ok(());
            }
            let report = experiments::cmd_gradcheck(&cfg, &out_dir(&c, "gradcheck"))?;
            println!("{}", report.summary_line());
            if report.passed {
                Ok(())
            } else {
                for f in report.failures.iter().take(10) {
                    eprintln!("{}", serde_json::to_string(f).unwrap_or_default());
                }
                Err(Failure::Hard("gradient check failed".into()))
            }
        }
        Command::Params(c) => {
            let cfg: ParamsConfig = load_or_default(c.config.as_deref())?;
            if c.dry_run {
                println!("config ok");
                return Ok(());
            }
            let out = out_dir(&c, "params");
            let report = experiments::cmd_params(&cfg, &out)?;
            println!("width depth method rank trainable percent");
            for r in &report.rows {
                println!(
                    "{:5} {:5} {:6} {:4} {:9} {:8.4}%",
                    r.width,
                    r.depth,
                    r.method.as_str(),
                    r.rank,
                    r.trainable,
                    r.percent
                );
            }
            for (w, r) in &report.skipped {
                println!("skipped width {w} rank {r}: rank exceeds a layer dimension");
            }
            println!("wrote {}", out.join("params.csv").display());
            Ok(())
        }
        Command::Scaling(c) => {
            let mut cfg: ScalingConfig = load_or_default(c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            if c.dry_run {
                println!("config ok");
                return Ok(());
            }
            let out = out_dir(&c, "scaling");
            let report = experiments::cmd_scaling(&cfg, &out)?;
            let s = report.slopes;
            let sp = report.median_spreads;
            println!("slopes of l1 norm vs width: A {:.3}  B {:.3}  C {:.3}", s.a, s.b, s.c);
            println!(
                "median spread at width {}: uniform {:.3e}  eq8 {:.3e}  eq7 {:.3e}",
                report.largest_width, sp.uniform, sp.eq8, sp.eq7
            );
            println!("wrote {}", out.join("scaling.csv").display());
            Ok(())
        }
    }
}

fn sweep(c: &Common, ratio: bool) -> Result<(), Failure> {
    let cfg = run_config(c)?;
    let jobs = if ratio {
        experiments::ratio_sweep_jobs(&cfg)?
    } else {
        experiments::compare_jobs(&cfg)?
    };
    if c.dry_run {
        let n = experiments::dry_run(&jobs)?;
        println!("config ok: {n} run(s) validated, 0 epochs trained");
        return Ok(());
    }
    let result = if ratio {
        experiments::cmd_ratio_sweep(&cfg, &cfg.output_path)?
    } else {
        experiments::cmd_compare(&cfg, &cfg.output_path)?
    };
    print_sweep(&result);
    println!("wrote {}", cfg.output_path.join("sweep.csv").display());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_sweep(result: &SweepResult) {
    println!("label  runs  converged  median_epochs_to_threshold  median_final_val_acc  median_epoch_seconds");
    for a in &result.aggregates {
        println!(
            "{}  {}  {}  {}  {}  {}",
            a.label,
            a.runs,
            a.converged,
            fmt(a.median_epochs_to_threshold),
            fmt(a.median_final_val_acc),
            fmt(a.median_epoch_seconds)
        );
    }
    let failed = result.failed_runs();
    if failed > 0 {
        eprintln!("warning: {failed} run(s) failed and were recorded as non-converged");
    }
}
