use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bigsql_core::engine::{open_session, EngineConfig};
use bigsql_core::report::{build_report, render_report, ReportFormat};
use bigsql_core::runner::{execute_plan, read_records, RunPlan};
use bigsql_core::suite::{
    database_dir, format_scale_factor, generate_scaled_data, load_or_materialize, load_suite, tpch_manifest,
    tpch_tables,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bigsql", version, about = "Offline evaluation harness for text-to-SQL agents on large data")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run-plan utilities.
    Plan {
        #[command(subcommand)]
        command: PlanCommand,
    },
    /// Execute a run plan.
    Run(RunArgs),
    /// Render tables and plot data from a run's records.
    Report(ReportArgs),
    /// Golden result cache.
    Goldens {
        #[command(subcommand)]
        command: GoldensCommand,
    },
    /// Synthetic data.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Check a plan without running anything.
    Validate { plan: PathBuf },
}

#[derive(Subcommand)]
enum GoldensCommand {
    /// Execute golden queries and cache their results and timings.
    Materialize {
        suite: PathBuf,
        #[arg(long = "scale-factor", value_name = "SF")]
        scale_factors: Vec<f64>,
        #[arg(long, default_value = "goldens")]
        cache: PathBuf,
        #[arg(long)]
        refresh: bool,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write TPC-H-shaped tables, one directory per scale factor, plus the
    /// TPC-H query manifest.
    Generate {
        #[arg(long = "scale-factor", value_name = "SF", required = true)]
        scale_factors: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    plan: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long = "scale-factor", value_name = "SF")]
    scale_factors: Vec<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-spend", value_name = "USD")]
    max_spend_usd: Option<f64>,
    #[arg(long)]
    refresh_goldens: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// A run's output directory or its records.jsonl.
    input: PathBuf,
    /// Defaults to `<run dir>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// json, csv, markdown or plotdata; all of them when omitted.
    #[arg(long = "format", value_delimiter = ',')]
    formats: Vec<String>,
}

fn load_plan(path: &Path) -> Result<RunPlan> {
    RunPlan::load(path).with_context(|| format!("loading plan {}", path.display()))
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut plan = load_plan(&args.plan)?;
    let cwd = std::env::current_dir()?;
    if let Some(dir) = args.output_dir {
        plan.output_dir = cwd.join(dir);
    }
    if let Some(r) = args.repetitions {
        plan.repetitions = r;
    }
    if !args.scale_factors.is_empty() {
        plan.scale_factors = args.scale_factors;
    }
    if let Some(c) = args.concurrency {
        plan.concurrency = c;
    }
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    if args.max_spend_usd.is_some() {
        plan.max_spend_usd = args.max_spend_usd;
    }
    plan.refresh_goldens |= args.refresh_goldens;

    let outcome = execute_plan(&plan)?;
    let s = &outcome.summary;
    println!(
        "{} episodes recorded in {:.2}s, spend {}, output in {}",
        s.records,
        s.wall_seconds,
        s.spend,
        outcome.output_dir.display()
    );
    for u in &s.unusable {
        println!("unusable: {} at sf{}: {}", u.case_id, format_scale_factor(u.scale_factor), u.reason);
    }
    for k in &s.skipped {
        println!("skipped: {} {} r{}: {}", k.model_id, k.case_id, k.repetition, k.reason);
    }
    Ok(ExitCode::from(outcome.exit_code() as u8))
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let (records_path, run_dir) = if args.input.is_dir() {
        (args.input.join("records.jsonl"), args.input.clone())
    } else {
        let dir = args.input.parent().unwrap_or(Path::new(".")).to_path_buf();
        (args.input.clone(), dir)
    };
    let records = read_records(&records_path)?;
    let report = build_report(&records)?;
    let formats = if args.formats.is_empty() {
        ReportFormat::ALL.to_vec()
    } else {
        args.formats.iter().map(|f| f.parse()).collect::<Result<Vec<ReportFormat>, _>>()?
    };
    let out = args.out.unwrap_or_else(|| run_dir.join("report"));
    for f in formats {
        for p in render_report(&report, f, &out)? {
            println!("{}", p.display());
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_goldens(suite_path: PathBuf, scale_factors: Vec<f64>, cache: PathBuf, refresh: bool) -> Result<ExitCode> {
    let sfs: Vec<Option<f64>> = if scale_factors.is_empty() {
        vec![None]
    } else {
        scale_factors.into_iter().map(Some).collect()
    };
    let mut failed = 0;
    for sf in sfs {
        let suite = load_suite(&suite_path, sf)?;
        for f in &suite.failures {
            println!("{}: {}", f.case_id, f.reason);
            failed += 1;
        }
        for case in &suite.cases {
            let dir = database_dir(&suite.root, &case.database, sf);
            let engine = open_session(&EngineConfig::embedded(dir))?;
            match load_or_materialize(case, &engine, &cache, sf, refresh) {
                Ok(g) => println!("{}: {} rows, {:.6}s", case.case_id, g.result.num_rows(), g.t_gold),
                Err(e) => {
                    println!("{}: {e}", case.case_id);
                    failed += 1;
                }
            }
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_generate(scale_factors: Vec<f64>, seed: u64, out: PathBuf) -> Result<ExitCode> {
    let tables = tpch_tables();
    for sf in scale_factors {
        let dir = out.join("tpch").join(format!("sf{}", format_scale_factor(sf)));
        let data = generate_scaled_data(&tables, sf, seed, &dir)?;
        let counts: Vec<String> = data.row_counts.iter().map(|(t, n)| format!("{t}={n}")).collect();
        println!("sf{}: {} ({})", format_scale_factor(sf), dir.display(), counts.join(" "));
    }
    let manifest = out.join("suite.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&tpch_manifest())?)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Plan {
            command: PlanCommand::Validate { plan },
        } => {
            let plan = load_plan(&plan)?;
            plan.validate()?;
            let cells = plan.backends.len() * plan.scale_factors.len() * plan.repetitions as usize;
            println!(
                "plan ok: {} backend(s) x {} scale factor(s) x {} repetition(s) = {cells} episodes per case",
                plan.backends.len(),
                plan.scale_factors.len(),
                plan.repetitions
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Goldens {
            command:
                GoldensCommand::Materialize {
                    suite,
                    scale_factors,
                    cache,
                    refresh,
                },
        } => cmd_goldens(suite, scale_factors, cache, refresh),
        Command::Data {
            command: DataCommand::Generate {
                scale_factors,
                seed,
                out,
            },
        } => {
            if out.exists() && !out.is_dir() {
                bail!("{} is not a directory", out.display());
            }
            cmd_generate(scale_factors, seed, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
