//! `lorasb`: estimate, train, check, params and ablate from the command line.
//!
//! Exit codes: 0 success, 1 property failure, 2 configuration or I/O error,
//! 3 strict-mode invariant abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lorasb::checks::{run_suite, Suite, SuiteReport};
use lorasb::experiment::{ablation_arms, run_experiment, ExperimentConfig, NOISE_GRID};
use lorasb::init::{estimate_update, InitKind};
use lorasb::layout::{format_count, Layout};
use lorasb::model::make_teacher_student_task;
use lorasb::persist::save_estimate;
use lorasb::report::{write_experiment, write_grid_file};
use lorasb::{AdapterMethod, Error, VERSION};

const WORKERS_ENV: &str = "LORASB_WORKERS";

#[derive(Parser)]
#[command(name = "lorasb", version = VERSION, about = "Low-rank adapters with frozen bases: experiments and property checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Experiment config (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Fraction of samples for the first-step estimate [default: 0.001].
    #[arg(long)]
    budget_fraction: Option<f64>,
    /// Abort on the first invariant violation.
    #[arg(long)]
    strict: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; LORASB_WORKERS takes precedence.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the first-step update estimate per seed.
    Estimate(RunFlags),
    /// Train every arm on every seed and write loss curves.
    Train(RunFlags),
    /// Run property suites; exit 1 if any property fails.
    Check {
        /// all, lemma1, lemma2, thm1, thm2, thm3, thm4, eckart_young or gradcheck.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, value_delimiter = ',')]
        seed_list: Option<Vec<u64>>,
        /// Directory for check_report.json; the report goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable-parameter counts for an architecture layout.
    Params {
        /// Bundled layout name (mistral7b, gemma2-9b, llama3.2-3b, roberta-large) or a layout file.
        layout: String,
        /// One method, or lora, lora_xs and lora_sb when absent.
        #[arg(long)]
        method: Option<String>,
        /// Comma-separated ranks.
        #[arg(long, value_delimiter = ',', required = true)]
        rank: Vec<usize>,
    },
    /// Initialization ablation grid plus the raw/corrected cross.
    Ablate {
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated noise levels for the noisy initialization.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
}

/// Failure with its exit status.
struct Fail {
    code: u8,
    message: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Fail {
    Fail {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Estimate(flags) => cmd_estimate(&flags),
        Command::Train(flags) => cmd_train(&flags),
        Command::Check { suite, seed_list, out } => cmd_check(&suite, seed_list, out.as_deref()),
        Command::Params { layout, method, rank } => cmd_params(&layout, method.as_deref(), &rank),
        Command::Ablate { flags, sigmas } => cmd_ablate(&flags, sigmas),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("lorasb: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(flags: &RunFlags) -> Result<ExperimentConfig, Fail> {
    let mut config = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &flags.seed_list {
        config.seeds = seeds.clone();
    }
    if let Some(f) = flags.budget_fraction {
        config.init.budget_fraction = f;
    }
    if flags.strict {
        config.train.strict = true;
    }
    if let Some(out) = &flags.out {
        config.out_dir = Some(out.display().to_string());
    }
    let config = config.materialized();
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    PathBuf::from(config.out_dir.as_deref().unwrap_or("lorasb_out"))
}

fn workers(flags: &RunFlags) -> Result<usize, Fail> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        };
    }
    match flags.workers {
        Some(0) => Err(usage("--workers must be positive")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_estimate(flags: &RunFlags) -> Result<(), Fail> {
    let config = load_config(flags)?;
    let out = out_dir(&config);
    for &seed in &config.seeds {
        let task = make_teacher_student_task(&config.task_for(seed))?;
        let model = task.student(task.w0.clone())?;
        let mut recipe = config.train_config(&config.arms[0], seed)?.recipe;
        recipe.kind = InitKind::LoraSb;
        let est = estimate_update(&model, &task.data, &recipe)?;
        let dir = out.join(format!("estimate_seed{seed}"));
        let manifest = save_estimate(&est, &dir)?;
        println!(
            "seed {seed}: {} of {} samples ({:?} model, eta {:e}) -> {}",
            est.samples_used,
            task.data.len(),
            est.optimizer_model,
            est.eta,
            manifest.display()
        );
    }
    write_text(&out.join("config.json"), &serde_json::to_string_pretty(&config).map_err(Error::from)?)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Fail> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, format!("{text}\n")).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn print_arm_medians(summary: &lorasb::report::ExperimentSummary) {
    for a in &summary.arms {
        let median = a.median_final_loss.map_or("inf".to_string(), |v| format!("{v:.6e}"));
        println!("{:<28} median final loss {median}  diverged {}", a.arm, a.diverged);
    }
}

fn cmd_train(flags: &RunFlags) -> Result<(), Fail> {
    let config = load_config(flags)?;
    let out = out_dir(&config);
    let runs = run_experiment(&config, workers(flags)?)?;
    let summary = write_experiment(&config, &runs, &out, VERSION)?;
    print_arm_medians(&summary);
    println!("wrote {} runs to {}", runs.len(), out.display());
    Ok(())
}

fn cmd_ablate(flags: &RunFlags, sigmas: Option<Vec<f64>>) -> Result<(), Fail> {
    let mut config = load_config(flags)?;
    config.arms = ablation_arms(sigmas.as_deref().unwrap_or(&NOISE_GRID));
    config.validate()?;
    let out = out_dir(&config);
    let runs = run_experiment(&config, workers(flags)?)?;
    let summary = write_experiment(&config, &runs, &out, VERSION)?;
    let grid = write_grid_file(&config, &runs, &out.join("ablation_grid.csv"))?;
    print_arm_medians(&summary);
    println!("wrote {}", grid.display());
    Ok(())
}

fn cmd_check(suite: &str, seeds: Option<Vec<u64>>, out: Option<&Path>) -> Result<(), Fail> {
    let suite: Suite = suite.parse()?;
    let seeds = seeds.unwrap_or_else(|| vec![0]);
    let mut reports: Vec<SuiteReport> = Vec::new();
    for seed in seeds {
        reports.extend(run_suite(suite, seed)?);
    }
    for r in &reports {
        for p in &r.properties {
            eprintln!(
                "{} {:<14} {:<40} worst {:.3e} tol {:.0e} ({} cases)",
                if p.pass { "PASS" } else { "FAIL" },
                r.suite.as_str(),
                p.name,
                p.worst,
                p.tolerance,
                p.cases
            );
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    let first_failure = reports.iter().find_map(SuiteReport::first_failure);
    let doc = json!({
        "version": VERSION,
        "suite": suite,
        "pass": pass,
        "first_failure": first_failure,
        "reports": reports,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    match out {
        Some(dir) => write_text(&dir.join("check_report.json"), &text)?,
        None => println!("{text}"),
    }
    if pass {
        Ok(())
    } else {
        Err(Fail {
            code: 1,
            message: format!("property failure: {}", first_failure.unwrap_or_default()),
        })
    }
}

fn cmd_params(layout: &str, method: Option<&str>, ranks: &[usize]) -> Result<(), Fail> {
    let layout = Layout::resolve(layout)?;
    let methods: Vec<AdapterMethod> = match method {
        Some(m) => vec![m.parse()?],
        None => vec![AdapterMethod::Lora, AdapterMethod::LoraXs, AdapterMethod::LoraSb],
    };
    println!("# {layout}");
    println!("{:<10} {:>6} {:>14} {:>12}", "method", "rank", "params", "formatted");
    for &m in &methods {
        for &r in ranks {
            let count = layout.count(m, r)?;
            println!("{:<10} {:>6} {:>14} {:>12}", m.as_str(), r, count, format_count(count, layout.unit));
        }
    }
    Ok(())
}
