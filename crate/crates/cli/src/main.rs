//! `mea`: build and serve synthetic victims, run extraction experiments,
//! scan for watermarks and run the property suites.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mea_core::extraction::Method;
use mea_core::harness::{
    emit_distribution_viz, evaluate_model, instance, response_contexts, run_cell, run_lambda_sweep,
    run_query_budget_curve, run_verify, write_viz_csv, Cell, ExperimentConfig, HarnessError, RunDir,
    RunOutput, SweepResult,
};
use mea_core::lm::{TabularLM, Token};
use mea_core::metrics::{wm_scan_corpus, write_metrics_csv, MetricRow, Tail};
use mea_core::victim::{serve, VictimDefinition, WatermarkKey};

#[derive(Parser)]
#[command(name = "mea", version, about = "Model-extraction experiments on tabular language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated run seeds; override the configured ones.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Budget,
    Lambda,
}

#[derive(Subcommand)]
enum Command {
    /// Build the victim of one run seed and write its definition and ground truth.
    BuildVictim {
        #[command(flatten)]
        common: Common,
    },
    /// Serve the victim of one run seed over newline-delimited JSON.
    ServeVictim {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Train and evaluate one run per seed.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Continue from checkpoints found in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Evaluate a saved model against the victim of one run seed.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Training budget the model was trained with, for the train split.
        #[arg(long)]
        budget: Option<usize>,
        /// Also write top-5 next-token distributions for plotting.
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Test token sequences for the green-list watermark.
    WmScan {
        /// JSON token arrays, one response per line (or a single JSON array of arrays).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        salt: u64,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Vocabulary size including the end token.
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        two_sided: bool,
    },
    /// Run a query-budget or λ₁ sweep.
    Sweep {
        kind: SweepArg,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Run the gradient, RLHF-optimum, consistency and convergence suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(HarnessError::from)
        .with_context(|| format!("parsing {}", common.config.display()))?;
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.output_dir
        .as_deref()
        .context("no output directory: pass --out or set output_dir")
}

fn print_rows(rows: &[MetricRow]) -> Result<()> {
    write_metrics_csv(std::io::stdout().lock(), rows)?;
    Ok(())
}

fn single_budget(cfg: &ExperimentConfig) -> Option<usize> {
    match cfg.query_budgets.as_slice() {
        [b] => Some(*b),
        _ => None,
    }
}

fn build_victim_cmd(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let out = out_dir(&cfg)?;
    fs::create_dir_all(out)?;
    for &seed in &cfg.seeds {
        let inst = instance(&cfg, seed)?;
        let def = VictimDefinition {
            spec: inst.truth.spec().clone(),
            seed: inst.victim.sampler.seed,
            watermark: inst.victim.watermark.clone(),
        };
        let dir = out.join(format!("victim-s{seed}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("victim.json"), serde_json::to_string_pretty(&def)?)?;
        fs::write(dir.join("truth.json"), serde_json::to_string(&inst.truth)?)?;
        println!(
            "seed {seed}: {} queries, {} contexts -> {}",
            inst.queries.len(),
            inst.truth.spec().context_count(),
            dir.display()
        );
    }
    Ok(())
}

fn serve_cmd(common: &Common, addr: &str) -> Result<()> {
    let cfg = load(common)?;
    let seed = cfg.seeds[0];
    let inst = instance(&cfg, seed)?;
    let handle = serve(Arc::new(inst.victim), addr)?;
    println!("serving seed {seed} victim on {}", handle.local_addr());
    handle.join();
    Ok(())
}

fn extract_cmd(common: &Common, resume: bool, method: Option<Method>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    let out = cfg.output_dir.clone();
    let mut runs: Vec<RunOutput> = Vec::new();
    for &seed in &cfg.seeds {
        let cell = Cell {
            budget: single_budget(&cfg),
            ..Cell::new(cfg.method, seed)
        };
        let dir = out.as_ref().map(|o| RunDir::new(o.join(cell.run_id(&cfg.name))));
        let run = run_cell(&cfg, &cell, dir.as_ref(), resume)?;
        log::info!("{}: {} periods", run.run_id, run.log.len());
        runs.push(run);
    }
    let rows: Vec<MetricRow> = runs.iter().flat_map(RunOutput::metric_rows).collect();
    if let Some(o) = &out {
        fs::create_dir_all(o)?;
        fs::write(o.join("config.json"), cfg.to_json())?;
        write_metrics_csv(fs::File::create(o.join("metrics.csv"))?, &rows)?;
    }
    print_rows(&rows)
}

fn evaluate_cmd(common: &Common, model: &Path, budget: Option<usize>, viz: Option<&Path>) -> Result<()> {
    let cfg = load(common)?;
    let lm: TabularLM = serde_json::from_str(
        &fs::read_to_string(model).with_context(|| format!("reading {}", model.display()))?,
    )?;
    let seed = cfg.seeds[0];
    let inst = instance(&cfg, seed)?;
    let train = inst.training_queries(budget.or(single_budget(&cfg)));
    let eval = evaluate_model(&cfg, &inst, &lm, &train)?;
    let run_id = format!("{}/eval/{}", cfg.name, model.display());
    if let Some(path) = viz {
        let ctxs = response_contexts(&inst.victim.lm, &inst.queries, cfg.eval.enumeration_cap)?;
        let rows = emit_distribution_viz(&inst.initial, &lm, &inst.victim.lm, &ctxs)?;
        write_viz_csv(fs::File::create(path)?, &rows)?;
    }
    print_rows(&eval.rows(&run_id))
}

fn read_responses(path: &Path) -> Result<Vec<Vec<Token>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(all) = serde_json::from_str::<Vec<Vec<Token>>>(&text) {
        return Ok(all);
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(text.as_bytes()).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?);
    }
    Ok(out)
}

fn wm_scan_cmd(input: &Path, salt: u64, gamma: f64, vocab: usize, two_sided: bool) -> Result<()> {
    let key = WatermarkKey::new(salt).with_green_fraction(gamma);
    if let Err(e) = key.validate(vocab) {
        bail!("invalid watermark key: {e}");
    }
    let responses = read_responses(input)?;
    if let Some(bad) = responses.iter().flatten().find(|&&t| t as usize >= vocab) {
        bail!("token {bad} is outside a vocabulary of size {vocab}");
    }
    let tail = if two_sided { Tail::TwoSided } else { Tail::Upper };
    let verdict = wm_scan_corpus(&responses, &key, vocab, tail);
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    Ok(())
}

fn print_summary(result: &SweepResult) {
    println!("method,budget,lambda1,metric,n,mean,std");
    for s in &result.summary {
        let b = s.budget.map(|b| b.to_string()).unwrap_or_default();
        let l = s.lambda1.map(|l| l.to_string()).unwrap_or_default();
        println!("{},{b},{l},{},{},{},{}", s.method, s.metric, s.n, s.mean, s.std);
    }
}

fn sweep_cmd(kind: SweepArg, common: &Common, resume: bool) -> Result<()> {
    let cfg = load(common)?;
    let out = cfg.output_dir.clone();
    let (result, _) = match kind {
        SweepArg::Budget => run_query_budget_curve(&cfg, out.as_deref(), resume)?,
        SweepArg::Lambda => run_lambda_sweep(&cfg, out.as_deref(), resume)?,
    };
    print_summary(&result);
    Ok(())
}

fn verify_cmd(seed: u64) -> Result<bool> {
    let mut ok = true;
    for s in run_verify(seed)? {
        let status = if s.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<14} {} [{:.1?}]", s.name, s.detail, s.elapsed);
        ok &= s.passed;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::BuildVictim { common } => build_victim_cmd(common)?,
        Command::ServeVictim { common, addr } => serve_cmd(common, addr)?,
        Command::Extract { common, resume, method } => extract_cmd(common, *resume, *method)?,
        Command::Evaluate { common, model, budget, viz } => {
            evaluate_cmd(common, model, *budget, viz.as_deref())?
        }
        Command::WmScan { input, salt, gamma, vocab, two_sided } => {
            wm_scan_cmd(input, *salt, *gamma, *vocab, *two_sided)?
        }
        Command::Sweep { kind, common, resume } => sweep_cmd(*kind, common, *resume)?,
        Command::Verify { seed } => return verify_cmd(*seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let invalid = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<HarnessError>(), Some(HarnessError::Invalid(_) | HarnessError::Json(_))));
            eprintln!("error: {e:#}");
            if invalid {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
