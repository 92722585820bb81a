use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use experiments::pipeline::{global_group, load_dataset, pairwise_groups};
use experiments::runner::{run_group, RunOptions};
use experiments::table::load_table;
use experiments::{emit_results, parse_methods, prepare, run_benchmark, run_global, run_pairwise, ExperimentConfig, Method};
use marketrec::evaluation::{compare_reports, evaluate, EvalReport, Split, DEFAULT_CUTOFF};
use marketrec::{Error, Model64, Result};

#[derive(Parser)]
#[command(name = "marketrec", version, about = "Cross-market recommendation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args)]
struct Common {
    /// Key-value config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Interaction file; omit to use synthetic markets.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Comma-separated market codes to load.
    #[arg(long, global = true)]
    markets: Option<String>,
    /// Comma-separated methods, e.g. `GMF++,MA-GMF++,MAML` or `all`.
    #[arg(long, global = true)]
    methods: Option<String>,
    #[arg(long, global = true)]
    targets: Option<String>,
    #[arg(long, global = true)]
    sources: Option<String>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    resume: bool,
    /// Output format: csv, json, text or all.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Override any config key, e.g. `--set epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset, split it and fix the evaluation negatives.
    Prepare,
    /// Generate synthetic markets and write them as an interaction file.
    Synth {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the methods for one target (and optionally one source) market.
    Train {
        #[arg(long)]
        target: String,
        #[arg(long)]
        source: Option<String>,
    },
    /// Evaluate a saved checkpoint on one market.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        market: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Pairwise experiments with AVG and BST tables.
    Pairwise,
    /// One model per method trained on all markets together.
    Global,
    /// Training-time comparison across methods.
    Benchmark,
    /// Re-render a saved JSON table.
    Report {
        #[arg(long)]
        table: PathBuf,
    },
    /// Paired t-test between two per-user report CSVs.
    Significance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 9)]
        m: u32,
    },
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(m) = &c.markets {
        cfg.markets = split_list(m);
    }
    if let Some(m) = &c.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(t) = &c.targets {
        cfg.targets = split_list(t);
    }
    if let Some(s) = &c.sources {
        cfg.sources = split_list(s);
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if c.resume {
        cfg.resume = true;
    }
    if let Some(f) = &c.format {
        cfg.format = f.clone();
    }
    for o in &c.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "test" => Ok(Split::Test),
        "validation" | "val" => Ok(Split::Validation),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Prepare => {
            let (data, path) = prepare(&cfg)?;
            for split in &data.splits {
                let code = data.registry.market_code(split.market);
                println!(
                    "{code}: {} train interactions, {} eval users, {} short of negatives",
                    split.train.len(),
                    split.test.len(),
                    split.negative_shortfall
                );
            }
            println!("split manifest: {}", path.display());
        }
        Command::Synth { output } => {
            let ds = load_dataset(&ExperimentConfig { dataset: None, ..cfg.clone() })?;
            let path = output.unwrap_or_else(|| cfg.out_dir.join("synthetic.tsv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            ds.write_tsv(&path)?;
            println!("{} interactions in {} markets -> {}", ds.interactions.len(), ds.registry.n_markets(), path.display());
        }
        Command::Train { target, source } => {
            let (data, _) = prepare(&cfg)?;
            let mut local = cfg.clone();
            local.targets = vec![target.clone()];
            let group = match source {
                Some(s) => {
                    local.sources = vec![s.clone()];
                    let methods: Vec<Method> = if cfg.methods.is_empty() { Method::avg_rows() } else { cfg.methods.clone() };
                    pairwise_groups(&local, &data, &methods)?
                        .into_iter()
                        .find(|g| g.source.as_deref() == Some(s.as_str()))
                        .ok_or_else(|| Error::Config("no pairwise group".into()))?
                }
                None => {
                    let methods: Vec<Method> = if cfg.methods.is_empty() { Method::SINGLE.to_vec() } else { cfg.methods.clone() };
                    if methods.iter().all(|m| m.is_single()) {
                        pairwise_groups(&local, &data, &methods)?
                            .into_iter()
                            .next()
                            .ok_or_else(|| Error::Config("no training group".into()))?
                    } else {
                        global_group(&local, &data, &methods)?
                    }
                }
            };
            let outcome = run_group(&cfg, &group, &RunOptions::default())?;
            for r in &outcome.results {
                let ndcg = r.test.as_ref().map_or(f64::NAN, |t| t.mean_ndcg);
                println!("{:<10} {:<4} test nDCG@10 {ndcg:.4}  {:.2}s  {}", r.method.to_string(), r.market, r.seconds, r.dir);
            }
            for f in &outcome.failures {
                eprintln!("failed: {} ({}): {}", f.method, f.dir, f.error);
            }
            if !outcome.failures.is_empty() {
                return Err(Error::Config(format!("{} cells failed", outcome.failures.len())));
            }
        }
        Command::Evaluate { checkpoint, market, split } => {
            let (data, _) = prepare(&cfg)?;
            let (model, fp) = Model64::load_checkpoint(&checkpoint)?;
            if fp != data.registry.fingerprint() {
                return Err(Error::Checkpoint(
                    "checkpoint was trained on a different id map; pass the same --markets it was trained with".into(),
                ));
            }
            let split = parse_split(&split)?;
            let s = data.split_by_code(&market)?;
            let cases = match split {
                Split::Test => &s.test,
                Split::Validation => &s.validation,
            };
            let report = evaluate(&model, cases, &model.kind().to_string(), &market, split)?;
            let stem = format!("eval-{}-{market}-{split}", model.kind());
            report.save(&cfg.out_dir, &stem)?;
            println!("{market} {split}: nDCG@10 {:.4}, HR@10 {:.4} over {} users", report.mean_ndcg, report.mean_hr, report.records.len());
        }
        Command::Pairwise => {
            let out = run_pairwise(&cfg)?;
            print!("{}\n{}", out.avg.to_text(), out.bst.to_text());
        }
        Command::Global => {
            let out = run_global(&cfg)?;
            print!("{}", out.table.to_text());
        }
        Command::Benchmark => {
            let out = run_benchmark(&cfg)?;
            for r in &out.rows {
                println!("{:<10} {:<4} {:>10.3}s  (cumulative {:.3}s)", r.method.to_string(), r.target, r.seconds, r.cumulative_seconds);
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Report { table } => {
            let t = load_table(&table)?;
            let stem = table.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
            let files = emit_results(&t, &cfg.format, &cfg.out_dir, &stem)?;
            print!("{}", t.to_text());
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Significance { a, b, m } => {
            let load = |p: &PathBuf| {
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
                EvalReport::read_csv(p, &name, "", Split::Test, DEFAULT_CUTOFF)
            };
            let res = compare_reports(&load(&a)?, &load(&b)?, m)?;
            println!(
                "t = {:.6}, p = {:.6}, m = {}, threshold {:.6}: {}",
                res.t,
                res.p,
                m,
                0.05 / m as f64,
                if res.significant { "significant" } else { "not significant" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
