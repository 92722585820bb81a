use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use marketrec::data::{generate_synthetic_markets, make_global, make_pairwise, Dataset, PreparedData, TrainSet};
use marketrec::evaluation::{aggregate_avg, select_best_source, write_significance_csv, EvalReport, SignificanceResult};
use marketrec::seeding::derive_seed;
use marketrec::{Error, Result};

use crate::config::ExperimentConfig;
use crate::method::{resolve_plan, Method};
use crate::runner::{run_groups, CellFailure, CellResult, Group, GroupOutcome, RunOptions, Setting};
use crate::table::{build_table, emit_results, ColumnReports, ResultsTable};

/// The configured dataset: an interaction file, or synthetic markets.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => Dataset::load(path, None, cfg.base_market.as_deref()),
        None => generate_synthetic_markets(&cfg.synthetic_spec(), cfg.seed),
    }
}

/// Splits and evaluation negatives for the configured dataset, cached under
/// `out_dir` by dataset fingerprint and seed, restricted to `cfg.markets`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(PreparedData, PathBuf)> {
    let ds = load_dataset(cfg)?;
    let fresh_name = format!("split-{}-{}.json", &ds.fingerprint()[..16], cfg.seed);
    let path = cfg.out_dir.join(&fresh_name);
    let full = match PreparedData::load(&path) {
        Ok(p) if p.dataset_fingerprint == ds.fingerprint() && p.seed == cfg.seed => p,
        _ => {
            let p = PreparedData::new(&ds, cfg.seed);
            fs::create_dir_all(&cfg.out_dir)?;
            p.save(&path)?;
            p
        }
    };
    let data = if cfg.markets.is_empty() {
        full
    } else {
        full.restrict_codes(&cfg.markets)?
    };
    Ok((data, path))
}

fn requested(cfg: &ExperimentConfig, defaults: Vec<Method>) -> Vec<Method> {
    if cfg.methods.is_empty() {
        defaults
    } else {
        cfg.methods.clone()
    }
}

/// Record of one matrix run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub setting: String,
    pub config: ExperimentConfig,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub split_manifest: PathBuf,
    pub completed: Vec<String>,
    pub failed: Vec<CellFailure>,
    pub tables: Vec<PathBuf>,
}

impl RunManifest {
    fn new(setting: &str, cfg: &ExperimentConfig, data: &PreparedData, split: &Path) -> Self {
        Self {
            setting: setting.to_string(),
            config: cfg.clone(),
            config_fingerprint: cfg.fingerprint(),
            dataset_fingerprint: data.dataset_fingerprint.clone(),
            split_manifest: split.to_path_buf(),
            completed: vec![],
            failed: vec![],
            tables: vec![],
        }
    }

    fn absorb(&mut self, outcomes: &[GroupOutcome]) {
        for o in outcomes {
            self.completed.extend(o.completed.iter().cloned());
            self.failed.extend(o.failures.iter().cloned());
        }
    }

    pub fn path(out_dir: &Path, setting: &str) -> PathBuf {
        out_dir.join(format!("{setting}-manifest.json"))
    }

    fn save(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(Self::path(out_dir, &self.setting), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Saves the manifest; errors out if any cell failed.
    fn finish(&self, out_dir: &Path) -> Result<()> {
        self.save(out_dir)?;
        if self.failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} of {} cells failed; see {}",
                self.failed.len(),
                self.failed.len() + self.completed.len(),
                Self::path(out_dir, &self.setting).display()
            )))
        }
    }
}

fn emit_all(
    cfg: &ExperimentConfig,
    manifest: &mut RunManifest,
    stem: &str,
    table: &ResultsTable,
    tests: &[SignificanceResult],
) -> Result<()> {
    let dir = cfg.out_dir.join("tables");
    manifest.tables.extend(emit_results(table, &cfg.format, &dir, stem)?);
    let sig = dir.join(format!("{stem}-significance.csv"));
    write_significance_csv(tests, &sig)?;
    manifest.tables.push(sig);
    Ok(())
}

pub struct PairwiseOutput {
    pub avg: ResultsTable,
    pub bst: ResultsTable,
    pub avg_tests: Vec<SignificanceResult>,
    pub bst_tests: Vec<SignificanceResult>,
    pub results: Vec<CellResult>,
    pub manifest: RunManifest,
}

/// Training groups of the pairwise setting: every (target, source) pair with
/// the "++" plan, and every target alone with the single-market plan.
pub fn pairwise_groups(cfg: &ExperimentConfig, data: &PreparedData, methods: &[Method]) -> Result<Vec<Group>> {
    let targets = cfg.resolve_targets(&data.registry)?;
    let plus: Vec<Method> = methods.iter().copied().filter(|m| !m.is_single()).collect();
    let single: Vec<Method> = methods.iter().copied().filter(|m| m.is_single()).collect();
    let mut groups = Vec::new();
    for target in &targets {
        if !plus.is_empty() {
            for source in cfg.resolve_sources(&data.registry, target)? {
                let sub = data.restrict_codes(&[target.clone(), source.clone()])?;
                let seed = derive_seed(cfg.seed, &["pairwise", target, &source, "downsample"]);
                let train = make_pairwise(&sub.splits[0], &sub.splits[1], &sub.registry, seed)?;
                groups.push(Group {
                    setting: Setting::Pairwise,
                    target: target.clone(),
                    source: Some(source),
                    eval_markets: vec![sub.splits[0].market],
                    plan: resolve_plan(&plus),
                    train,
                    data: sub,
                });
            }
        }
        if !single.is_empty() {
            let sub = data.restrict_codes(std::slice::from_ref(target))?;
            let train = TrainSet::single(&sub.splits[0], &sub.registry)?;
            groups.push(Group {
                setting: Setting::Single,
                target: target.clone(),
                source: None,
                eval_markets: vec![sub.splits[0].market],
                plan: resolve_plan(&single),
                train,
                data: sub,
            });
        }
    }
    Ok(groups)
}

fn test_report(r: &CellResult) -> Result<&EvalReport> {
    r.test.as_ref().ok_or(Error::Empty("test report"))
}

fn validation_report(r: &CellResult) -> Result<&EvalReport> {
    r.validation.as_ref().ok_or(Error::Empty("validation report"))
}

/// Pairwise experiments: AVG (test metrics averaged over sources) and BST
/// (test metrics of the validation-selected source) tables.
pub fn run_pairwise(cfg: &ExperimentConfig) -> Result<PairwiseOutput> {
    let (data, split_path) = prepare(cfg)?;
    let methods = requested(cfg, Method::bst_rows());
    let groups = pairwise_groups(cfg, &data, &methods)?;
    let outcomes = run_groups(cfg, &groups, cfg.threads, &RunOptions::default())?;
    let mut manifest = RunManifest::new("pairwise", cfg, &data, &split_path);
    manifest.absorb(&outcomes);
    if !manifest.failed.is_empty() {
        manifest.finish(&cfg.out_dir)?;
    }
    let results: Vec<CellResult> = outcomes.into_iter().flat_map(|o| o.results).collect();
    let targets = cfg.resolve_targets(&data.registry)?;

    let mut avg_cols = Vec::new();
    let mut bst_cols = Vec::new();
    for target in &targets {
        let mut avg_col = ColumnReports::new();
        let mut bst_col = ColumnReports::new();
        for &method in &methods {
            let cells: Vec<&CellResult> = results.iter().filter(|r| r.method == method && &r.market == target).collect();
            if cells.is_empty() {
                continue;
            }
            if method.is_single() {
                let r = cells[0];
                bst_col.insert(method, (test_report(r)?.clone(), vec![r.dir.clone()]));
                continue;
            }
            let tests = cells.iter().map(|r| test_report(r)).collect::<Result<Vec<_>>>()?;
            let mut avg = aggregate_avg(&tests)?;
            avg.model = method.to_string();
            avg_col.insert(method, (avg, cells.iter().map(|r| r.dir.clone()).collect()));
            let vals = cells
                .iter()
                .map(|r| Ok((r.source.as_deref().unwrap_or(""), validation_report(r)?)))
                .collect::<Result<Vec<_>>>()?;
            let best = select_best_source(&vals)?;
            let chosen = cells.iter().find(|r| r.source.as_deref() == Some(best)).expect("selected source exists");
            bst_col.insert(method, (test_report(chosen)?.clone(), vec![chosen.dir.clone()]));
        }
        avg_cols.push((target.clone(), avg_col));
        bst_cols.push((target.clone(), bst_col));
    }
    let avg_rows: Vec<Method> = Method::avg_rows().into_iter().filter(|m| methods.contains(m)).collect();
    let bst_rows: Vec<Method> = Method::bst_rows().into_iter().filter(|m| methods.contains(m)).collect();
    let (avg, avg_tests) = build_table("Pairwise AVG: test nDCG@10 averaged over sources", &avg_rows, &avg_cols, cfg.m_avg)?;
    let (bst, bst_tests) = build_table("Pairwise BST: test nDCG@10 of the validation-selected source", &bst_rows, &bst_cols, cfg.m_bst)?;
    emit_all(cfg, &mut manifest, "pairwise-avg", &avg, &avg_tests)?;
    emit_all(cfg, &mut manifest, "pairwise-bst", &bst, &bst_tests)?;
    manifest.finish(&cfg.out_dir)?;
    Ok(PairwiseOutput {
        avg,
        bst,
        avg_tests,
        bst_tests,
        results,
        manifest,
    })
}

pub struct GlobalOutput {
    pub table: ResultsTable,
    pub tests: Vec<SignificanceResult>,
    pub results: Vec<CellResult>,
    pub train_size: usize,
    pub manifest: RunManifest,
}

/// The global setting's single training group: all markets concatenated.
pub fn global_group(cfg: &ExperimentConfig, data: &PreparedData, methods: &[Method]) -> Result<Group> {
    let targets = cfg.resolve_targets(&data.registry)?;
    let plus: Vec<Method> = methods.iter().copied().filter(|m| !m.is_single()).collect();
    let eval_markets = targets
        .iter()
        .map(|t| data.registry.market_id(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Group {
        setting: Setting::Global,
        target: "all".into(),
        source: None,
        train: make_global(&data.splits, &data.registry)?,
        eval_markets,
        plan: resolve_plan(&plus),
        data: data.clone(),
    })
}

/// One model per method on every market's train data, evaluated per target.
pub fn run_global(cfg: &ExperimentConfig) -> Result<GlobalOutput> {
    let (data, split_path) = prepare(cfg)?;
    let methods = requested(cfg, Method::avg_rows());
    let group = global_group(cfg, &data, &methods)?;
    let train_size = group.train.len();
    let outcomes = run_groups(cfg, std::slice::from_ref(&group), cfg.threads, &RunOptions::default())?;
    let mut manifest = RunManifest::new("global", cfg, &data, &split_path);
    manifest.absorb(&outcomes);
    if !manifest.failed.is_empty() {
        manifest.finish(&cfg.out_dir)?;
    }
    let results: Vec<CellResult> = outcomes.into_iter().flat_map(|o| o.results).collect();
    let mut cols = Vec::new();
    for target in cfg.resolve_targets(&data.registry)? {
        let mut col = ColumnReports::new();
        for r in results.iter().filter(|r| r.market == target) {
            col.insert(r.method, (test_report(r)?.clone(), vec![r.dir.clone()]));
        }
        cols.push((target, col));
    }
    let rows: Vec<Method> = Method::avg_rows().into_iter().filter(|m| methods.contains(m)).collect();
    let (table, tests) = build_table("Global: test nDCG@10 of one model trained on all markets", &rows, &cols, cfg.m_global)?;
    emit_all(cfg, &mut manifest, "global", &table, &tests)?;
    manifest.finish(&cfg.out_dir)?;
    Ok(GlobalOutput {
        table,
        tests,
        results,
        train_size,
        manifest,
    })
}

/// Training time of one method for one target, summed over its sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub target: String,
    pub sources: usize,
    /// Optimization loop of this method alone.
    pub seconds: f64,
    /// Including the models it starts from (GMF/MLP for NMF, NMF for MAML, MAML for FOREC).
    pub cumulative_seconds: f64,
}

pub struct BenchmarkOutput {
    pub rows: Vec<TimingRow>,
    pub files: Vec<PathBuf>,
}

/// Wall-clock training time per (method, target) over all sources of the
/// pairwise setting. Cells run one at a time so timings do not compete.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let (data, split_path) = prepare(cfg)?;
    let default_rows: Vec<Method> = Method::avg_rows();
    let methods = requested(cfg, default_rows);
    let groups = pairwise_groups(cfg, &data, &methods)?;
    let bench_cfg = ExperimentConfig {
        out_dir: cfg.out_dir.join("benchmark"),
        resume: false,
        ..cfg.clone()
    };
    if cfg.bench_repeats == 0 {
        return Err(Error::Config("bench_repeats must be at least 1".into()));
    }
    let outcomes = run_groups(&bench_cfg, &groups, 1, &RunOptions { evaluate: false })?;
    let mut manifest = RunManifest::new("benchmark", cfg, &data, &split_path);
    manifest.absorb(&outcomes);
    if !manifest.failed.is_empty() {
        manifest.finish(&cfg.out_dir)?;
    }
    let mut results: Vec<CellResult> = outcomes.into_iter().flat_map(|o| o.results).collect();
    // Training is deterministic, so repeats differ only in their timings; the
    // fastest run is the one least disturbed by other work on the machine.
    let mut times: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for _ in 1..cfg.bench_repeats {
        for o in run_groups(&bench_cfg, &groups, 1, &RunOptions { evaluate: false })? {
            for r in o.results {
                let t = times.entry(r.dir).or_default();
                t.0.push(r.seconds);
                t.1.push(r.cumulative_seconds);
            }
        }
    }
    for r in &mut results {
        if let Some((own, cumulative)) = times.remove(&r.dir) {
            r.seconds = own.into_iter().fold(r.seconds, f64::min);
            r.cumulative_seconds = cumulative.into_iter().fold(r.cumulative_seconds, f64::min);
        }
    }
    let targets = cfg.resolve_targets(&data.registry)?;
    let mut acc: BTreeMap<(usize, usize), TimingRow> = BTreeMap::new();
    for r in &results {
        let (Some(mi), Some(ti)) = (methods.iter().position(|m| *m == r.method), targets.iter().position(|t| *t == r.market)) else {
            continue;
        };
        let row = acc.entry((mi, ti)).or_insert_with(|| TimingRow {
            method: r.method,
            target: r.market.clone(),
            sources: 0,
            seconds: 0.0,
            cumulative_seconds: 0.0,
        });
        row.sources += 1;
        row.seconds += r.seconds;
        row.cumulative_seconds += r.cumulative_seconds;
    }
    let rows: Vec<TimingRow> = acc.into_values().collect();
    let files = write_timing(&cfg.out_dir.join("tables"), &rows, &methods, &targets)?;
    manifest.tables.extend(files.iter().cloned());
    manifest.finish(&cfg.out_dir)?;
    Ok(BenchmarkOutput { rows, files })
}

/// `timing.csv`, plus `timing.dat` and `timing.gp` for gnuplot (log-scale y).
pub fn write_timing(dir: &Path, rows: &[TimingRow], methods: &[Method], targets: &[String]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("timing.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["method", "target", "sources", "seconds", "cumulative_seconds"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.target.clone(),
            r.sources.to_string(),
            format!("{:.6}", r.seconds),
            format!("{:.6}", r.cumulative_seconds),
        ])?;
    }
    w.flush()?;

    let listed: Vec<Method> = methods.iter().copied().filter(|m| rows.iter().any(|r| r.method == *m)).collect();
    let mut dat = String::from("# target");
    for m in &listed {
        dat.push_str(&format!("\t\"{m}\""));
    }
    dat.push('\n');
    for t in targets {
        dat.push_str(t);
        for m in &listed {
            let v = rows
                .iter()
                .find(|r| r.method == *m && &r.target == t)
                .map_or(f64::NAN, |r| r.cumulative_seconds);
            dat.push_str(&format!("\t{v:.6}"));
        }
        dat.push('\n');
    }
    let dat_path = dir.join("timing.dat");
    fs::write(&dat_path, dat)?;

    let mut gp = String::from(
        "# Training time per target market, summed over source markets.\n\
         set terminal pngcairo size 900,500\n\
         set output 'timing.png'\n\
         set logscale y\n\
         set ylabel 'seconds (log scale)'\n\
         set style data histogram\n\
         set style histogram cluster gap 1\n\
         set style fill solid border -1\n\
         set key outside right\n",
    );
    let plots: Vec<String> = (0..listed.len())
        .map(|k| format!("'timing.dat' using {}:xtic(1) title columnheader({})", k + 2, k + 2))
        .collect();
    gp.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    let gp_path = dir.join("timing.gp");
    fs::write(&gp_path, gp)?;
    Ok(vec![csv_path, dat_path, gp_path])
}
