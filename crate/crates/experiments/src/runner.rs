//! Training and evaluation of one experiment group: a training set, the
//! markets it is evaluated on, and an ordered plan of methods.
//!
//! Every trained unit lands in its own directory with the checkpoint, the run
//! record, per-market validation/test reports and a `cell.json` manifest, so
//! cells can be audited, resumed and re-run individually.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use marketrec::data::{MarketId, PreparedData, TrainSet};
use marketrec::evaluation::{evaluate, EvalReport, Split, DEFAULT_CUTOFF};
use marketrec::models::{warm_start_nmf, Architecture};
use marketrec::seeding::derive_seed;
use marketrec::training::{forec_adapt, train, train_maml};
use marketrec::{Error, Model64, Result};

use crate::config::ExperimentConfig;
use crate::method::{check_order, Method};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Pairwise,
    Single,
    Global,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Pairwise => "pairwise",
            Setting::Single => "single",
            Setting::Global => "global",
        }
    }
}

/// One training set with the methods to fit on it.
pub struct Group {
    pub setting: Setting,
    pub target: String,
    pub source: Option<String>,
    pub data: PreparedData,
    pub train: TrainSet,
    /// Markets (ids of `data.registry`) every model is evaluated on.
    pub eval_markets: Vec<MarketId>,
    pub plan: Vec<Method>,
}

impl Group {
    pub fn label(&self) -> String {
        match (&self.setting, &self.source) {
            (Setting::Global, _) => "all".to_string(),
            (_, Some(s)) => format!("{}__{}", self.target, s),
            (_, None) => self.target.clone(),
        }
    }

    /// FOREC fine-tunes one fork per evaluated market when several share a group.
    fn units(&self, method: Method) -> Vec<Option<MarketId>> {
        if method == Method::Forec && self.eval_markets.len() > 1 {
            self.eval_markets.iter().map(|&m| Some(m)).collect()
        } else {
            vec![None]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Failed,
}

/// Provenance of one trained unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub status: CellStatus,
    pub setting: Setting,
    pub target: String,
    pub source: Option<String>,
    pub method: Method,
    /// Set when the unit is specific to one evaluated market.
    pub market: Option<String>,
    pub seed: u64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub checkpoint: Option<String>,
    pub run_record: Option<String>,
    pub seconds: f64,
    /// Own optimization time plus that of every model it was built from.
    pub cumulative_seconds: f64,
    pub error: Option<String>,
}

/// Reports and timings of one (method, evaluated market) pair.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub method: Method,
    pub market: String,
    pub source: Option<String>,
    pub validation: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub seconds: f64,
    pub cumulative_seconds: f64,
    /// Cell directory relative to the output root.
    pub dir: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub dir: String,
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct GroupOutcome {
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub completed: Vec<String>,
}

pub struct RunOptions {
    pub evaluate: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { evaluate: true }
    }
}

struct Trained {
    model: Model64,
    cumulative: f64,
}

/// Train and evaluate every unit of `group`, in plan order.
///
/// A failing unit is recorded and everything built on it is skipped; the
/// rest of the group still runs.
pub fn run_group(cfg: &ExperimentConfig, group: &Group, opts: &RunOptions) -> Result<GroupOutcome> {
    check_order(&group.plan)?;
    let root = &cfg.out_dir;
    let mut trained: HashMap<(Method, Option<MarketId>), Trained> = HashMap::new();
    let mut failed: Vec<Method> = Vec::new();
    let mut out = GroupOutcome::default();
    let reg = &group.data.registry;
    for &method in &group.plan {
        for unit in group.units(method) {
            let mut rel = PathBuf::from("cells").join(group.setting.name()).join(group.label()).join(method.slug());
            if let Some(m) = unit {
                rel = rel.join(reg.market_code(m));
            }
            let rel_str = rel.to_string_lossy().replace('\\', "/");
            let dir = root.join(&rel);
            if let Some(p) = method.prerequisites().into_iter().find(|p| failed.contains(p)) {
                out.failures.push(CellFailure {
                    dir: rel_str,
                    method,
                    error: format!("prerequisite {p} failed"),
                });
                failed.push(method);
                continue;
            }
            let eval_markets: Vec<MarketId> = match unit {
                Some(m) => vec![m],
                None => group.eval_markets.clone(),
            };
            match run_unit(cfg, group, method, unit, &eval_markets, &dir, &trained, opts) {
                Ok((t, results)) => {
                    for mut r in results {
                        r.dir = rel_str.clone();
                        out.results.push(r);
                    }
                    out.completed.push(rel_str);
                    trained.insert((method, unit), t);
                }
                Err(e) => {
                    let _ = write_failure(cfg, group, method, unit, &dir, &e);
                    out.failures.push(CellFailure {
                        dir: rel_str,
                        method,
                        error: e.to_string(),
                    });
                    failed.push(method);
                }
            }
        }
    }
    Ok(out)
}

fn unit_seed(cfg: &ExperimentConfig, group: &Group, method: Method, unit: Option<MarketId>) -> u64 {
    let market = unit.map_or("-", |m| group.data.registry.market_code(m));
    derive_seed(
        cfg.seed,
        &[
            group.setting.name(),
            &group.target,
            group.source.as_deref().unwrap_or("-"),
            &method.to_string(),
            market,
        ],
    )
}

fn manifest_base(cfg: &ExperimentConfig, group: &Group, method: Method, unit: Option<MarketId>) -> CellManifest {
    CellManifest {
        status: CellStatus::Failed,
        setting: group.setting,
        target: group.target.clone(),
        source: group.source.clone(),
        method,
        market: unit.map(|m| group.data.registry.market_code(m).to_string()),
        seed: unit_seed(cfg, group, method, unit),
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: group.data.dataset_fingerprint.clone(),
        checkpoint: None,
        run_record: None,
        seconds: 0.0,
        cumulative_seconds: 0.0,
        error: None,
    }
}

fn write_failure(cfg: &ExperimentConfig, group: &Group, method: Method, unit: Option<MarketId>, dir: &Path, e: &Error) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = manifest_base(cfg, group, method, unit);
    m.error = Some(e.to_string());
    fs::write(dir.join("cell.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Option<CellManifest> {
    serde_json::from_str(&fs::read_to_string(dir.join("cell.json")).ok()?).ok()
}

#[allow(clippy::too_many_arguments)]
fn run_unit(
    cfg: &ExperimentConfig,
    group: &Group,
    method: Method,
    unit: Option<MarketId>,
    eval_markets: &[MarketId],
    dir: &Path,
    trained: &HashMap<(Method, Option<MarketId>), Trained>,
    opts: &RunOptions,
) -> Result<(Trained, Vec<CellResult>)> {
    let base = manifest_base(cfg, group, method, unit);
    let reg = &group.data.registry;
    if cfg.resume {
        if let Some(prev) = read_manifest(dir) {
            let same = prev.config_fingerprint == base.config_fingerprint
                && prev.dataset_fingerprint == base.dataset_fingerprint
                && prev.seed == base.seed;
            if same && prev.status == CellStatus::Failed && cfg.skip_failed {
                return Err(Error::Config(format!(
                    "skipped after earlier failure: {}",
                    prev.error.unwrap_or_default()
                )));
            }
            if same && prev.status == CellStatus::Complete {
                if let Ok(done) = resume_unit(group, method, eval_markets, dir, &prev, opts) {
                    return Ok(done);
                }
            }
        }
    }

    let seed = base.seed;
    let get = |m: Method| -> Result<&Trained> {
        trained
            .get(&(m, None))
            .ok_or_else(|| Error::Config(format!("{method} needs a trained {m}")))
    };
    let kind = method.model_kind();
    let (model, mut record, prior) = match method {
        Method::Single(_) | Method::Plus(_) if kind.arch == Architecture::Nmf => {
            let pre = method.prerequisites();
            let (g, m) = (get(pre[0])?, get(pre[1])?);
            let mut nmf = warm_start_nmf(&g.model, &m.model, cfg.nmf_alpha)?;
            let rec = train(&mut nmf, &group.train, &cfg.train_config(kind, seed))?;
            (nmf, rec, g.cumulative + m.cumulative)
        }
        Method::Single(_) | Method::Plus(_) => {
            let mut model = Model64::new(cfg.model_config(kind, reg), seed)?;
            let rec = train(&mut model, &group.train, &cfg.train_config(kind, seed))?;
            (model, rec, 0.0)
        }
        Method::Maml => {
            let parent = get(Method::Plus(marketrec::models::ModelKind::NMF))?;
            let tasks: Vec<TrainSet> = group.train.markets().into_iter().map(|m| group.train.market_subset(m)).collect();
            let (model, rec) = train_maml(&parent.model, &tasks, &cfg.maml_config(seed))?;
            (model, rec, parent.cumulative)
        }
        Method::Forec => {
            let parent = get(Method::Maml)?;
            let target = unit.unwrap_or(eval_markets[0]);
            let subset = group.train.market_subset(target);
            let (model, rec) = forec_adapt(&parent.model, &subset, &cfg.freeze_mask(), &cfg.train_config(kind, seed))?;
            (model, rec, parent.cumulative)
        }
    };
    record = record.labeled(&method.to_string(), &group.data.dataset_fingerprint);
    fs::create_dir_all(dir)?;
    model.save_checkpoint(&dir.join("model.json"), &reg.fingerprint())?;
    record.save(&dir.join("run.json"))?;
    let seconds = record.wall_clock_seconds;
    let cumulative = prior + seconds;
    let results = evaluate_unit(group, method, &model, eval_markets, dir, seconds, cumulative, opts)?;
    let manifest = CellManifest {
        status: CellStatus::Complete,
        checkpoint: Some("model.json".into()),
        run_record: Some("run.json".into()),
        seconds,
        cumulative_seconds: cumulative,
        ..base
    };
    fs::write(dir.join("cell.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok((Trained { model, cumulative }, results))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_unit(
    group: &Group,
    method: Method,
    model: &Model64,
    eval_markets: &[MarketId],
    dir: &Path,
    seconds: f64,
    cumulative: f64,
    opts: &RunOptions,
) -> Result<Vec<CellResult>> {
    let reg = &group.data.registry;
    let name = method.to_string();
    let mut out = Vec::with_capacity(eval_markets.len());
    for &m in eval_markets {
        let code = reg.market_code(m);
        let (validation, test) = if opts.evaluate {
            let split = group.data.split(m);
            let v = evaluate(model, &split.validation, &name, code, Split::Validation)?;
            let t = evaluate(model, &split.test, &name, code, Split::Test)?;
            v.save(dir, &format!("{code}-validation"))?;
            t.save(dir, &format!("{code}-test"))?;
            (Some(v), Some(t))
        } else {
            (None, None)
        };
        out.push(CellResult {
            method,
            market: code.to_string(),
            source: group.source.clone(),
            validation,
            test,
            seconds,
            cumulative_seconds: cumulative,
            dir: String::new(),
        });
    }
    Ok(out)
}

fn resume_unit(
    group: &Group,
    method: Method,
    eval_markets: &[MarketId],
    dir: &Path,
    prev: &CellManifest,
    opts: &RunOptions,
) -> Result<(Trained, Vec<CellResult>)> {
    let (model, fp) = Model64::load_checkpoint(&dir.join(prev.checkpoint.as_deref().unwrap_or("model.json")))?;
    if fp != group.data.registry.fingerprint() {
        return Err(Error::Checkpoint("id map changed since the checkpoint was written".into()));
    }
    let reg = &group.data.registry;
    let name = method.to_string();
    let mut results = Vec::new();
    for &m in eval_markets {
        let code = reg.market_code(m);
        let load = |split: Split| EvalReport::read_csv(&dir.join(format!("{code}-{split}.csv")), &name, code, split, DEFAULT_CUTOFF);
        let (validation, test) = if opts.evaluate {
            (Some(load(Split::Validation)?), Some(load(Split::Test)?))
        } else {
            (None, None)
        };
        results.push(CellResult {
            method,
            market: code.to_string(),
            source: group.source.clone(),
            validation,
            test,
            seconds: prev.seconds,
            cumulative_seconds: prev.cumulative_seconds,
            dir: String::new(),
        });
    }
    Ok((
        Trained {
            model,
            cumulative: prev.cumulative_seconds,
        },
        results,
    ))
}

/// Run groups on `threads` workers (0 = every core). Output order follows
/// the input order regardless of scheduling.
pub fn run_groups(cfg: &ExperimentConfig, groups: &[Group], threads: usize, opts: &RunOptions) -> Result<Vec<GroupOutcome>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| groups.par_iter().map(|g| run_group(cfg, g, opts)).collect())
}
