//! Experiment configuration: a flat `key = value` TOML file whose every key
//! can also be overridden from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use marketrec::data::{MarketRegistry, SyntheticSpec};
use marketrec::models::{Architecture, ModelConfig, ModelKind};
use marketrec::nn::ParamGroup;
use marketrec::seeding::sha256_hex;
use marketrec::training::{FreezeMask, MamlConfig, TrainConfig};
use marketrec::{Error, Result};

use crate::method::Method;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Interaction file (`market user item rating timestamp`, tab separated).
    /// Without one, a synthetic dataset is generated from the `synth_*` keys.
    pub dataset: Option<PathBuf>,
    /// Market whose item pool must contain every other market's.
    pub base_market: Option<String>,
    /// Markets to load; empty loads all.
    pub markets: Vec<String>,
    /// Target markets; empty means every loaded market except the base market.
    pub targets: Vec<String>,
    /// Source markets; empty means every loaded market other than the target.
    pub sources: Vec<String>,
    /// Methods to report; empty uses the table's default rows.
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out_dir: PathBuf,

    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub negatives: usize,
    pub lr_gmf: f64,
    pub lr_mlp: f64,
    pub lr_nmf: f64,
    pub embed_dim: usize,
    pub layer_plan: Vec<usize>,
    /// Weight of the GMF donor's output vector when warm-starting NMF.
    pub nmf_alpha: f64,
    pub split_market_tables: bool,

    pub maml_fast_lr: f64,
    pub maml_shots: usize,
    pub maml_inner_steps: usize,
    pub maml_meta_lr: f64,
    pub maml_meta_epochs: usize,
    pub maml_second_order: bool,
    /// Parameter groups FOREC keeps fixed while fine-tuning.
    pub forec_freeze: Vec<ParamGroup>,

    /// Bonferroni factors for the AVG, BST and global tables.
    pub m_avg: u32,
    pub m_bst: u32,
    pub m_global: u32,

    /// Worker threads for independent cells; 0 uses every core.
    pub threads: usize,
    /// Reuse completed cells found under `out_dir`.
    pub resume: bool,
    /// On resume, leave previously failed cells out instead of retrying them.
    pub skip_failed: bool,
    /// `csv`, `json`, `text` or `all`.
    pub format: String,
    /// How often `benchmark` repeats its workload; every cell reports its
    /// fastest time.
    pub bench_repeats: usize,

    pub synth_markets: usize,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_interactions: usize,
    pub synth_divergence: f64,
    pub synth_overlap: f64,
    pub synth_temperature: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::for_kind(ModelKind::GMF, 0);
        let maml = MamlConfig::new(0);
        Self {
            dataset: None,
            base_market: None,
            markets: vec![],
            targets: vec![],
            sources: vec![],
            methods: vec![],
            seed: 0,
            out_dir: PathBuf::from("runs"),
            epochs: train.epochs,
            batch_size: train.batch_size,
            l2: train.l2,
            negatives: train.negatives_per_positive,
            lr_gmf: ModelKind::GMF.default_lr(),
            lr_mlp: ModelKind::MLP.default_lr(),
            lr_nmf: ModelKind::NMF.default_lr(),
            embed_dim: marketrec::models::DEFAULT_EMBED_DIM,
            layer_plan: marketrec::models::DEFAULT_LAYER_PLAN.to_vec(),
            nmf_alpha: 0.5,
            split_market_tables: false,
            maml_fast_lr: maml.fast_lr,
            maml_shots: maml.shots,
            maml_inner_steps: maml.inner_steps,
            maml_meta_lr: maml.meta_lr,
            maml_meta_epochs: maml.meta_epochs,
            maml_second_order: maml.second_order,
            forec_freeze: FreezeMask::forec_default().frozen.into_iter().collect(),
            m_avg: 9,
            m_bst: 12,
            m_global: 9,
            threads: 0,
            resume: false,
            skip_failed: false,
            format: "all".into(),
            bench_repeats: 3,
            synth_markets: 3,
            synth_users: 800,
            synth_items: 150,
            synth_interactions: 40,
            synth_divergence: 0.3,
            synth_overlap: 1.0,
            synth_temperature: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply one `key=value` override. The value is read as a TOML value,
    /// falling back to a plain string, and comma-separated lists are accepted
    /// for list keys.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let is_list = matches!(
            key,
            "markets" | "targets" | "sources" | "methods" | "layer_plan" | "forec_freeze"
        );
        let value = if is_list && !raw.starts_with('[') {
            let items: Vec<toml::Value> = raw
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| parse_scalar(t))
                .collect();
            toml::Value::Array(items)
        } else {
            parse_scalar(raw)
        };
        table.insert(key.to_string(), value);
        *self = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// Identifies everything that influences trained weights and evaluation.
    pub fn fingerprint(&self) -> String {
        let mut relevant = self.clone();
        relevant.out_dir = PathBuf::new();
        relevant.threads = 0;
        relevant.resume = false;
        relevant.skip_failed = false;
        relevant.format = String::new();
        relevant.methods.clear();
        relevant.targets.clear();
        relevant.sources.clear();
        sha256_hex(serde_json::to_string(&relevant).unwrap_or_default().as_bytes())
    }

    pub fn lr(&self, kind: ModelKind) -> f64 {
        match kind.arch {
            Architecture::Gmf => self.lr_gmf,
            Architecture::Mlp => self.lr_mlp,
            Architecture::Nmf => self.lr_nmf,
        }
    }

    pub fn train_config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr(kind),
            l2: self.l2,
            negatives_per_positive: self.negatives,
            seed,
            adam: Default::default(),
        }
    }

    pub fn maml_config(&self, seed: u64) -> MamlConfig {
        MamlConfig {
            fast_lr: self.maml_fast_lr,
            shots: self.maml_shots,
            inner_steps: self.maml_inner_steps,
            meta_lr: self.maml_meta_lr,
            meta_epochs: self.maml_meta_epochs,
            negatives_per_positive: self.negatives,
            l2: self.l2,
            second_order: self.maml_second_order,
            seed,
            adam: Default::default(),
        }
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        FreezeMask::freezing(&self.forec_freeze)
    }

    pub fn model_config(&self, kind: ModelKind, registry: &MarketRegistry) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            layer_plan: self.layer_plan.clone(),
            split_market_tables: self.split_market_tables,
            ..ModelConfig::new(kind, registry.n_users(), registry.n_items(), registry.n_markets())
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::uniform(
            self.synth_markets,
            self.synth_users,
            self.synth_items,
            self.synth_interactions,
            self.synth_divergence,
        );
        spec.item_overlap = self.synth_overlap;
        spec.temperature = self.synth_temperature;
        spec
    }

    /// Targets of a run over `registry`.
    pub fn resolve_targets(&self, registry: &MarketRegistry) -> Result<Vec<String>> {
        let targets: Vec<String> = if self.targets.is_empty() {
            let base = registry.base().map(|b| registry.market_code(b).to_string());
            registry
                .market_codes()
                .iter()
                .filter(|c| Some(*c) != base.as_ref() || registry.n_markets() == 1)
                .cloned()
                .collect()
        } else {
            self.targets.clone()
        };
        for t in &targets {
            registry.market_id(t)?;
        }
        if targets.is_empty() {
            return Err(Error::Config("no target markets".into()));
        }
        Ok(targets)
    }

    /// Sources paired with `target`; the target itself is never a source.
    pub fn resolve_sources(&self, registry: &MarketRegistry, target: &str) -> Result<Vec<String>> {
        let sources: Vec<String> = if self.sources.is_empty() {
            registry.market_codes().to_vec()
        } else {
            self.sources.clone()
        };
        for s in &sources {
            registry.market_id(s)?;
        }
        let sources: Vec<String> = sources.into_iter().filter(|s| s != target).collect();
        if sources.is_empty() {
            return Err(Error::Config(format!("target {target} has no source market")));
        }
        Ok(sources)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
