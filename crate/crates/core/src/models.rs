//! Scoring models: GMF, MLP and NMF, each with an optional market embedding
//! that rescales item vectors componentwise before they enter the towers.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, MarketId, UserId};
use crate::error::{shape_err, Error, Result};
use crate::nn::{DenseMatrix, Init, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

pub const DEFAULT_EMBED_DIM: usize = 8;
pub const DEFAULT_LAYER_PLAN: [usize; 5] = [16, 64, 32, 16, 8];
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Gmf,
    Mlp,
    Nmf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelKind {
    pub arch: Architecture,
    pub market_aware: bool,
}

impl ModelKind {
    pub const GMF: ModelKind = ModelKind::new(Architecture::Gmf, false);
    pub const MLP: ModelKind = ModelKind::new(Architecture::Mlp, false);
    pub const NMF: ModelKind = ModelKind::new(Architecture::Nmf, false);
    pub const MA_GMF: ModelKind = ModelKind::new(Architecture::Gmf, true);
    pub const MA_MLP: ModelKind = ModelKind::new(Architecture::Mlp, true);
    pub const MA_NMF: ModelKind = ModelKind::new(Architecture::Nmf, true);
    pub const ALL: [ModelKind; 6] = [
        Self::GMF,
        Self::MLP,
        Self::NMF,
        Self::MA_GMF,
        Self::MA_MLP,
        Self::MA_NMF,
    ];

    pub const fn new(arch: Architecture, market_aware: bool) -> Self {
        Self { arch, market_aware }
    }

    pub fn unaware(self) -> Self {
        Self::new(self.arch, false)
    }

    pub fn aware(self) -> Self {
        Self::new(self.arch, true)
    }

    /// Adam learning rate used for this architecture.
    pub fn default_lr(self) -> f64 {
        match self.arch {
            Architecture::Gmf => 0.005,
            Architecture::Mlp | Architecture::Nmf => 0.01,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.arch {
            Architecture::Gmf => "GMF",
            Architecture::Mlp => "MLP",
            Architecture::Nmf => "NMF",
        };
        if self.market_aware {
            write!(f, "MA-{base}")
        } else {
            f.write_str(base)
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let (aware, base) = match upper.strip_prefix("MA-") {
            Some(rest) => (true, rest),
            None => (false, upper.as_str()),
        };
        let arch = match base {
            "GMF" => Architecture::Gmf,
            "MLP" => Architecture::Mlp,
            "NMF" => Architecture::Nmf,
            _ => return Err(Error::Config(format!("unknown model kind `{s}`"))),
        };
        Ok(ModelKind::new(arch, aware))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub layer_plan: Vec<usize>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_markets: usize,
    /// MA-NMF only: give the MLP tower its own market table instead of sharing one.
    #[serde(default)]
    pub split_market_tables: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_users: usize, n_items: usize, n_markets: usize) -> Self {
        Self {
            kind,
            embed_dim: DEFAULT_EMBED_DIM,
            layer_plan: DEFAULT_LAYER_PLAN.to_vec(),
            n_users,
            n_items,
            n_markets,
            split_market_tables: false,
        }
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self {
            kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("embedding dimension and table sizes must be positive".into()));
        }
        if self.n_markets == 0 {
            return Err(Error::Config("at least one market is required".into()));
        }
        if self.kind.arch != Architecture::Gmf {
            let plan = &self.layer_plan;
            if plan.len() < 2 || plan[0] != 2 * d || plan[plan.len() - 1] != d {
                return Err(Error::Config(format!(
                    "layer plan {plan:?} must start at {} and end at {d}",
                    2 * d
                )));
            }
            if plan.contains(&0) {
                return Err(Error::Config("layer widths must be positive".into()));
            }
        }
        Ok(())
    }

    fn uses_gmf_tower(&self) -> bool {
        matches!(self.kind.arch, Architecture::Gmf | Architecture::Nmf)
    }

    fn uses_mlp_tower(&self) -> bool {
        matches!(self.kind.arch, Architecture::Mlp | Architecture::Nmf)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    gmf_user: Option<ParamId>,
    gmf_item: Option<ParamId>,
    mlp_user: Option<ParamId>,
    mlp_item: Option<ParamId>,
    market: Option<ParamId>,
    market_mlp: Option<ParamId>,
    layers: Vec<(ParamId, ParamId)>,
    h: ParamId,
}

impl Layout {
    fn resolve<S: Scalar>(config: &ModelConfig, store: &ParamStore<S>) -> Result<Self> {
        let need = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let opt = |cond: bool, name: &str| if cond { need(name).map(Some) } else { Ok(None) };
        let aware = config.kind.market_aware;
        let split = aware && config.split_market_tables && config.kind.arch == Architecture::Nmf;
        let layers = if config.uses_mlp_tower() {
            (1..config.layer_plan.len())
                .map(|k| Ok((need(&layer_weight(k))?, need(&layer_bias(k))?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            gmf_user: opt(config.uses_gmf_tower(), "gmf.user")?,
            gmf_item: opt(config.uses_gmf_tower(), "gmf.item")?,
            mlp_user: opt(config.uses_mlp_tower(), "mlp.user")?,
            mlp_item: opt(config.uses_mlp_tower(), "mlp.item")?,
            market: opt(aware, "market")?,
            market_mlp: opt(split, "market.mlp")?,
            layers,
            h: need("h")?,
        })
    }

    /// Market table feeding the MLP tower.
    fn mlp_market(&self) -> Option<ParamId> {
        self.market_mlp.or(self.market)
    }
}

fn layer_weight(k: usize) -> String {
    format!("mlp.layer{k}.weight")
}

fn layer_bias(k: usize) -> String {
    format!("mlp.layer{k}.bias")
}

/// Anything that can be scored and trained through a [`Tape`].
///
/// `forward` must only address parameters through the tape's store, so it can
/// be evaluated against any store sharing this model's layout (adapted copies
/// in meta-learning, perturbed copies in gradient checks).
pub trait Recommender<S: Scalar>: Clone {
    fn params(&self) -> &ParamStore<S>;

    fn params_mut(&mut self) -> &mut ParamStore<S>;

    /// Records the forward pass; returns the probability node.
    fn forward(&self, tape: &mut Tape<'_, S>, user: UserId, item: ItemId, market: MarketId) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

impl<S: Scalar> Model<S> {
    /// User/item embeddings and `h` ~ N(0, 0.01), market embeddings
    /// ~ N(1, 0.01), hidden weights Glorot-uniform, biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_inits(config, seed, Init::EMBEDDING, Init::MARKET)
    }

    /// Same scheme for every embedding table, market tables included.
    pub fn with_init(config: ModelConfig, seed: u64, embedding_init: Init) -> Result<Self> {
        Self::with_inits(config, seed, embedding_init, embedding_init)
    }

    pub fn with_inits(config: ModelConfig, seed: u64, embedding_init: Init, market_init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut store = ParamStore::new();
        if config.uses_gmf_tower() {
            store.add("gmf.user", ParamGroup::UserEmbedding, embedding_init.sample(config.n_users, d, &mut rng));
            store.add("gmf.item", ParamGroup::ItemEmbedding, embedding_init.sample(config.n_items, d, &mut rng));
        }
        if config.uses_mlp_tower() {
            store.add("mlp.user", ParamGroup::UserEmbedding, embedding_init.sample(config.n_users, d, &mut rng));
            store.add("mlp.item", ParamGroup::ItemEmbedding, embedding_init.sample(config.n_items, d, &mut rng));
        }
        if config.kind.market_aware {
            store.add("market", ParamGroup::MarketEmbedding, market_init.sample(config.n_markets, d, &mut rng));
            if config.split_market_tables && config.kind.arch == Architecture::Nmf {
                store.add(
                    "market.mlp",
                    ParamGroup::MarketEmbedding,
                    market_init.sample(config.n_markets, d, &mut rng),
                );
            }
        }
        if config.uses_mlp_tower() {
            for (k, pair) in config.layer_plan.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                store.add(layer_weight(k + 1), ParamGroup::Hidden, Init::GlorotUniform.sample(fan_out, fan_in, &mut rng));
                store.add(layer_bias(k + 1), ParamGroup::Hidden, DenseMatrix::zeros(1, fan_out));
            }
        }
        let h_len = if config.kind.arch == Architecture::Nmf { 2 * d } else { d };
        store.add("h", ParamGroup::Output, embedding_init.sample(1, h_len, &mut rng));
        let layout = Layout::resolve(&config, &store)?;
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    /// Assemble a model from an existing store; tensor names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let reference = Model::<S>::with_init(config.clone(), 0, Init::Zeros)?;
        reference.params.check_layout(&params)?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Deep copy; the fork shares no storage with `self`.
    pub fn fork(&self) -> Self {
        self.clone()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }

    pub fn market_table(&self) -> Option<ParamId> {
        self.layout.market
    }

    pub fn output_vector(&self) -> ParamId {
        self.layout.h
    }

    /// Copy every tensor of `other` whose name and shape exist here. Returns the copied names.
    pub fn copy_matching_from(&mut self, other: &ParamStore<S>) -> Vec<String> {
        let mut copied = Vec::new();
        for (_, src) in other.iter() {
            if let Some(id) = self.params.find(&src.name) {
                let dst = self.params.get_mut(id);
                if dst.dims() == src.value.dims() {
                    dst.as_mut_slice().copy_from_slice(src.value.as_slice());
                    copied.push(src.name.clone());
                }
            }
        }
        copied
    }

    pub fn score(&self, user: UserId, item: ItemId, market: MarketId) -> Result<S> {
        let mut tape = Tape::new(&self.params);
        let y = self.forward(&mut tape, user, item, market)?;
        Ok(tape.scalar(y))
    }

    /// Scores for several items of one user, reusing a single tape.
    pub fn score_items(&self, user: UserId, items: &[ItemId], market: MarketId) -> Result<Vec<S>> {
        let mut tape = Tape::new(&self.params);
        items
            .iter()
            .map(|&item| {
                tape.clear();
                let y = self.forward(&mut tape, user, item, market)?;
                Ok(tape.scalar(y))
            })
            .collect()
    }

    fn market_aware_item(
        &self,
        tape: &mut Tape<'_, S>,
        item_table: ParamId,
        market_table: Option<ParamId>,
        item: ItemId,
        market: MarketId,
    ) -> Result<Var> {
        let q = tape.gather(item_table, item.index())?;
        match market_table {
            Some(table) => tape.gather_mul(table, market.index(), q),
            None => Ok(q),
        }
    }

    fn gmf_tower(&self, tape: &mut Tape<'_, S>, user: UserId, item: ItemId, market: MarketId) -> Result<Var> {
        let (users, items) = (self.layout.gmf_user.expect("gmf tower"), self.layout.gmf_item.expect("gmf tower"));
        let p = tape.gather(users, user.index())?;
        let q = self.market_aware_item(tape, items, self.layout.market, item, market)?;
        tape.mul(p, q)
    }

    fn mlp_tower(&self, tape: &mut Tape<'_, S>, user: UserId, item: ItemId, market: MarketId) -> Result<Var> {
        let (users, items) = (self.layout.mlp_user.expect("mlp tower"), self.layout.mlp_item.expect("mlp tower"));
        let p = tape.gather(users, user.index())?;
        let q = self.market_aware_item(tape, items, self.layout.mlp_market(), item, market)?;
        let mut m = tape.concat(p, q)?;
        for &(w, b) in &self.layout.layers {
            let (w, b) = (tape.param(w), tape.param(b));
            let z = tape.affine(w, b, m)?;
            m = tape.relu(z)?;
        }
        Ok(m)
    }
}

impl<S: Scalar> Recommender<S> for Model<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape<'_, S>, user: UserId, item: ItemId, market: MarketId) -> Result<Var> {
        if self.config.kind.market_aware && market.index() >= self.config.n_markets {
            return Err(Error::OutOfRange {
                what: "market",
                index: market.index(),
                size: self.config.n_markets,
            });
        }
        let features = match self.config.kind.arch {
            Architecture::Gmf => self.gmf_tower(tape, user, item, market)?,
            Architecture::Mlp => self.mlp_tower(tape, user, item, market)?,
            Architecture::Nmf => {
                let g = self.gmf_tower(tape, user, item, market)?;
                let m = self.mlp_tower(tape, user, item, market)?;
                tape.concat(g, m)?
            }
        };
        let h = tape.param(self.layout.h);
        let z = tape.dot(h, features)?;
        tape.sigmoid(z)
    }
}

/// Build an NMF model from trained GMF and MLP donors.
///
/// Tower embeddings and hidden layers are copied verbatim; the output vector
/// becomes `[alpha * h_gmf; (1 - alpha) * h_mlp]`. A shared market table is
/// taken from the GMF donor; with split tables the MLP tower's comes from the
/// MLP donor.
pub fn warm_start_nmf<S: Scalar>(gmf: &Model<S>, mlp: &Model<S>, alpha: f64) -> Result<Model<S>> {
    let (gc, mc) = (gmf.config(), mlp.config());
    if gc.kind.arch != Architecture::Gmf || mc.kind.arch != Architecture::Mlp {
        return Err(Error::Config(format!(
            "warm start needs a GMF and an MLP donor, got {} and {}",
            gc.kind, mc.kind
        )));
    }
    if gc.kind.market_aware != mc.kind.market_aware {
        return Err(Error::Config("donors disagree on market awareness".into()));
    }
    let dims = |c: &ModelConfig| (c.embed_dim, c.n_users, c.n_items, c.n_markets);
    if dims(gc) != dims(mc) {
        return Err(shape_err("warm_start_nmf", format!("{:?}", dims(gc)), format!("{:?}", dims(mc))));
    }
    let config = ModelConfig {
        kind: ModelKind::new(Architecture::Nmf, gc.kind.market_aware),
        layer_plan: mc.layer_plan.clone(),
        ..gc.clone()
    };
    let mut nmf = Model::<S>::with_init(config, 0, Init::Zeros)?;
    nmf.copy_matching_from(mlp.params());
    // the GMF donor wins on the shared market table
    nmf.copy_matching_from(gmf.params());
    if let Some(split) = nmf.layout.market_mlp {
        let src = mlp.layout.market.expect("market-aware donor");
        let values = mlp.params.get(src).as_slice().to_vec();
        nmf.params.get_mut(split).as_mut_slice().copy_from_slice(&values);
    }
    let a = S::of(alpha);
    let b = S::of(1.0 - alpha);
    let mut h: Vec<S> = gmf.params.get(gmf.layout.h).as_slice().iter().map(|v| a * *v).collect();
    h.extend(mlp.params.get(mlp.layout.h).as_slice().iter().map(|v| b * *v));
    let hid = nmf.layout.h;
    nmf.params.get_mut(hid).as_mut_slice().copy_from_slice(&h);
    Ok(nmf)
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    version: u32,
    config: ModelConfig,
    id_map_fingerprint: String,
    tensors: Vec<TensorRecord>,
}

impl<S: Scalar> Model<S> {
    pub fn to_checkpoint_json(&self, id_map_fingerprint: &str) -> Result<String> {
        let record = CheckpointRecord {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            id_map_fingerprint: id_map_fingerprint.to_string(),
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorRecord {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    values: p.value.as_slice().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    /// Returns the model and the ID-map fingerprint it was saved with.
    pub fn from_checkpoint_json(json: &str) -> Result<(Self, String)> {
        let record: CheckpointRecord = serde_json::from_str(json)?;
        if record.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", record.version)));
        }
        let mut store = ParamStore::new();
        for t in record.tensors {
            let values = t.values.into_iter().map(S::of).collect();
            store.add(t.name, t.group, DenseMatrix::from_vec(t.rows, t.cols, values)?);
        }
        Ok((Self::from_params(record.config, store)?, record.id_map_fingerprint))
    }

    pub fn save_checkpoint(&self, path: &Path, id_map_fingerprint: &str) -> Result<()> {
        fs::write(path, self.to_checkpoint_json(id_map_fingerprint)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, String)> {
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}
