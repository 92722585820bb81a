//! Mini-batch BCE training with Adam, MAML meta-training and FOREC
//! fork-freeze-finetune adaptation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemId, MarketId, TrainSet, UserId};
use crate::error::{Error, Result};
use crate::models::{ModelKind, Recommender};
use crate::nn::{adam_step, l2_grad, sgd_step, AdamConfig, AdamState, Gradients, ParamGroup, ParamId, ParamStore, Tape};
use crate::scalar::Scalar;
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// 25 epochs, batches of 1024, λ = 1e-7, 4 negatives, learning rate by architecture.
    pub fn for_kind(kind: ModelKind, seed: u64) -> Self {
        Self {
            epochs: 25,
            batch_size: 1024,
            lr: kind.default_lr(),
            l2: 1e-7,
            negatives_per_positive: 4,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.l2 < 0.0 || self.negatives_per_positive == 0 {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MamlConfig {
    /// Inner-loop (fast) learning rate.
    pub fast_lr: f64,
    pub shots: usize,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub meta_epochs: usize,
    pub negatives_per_positive: usize,
    pub l2: f64,
    pub second_order: bool,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl MamlConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            fast_lr: 0.1,
            shots: 20,
            inner_steps: 1,
            meta_lr: ModelKind::NMF.default_lr(),
            meta_epochs: 25,
            negatives_per_positive: 4,
            l2: 1e-7,
            second_order: false,
            seed,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.inner_steps == 0 || self.fast_lr < 0.0 || !(self.meta_lr > 0.0) {
            return Err(Error::Config(format!("invalid MAML configuration {self:?}")));
        }
        Ok(())
    }
}

/// Parameter groups excluded from updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self { frozen: BTreeSet::new() }
    }

    pub fn freezing(groups: &[ParamGroup]) -> Self {
        Self {
            frozen: groups.iter().copied().collect(),
        }
    }

    /// Item embeddings and hidden layers frozen; user embeddings, market
    /// embeddings and the output vector fine-tuned.
    pub fn forec_default() -> Self {
        Self::freezing(&[ParamGroup::ItemEmbedding, ParamGroup::Hidden])
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        !self.frozen.contains(&group)
    }

    /// Fails unless some tensor of `store` stays trainable.
    pub fn check<S: Scalar>(&self, store: &ParamStore<S>) -> Result<()> {
        if store.iter().any(|(_, p)| self.is_trainable(p.group)) {
            Ok(())
        } else {
            Err(Error::Config("freeze mask leaves no trainable parameters".into()))
        }
    }

    fn trainable_ids<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<bool> {
        store.iter().map(|(_, p)| self.is_trainable(p.group)).collect()
    }
}

impl Default for FreezeMask {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub dataset_fingerprint: String,
    pub config: serde_json::Value,
    /// Mean BCE over each epoch's examples, measured during the pass.
    pub epoch_losses: Vec<f64>,
    /// Optimization loop only; data preparation is excluded.
    pub wall_clock_seconds: f64,
    pub seed: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunRecord {
    fn new(config: serde_json::Value, seed: u64) -> Self {
        Self {
            method: String::new(),
            dataset_fingerprint: String::new(),
            config,
            epoch_losses: Vec::new(),
            wall_clock_seconds: 0.0,
            seed,
            notes: Vec::new(),
        }
    }

    pub fn labeled(mut self, method: &str, dataset_fingerprint: &str) -> Self {
        self.method = method.to_string();
        self.dataset_fingerprint = dataset_fingerprint.to_string();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One labeled (user, item) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: UserId,
    pub item: ItemId,
    pub market: MarketId,
    pub label: bool,
}

/// Every positive followed by `k` fresh negatives, shuffled.
pub fn epoch_examples<R: Rng + ?Sized>(train: &TrainSet, k: usize, rng: &mut R) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(train.len() * (k + 1));
    for it in &train.interactions {
        out.push(Example {
            user: it.user,
            item: it.item,
            market: it.market,
            label: true,
        });
        for item in train.sample_train_negatives(it.user, k, rng)? {
            out.push(Example {
                user: it.user,
                item,
                market: it.market,
                label: false,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

fn label<S: Scalar>(l: bool) -> S {
    if l {
        S::one()
    } else {
        S::zero()
    }
}

/// Mean BCE of `examples` under `model` evaluated at `store`; when `grads` is
/// given, its gradient is accumulated there.
pub fn batch_loss<S: Scalar, M: Recommender<S>>(
    model: &M,
    store: &ParamStore<S>,
    examples: &[Example],
    mut grads: Option<&mut Gradients<S>>,
) -> Result<S> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = S::one() / S::of(examples.len() as f64);
    let mut tape = Tape::new(store);
    let mut total = S::zero();
    for ex in examples {
        tape.clear();
        let p = model.forward(&mut tape, ex.user, ex.item, ex.market)?;
        let loss = tape.bce(p, label(ex.label))?;
        total += tape.scalar(loss);
        if let Some(g) = grads.as_deref_mut() {
            tape.backward(loss, g, scale)?;
        }
    }
    Ok(total * scale)
}

/// Adam optimizer bound to one model's trainable parameters.
pub struct Trainer<S> {
    pub lr: f64,
    pub l2: f64,
    state: AdamState<S>,
    grads: Gradients<S>,
    trainable: Vec<bool>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, l2: f64, adam: AdamConfig, mask: &FreezeMask) -> Result<Self> {
        mask.check(store)?;
        Ok(Self {
            lr,
            l2,
            state: AdamState::new(store, adam),
            grads: store.zero_grads(),
            trainable: mask.trainable_ids(store),
        })
    }

    /// One Adam update on `examples` (mean BCE + L2). Returns the batch's mean
    /// BCE before the update.
    pub fn step<M: Recommender<S>>(&mut self, model: &mut M, examples: &[Example]) -> Result<S> {
        self.grads.zero();
        let loss = batch_loss(model, model.params(), examples, Some(&mut self.grads))?;
        let trainable = &self.trainable;
        let is_trainable = |id: ParamId| trainable[id.0];
        l2_grad(model.params(), &mut self.grads, self.l2, is_trainable);
        adam_step(model.params_mut(), &self.grads, &mut self.state, self.lr, is_trainable)?;
        Ok(loss)
    }

    pub fn steps_taken(&self) -> u64 {
        self.state.step_count()
    }
}

/// Standard training loop: per epoch, resample negatives, shuffle, and take
/// one Adam step per batch.
pub fn train<S: Scalar, M: Recommender<S>>(model: &mut M, data: &TrainSet, config: &TrainConfig) -> Result<RunRecord> {
    train_masked(model, data, config, &FreezeMask::none())
}

pub fn train_masked<S: Scalar, M: Recommender<S>>(
    model: &mut M,
    data: &TrainSet,
    config: &TrainConfig,
    mask: &FreezeMask,
) -> Result<RunRecord> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut record = RunRecord::new(serde_json::to_value(config)?, config.seed);
    let mut trainer = Trainer::new(model.params(), config.lr, config.l2, config.adam, mask)?;
    let mut rng = rng_for(config.seed, &["train"]);
    let start = Instant::now();
    for _ in 0..config.epochs {
        let examples = epoch_examples(data, config.negatives_per_positive, &mut rng)?;
        let mut total = 0.0;
        for batch in examples.chunks(config.batch_size) {
            let loss = trainer.step(model, batch)?;
            total += loss.as_f64() * batch.len() as f64;
        }
        record.epoch_losses.push(total / examples.len() as f64);
    }
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Support and query examples for one task in one meta-iteration.
#[derive(Clone, Debug, Default)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

fn gradient_at<S: Scalar, M: Recommender<S>>(
    model: &M,
    store: &ParamStore<S>,
    examples: &[Example],
    l2: f64,
    grads: &mut Gradients<S>,
) -> Result<S> {
    grads.zero();
    let loss = batch_loss(model, store, examples, Some(grads))?;
    l2_grad(store, grads, l2, |_| true);
    Ok(loss)
}

fn dot_norm<S: Scalar>(a: &Gradients<S>, ids: &[ParamId]) -> f64 {
    ids.iter()
        .flat_map(|id| a.get(*id).as_slice().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

fn axpy_store<S: Scalar>(store: &mut ParamStore<S>, v: &Gradients<S>, alpha: f64) {
    let a = S::of(alpha);
    for id in store.ids().collect::<Vec<_>>() {
        for (p, g) in store.get_mut(id).as_mut_slice().iter_mut().zip(v.get(id).as_slice()) {
            *p += a * *g;
        }
    }
}

/// Meta-gradient of the mean query loss after inner adaptation, averaged over
/// episodes, together with the mean query loss.
///
/// First order by default: the query gradient at the adapted point. With
/// `second_order`, that gradient is pulled back through every inner step as
/// `v <- v - fast_lr * H v`, using central-difference Hessian-vector products
/// of the support gradient.
pub fn meta_gradient<S: Scalar, M: Recommender<S>>(
    model: &M,
    episodes: &[Episode],
    config: &MamlConfig,
) -> Result<(Gradients<S>, f64)> {
    let base = model.params();
    let ids: Vec<ParamId> = base.ids().collect();
    let mut meta = base.zero_grads();
    let mut scratch = base.zero_grads();
    let mut query_loss = 0.0;
    for ep in episodes {
        let mut trajectory: Vec<ParamStore<S>> = Vec::with_capacity(config.inner_steps);
        let mut fast = base.clone();
        for _ in 0..config.inner_steps {
            if config.second_order {
                trajectory.push(fast.clone());
            }
            gradient_at(model, &fast, &ep.support, config.l2, &mut scratch)?;
            sgd_step(&mut fast, &scratch, config.fast_lr, |_| true);
        }
        let mut v = base.zero_grads();
        query_loss += gradient_at(model, &fast, &ep.query, config.l2, &mut v)?.as_f64();
        if config.second_order {
            let mut plus = base.zero_grads();
            let mut minus = base.zero_grads();
            for point in trajectory.iter().rev() {
                let norm = dot_norm(&v, &ids);
                if norm == 0.0 {
                    break;
                }
                let theta_norm = ids
                    .iter()
                    .flat_map(|id| point.get(*id).as_slice().iter())
                    .map(|x| x.as_f64() * x.as_f64())
                    .sum::<f64>()
                    .sqrt();
                let eps = f64::EPSILON.sqrt() * (1.0 + theta_norm) / norm;
                let mut shifted = point.clone();
                axpy_store(&mut shifted, &v, eps);
                gradient_at(model, &shifted, &ep.support, config.l2, &mut plus)?;
                axpy_store(&mut shifted, &v, -2.0 * eps);
                gradient_at(model, &shifted, &ep.support, config.l2, &mut minus)?;
                // v <- v - fast_lr * (g(+) - g(-)) / (2 eps)
                let c = config.fast_lr / (2.0 * eps);
                v.add_scaled(&plus, S::of(-c));
                v.add_scaled(&minus, S::of(c));
            }
        }
        meta.add_scaled(&v, S::one());
    }
    let n = episodes.len().max(1) as f64;
    let inv = S::of(1.0 / n);
    let mut out = base.zero_grads();
    out.add_scaled(&meta, inv);
    Ok((out, query_loss / n))
}

struct TaskSampler<'a> {
    data: &'a TrainSet,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> TaskSampler<'a> {
    fn new(data: &'a TrainSet) -> Self {
        Self {
            data,
            order: (0..data.len()).collect(),
            cursor: 0,
        }
    }

    fn reshuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.order.shuffle(rng);
        self.cursor = 0;
    }

    fn batches_per_epoch(&self, shots: usize) -> usize {
        self.data.len().div_ceil(shots)
    }

    fn positive(&self, idx: usize) -> Example {
        let it = &self.data.interactions[idx];
        Example {
            user: it.user,
            item: it.item,
            market: it.market,
            label: true,
        }
    }

    fn with_negatives<R: Rng + ?Sized>(&self, positives: Vec<usize>, k: usize, rng: &mut R) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(positives.len() * (k + 1));
        for idx in positives {
            let pos = self.positive(idx);
            out.push(pos);
            for item in self.data.sample_train_negatives(pos.user, k, rng)? {
                out.push(Example { item, label: false, ..pos });
            }
        }
        Ok(out)
    }

    /// Next `shots` positives of the shuffled order as query and `shots`
    /// other positives as support. Returns whether sampling had to reuse items.
    fn episode<R: Rng + ?Sized>(&mut self, shots: usize, k: usize, rng: &mut R) -> Result<(Episode, bool)> {
        let n = self.order.len();
        let mut replaced = false;
        let query: Vec<usize> = if n >= shots {
            if self.cursor + shots > n {
                self.reshuffle(rng);
            }
            let q = self.order[self.cursor..self.cursor + shots].to_vec();
            self.cursor += shots;
            q
        } else {
            replaced = true;
            (0..shots).map(|_| rng.random_range(0..n)).collect()
        };
        let held: BTreeSet<usize> = query.iter().copied().collect();
        let rest: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
        let support: Vec<usize> = if rest.len() >= shots {
            rest.choose_multiple(rng, shots).copied().collect()
        } else {
            replaced = true;
            let pool = if rest.is_empty() { &self.order } else { &rest };
            (0..shots).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        Ok((
            Episode {
                support: self.with_negatives(support, k, rng)?,
                query: self.with_negatives(query, k, rng)?,
            },
            replaced,
        ))
    }
}

/// MAML across per-market tasks, starting from `init`.
///
/// A meta-epoch walks each task's positives once as query batches of `shots`
/// items (the largest task sets the iteration count; smaller tasks cycle).
/// Each meta-iteration adapts a copy of the weights to every task's support
/// batch and applies the averaged query meta-gradient plus L2 with Adam.
pub fn train_maml<S: Scalar, M: Recommender<S>>(init: &M, tasks: &[TrainSet], config: &MamlConfig) -> Result<(M, RunRecord)> {
    config.validate()?;
    if tasks.is_empty() || tasks.iter().any(|t| t.is_empty()) {
        return Err(Error::Empty("MAML task"));
    }
    let mut model = init.clone();
    let mut record = RunRecord::new(serde_json::to_value(config)?, config.seed);
    let mut state = AdamState::new(model.params(), config.adam);
    let mut rng: ChaCha8Rng = rng_for(config.seed, &["maml"]);
    let mut samplers: Vec<TaskSampler> = tasks.iter().map(TaskSampler::new).collect();
    if tasks.iter().any(|t| t.len() < 2 * config.shots) {
        record.notes.push(format!(
            "a task has fewer than {} positives; episodes sample with replacement",
            2 * config.shots
        ));
    }
    let iterations = samplers.iter().map(|s| s.batches_per_epoch(config.shots)).max().unwrap_or(0);
    let start = Instant::now();
    for _ in 0..config.meta_epochs {
        for s in &mut samplers {
            s.reshuffle(&mut rng);
        }
        let mut total = 0.0;
        for _ in 0..iterations {
            let mut episodes = Vec::with_capacity(samplers.len());
            for s in &mut samplers {
                let (ep, _) = s.episode(config.shots, config.negatives_per_positive, &mut rng)?;
                episodes.push(ep);
            }
            let (mut grads, loss) = meta_gradient(&model, &episodes, config)?;
            total += loss;
            l2_grad(model.params(), &mut grads, config.l2, |_| true);
            adam_step(model.params_mut(), &grads, &mut state, config.meta_lr, |_| true)?;
        }
        record.epoch_losses.push(total / iterations.max(1) as f64);
    }
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((model, record))
}

/// Fork `maml`, freeze the masked groups and fine-tune on the target market.
/// The source model is left untouched.
pub fn forec_adapt<S: Scalar, M: Recommender<S>>(
    maml: &M,
    target: &TrainSet,
    mask: &FreezeMask,
    config: &TrainConfig,
) -> Result<(M, RunRecord)> {
    mask.check(maml.params())?;
    let mut fork = maml.clone();
    let mut record = train_masked(&mut fork, target, config, mask)?;
    record.notes.push(format!(
        "frozen groups: {}",
        mask.frozen.iter().map(|g| g.name()).collect::<Vec<_>>().join(",")
    ));
    Ok((fork, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, MarketRegistry};
    use crate::models::{Model, ModelConfig};
    use crate::nn::{sigmoid, DenseMatrix, Var};

    fn registry(n_items: u32) -> MarketRegistry {
        let mut r = MarketRegistry::new(["a", "b"], None).unwrap();
        for m in 0..2u16 {
            for i in 0..n_items {
                let id = r.intern_item(&format!("i{i}"));
                r.add_market_item(MarketId(m), id);
            }
        }
        r
    }

    fn positives(users: u32, per_user: u32, market: u16, offset: u32) -> Vec<Interaction> {
        (0..users)
            .flat_map(|u| {
                (0..per_user).map(move |k| Interaction {
                    user: UserId(offset + u),
                    item: ItemId((u * 3 + k) % 30),
                    rating: 1.0,
                    timestamp: None,
                    market: MarketId(market),
                })
            })
            .collect()
    }

    fn small_config(kind: ModelKind) -> ModelConfig {
        ModelConfig::new(kind, 12, 30, 2)
    }

    #[test]
    fn one_step_descends_on_a_fixed_batch() {
        let reg = registry(30);
        let data = TrainSet::new(positives(1, 1, 0, 0), &reg).unwrap();
        let mut rng = rng_for(0, &["t"]);
        let batch = epoch_examples(&data, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 5);
        assert_eq!(batch.iter().filter(|e| !e.label).count(), 4);
        for kind in ModelKind::ALL {
            let mut m = Model::<f64>::new(small_config(kind), 1).unwrap();
            let before = batch_loss(&m, m.params(), &batch, None).unwrap();
            let mut tr = Trainer::new(m.params(), kind.default_lr(), 1e-7, AdamConfig::default(), &FreezeMask::none()).unwrap();
            tr.step(&mut m, &batch).unwrap();
            let after = batch_loss(&m, m.params(), &batch, None).unwrap();
            assert!(after < before, "{kind}: {after} >= {before}");
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let reg = registry(30);
        let data = TrainSet::new(positives(4, 3, 0, 0), &reg).unwrap();
        let mut m = Model::<f64>::new(small_config(ModelKind::NMF), 3).unwrap();
        let orig = m.clone();
        let mut cfg = TrainConfig::for_kind(ModelKind::NMF, 0);
        cfg.epochs = 0;
        let rec = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(m, orig);
        assert!(rec.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let reg = registry(30);
        let data = TrainSet::new(positives(6, 4, 0, 0), &reg).unwrap();
        let mut cfg = TrainConfig::for_kind(ModelKind::MA_MLP, 7);
        cfg.epochs = 3;
        cfg.batch_size = 16;
        let mut a = Model::<f64>::new(small_config(ModelKind::MA_MLP), 2).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(ra.epoch_losses.len(), 3);
        assert!(ra.wall_clock_seconds > 0.0);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let reg = registry(30);
        let data = TrainSet::new(vec![], &reg).unwrap();
        let mut m = Model::<f64>::new(small_config(ModelKind::GMF), 0).unwrap();
        assert!(train(&mut m, &data, &TrainConfig::for_kind(ModelKind::GMF, 0)).is_err());
    }

    #[test]
    fn forec_mask_semantics() {
        let reg = registry(30);
        let data = TrainSet::new(positives(6, 4, 0, 0), &reg).unwrap();
        let maml = Model::<f64>::new(small_config(ModelKind::NMF), 4).unwrap();
        let snapshot = maml.clone();
        let mut cfg = TrainConfig::for_kind(ModelKind::NMF, 1);
        cfg.epochs = 2;
        let only_h = FreezeMask::freezing(&[ParamGroup::UserEmbedding, ParamGroup::ItemEmbedding, ParamGroup::Hidden]);
        let (forec, rec) = forec_adapt(&maml, &data, &only_h, &cfg).unwrap();
        assert_eq!(maml, snapshot);
        assert!(rec.notes.iter().any(|n| n.contains("hidden")));
        for (id, p) in forec.params().iter() {
            let orig = maml.params().get(id);
            if p.group == ParamGroup::Output {
                assert_ne!(&p.value, orig);
            } else {
                assert_eq!(&p.value, orig, "{} changed", p.name);
            }
        }
        let all = FreezeMask::freezing(&ParamGroup::ALL);
        assert!(forec_adapt(&maml, &data, &all, &cfg).is_err());
    }

    #[test]
    fn forec_fine_tuning_reduces_target_loss() {
        let reg = registry(30);
        let data = TrainSet::new(positives(8, 5, 0, 0), &reg).unwrap();
        let maml = Model::<f64>::new(small_config(ModelKind::NMF), 5).unwrap();
        let mut rng = rng_for(99, &["fixed"]);
        let fixed = epoch_examples(&data, 4, &mut rng).unwrap();
        let before = batch_loss(&maml, maml.params(), &fixed, None).unwrap();
        let mut cfg = TrainConfig::for_kind(ModelKind::NMF, 3);
        cfg.epochs = 5;
        let (forec, _) = forec_adapt(&maml, &data, &FreezeMask::forec_default(), &cfg).unwrap();
        let after = batch_loss(&forec, forec.params(), &fixed, None).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    /// score = sigmoid(w * x_item) with a single scalar weight.
    #[derive(Clone)]
    struct Scalar1 {
        params: ParamStore<f64>,
        xs: Vec<f64>,
    }

    impl Scalar1 {
        fn new(w: f64, xs: Vec<f64>) -> Self {
            let mut params = ParamStore::new();
            params.add("w", ParamGroup::Output, DenseMatrix::filled(1, 1, w));
            Self { params, xs }
        }
    }

    impl Recommender<f64> for Scalar1 {
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }

        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.params
        }

        fn forward(&self, tape: &mut Tape<'_, f64>, _: UserId, item: ItemId, _: MarketId) -> Result<Var> {
            let w = tape.param(ParamId(0));
            let x = tape.input(vec![self.xs[item.index()]]);
            let z = tape.dot(w, x)?;
            tape.sigmoid(z)
        }
    }

    fn ex(item: u32, label: bool) -> Example {
        Example {
            user: UserId(0),
            item: ItemId(item),
            market: MarketId(0),
            label,
        }
    }

    #[test]
    fn first_order_meta_gradient_matches_closed_form() {
        let (w, xs, xq, beta) = (0.3, 1.7, -0.8, 0.1);
        let model = Scalar1::new(w, vec![xs, xq]);
        let ep = Episode {
            support: vec![ex(0, true)],
            query: vec![ex(1, false)],
        };
        let mut cfg = MamlConfig::new(0);
        cfg.fast_lr = beta;
        cfg.l2 = 0.0;
        let (g, _) = meta_gradient(&model, &[ep.clone()], &cfg).unwrap();
        // hand oracle
        let gs = (sigmoid(w * xs) - 1.0) * xs;
        let w_fast = w - beta * gs;
        let expected = (sigmoid(w_fast * xq) - 0.0) * xq;
        assert!((g.get(ParamId(0)).get(0, 0) - expected).abs() < 1e-14);

        cfg.second_order = true;
        let (g2, _) = meta_gradient(&model, &[ep], &cfg).unwrap();
        let s = sigmoid(w * xs);
        let hess = s * (1.0 - s) * xs * xs;
        let expected2 = expected * (1.0 - beta * hess);
        assert!((g2.get(ParamId(0)).get(0, 0) - expected2).abs() < 1e-7, "{} vs {expected2}", g2.get(ParamId(0)).get(0, 0));
    }

    #[test]
    fn zero_fast_lr_reduces_to_query_gradient() {
        let reg = registry(30);
        let data = TrainSet::new(positives(6, 4, 0, 0), &reg).unwrap();
        let model = Model::<f64>::new(small_config(ModelKind::NMF), 8).unwrap();
        let mut rng = rng_for(1, &["x"]);
        let examples = epoch_examples(&data, 4, &mut rng).unwrap();
        let ep = Episode {
            support: examples[..10].to_vec(),
            query: examples[10..30].to_vec(),
        };
        let mut cfg = MamlConfig::new(0);
        cfg.fast_lr = 0.0;
        let (g, _) = meta_gradient(&model, &[ep.clone()], &cfg).unwrap();
        let mut direct = model.params().zero_grads();
        batch_loss(&model, model.params(), &ep.query, Some(&mut direct)).unwrap();
        l2_grad(model.params(), &mut direct, cfg.l2, |_| true);
        assert_eq!(g, direct);
    }

    #[test]
    fn maml_runs_and_is_slower_than_plain_training() {
        let reg = registry(30);
        let target = TrainSet::new(positives(6, 8, 0, 0), &reg).unwrap();
        let source = TrainSet::new(positives(6, 8, 1, 6), &reg).unwrap();
        let mut joined = target.interactions.clone();
        joined.extend(source.interactions.iter().cloned());
        let pair = TrainSet::new(joined, &reg).unwrap();
        let nmf = Model::<f64>::new(small_config(ModelKind::NMF), 1).unwrap();
        let mut cfg = MamlConfig::new(3);
        cfg.meta_epochs = 3;
        cfg.shots = 5;
        let (maml, rec) = train_maml(&nmf, &[target.clone(), source], &cfg).unwrap();
        assert_eq!(rec.epoch_losses.len(), 3);
        assert_ne!(maml, nmf);
        assert!(maml.params().is_finite());

        let mut tcfg = TrainConfig::for_kind(ModelKind::NMF, 3);
        tcfg.epochs = 3;
        let mut plain = nmf.clone();
        let prec = train(&mut plain, &pair, &tcfg).unwrap();
        assert!(rec.wall_clock_seconds > prec.wall_clock_seconds);
    }

    #[test]
    fn maml_flags_small_tasks() {
        let reg = registry(30);
        let tiny = TrainSet::new(positives(1, 3, 0, 0), &reg).unwrap();
        let nmf = Model::<f64>::new(small_config(ModelKind::GMF), 1).unwrap();
        let mut cfg = MamlConfig::new(0);
        cfg.meta_epochs = 1;
        let (_, rec) = train_maml(&nmf, &[tiny], &cfg).unwrap();
        assert!(!rec.notes.is_empty());
    }
}
