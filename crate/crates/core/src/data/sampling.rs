use std::collections::{HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::{Interaction, ItemId, MarketId, MarketRegistry, SplitDataset, UserId};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// `k` distinct items from `pool` that are not in `positives`, fixed per
/// (seed, user). Returns every candidate when fewer than `k` exist.
pub fn sample_eval_negatives(
    pool: &[ItemId],
    positives: &HashSet<ItemId>,
    k: usize,
    seed: u64,
    user: UserId,
) -> Vec<ItemId> {
    let mut rng = rng_for(seed, &["eval-negatives", &user.0.to_string()]);
    let n_candidates = pool.iter().filter(|i| !positives.contains(i)).count();
    if n_candidates <= 2 * k {
        let mut candidates: Vec<ItemId> = pool.iter().copied().filter(|i| !positives.contains(i)).collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(k);
        return candidates;
    }
    let mut chosen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let item = pool[rng.random_range(0..pool.len())];
        if !positives.contains(&item) && chosen.insert(item) {
            out.push(item);
        }
    }
    out
}

/// Uniform sample without replacement of `min(|source|, target_len)`
/// interactions, kept in their original order.
pub fn downsample_source(source: &[Interaction], target_len: usize, seed: u64) -> Vec<Interaction> {
    if source.len() <= target_len {
        return source.to_vec();
    }
    let mut rng = rng_for(seed, &["downsample"]);
    let mut picked = index::sample(&mut rng, source.len(), target_len).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| source[i].clone()).collect()
}

/// Positive interactions to train on, plus what negative sampling needs.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub interactions: Vec<Interaction>,
    user_positives: HashMap<UserId, HashSet<ItemId>>,
    user_market: HashMap<UserId, MarketId>,
    pools: Vec<Vec<ItemId>>,
}

impl TrainSet {
    /// Fails if a user shows up in more than one market.
    pub fn new(interactions: Vec<Interaction>, registry: &MarketRegistry) -> Result<Self> {
        let mut user_positives: HashMap<UserId, HashSet<ItemId>> = HashMap::new();
        let mut user_market: HashMap<UserId, MarketId> = HashMap::new();
        for it in &interactions {
            if it.market.index() >= registry.n_markets() {
                return Err(Error::OutOfRange {
                    what: "market",
                    index: it.market.index(),
                    size: registry.n_markets(),
                });
            }
            match user_market.insert(it.user, it.market) {
                Some(prev) if prev != it.market => return Err(Error::OverlappingUsers(it.user.0)),
                _ => {}
            }
            user_positives.entry(it.user).or_default().insert(it.item);
        }
        let pools = registry
            .market_ids()
            .map(|m| registry.market_items(m).iter().copied().collect())
            .collect();
        Ok(Self {
            interactions,
            user_positives,
            user_market,
            pools,
        })
    }

    pub fn single(split: &SplitDataset, registry: &MarketRegistry) -> Result<Self> {
        Self::new(split.train.clone(), registry)
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.user_market.len()
    }

    pub fn user_market(&self, user: UserId) -> Option<MarketId> {
        self.user_market.get(&user).copied()
    }

    pub fn positives(&self, user: UserId) -> Option<&HashSet<ItemId>> {
        self.user_positives.get(&user)
    }

    pub fn market_pool(&self, market: MarketId) -> &[ItemId] {
        &self.pools[market.index()]
    }

    pub fn markets(&self) -> Vec<MarketId> {
        let mut ms: Vec<MarketId> = self.user_market.values().copied().collect();
        ms.sort_unstable();
        ms.dedup();
        ms
    }

    /// Interactions of a single market, as its own training set.
    pub fn market_subset(&self, market: MarketId) -> TrainSet {
        let interactions: Vec<Interaction> = self.interactions.iter().filter(|i| i.market == market).cloned().collect();
        let users: HashSet<UserId> = interactions.iter().map(|i| i.user).collect();
        TrainSet {
            user_positives: self
                .user_positives
                .iter()
                .filter(|(u, _)| users.contains(u))
                .map(|(u, p)| (*u, p.clone()))
                .collect(),
            user_market: users.iter().map(|u| (*u, market)).collect(),
            pools: self.pools.clone(),
            interactions,
        }
    }

    /// `k` uniform draws from the user's market pool, skipping the user's
    /// train positives.
    pub fn sample_train_negatives<R: Rng + ?Sized>(&self, user: UserId, k: usize, rng: &mut R) -> Result<Vec<ItemId>> {
        let market = self
            .user_market(user)
            .ok_or_else(|| Error::Config(format!("user {user} has no training interactions")))?;
        let pool = self.market_pool(market);
        let positives = &self.user_positives[&user];
        if pool.len() <= positives.len() {
            return Err(Error::Config(format!(
                "user {user} has interacted with every item of market {}",
                market.0
            )));
        }
        let mut out = Vec::with_capacity(k);
        if positives.len() * 2 > pool.len() {
            let candidates: Vec<ItemId> = pool.iter().copied().filter(|i| !positives.contains(i)).collect();
            for _ in 0..k {
                out.push(candidates[rng.random_range(0..candidates.len())]);
            }
        } else {
            while out.len() < k {
                let item = pool[rng.random_range(0..pool.len())];
                if !positives.contains(&item) {
                    out.push(item);
                }
            }
        }
        Ok(out)
    }
}

/// Target train data plus source train data downsampled to the target's size.
pub fn make_pairwise(
    target: &SplitDataset,
    source: &SplitDataset,
    registry: &MarketRegistry,
    seed: u64,
) -> Result<TrainSet> {
    let mut interactions = target.train.clone();
    interactions.extend(downsample_source(&source.train, target.train.len(), seed));
    TrainSet::new(interactions, registry)
}

/// Concatenation of every market's train data, without downsampling.
pub fn make_global(splits: &[SplitDataset], registry: &MarketRegistry) -> Result<TrainSet> {
    let interactions = splits.iter().flat_map(|s| s.train.iter().cloned()).collect();
    TrainSet::new(interactions, registry)
}
