use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::sampling::sample_eval_negatives;
use crate::data::{Dataset, IdRemap, Interaction, ItemId, MarketId, MarketRegistry, UserId};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, sha256_hex};

/// Negatives ranked against each held-out positive.
pub const EVAL_NEGATIVES: usize = 99;
/// Users with fewer interactions stay entirely in train and are not evaluated.
pub const MIN_EVAL_HISTORY: usize = 3;
pub const SPLIT_FORMAT_VERSION: u32 = 1;

/// One held-out positive and its fixed negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: UserId,
    pub market: MarketId,
    pub positive: ItemId,
    pub negatives: Vec<ItemId>,
}

impl EvalCase {
    /// Positive first, then negatives.
    pub fn candidates(&self) -> impl Iterator<Item = ItemId> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }
}

/// Leave-one-out split of one market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub market: MarketId,
    pub train: Vec<Interaction>,
    pub validation: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
    /// Eval users whose pool held fewer than [`EVAL_NEGATIVES`] candidates.
    pub negative_shortfall: usize,
    pub seed: u64,
}

/// Chronological leave-one-out split of one market's interactions.
///
/// Per user with at least three interactions the latest goes to test, the
/// second latest to validation and the rest to train. Timestamp ties are
/// broken by a seeded shuffle; a user with any missing timestamp gets a fully
/// seeded random order. Shorter histories go to train only. Validation and
/// test share one list of negatives per user, drawn from the market's item
/// pool excluding all of the user's positives.
pub fn leave_one_out_split(
    interactions: &[Interaction],
    registry: &MarketRegistry,
    market: MarketId,
    seed: u64,
) -> SplitDataset {
    let pool: Vec<ItemId> = registry.market_items(market).iter().copied().collect();
    let mut by_user: Vec<Vec<&Interaction>> = vec![Vec::new(); registry.n_users()];
    for it in interactions.iter().filter(|i| i.market == market) {
        by_user[it.user.index()].push(it);
    }
    let mut split = SplitDataset {
        market,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        negative_shortfall: 0,
        seed,
    };
    for &user in registry.market_users(market) {
        let mut history = std::mem::take(&mut by_user[user.index()]);
        if history.is_empty() {
            continue;
        }
        let user_label = user.0.to_string();
        let mut rng = rng_for(seed, &["order", &user_label]);
        history.shuffle(&mut rng);
        if history.iter().all(|i| i.timestamp.is_some()) {
            history.sort_by_key(|i| i.timestamp);
        }
        if history.len() < MIN_EVAL_HISTORY {
            split.train.extend(history.into_iter().cloned());
            continue;
        }
        let positives: HashSet<ItemId> = history.iter().map(|i| i.item).collect();
        let test = history.pop().expect("len >= 3");
        let val = history.pop().expect("len >= 3");
        let negatives = sample_eval_negatives(&pool, &positives, EVAL_NEGATIVES, seed, user);
        if negatives.len() < EVAL_NEGATIVES {
            split.negative_shortfall += 1;
        }
        split.train.extend(history.into_iter().cloned());
        split.validation.push(EvalCase {
            user,
            market,
            positive: val.item,
            negatives: negatives.clone(),
        });
        split.test.push(EvalCase {
            user,
            market,
            positive: test.item,
            negatives,
        });
    }
    split
}

/// Splits and fixed evaluation negatives for every market of a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedData {
    pub version: u32,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub registry: MarketRegistry,
    /// Indexed by market id.
    pub splits: Vec<SplitDataset>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, seed: u64) -> Self {
        let splits = dataset
            .registry
            .market_ids()
            .map(|m| leave_one_out_split(&dataset.interactions, &dataset.registry, m, seed))
            .collect();
        Self {
            version: SPLIT_FORMAT_VERSION,
            seed,
            dataset_fingerprint: dataset.fingerprint(),
            registry: dataset.registry.clone(),
            splits,
        }
    }

    pub fn split(&self, market: MarketId) -> &SplitDataset {
        &self.splits[market.index()]
    }

    pub fn split_by_code(&self, code: &str) -> Result<&SplitDataset> {
        Ok(self.split(self.registry.market_id(code)?))
    }

    /// Compact copy holding only `markets`, in that order. Splits and
    /// negatives are carried over, not recomputed.
    pub fn restrict(&self, markets: &[MarketId]) -> Result<PreparedData> {
        let (registry, remap) = self.registry.restrict(markets)?;
        let splits = markets
            .iter()
            .map(|&m| remap_split(self.split(m), &remap))
            .collect();
        let codes: Vec<&str> = markets.iter().map(|m| self.registry.market_code(*m)).collect();
        Ok(PreparedData {
            version: self.version,
            seed: self.seed,
            dataset_fingerprint: sha256_hex(format!("{}|{}", self.dataset_fingerprint, codes.join(",")).as_bytes()),
            registry,
            splits,
        })
    }

    pub fn restrict_codes(&self, codes: &[String]) -> Result<PreparedData> {
        let ids = codes
            .iter()
            .map(|c| self.registry.market_id(c))
            .collect::<Result<Vec<_>>>()?;
        self.restrict(&ids)
    }

    /// File name keyed by dataset fingerprint and seed.
    pub fn manifest_name(&self) -> String {
        format!("split-{}-{}.json", &self.dataset_fingerprint[..16], self.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: PreparedData = serde_json::from_str(&fs::read_to_string(path)?)?;
        if p.version != SPLIT_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported split manifest version {}", p.version)));
        }
        Ok(p)
    }
}

fn remap_split(split: &SplitDataset, remap: &IdRemap) -> SplitDataset {
    let market = remap.markets[&split.market];
    let it = |i: &Interaction| Interaction {
        user: remap.users[&i.user],
        item: remap.items[&i.item],
        market,
        ..i.clone()
    };
    let case = |c: &EvalCase| EvalCase {
        user: remap.users[&c.user],
        market,
        positive: remap.items[&c.positive],
        negatives: c.negatives.iter().map(|n| remap.items[n]).collect(),
    };
    SplitDataset {
        market,
        train: split.train.iter().map(it).collect(),
        validation: split.validation.iter().map(case).collect(),
        test: split.test.iter().map(case).collect(),
        negative_shortfall: split.negative_shortfall,
        seed: split.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_interactions;

    fn dataset(text: &str) -> Dataset {
        let mut registry = MarketRegistry::open();
        let interactions = parse_interactions(text, Path::new("t"), &mut registry).unwrap();
        Dataset { registry, interactions }
    }

    #[test]
    fn chronological_hold_out() {
        let ds = dataset("de\tu\ti1\t1\t1\nde\tu\ti3\t1\t3\nde\tu\ti2\t1\t2\n");
        let s = leave_one_out_split(&ds.interactions, &ds.registry, MarketId(0), 0);
        let tok = |i: ItemId| ds.registry.item_token(i).to_string();
        assert_eq!(s.train.iter().map(|i| tok(i.item)).collect::<Vec<_>>(), vec!["i1"]);
        assert_eq!(tok(s.validation[0].positive), "i2");
        assert_eq!(tok(s.test[0].positive), "i3");
        // three items in the pool, all positive: nothing left to sample
        assert!(s.test[0].negatives.is_empty());
        assert_eq!(s.negative_shortfall, 1);
    }

    #[test]
    fn short_histories_stay_in_train() {
        let ds = dataset("de\tu\ti1\t1\t1\nde\tu\ti2\t1\t2\n");
        let s = leave_one_out_split(&ds.interactions, &ds.registry, MarketId(0), 0);
        assert_eq!(s.train.len(), 2);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn missing_timestamps_use_seeded_order() {
        let mut text = String::new();
        for k in 0..8 {
            text.push_str(&format!("de\tu\ti{k}\t1\t-\n"));
        }
        let ds = dataset(&text);
        let a = leave_one_out_split(&ds.interactions, &ds.registry, MarketId(0), 5);
        let b = leave_one_out_split(&ds.interactions, &ds.registry, MarketId(0), 5);
        assert_eq!(a, b);
        let held: Vec<ItemId> = (0..20)
            .map(|seed| leave_one_out_split(&ds.interactions, &ds.registry, MarketId(0), seed).test[0].positive)
            .collect();
        assert!(held.iter().any(|h| *h != held[0]), "order should depend on the seed");
    }

    #[test]
    fn restrict_carries_negatives() {
        let mut text = String::new();
        for m in ["de", "jp", "fr"] {
            for u in 0..3 {
                for i in 0..6 {
                    text.push_str(&format!("{m}\t{u}\ti{}\t1\t{i}\n", (i + u) % 9));
                }
            }
        }
        let ds = dataset(&text);
        let full = PreparedData::new(&ds, 3);
        let sub = full.restrict_codes(&["fr".to_string(), "de".to_string()]).unwrap();
        assert_eq!(sub.registry.market_code(MarketId(0)), "fr");
        let (orig, new) = (full.split_by_code("fr").unwrap(), sub.split(MarketId(0)));
        assert_eq!(orig.test.len(), new.test.len());
        for (a, b) in orig.test.iter().zip(&new.test) {
            assert_eq!(full.registry.item_token(a.positive), sub.registry.item_token(b.positive));
            let ta: Vec<&str> = a.negatives.iter().map(|n| full.registry.item_token(*n)).collect();
            let tb: Vec<&str> = b.negatives.iter().map(|n| sub.registry.item_token(*n)).collect();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let ds = dataset("de\tu\ti1\t1\t1\nde\tu\ti3\t1\t3\nde\tu\ti2\t1\t2\nde\tv\ti2\t1\t2\n");
        let p = PreparedData::new(&ds, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(p.manifest_name());
        p.save(&path).unwrap();
        let back = PreparedData::load(&path).unwrap();
        assert_eq!(back.splits, p.splits);
        assert_eq!(back.registry.fingerprint(), p.registry.fingerprint());
    }
}
