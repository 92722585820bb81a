//! Planted latent-factor markets for desk-scale experiments.
//!
//! Items carry one factor vector and a popularity bias shared by all markets.
//! Market `l` sees item factors rotated by an angle proportional to
//! `divergence * l / (n_markets - 1)` in every consecutive coordinate plane, so
//! zero divergence gives all markets the same preference model. Users sample
//! distinct items by Gumbel-top-k over `u . R_l v / temperature + bias`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Interaction, ItemId, MarketRegistry};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub code: String,
    pub users: usize,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// The first market is the base market and owns the full item pool.
    pub markets: Vec<SyntheticMarket>,
    /// Fraction of each non-base market's items taken from a common core.
    pub item_overlap: f64,
    /// 0 = identical preference models; 1 = quarter-turn rotation for the last market.
    pub divergence: f64,
    pub interactions_per_user: usize,
    pub latent_dim: usize,
    pub temperature: f64,
    /// Scale of the per-item popularity bias.
    pub popularity: f64,
}

impl SyntheticSpec {
    /// `n_markets` markets named `m0, m1, ...` of identical size.
    pub fn uniform(n_markets: usize, users: usize, items: usize, interactions_per_user: usize, divergence: f64) -> Self {
        Self {
            markets: (0..n_markets)
                .map(|m| SyntheticMarket {
                    code: format!("m{m}"),
                    users,
                    items,
                })
                .collect(),
            item_overlap: 1.0,
            divergence,
            interactions_per_user,
            latent_dim: 8,
            temperature: 0.5,
            popularity: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("infeasible synthetic spec: {m}")));
        let Some(base) = self.markets.first() else {
            return fail("no markets".into());
        };
        if !(0.0..=1.0).contains(&self.item_overlap) {
            return fail(format!("item_overlap {} outside [0, 1]", self.item_overlap));
        }
        if !(self.divergence >= 0.0 && self.divergence.is_finite()) {
            return fail(format!("divergence {} must be finite and non-negative", self.divergence));
        }
        if self.latent_dim == 0 || !(self.temperature > 0.0) || !(self.popularity >= 0.0) {
            return fail("latent_dim, temperature must be positive and popularity non-negative".into());
        }
        let mut codes: Vec<&str> = self.markets.iter().map(|m| m.code.as_str()).collect();
        codes.sort_unstable();
        codes.dedup();
        if codes.len() != self.markets.len() {
            return fail("duplicate market codes".into());
        }
        for m in &self.markets {
            if m.users == 0 || m.items == 0 {
                return fail(format!("market {} has no users or items", m.code));
            }
            if m.items > base.items {
                return fail(format!("market {} has more items than the base market", m.code));
            }
            if self.interactions_per_user > m.items {
                return fail(format!(
                    "{} interactions per user exceed the {} items of market {}",
                    self.interactions_per_user, m.items, m.code
                ));
            }
        }
        Ok(())
    }

    pub fn total_interactions(&self) -> usize {
        self.markets.iter().map(|m| m.users * self.interactions_per_user).sum()
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn rotate(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for k in (0..v.len().saturating_sub(1)).step_by(2) {
        out[k] = c * v[k] - s * v[k + 1];
        out[k + 1] = s * v[k] + c * v[k + 1];
    }
    out
}

pub fn generate_synthetic_markets(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.latent_dim;
    let base_items = spec.markets[0].items;
    let mut rng = rng_for(seed, &["synthetic", "items"]);
    let item_factors: Vec<Vec<f64>> = (0..base_items).map(|_| gaussian_vec(&mut rng, d)).collect();
    let item_bias: Vec<f64> = (0..base_items)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.popularity * z
        })
        .collect();

    let mut registry = MarketRegistry::new(spec.markets.iter().map(|m| m.code.clone()), Some(&spec.markets[0].code))?;
    let item_ids: Vec<ItemId> = (0..base_items).map(|i| registry.intern_item(&format!("i{i}"))).collect();

    let n_markets = spec.markets.len();
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let mut interactions = Vec::with_capacity(spec.total_interactions());
    for (l, market) in spec.markets.iter().enumerate() {
        let mid = registry.market_id(&market.code)?;
        let mut mrng = rng_for(seed, &["synthetic", "market", &market.code]);
        // item pool: common core, then a random fill from the rest of the base pool
        let pool: Vec<usize> = if l == 0 {
            (0..base_items).collect()
        } else {
            let core = ((spec.item_overlap * market.items as f64).round() as usize).min(market.items);
            let mut rest: Vec<usize> = (core..base_items).collect();
            rest.shuffle(&mut mrng);
            (0..core).chain(rest.into_iter().take(market.items - core)).collect()
        };
        for &i in &pool {
            registry.add_market_item(mid, item_ids[i]);
        }
        let angle = if n_markets > 1 {
            spec.divergence * std::f64::consts::FRAC_PI_2 * l as f64 / (n_markets - 1) as f64
        } else {
            0.0
        };
        let rotated: Vec<Vec<f64>> = pool.iter().map(|&i| rotate(&item_factors[i], angle)).collect();
        let scale = 1.0 / (spec.temperature * (d as f64).sqrt());
        for u in 0..market.users {
            let user = registry.intern_user(mid, &format!("{}_u{u}", market.code));
            let uf = gaussian_vec(&mut mrng, d);
            let mut keyed: Vec<(f64, usize)> = pool
                .iter()
                .zip(&rotated)
                .map(|(&i, v)| {
                    let affinity: f64 = uf.iter().zip(v).map(|(a, b)| a * b).sum();
                    let g: f64 = gumbel.sample(&mut mrng);
                    (affinity * scale + item_bias[i] + g, i)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut times: Vec<i64> = (0..spec.interactions_per_user as i64).collect();
            times.shuffle(&mut mrng);
            for (&(_, i), t) in keyed.iter().take(spec.interactions_per_user).zip(times) {
                interactions.push(Interaction {
                    user,
                    item: item_ids[i],
                    rating: 1.0,
                    timestamp: Some(t),
                    market: mid,
                });
            }
        }
    }
    registry.check_base_superset()?;
    Ok(Dataset { registry, interactions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MarketId;

    #[test]
    fn counts() {
        let spec = SyntheticSpec::uniform(3, 50, 40, 20, 0.3);
        let ds = generate_synthetic_markets(&spec, 1).unwrap();
        assert_eq!(ds.interactions.len(), 3000);
        assert_eq!(spec.total_interactions(), 3000);
        for m in 0..3 {
            assert_eq!(ds.market_stats(MarketId(m)), (50, 40, 1000));
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::uniform(2, 10, 30, 5, 0.5);
        let a = generate_synthetic_markets(&spec, 4).unwrap();
        let b = generate_synthetic_markets(&spec, 4).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate_synthetic_markets(&spec, 5).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn zero_divergence_shares_one_model() {
        // identical markets and no rotation: each market's users draw from the same distribution,
        // so the rotated factor tables coincide
        let v = vec![0.3, -1.2, 0.5, 2.0];
        assert_eq!(rotate(&v, 0.0), v);
        let spec = SyntheticSpec::uniform(3, 5, 10, 3, 0.0);
        assert!(generate_synthetic_markets(&spec, 0).is_ok());
    }

    #[test]
    fn rotation_preserves_norm() {
        let v = vec![0.3, -1.2, 0.5, 2.0, 7.0];
        let r = rotate(&v, 0.7);
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
        assert!((n(&v) - n(&r)).abs() < 1e-12);
        assert_eq!(r[4], 7.0);
    }

    #[test]
    fn subsets_of_base_pool() {
        let mut spec = SyntheticSpec::uniform(3, 5, 30, 4, 0.2);
        spec.markets[1].items = 12;
        spec.markets[2].items = 20;
        spec.item_overlap = 0.5;
        let ds = generate_synthetic_markets(&spec, 2).unwrap();
        assert!(ds.registry.check_base_superset().is_ok());
        assert_eq!(ds.registry.market_items(MarketId(1)).len(), 12);
        assert_eq!(ds.registry.market_items(MarketId(2)).len(), 20);
    }

    #[test]
    fn infeasible_specs() {
        let mut s = SyntheticSpec::uniform(2, 5, 10, 11, 0.1);
        assert!(generate_synthetic_markets(&s, 0).is_err());
        s.interactions_per_user = 3;
        s.markets[1].items = 11;
        assert!(s.validate().is_err());
        s.markets[1].items = 5;
        s.item_overlap = 1.5;
        assert!(s.validate().is_err());
        s.item_overlap = 1.0;
        s.markets.clear();
        assert!(s.validate().is_err());
    }
}
