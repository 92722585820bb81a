use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{ItemId, MarketId, UserId};
use crate::error::{Error, Result};
use crate::seeding::sha256_hex;

/// Market codes, the shared item vocabulary, and market-scoped users.
///
/// Users are keyed by `(market, token)`, so the same token in two markets
/// denotes two different users and user sets never overlap across markets.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "RegistryRecord", into = "RegistryRecord")]
pub struct MarketRegistry {
    codes: Vec<String>,
    base: Option<MarketId>,
    open: bool,
    users: Vec<(MarketId, String)>,
    items: Vec<String>,
    market_items: Vec<BTreeSet<ItemId>>,
    market_users: Vec<Vec<UserId>>,
    market_index: HashMap<String, MarketId>,
    user_index: HashMap<(MarketId, String), UserId>,
    item_index: HashMap<String, ItemId>,
}

impl MarketRegistry {
    /// Registry restricted to the given market codes.
    pub fn new<I, T>(codes: I, base: Option<&str>) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut reg = Self::default();
        for c in codes {
            reg.insert_market(c.into());
        }
        if let Some(b) = base {
            reg.base = Some(reg.market_id(b)?);
        }
        Ok(reg)
    }

    /// Registry that accepts any market code it encounters.
    pub fn open() -> Self {
        Self {
            open: true,
            ..Self::default()
        }
    }

    pub fn set_base(&mut self, code: &str) -> Result<()> {
        self.base = Some(self.market_id(code)?);
        Ok(())
    }

    pub fn base(&self) -> Option<MarketId> {
        self.base
    }

    fn insert_market(&mut self, code: String) -> MarketId {
        if let Some(&id) = self.market_index.get(&code) {
            return id;
        }
        let id = MarketId(self.codes.len() as u16);
        self.market_index.insert(code.clone(), id);
        self.codes.push(code);
        self.market_items.push(BTreeSet::new());
        self.market_users.push(Vec::new());
        id
    }

    /// Market id for `code`, registering it when the registry is open.
    pub fn intern_market(&mut self, code: &str) -> Result<MarketId> {
        match self.market_index.get(code) {
            Some(&id) => Ok(id),
            None if self.open => Ok(self.insert_market(code.to_string())),
            None => Err(Error::UnknownMarket(code.to_string())),
        }
    }

    pub fn market_id(&self, code: &str) -> Result<MarketId> {
        self.market_index
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownMarket(code.to_string()))
    }

    pub fn market_code(&self, id: MarketId) -> &str {
        &self.codes[id.index()]
    }

    pub fn market_codes(&self) -> &[String] {
        &self.codes
    }

    pub fn market_ids(&self) -> impl Iterator<Item = MarketId> {
        (0..self.codes.len() as u16).map(MarketId)
    }

    pub fn intern_user(&mut self, market: MarketId, token: &str) -> UserId {
        let key = (market, token.to_string());
        if let Some(&id) = self.user_index.get(&key) {
            return id;
        }
        let id = UserId(self.users.len() as u32);
        self.user_index.insert(key.clone(), id);
        self.users.push(key);
        self.market_users[market.index()].push(id);
        id
    }

    pub fn intern_item(&mut self, token: &str) -> ItemId {
        if let Some(&id) = self.item_index.get(token) {
            return id;
        }
        let id = ItemId(self.items.len() as u32);
        self.item_index.insert(token.to_string(), id);
        self.items.push(token.to_string());
        id
    }

    pub fn add_market_item(&mut self, market: MarketId, item: ItemId) {
        self.market_items[market.index()].insert(item);
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_markets(&self) -> usize {
        self.codes.len()
    }

    pub fn user_market(&self, user: UserId) -> MarketId {
        self.users[user.index()].0
    }

    pub fn user_token(&self, user: UserId) -> &str {
        &self.users[user.index()].1
    }

    pub fn item_token(&self, item: ItemId) -> &str {
        &self.items[item.index()]
    }

    pub fn item_id(&self, token: &str) -> Option<ItemId> {
        self.item_index.get(token).copied()
    }

    pub fn user_id(&self, market: MarketId, token: &str) -> Option<UserId> {
        self.user_index.get(&(market, token.to_string())).copied()
    }

    pub fn market_items(&self, market: MarketId) -> &BTreeSet<ItemId> {
        &self.market_items[market.index()]
    }

    pub fn market_users(&self, market: MarketId) -> &[UserId] {
        &self.market_users[market.index()]
    }

    /// Every market's items must be contained in the base market's items.
    pub fn check_base_superset(&self) -> Result<()> {
        let Some(base) = self.base else {
            return Ok(());
        };
        let base_items = &self.market_items[base.index()];
        for m in self.market_ids() {
            if let Some(extra) = self.market_items[m.index()].iter().find(|i| !base_items.contains(i)) {
                return Err(Error::Config(format!(
                    "item `{}` of market {} is missing from base market {}",
                    self.item_token(*extra),
                    self.market_code(m),
                    self.market_code(base)
                )));
            }
        }
        Ok(())
    }

    /// Hash of the ID maps; checkpoints record it to detect mismatched data.
    pub fn fingerprint(&self) -> String {
        let mut buf = String::new();
        for c in &self.codes {
            buf.push_str(c);
            buf.push('\u{1}');
        }
        buf.push('\u{2}');
        for (m, t) in &self.users {
            buf.push_str(&format!("{}:{t}\u{1}", m.0));
        }
        buf.push('\u{2}');
        for t in &self.items {
            buf.push_str(t);
            buf.push('\u{1}');
        }
        sha256_hex(buf.as_bytes())
    }

    /// Compact registry over a subset of markets, with maps from old to new ids.
    pub fn restrict(&self, markets: &[MarketId]) -> Result<(MarketRegistry, IdRemap)> {
        let mut sub = MarketRegistry::default();
        let mut remap = IdRemap::default();
        for &m in markets {
            if m.index() >= self.n_markets() {
                return Err(Error::OutOfRange {
                    what: "market",
                    index: m.index(),
                    size: self.n_markets(),
                });
            }
            let id = sub.insert_market(self.codes[m.index()].clone());
            remap.markets.insert(m, id);
        }
        if let Some(b) = self.base {
            sub.base = remap.markets.get(&b).copied();
        }
        // items keep their global order so that restriction is deterministic
        let mut keep: BTreeSet<ItemId> = BTreeSet::new();
        for &m in markets {
            keep.extend(self.market_items[m.index()].iter().copied());
        }
        for &item in &keep {
            let id = sub.intern_item(&self.items[item.index()]);
            remap.items.insert(item, id);
        }
        for &m in markets {
            let nm = remap.markets[&m];
            for &item in &self.market_items[m.index()] {
                sub.add_market_item(nm, remap.items[&item]);
            }
        }
        // users market by market in the order given, so the first market's
        // users get the same ids whatever it is paired with
        for &m in markets {
            let nm = remap.markets[&m];
            for &u in &self.market_users[m.index()] {
                let id = sub.intern_user(nm, &self.users[u.index()].1);
                remap.users.insert(u, id);
            }
        }
        Ok((sub, remap))
    }
}

/// Old-to-new id maps produced by [`MarketRegistry::restrict`].
#[derive(Clone, Debug, Default)]
pub struct IdRemap {
    pub markets: HashMap<MarketId, MarketId>,
    pub users: HashMap<UserId, UserId>,
    pub items: HashMap<ItemId, ItemId>,
}

#[derive(Serialize, Deserialize)]
struct RegistryRecord {
    markets: Vec<String>,
    base: Option<MarketId>,
    open: bool,
    users: Vec<(MarketId, String)>,
    items: Vec<String>,
    market_items: Vec<Vec<ItemId>>,
}

impl From<MarketRegistry> for RegistryRecord {
    fn from(r: MarketRegistry) -> Self {
        Self {
            markets: r.codes,
            base: r.base,
            open: r.open,
            users: r.users,
            items: r.items,
            market_items: r.market_items.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }
}

impl From<RegistryRecord> for MarketRegistry {
    fn from(r: RegistryRecord) -> Self {
        let mut reg = MarketRegistry {
            open: r.open,
            ..MarketRegistry::default()
        };
        for c in r.markets {
            reg.insert_market(c);
        }
        reg.base = r.base;
        for t in &r.items {
            reg.intern_item(t);
        }
        for (m, t) in &r.users {
            reg.intern_user(*m, t);
        }
        for (m, items) in r.market_items.into_iter().enumerate() {
            reg.market_items[m] = items.into_iter().collect();
        }
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_registry_rejects_unknown_codes() {
        let mut r = MarketRegistry::new(["de", "jp"], Some("de")).unwrap();
        assert!(r.intern_market("jp").is_ok());
        assert!(matches!(r.intern_market("fr"), Err(Error::UnknownMarket(_))));
        assert!(MarketRegistry::new(["de"], Some("us")).is_err());
        let mut open = MarketRegistry::open();
        assert_eq!(open.intern_market("fr").unwrap(), MarketId(0));
    }

    #[test]
    fn users_are_market_scoped() {
        let mut r = MarketRegistry::new(["de", "jp"], None).unwrap();
        let a = r.intern_user(MarketId(0), "u1");
        let b = r.intern_user(MarketId(1), "u1");
        assert_ne!(a, b);
        assert_eq!(r.intern_user(MarketId(0), "u1"), a);
        assert_eq!(r.market_users(MarketId(1)), &[b]);
    }

    #[test]
    fn base_superset_check() {
        let mut r = MarketRegistry::new(["us", "de"], Some("us")).unwrap();
        let i = r.intern_item("x");
        r.add_market_item(MarketId(1), i);
        assert!(r.check_base_superset().is_err());
        r.add_market_item(MarketId(0), i);
        assert!(r.check_base_superset().is_ok());
    }

    #[test]
    fn serde_round_trip_preserves_fingerprint() {
        let mut r = MarketRegistry::new(["us", "de"], Some("us")).unwrap();
        let i = r.intern_item("x");
        r.add_market_item(MarketId(0), i);
        r.intern_user(MarketId(1), "u");
        let back: MarketRegistry = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.fingerprint(), r.fingerprint());
        assert_eq!(back.user_id(MarketId(1), "u"), Some(UserId(0)));
        assert_eq!(back.market_items(MarketId(0)).len(), 1);
    }

    #[test]
    fn restrict_compacts_ids() {
        let mut r = MarketRegistry::new(["a", "b", "c"], None).unwrap();
        for (m, u, items) in [(0u16, "u0", ["i0", "i1"]), (1, "u1", ["i1", "i2"]), (2, "u2", ["i2", "i3"])] {
            r.intern_user(MarketId(m), u);
            for t in items {
                let id = r.intern_item(t);
                r.add_market_item(MarketId(m), id);
            }
        }
        let (sub, map) = r.restrict(&[MarketId(2), MarketId(1)]).unwrap();
        assert_eq!(sub.market_codes(), &["c".to_string(), "b".to_string()]);
        assert_eq!(sub.n_items(), 3);
        assert_eq!(sub.n_users(), 2);
        assert_eq!(map.items[&ItemId(1)], ItemId(0));
        assert_eq!(sub.user_market(map.users[&UserId(2)]), MarketId(0));
        assert!(!map.users.contains_key(&UserId(0)));
        assert_eq!(map.users[&UserId(2)], UserId(0));
    }

    #[test]
    fn first_market_keeps_its_ids_across_pairings() {
        let mut r = MarketRegistry::new(["a", "b", "c"], None).unwrap();
        for (m, u) in [(0u16, "x"), (1, "y"), (0, "z"), (2, "w"), (1, "v")] {
            r.intern_user(MarketId(m), u);
        }
        let (_, with_a) = r.restrict(&[MarketId(1), MarketId(0)]).unwrap();
        let (_, with_c) = r.restrict(&[MarketId(1), MarketId(2)]).unwrap();
        for &u in r.market_users(MarketId(1)) {
            assert_eq!(with_a.users[&u], with_c.users[&u]);
        }
    }
}
