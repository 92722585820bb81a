//! Interaction data: ingestion, ID maps, leave-one-out splits, negative
//! sampling and the pairwise/global training set constructions.

mod ids;
mod registry;
pub mod sampling;
pub mod split;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ids::{ItemId, MarketId, UserId};
pub use registry::{IdRemap, MarketRegistry};
pub use sampling::{downsample_source, make_global, make_pairwise, sample_eval_negatives, TrainSet};
pub use split::{leave_one_out_split, EvalCase, PreparedData, SplitDataset, EVAL_NEGATIVES};
pub use synthetic::{generate_synthetic_markets, SyntheticMarket, SyntheticSpec};

use crate::error::{Error, Result};
use crate::seeding::sha256_hex;

/// One implicit-feedback event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: Option<i64>,
    pub market: MarketId,
}

/// Parsed interactions together with the registry that maps their tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub registry: MarketRegistry,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    /// Load a canonical interaction file. `markets` restricts the accepted
    /// market codes (`None` accepts any); `base` names the market whose items
    /// must contain every other market's items.
    pub fn load(path: &Path, markets: Option<&[String]>, base: Option<&str>) -> Result<Self> {
        let mut registry = match markets {
            Some(codes) => MarketRegistry::new(codes.iter().cloned(), None)?,
            None => MarketRegistry::open(),
        };
        let interactions = load_interactions(path, &mut registry)?;
        if let Some(b) = base {
            registry.set_base(b)?;
        }
        registry.check_base_superset()?;
        Ok(Self { registry, interactions })
    }

    /// Hash of the ID maps and every interaction.
    pub fn fingerprint(&self) -> String {
        let mut buf = self.registry.fingerprint();
        for it in &self.interactions {
            let _ = write!(
                buf,
                "\n{}\t{}\t{}\t{}\t{:?}",
                it.market.0, it.user.0, it.item.0, it.rating, it.timestamp
            );
        }
        sha256_hex(buf.as_bytes())
    }

    pub fn market_interactions(&self, market: MarketId) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter().filter(move |i| i.market == market)
    }

    /// (users, items, interactions) for one market.
    pub fn market_stats(&self, market: MarketId) -> (usize, usize, usize) {
        (
            self.registry.market_users(market).len(),
            self.registry.market_items(market).len(),
            self.market_interactions(market).count(),
        )
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for it in &self.interactions {
            let ts = it.timestamp.map_or_else(|| "-".to_string(), |t| t.to_string());
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                self.registry.market_code(it.market),
                self.registry.user_token(it.user),
                self.registry.item_token(it.item),
                it.rating,
                ts
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parse `market_code \t user_token \t item_token \t rating \t timestamp` lines
/// (timestamp may be `-`) into `registry`. Blank lines are skipped. Duplicate
/// (market, user, item) rows collapse to the one with the latest timestamp;
/// among equal timestamps the last row wins.
pub fn load_interactions(path: &Path, registry: &mut MarketRegistry) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path)?;
    parse_interactions(&text, path, registry)
}

pub(crate) fn parse_interactions(text: &str, path: &Path, registry: &mut MarketRegistry) -> Result<Vec<Interaction>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out: Vec<Interaction> = Vec::new();
    let mut seen: HashMap<(UserId, ItemId), usize> = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(line_no, format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let [code, user, item, rating, ts] = [fields[0], fields[1], fields[2], fields[3], fields[4]].map(str::trim);
        if code.is_empty() || user.is_empty() || item.is_empty() {
            return Err(parse_err(line_no, "empty market, user or item token".into()));
        }
        let rating: f64 = rating
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| parse_err(line_no, format!("bad rating `{rating}`")))?;
        let timestamp = match ts {
            "-" => None,
            t => Some(t.parse::<i64>().map_err(|_| parse_err(line_no, format!("bad timestamp `{t}`")))?),
        };
        let market = registry.intern_market(code).map_err(|e| match e {
            Error::UnknownMarket(c) => parse_err(line_no, format!("unknown market code `{c}`")),
            other => other,
        })?;
        let user = registry.intern_user(market, user);
        let item = registry.intern_item(item);
        registry.add_market_item(market, item);
        let record = Interaction {
            user,
            item,
            rating,
            timestamp,
            market,
        };
        match seen.get(&(user, item)) {
            Some(&idx) => {
                if record.timestamp >= out[idx].timestamp {
                    out[idx] = record;
                }
            }
            None => {
                seen.insert((user, item), out.len());
                out.push(record);
            }
        }
    }
    Ok(out)
}
