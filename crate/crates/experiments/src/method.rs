use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use marketrec::models::{Architecture, ModelKind};
use marketrec::{Error, Result};

/// One row of a results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    /// Trained on the target market alone.
    Single(Architecture),
    /// Trained with auxiliary source data ("++").
    Plus(ModelKind),
    Maml,
    Forec,
}

impl Method {
    pub const PLUS: [Method; 6] = [
        Method::Plus(ModelKind::GMF),
        Method::Plus(ModelKind::MA_GMF),
        Method::Plus(ModelKind::MLP),
        Method::Plus(ModelKind::MA_MLP),
        Method::Plus(ModelKind::NMF),
        Method::Plus(ModelKind::MA_NMF),
    ];
    pub const SINGLE: [Method; 3] = [
        Method::Single(Architecture::Gmf),
        Method::Single(Architecture::Mlp),
        Method::Single(Architecture::Nmf),
    ];

    /// Row order of the pairwise AVG table and the global table.
    pub fn avg_rows() -> Vec<Method> {
        let mut v = Self::PLUS.to_vec();
        v.extend([Method::Maml, Method::Forec]);
        v
    }

    /// Row order of the pairwise BST table.
    pub fn bst_rows() -> Vec<Method> {
        let mut v = Self::SINGLE.to_vec();
        v.extend(Self::avg_rows());
        v
    }

    /// Model kind of the trained network. MAML and FOREC operate on NMF.
    pub fn model_kind(self) -> ModelKind {
        match self {
            Method::Single(a) => ModelKind::new(a, false),
            Method::Plus(k) => k,
            Method::Maml | Method::Forec => ModelKind::NMF,
        }
    }

    pub fn is_market_aware(self) -> bool {
        matches!(self, Method::Plus(k) if k.market_aware)
    }

    /// Uses only target-market data.
    pub fn is_single(self) -> bool {
        matches!(self, Method::Single(_))
    }

    /// Methods whose trained models this one starts from.
    pub fn prerequisites(self) -> Vec<Method> {
        match self {
            Method::Single(Architecture::Nmf) => vec![Method::Single(Architecture::Gmf), Method::Single(Architecture::Mlp)],
            Method::Plus(k) if k.arch == Architecture::Nmf => {
                let gmf = ModelKind::new(Architecture::Gmf, k.market_aware);
                let mlp = ModelKind::new(Architecture::Mlp, k.market_aware);
                vec![Method::Plus(gmf), Method::Plus(mlp)]
            }
            Method::Maml => vec![Method::Plus(ModelKind::NMF)],
            Method::Forec => vec![Method::Maml],
            _ => vec![],
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> String {
        self.to_string().to_lowercase().replace("++", "-plus")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Single(a) => write!(f, "{}", ModelKind::new(*a, false)),
            Method::Plus(k) => write!(f, "{k}++"),
            Method::Maml => f.write_str("MAML"),
            Method::Forec => f.write_str("FOREC"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.to_ascii_uppercase().as_str() {
            "MAML" => return Ok(Method::Maml),
            "FOREC" => return Ok(Method::Forec),
            _ => {}
        }
        if let Some(base) = t.strip_suffix("++") {
            return Ok(Method::Plus(base.parse()?));
        }
        let kind: ModelKind = t.parse()?;
        if kind.market_aware {
            return Err(Error::Config(format!("market-aware method {t} needs auxiliary data; use {t}++")));
        }
        Ok(Method::Single(kind.arch))
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parse a comma-separated method list; `all` expands to every BST row.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if tok.eq_ignore_ascii_case("all") {
            out.extend(Method::bst_rows());
        } else {
            out.push(tok.parse()?);
        }
    }
    Ok(out)
}

/// Requested methods plus everything they depend on, ordered so that every
/// method comes after its prerequisites.
pub fn resolve_plan(requested: &[Method]) -> Vec<Method> {
    fn visit(m: Method, out: &mut Vec<Method>) {
        if out.contains(&m) {
            return;
        }
        for p in m.prerequisites() {
            visit(p, out);
        }
        out.push(m);
    }
    let mut out = Vec::new();
    for &m in requested {
        visit(m, &mut out);
    }
    out
}

/// Fails unless every method's prerequisites precede it.
pub fn check_order(plan: &[Method]) -> Result<()> {
    for (k, m) in plan.iter().enumerate() {
        for p in m.prerequisites() {
            if !plan[..k].contains(&p) {
                return Err(Error::Config(format!("{m} needs a trained {p} first")));
            }
        }
    }
    Ok(())
}
