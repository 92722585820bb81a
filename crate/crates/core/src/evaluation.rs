//! Leave-one-out ranking evaluation, source selection, aggregation and
//! paired significance testing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{EvalCase, ItemId, MarketId, UserId};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::Tape;
use crate::models::Recommender;
use crate::scalar::Scalar;

pub const DEFAULT_CUTOFF: u32 = 10;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Anything that can score candidate items for a user.
pub trait Scorer {
    fn score_candidates(&self, user: UserId, market: MarketId, items: &[ItemId]) -> Result<Vec<f64>>;
}

impl<S: Scalar> Scorer for Model<S> {
    fn score_candidates(&self, user: UserId, market: MarketId, items: &[ItemId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(self.params());
        items
            .iter()
            .map(|&item| {
                tape.clear();
                let y = self.forward(&mut tape, user, item, market)?;
                Ok(tape.scalar(y).as_f64())
            })
            .collect()
    }
}

/// 1 + number of negatives scoring at least as high as the positive, so ties
/// count against the positive.
pub fn rank_from_scores(positive: f64, negatives: &[f64]) -> u32 {
    1 + negatives.iter().filter(|&&s| s >= positive).count() as u32
}

pub fn rank_positive(scorer: &dyn Scorer, case: &EvalCase) -> Result<u32> {
    let items: Vec<ItemId> = case.candidates().collect();
    let scores = scorer.score_candidates(case.user, case.market, &items)?;
    Ok(rank_from_scores(scores[0], &scores[1..]))
}

/// nDCG@k with a single relevant item.
pub fn ndcg_at_k(rank: u32, k: u32) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: u32, k: u32) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: UserId,
    /// Absent for reports averaged over several runs.
    pub rank: Option<u32>,
    pub candidates: u32,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub market: String,
    pub split: Split,
    pub cutoff: u32,
    /// Sorted by user id.
    pub records: Vec<UserRecord>,
    pub mean_ndcg: f64,
    pub mean_hr: f64,
}

impl EvalReport {
    pub fn from_records(model: &str, market: &str, split: Split, cutoff: u32, mut records: Vec<UserRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        records.sort_by_key(|r| r.user);
        let n = records.len() as f64;
        let mean_ndcg = records.iter().map(|r| r.ndcg).sum::<f64>() / n;
        let mean_hr = records.iter().map(|r| r.hr).sum::<f64>() / n;
        Ok(Self {
            model: model.to_string(),
            market: market.to_string(),
            split,
            cutoff,
            records,
            mean_ndcg,
            mean_hr,
        })
    }

    pub fn users(&self) -> Vec<UserId> {
        self.records.iter().map(|r| r.user).collect()
    }

    pub fn ndcg_vector(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ndcg).collect()
    }

    /// One row per user: `user,rank,candidates,hr,ndcg`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user", "rank", "candidates", "hr", "ndcg"])?;
        for r in &self.records {
            w.write_record([
                r.user.0.to_string(),
                r.rank.map_or_else(String::new, |k| k.to_string()),
                r.candidates.to_string(),
                r.hr.to_string(),
                r.ndcg.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, model: &str, market: &str, split: Split, cutoff: u32) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for (n, row) in rd.records().enumerate() {
            let row = row?;
            let bad = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                msg: msg.to_string(),
            };
            let field = |k: usize| row.get(k).ok_or_else(|| bad("missing field"));
            let rank = match field(1)? {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("bad rank"))?),
            };
            records.push(UserRecord {
                user: UserId(field(0)?.parse().map_err(|_| bad("bad user"))?),
                rank,
                candidates: field(2)?.parse().map_err(|_| bad("bad candidate count"))?,
                hr: field(3)?.parse().map_err(|_| bad("bad hr"))?,
                ndcg: field(4)?.parse().map_err(|_| bad("bad ndcg"))?,
            });
        }
        Self::from_records(model, market, split, cutoff, records)
    }

    /// JSON summary without per-user rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "market": self.market,
            "split": self.split,
            "cutoff": self.cutoff,
            "users": self.records.len(),
            "mean_ndcg": self.mean_ndcg,
            "mean_hr": self.mean_hr,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.summary_json())?,
        )?;
        Ok(())
    }
}

/// Rank every case's positive among its candidates.
pub fn evaluate(scorer: &dyn Scorer, cases: &[EvalCase], model: &str, market: &str, split: Split) -> Result<EvalReport> {
    evaluate_at(scorer, cases, model, market, split, DEFAULT_CUTOFF)
}

pub fn evaluate_at(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    model: &str,
    market: &str,
    split: Split,
    cutoff: u32,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let records = cases
        .iter()
        .map(|c| {
            let rank = rank_positive(scorer, c)?;
            Ok(UserRecord {
                user: c.user,
                rank: Some(rank),
                candidates: 1 + c.negatives.len() as u32,
                hr: hr_at_k(rank, cutoff),
                ndcg: ndcg_at_k(rank, cutoff),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(model, market, split, cutoff, records)
}

/// Source with the highest mean validation nDCG; ties go to the
/// lexicographically smallest market code.
pub fn select_best_source<'a>(validation: &[(&'a str, &EvalReport)]) -> Result<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for &(code, report) in validation {
        best = match best {
            None => Some((code, report.mean_ndcg)),
            Some((bc, bv)) => {
                if report.mean_ndcg > bv || (report.mean_ndcg == bv && code < bc) {
                    Some((code, report.mean_ndcg))
                } else {
                    Some((bc, bv))
                }
            }
        };
    }
    best.map(|(c, _)| c).ok_or(Error::Empty("source list"))
}

fn check_aligned(a: &EvalReport, b: &EvalReport) -> Result<()> {
    if a.records.len() != b.records.len() || a.records.iter().zip(&b.records).any(|(x, y)| x.user != y.user) {
        return Err(Error::Misaligned(format!(
            "{}/{} and {}/{} cover different users",
            a.model, a.market, b.model, b.market
        )));
    }
    Ok(())
}

/// Per-user mean over reports that share the same users.
pub fn aggregate_avg(reports: &[&EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::Empty("report list"))?;
    for r in &reports[1..] {
        check_aligned(first, r)?;
    }
    let n = reports.len() as f64;
    let records = first
        .records
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            // mean as offset from the first report, so identical reports average exactly
            let (hr, ndcg) = reports.iter().fold((0.0, 0.0), |(h, g), r| {
                (h + (r.records[k].hr - rec.hr), g + (r.records[k].ndcg - rec.ndcg))
            });
            let same_rank = reports.iter().all(|r| r.records[k].rank == rec.rank);
            UserRecord {
                user: rec.user,
                rank: if same_rank { rec.rank } else { None },
                candidates: rec.candidates,
                hr: rec.hr + hr / n,
                ndcg: rec.ndcg + ndcg / n,
            }
        })
        .collect();
    EvalReport::from_records(&first.model, &first.market, first.split, first.cutoff, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// All differences were zero; reported as t = 0, p = 1.
    pub degenerate: bool,
}

/// Two-sided paired t-test on aligned samples.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Misaligned(format!("{} vs {} observations", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Config("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    if diffs.iter().all(|d| *d == 0.0) {
        return Ok(PairedTTest {
            t: 0.0,
            p: 1.0,
            df,
            degenerate: true,
        });
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / df as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        return Ok(PairedTTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            df,
            degenerate: false,
        });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTTest {
        t,
        p,
        df,
        degenerate: false,
    })
}

/// `p < 0.05 / m`.
pub fn bonferroni(p: f64, m: u32) -> bool {
    assert!(m >= 1, "correction factor must be at least 1");
    p < SIGNIFICANCE_LEVEL / m as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub model_a: String,
    pub model_b: String,
    pub market: String,
    pub t: f64,
    pub p: f64,
    pub m: u32,
    pub significant: bool,
    pub degenerate: bool,
}

/// Paired test of per-user nDCG between two reports over the same users.
pub fn compare_reports(a: &EvalReport, b: &EvalReport, m: u32) -> Result<SignificanceResult> {
    check_aligned(a, b)?;
    let test = paired_t_test(&a.ndcg_vector(), &b.ndcg_vector())?;
    Ok(SignificanceResult {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        market: a.market.clone(),
        t: test.t,
        p: test.p,
        m,
        significant: bonferroni(test.p, m),
        degenerate: test.degenerate,
    })
}

pub fn write_significance_csv(results: &[SignificanceResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model_a", "model_b", "market", "t", "p", "m", "significant"])?;
    for r in results {
        w.write_record([
            r.model_a.clone(),
            r.model_b.clone(),
            r.market.clone(),
            r.t.to_string(),
            r.p.to_string(),
            r.m.to_string(),
            r.significant.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean nDCG by (model, market) for quick summaries.
pub fn mean_table(reports: &[EvalReport]) -> BTreeMap<(String, String), f64> {
    reports
        .iter()
        .map(|r| ((r.model.clone(), r.market.clone()), r.mean_ndcg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl Scorer for Fixed {
        fn score_candidates(&self, _: UserId, _: MarketId, items: &[ItemId]) -> Result<Vec<f64>> {
            Ok(items.iter().map(|i| self.0[i.index()]).collect())
        }
    }

    fn case(user: u32) -> EvalCase {
        EvalCase {
            user: UserId(user),
            market: MarketId(0),
            positive: ItemId(0),
            negatives: (1..100).map(ItemId).collect(),
        }
    }

    fn report(model: &str, users: &[u32], ndcg: &[f64]) -> EvalReport {
        let records = users
            .iter()
            .zip(ndcg)
            .map(|(u, g)| UserRecord {
                user: UserId(*u),
                rank: None,
                candidates: 100,
                hr: if *g > 0.0 { 1.0 } else { 0.0 },
                ndcg: *g,
            })
            .collect();
        EvalReport::from_records(model, "de", Split::Test, 10, records).unwrap()
    }

    #[test]
    fn rank_examples() {
        let mut scores = vec![0.0; 100];
        scores[0] = 1.0;
        assert_eq!(rank_positive(&Fixed(scores.clone()), &case(0)).unwrap(), 1);
        scores[0] = 0.5;
        scores[7] = 0.5;
        assert_eq!(rank_positive(&Fixed(scores), &case(0)).unwrap(), 2);
        assert_eq!(rank_positive(&Fixed(vec![0.3; 100]), &case(0)).unwrap(), 100);
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!((ndcg_at_k(1, 10), hr_at_k(1, 10)), (1.0, 1.0));
        assert_eq!((ndcg_at_k(3, 10), hr_at_k(3, 10)), (0.5, 1.0));
        assert_eq!((ndcg_at_k(11, 10), hr_at_k(11, 10)), (0.0, 0.0));
        assert!((ndcg_at_k(10, 10) - 1.0 / 11f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn constant_and_oracle_models() {
        let cases: Vec<EvalCase> = (0..5).map(case).collect();
        let flat = evaluate(&Fixed(vec![0.5; 100]), &cases, "flat", "de", Split::Test).unwrap();
        assert_eq!(flat.mean_ndcg, 0.0);
        assert!(flat.records.iter().all(|r| r.rank == Some(100)));
        let mut s = vec![0.0; 100];
        s[0] = 1.0;
        let oracle = evaluate(&Fixed(s), &cases, "oracle", "de", Split::Test).unwrap();
        assert_eq!(oracle.mean_ndcg, 1.0);
        assert_eq!(oracle.mean_hr, 1.0);
        assert!(evaluate(&Fixed(vec![0.0; 100]), &[], "x", "de", Split::Test).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let r = report("GMF", &[3, 1, 2], &[0.5, 1.0, 0.0]);
        assert_eq!(r.users(), vec![UserId(1), UserId(2), UserId(3)]);
        assert!((r.mean_ndcg - 0.5).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path(), "gmf").unwrap();
        let back = EvalReport::read_csv(&dir.path().join("gmf.csv"), "GMF", "de", Split::Test, 10).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn best_source_rules() {
        let a = report("x", &[1], &[0.30]);
        let b = report("x", &[1], &[0.31]);
        let c = report("x", &[1], &[0.29]);
        assert_eq!(select_best_source(&[("jp", &a)]).unwrap(), "jp");
        assert_eq!(select_best_source(&[("jp", &a), ("fr", &b), ("ca", &c)]).unwrap(), "fr");
        assert_eq!(select_best_source(&[("uk", &b), ("fr", &b), ("mx", &b)]).unwrap(), "fr");
        assert_eq!(select_best_source(&[("fr", &b), ("uk", &b)]).unwrap(), "fr");
        assert!(select_best_source(&[]).is_err());
    }

    #[test]
    fn averaging() {
        let a = report("x", &[1, 2], &[0.2, 1.0]);
        let b = report("x", &[1, 2], &[0.4, 0.0]);
        let avg = aggregate_avg(&[&a, &b]).unwrap();
        assert!((avg.records[0].ndcg - 0.3).abs() < 1e-15);
        assert!((avg.mean_ndcg - (a.mean_ndcg + b.mean_ndcg) / 2.0).abs() < 1e-12);
        let same = aggregate_avg(&[&a; 7]).unwrap();
        assert_eq!(same.mean_ndcg, a.mean_ndcg);
        assert_eq!(same.records, a.records);
        let other = report("x", &[1, 3], &[0.2, 1.0]);
        assert!(matches!(aggregate_avg(&[&a, &other]), Err(Error::Misaligned(_))));
    }

    #[test]
    fn t_test_reference() {
        let b = [0.0; 5];
        let a = [0.1, 0.2, 0.3, 0.4, 0.5];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 4.2426).abs() < 1e-4);
        assert!((r.p - 0.0132).abs() < 1e-3);
        let s = paired_t_test(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
        let d = paired_t_test(&a, &a).unwrap();
        assert!(d.degenerate && d.p == 1.0 && d.t == 0.0);
        assert!(paired_t_test(&a, &a[..4]).is_err());
        assert!(paired_t_test(&a[..1], &b[..1]).is_err());
    }

    #[test]
    fn t_distribution_matches_tables() {
        // two-sided 5% critical values
        for (t, df) in [(12.706, 1usize), (2.776_445, 4), (2.228_139, 10), (2.042_272, 30)] {
            let dist = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            assert!((2.0 * dist.sf(t) - 0.05).abs() < 1e-5, "df {df}");
        }
    }

    #[test]
    fn bonferroni_thresholds() {
        assert!(bonferroni(0.004, 9));
        assert!(!bonferroni(0.006, 9));
        assert!(bonferroni(0.004, 12));
        assert!(!bonferroni(0.0042, 12));
        assert!(!bonferroni(0.05, 1));
    }

    #[test]
    fn compare_refuses_misaligned() {
        let a = report("MA-GMF", &[1, 2, 3], &[0.5, 0.6, 0.7]);
        let b = report("GMF", &[1, 2, 4], &[0.1, 0.2, 0.3]);
        assert!(compare_reports(&a, &b, 9).is_err());
        let c = report("GMF", &[1, 2, 3], &[0.1, 0.25, 0.3]);
        let r = compare_reports(&a, &c, 9).unwrap();
        assert_eq!(r.significant, bonferroni(r.p, 9));
    }
}
