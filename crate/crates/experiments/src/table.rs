//! Results tables: methods down, target markets across, test nDCG@10 in
//! each cell with significance markers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use marketrec::evaluation::{compare_reports, EvalReport, SignificanceResult};
use marketrec::{Error, Result};

use crate::method::Method;

/// Symbol appended to a market-aware cell that significantly beats a baseline.
pub fn significance_symbol(baseline: Method) -> Option<char> {
    match baseline {
        Method::Single(_) => Some('†'),
        Method::Plus(k) if !k.market_aware => Some('‡'),
        Method::Maml => Some('*'),
        Method::Forec => Some('+'),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub ndcg: f64,
    /// Significance symbols, in the order ‡ + * †.
    pub markers: String,
    /// Largest value of its column.
    pub best: bool,
    /// Where the cell's per-user numbers live, relative to the run directory.
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: Method,
    pub cells: Vec<Option<Cell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    /// Bonferroni factor the markers were computed with.
    pub m: u32,
}

impl ResultsTable {
    pub fn new(title: &str, columns: Vec<String>, m: u32) -> Self {
        Self {
            title: title.to_string(),
            columns,
            rows: Vec::new(),
            m,
        }
    }

    pub fn cell(&self, method: Method, column: &str) -> Option<&Cell> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.method == method)?.cells[c].as_ref()
    }

    /// Recompute the per-column maximum flags; ties all count as best.
    pub fn mark_best(&mut self) {
        for c in 0..self.columns.len() {
            let max = self
                .rows
                .iter()
                .filter_map(|r| r.cells[c].as_ref().map(|x| x.ndcg))
                .fold(f64::NEG_INFINITY, f64::max);
            for r in &mut self.rows {
                if let Some(cell) = r.cells[c].as_mut() {
                    cell.best = cell.ndcg == max;
                }
            }
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.method.to_string()];
            rec.extend(r.cells.iter().map(|c| c.as_ref().map_or_else(String::new, format_cell)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["".to_string()];
        header.extend(self.columns.iter().cloned());
        grid.push(header);
        for r in &self.rows {
            let mut line = vec![r.method.to_string()];
            line.extend(r.cells.iter().map(|c| c.as_ref().map_or_else(|| "-".into(), format_cell)));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|k| grid.iter().map(|l| l[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.title);
        for (n, line) in grid.iter().enumerate() {
            for (k, field) in line.iter().enumerate() {
                let pad = widths[k] - field.chars().count();
                if k == 0 {
                    let _ = write!(out, "{field}{}", " ".repeat(pad));
                } else {
                    let _ = write!(out, "  {}{field}", " ".repeat(pad));
                }
            }
            out.push('\n');
            if n == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "* = column best; significance at p < 0.05/{} vs market-unaware (‡), MAML (*), FOREC (+), single market (†)",
            self.m
        );
        out
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e)
}

/// `*0.3073^‡+` style rendering: leading `*` for the column best, markers after `^`.
pub fn format_cell(c: &Cell) -> String {
    let mut s = String::new();
    if c.best {
        s.push('*');
    }
    let _ = write!(s, "{:.4}", c.ndcg);
    if !c.markers.is_empty() {
        s.push('^');
        s.push_str(&c.markers);
    }
    s
}

/// Write `table` as `<stem>.csv`, `<stem>.json` and/or `<stem>.txt`.
/// `format` is `csv`, `json`, `text` or `all`.
pub fn emit_results(table: &ResultsTable, format: &str, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let formats: &[&str] = match format {
        "csv" => &["csv"],
        "json" => &["json"],
        "text" | "txt" => &["text"],
        "all" => &["csv", "json", "text"],
        other => return Err(Error::Config(format!("unknown output format `{other}`"))),
    };
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        let (path, body) = match *f {
            "csv" => (dir.join(format!("{stem}.csv")), table.to_csv()?),
            "json" => (dir.join(format!("{stem}.json")), serde_json::to_string_pretty(table)?),
            _ => (dir.join(format!("{stem}.txt")), table.to_text()),
        };
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_table(path: &Path) -> Result<ResultsTable> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Per-method test reports of one column, plus where each came from.
pub type ColumnReports = BTreeMap<Method, (EvalReport, Vec<String>)>;

/// Assemble a table from per-column reports and run the significance tests:
/// every market-aware row against its market-unaware counterpart, MAML,
/// FOREC and (when present) the single-market model of the same architecture.
pub fn build_table(
    title: &str,
    rows: &[Method],
    columns: &[(String, ColumnReports)],
    m: u32,
) -> Result<(ResultsTable, Vec<SignificanceResult>)> {
    let mut table = ResultsTable::new(title, columns.iter().map(|(c, _)| c.clone()).collect(), m);
    let mut tests = Vec::new();
    for &method in rows {
        let mut cells = Vec::with_capacity(columns.len());
        for (_, reports) in columns {
            let Some((report, sources)) = reports.get(&method) else {
                cells.push(None);
                continue;
            };
            let mut markers = String::new();
            if method.is_market_aware() {
                let kind = method.model_kind();
                let baselines = [
                    Method::Plus(kind.unaware()),
                    Method::Forec,
                    Method::Maml,
                    Method::Single(kind.arch),
                ];
                for base in baselines {
                    let Some((other, _)) = reports.get(&base) else { continue };
                    let res = compare_reports(report, other, m)?;
                    if res.significant && report.mean_ndcg > other.mean_ndcg {
                        markers.extend(significance_symbol(base));
                    }
                    tests.push(res);
                }
            }
            cells.push(Some(Cell {
                ndcg: report.mean_ndcg,
                markers,
                best: false,
                sources: sources.clone(),
            }));
        }
        table.rows.push(Row { method, cells });
    }
    table.mark_best();
    Ok((table, tests))
}

#[cfg(test)]
mod tests {
    use super::*;
    use marketrec::data::UserId;
    use marketrec::evaluation::{Split, UserRecord};
    use marketrec::models::ModelKind;

    fn report(model: &str, ndcg: &[f64]) -> EvalReport {
        let records = ndcg
            .iter()
            .enumerate()
            .map(|(u, &v)| UserRecord {
                user: UserId(u as u32),
                rank: None,
                candidates: 100,
                hr: if v > 0.0 { 1.0 } else { 0.0 },
                ndcg: v,
            })
            .collect();
        EvalReport::from_records(model, "de", Split::Test, 10, records).unwrap()
    }

    fn sample() -> ResultsTable {
        let mut col = ColumnReports::new();
        let low: Vec<f64> = (0..40).map(|k| 0.1 + 0.001 * (k % 3) as f64).collect();
        let high: Vec<f64> = (0..40).map(|k| 0.5 + 0.001 * (k % 5) as f64).collect();
        col.insert(Method::Plus(ModelKind::GMF), (report("GMF++", &low), vec!["a".into()]));
        col.insert(Method::Plus(ModelKind::MA_GMF), (report("MA-GMF++", &high), vec!["b".into()]));
        col.insert(Method::Maml, (report("MAML", &low), vec![]));
        let (t, tests) = build_table(
            "demo",
            &[Method::Plus(ModelKind::GMF), Method::Plus(ModelKind::MA_GMF), Method::Maml, Method::Forec],
            &[("de".to_string(), col)],
            9,
        )
        .unwrap();
        assert_eq!(tests.len(), 2);
        t
    }

    #[test]
    fn markers_and_best() {
        let t = sample();
        let ma = t.cell(Method::Plus(ModelKind::MA_GMF), "de").unwrap();
        assert_eq!(ma.markers, "‡*");
        assert!(ma.best);
        assert!(!t.cell(Method::Plus(ModelKind::GMF), "de").unwrap().best);
        assert!(t.cell(Method::Forec, "de").is_none());
        assert!(format_cell(ma).starts_with("*0.50"));
        assert!(t.to_text().contains("MA-GMF++"));
    }

    #[test]
    fn best_marked_once_per_column() {
        let t = sample();
        for c in 0..t.columns.len() {
            assert_eq!(t.rows.iter().filter(|r| r.cells[c].as_ref().is_some_and(|x| x.best)).count(), 1);
        }
    }

    #[test]
    fn emit_formats() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample();
        let files = emit_results(&t, "all", dir.path(), "avg").unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(load_table(&dir.path().join("avg.json")).unwrap(), t);
        assert!(emit_results(&t, "xlsx", dir.path(), "avg").is_err());
        let empty = ResultsTable::new("empty", vec!["de".into(), "jp".into()], 9);
        emit_results(&empty, "csv", dir.path(), "empty").unwrap();
        let text = fs::read_to_string(dir.path().join("empty.csv")).unwrap();
        assert_eq!(text.trim_end().lines().count(), 1);
        assert_eq!(text.trim_end(), "method,de,jp");
    }
}
