//! CSV and aligned-text renderings of metric and agreement reports.

use serde::{Deserialize, Serialize};

use super::{AgreementReport, Prf, Projection};

/// One (dataset, annotator, projection) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub annotator: String,
    pub projection: String,
    pub gold: usize,
    pub pred: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricRow {
    pub fn new(dataset: &str, annotator: &str, projection: Projection, prf: Prf) -> Self {
        Self {
            dataset: dataset.to_string(),
            annotator: annotator.to_string(),
            projection: projection.name().to_string(),
            gold: prf.gold,
            pred: prf.pred,
            matched: prf.matched,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
        }
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("rows serialize");
    }
    String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    if rows.is_empty() {
        return "dataset,annotator,projection,gold,pred,matched,precision,recall,f1\n".into();
    }
    to_csv(rows)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

#[derive(Serialize)]
struct AgreementCsvRow<'a> {
    dataset: &'a str,
    task: &'a str,
    element: &'a str,
    alpha: f64,
    units: usize,
    coders: usize,
    unlocatable: usize,
}

pub fn agreement_csv(reports: &[AgreementReport]) -> String {
    let rows: Vec<AgreementCsvRow<'_>> = reports
        .iter()
        .flat_map(|r| {
            r.rows.iter().map(move |row| AgreementCsvRow {
                dataset: &r.dataset,
                task: r.task.as_str(),
                element: row.element.name(),
                alpha: row.alpha,
                units: row.units,
                coders: row.coders,
                unlocatable: row.unlocatable,
            })
        })
        .collect();
    if rows.is_empty() {
        return "dataset,task,element,alpha,units,coders,unlocatable\n".into();
    }
    to_csv(&rows)
}

fn align(table: &[Vec<String>]) -> String {
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            table
                .iter()
                .filter_map(|row| row.get(c))
                .map(|cell| cell.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn find<'a>(rows: &'a [MetricRow], annotator: &str, projection: &str) -> Option<&'a MetricRow> {
    rows.iter()
        .find(|r| r.annotator == annotator && r.projection == projection)
}

/// P/R/F1 rows by annotator columns for the joint projection. `columns`
/// pairs an annotator id with its display label.
pub fn joint_table(rows: &[MetricRow], columns: &[(String, String)]) -> String {
    let mut table = vec![std::iter::once(String::new())
        .chain(columns.iter().map(|(_, label)| label.clone()))
        .collect::<Vec<_>>()];
    for (name, pick) in [
        ("P", (|r: &MetricRow| r.precision) as fn(&MetricRow) -> f64),
        ("R", |r: &MetricRow| r.recall),
        ("F1", |r: &MetricRow| r.f1),
    ] {
        let mut line = vec![name.to_string()];
        for (id, _) in columns {
            line.push(find(rows, id, "joint").map_or_else(|| "-".into(), |r| pct(pick(r))));
        }
        table.push(line);
    }
    align(&table)
}

/// F1 per projection, one line per annotator.
pub fn element_table(rows: &[MetricRow], columns: &[(String, String)], projections: &[Projection]) -> String {
    let mut table = vec![std::iter::once(String::new())
        .chain(projections.iter().map(|p| p.name().to_string()))
        .collect::<Vec<_>>()];
    for (id, label) in columns {
        let mut line = vec![label.clone()];
        for p in projections {
            line.push(find(rows, id, p.name()).map_or_else(|| "-".into(), |r| pct(r.f1)));
        }
        table.push(line);
    }
    align(&table)
}

pub fn agreement_table(reports: &[AgreementReport]) -> String {
    let mut out = String::new();
    for report in reports {
        let mut table = vec![std::iter::once(String::new())
            .chain(report.rows.iter().map(|r| r.element.name().to_string()))
            .collect::<Vec<_>>()];
        let mut line = vec![format!(
            "{} ({} coders)",
            report.dataset,
            report.rows.first().map_or(0, |r| r.coders)
        )];
        line.extend(report.rows.iter().map(|r| format!("{:.4}", r.alpha)));
        table.push(line);
        out.push_str(&align(&table));
    }
    out
}
