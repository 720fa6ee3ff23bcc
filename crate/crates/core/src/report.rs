//! Scoring predictions and rendering backend comparison tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::model::PredictionRow;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("label '{0}' is not one of the dataset classes")]
    UnknownLabel(String),
    #[error("reports do not share one grid: {0}")]
    GridMismatch(String),
    #[error("no reports to render")]
    Empty,
}

/// Rows are true labels, columns predicted labels, both in `classes` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[String]) -> Self {
        Self {
            classes: classes.to_vec(),
            counts: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Tallies `(true, predicted)` pairs.
pub fn confusion<'a, I>(predictions: I, classes: &[String]) -> Result<ConfusionMatrix, ReportError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let lookup = |label: &str| {
        index
            .get(label)
            .copied()
            .ok_or_else(|| ReportError::UnknownLabel(label.to_owned()))
    };
    let mut cm = ConfusionMatrix::zeros(classes);
    for (truth, predicted) in predictions {
        cm.counts[lookup(truth)?][lookup(predicted)?] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Scores {
    /// `None` for classes with no true and no predicted instances; those are
    /// left out of both averages.
    pub per_class: Vec<(String, Option<f64>)>,
    /// Unweighted mean over included classes.
    pub macro_f1: f64,
    /// Mean over included classes weighted by true-label support.
    pub weighted_f1: f64,
}

impl F1Scores {
    pub fn get(&self, class: &str) -> Option<f64> {
        self.per_class
            .iter()
            .find(|(c, _)| c == class)
            .and_then(|(_, f)| *f)
    }
}

/// Per-class, macro and support-weighted F1.
///
/// A class with true or predicted instances but no true positives scores 0 and
/// still counts towards the averages.
pub fn f1_scores(cm: &ConfusionMatrix) -> F1Scores {
    let n = cm.classes.len();
    let mut per_class = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut weighted = Vec::with_capacity(n);
    let mut support_total = 0u64;
    for i in 0..n {
        let tp = cm.counts[i][i];
        let row: u64 = cm.counts[i].iter().sum();
        let col: u64 = cm.counts.iter().map(|r| r[i]).sum();
        let (fn_, fp) = (row - tp, col - tp);
        if row == 0 && col == 0 {
            per_class.push((cm.classes[i].clone(), None));
            continue;
        }
        // 2PR / (P + R) written over counts; equals 0 whenever tp is 0.
        let f1 = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        scores.push(f1);
        weighted.push(f1 * row as f64);
        support_total += row;
        per_class.push((cm.classes[i].clone(), Some(f1)));
    }
    F1Scores {
        per_class,
        macro_f1: if scores.is_empty() {
            0.0
        } else {
            sorted_sum(scores.clone()) / scores.len() as f64
        },
        weighted_f1: if support_total == 0 {
            0.0
        } else {
            sorted_sum(weighted) / support_total as f64
        },
    }
}

// Summing in value order makes the averages independent of class order.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub per_class_f1: Vec<(String, Option<f64>)>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
}

/// Scores of one backend on one dataset, keyed by k.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub backend: String,
    pub rows: BTreeMap<usize, ReportRow>,
}

impl EvalReport {
    /// Scores a prediction table. Rows without a prediction count as skipped.
    pub fn from_predictions(
        dataset: impl Into<String>,
        backend: impl Into<String>,
        classes: &[String],
        predictions: &[PredictionRow],
    ) -> Result<Self, ReportError> {
        let mut by_k: BTreeMap<usize, Vec<&PredictionRow>> = BTreeMap::new();
        for p in predictions {
            by_k.entry(p.k).or_default().push(p);
        }
        let mut rows = BTreeMap::new();
        for (k, preds) in by_k {
            let scored: Vec<(&str, &str)> = preds
                .iter()
                .filter_map(|p| {
                    p.predicted_label
                        .as_deref()
                        .map(|pred| (p.true_label.as_str(), pred))
                })
                .collect();
            let cm = confusion(scored.iter().copied(), classes)?;
            let scores = f1_scores(&cm);
            rows.insert(
                k,
                ReportRow {
                    per_class_f1: scores.per_class,
                    macro_f1: scores.macro_f1,
                    weighted_f1: scores.weighted_f1,
                    n_scored: scored.len(),
                    n_skipped: preds.len() - scored.len(),
                },
            );
        }
        Ok(Self {
            dataset: dataset.into(),
            backend: backend.into(),
            rows,
        })
    }
}

/// Mean and population standard deviation. `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(format!(
                "unknown table format '{s}' (expected markdown or csv)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableOptions {
    /// Decimals of percentages.
    pub decimals: usize,
    /// Per-dataset overrides of `decimals`.
    pub dataset_decimals: BTreeMap<String, usize>,
}

impl TableOptions {
    pub fn with_decimals(decimals: usize) -> Self {
        Self {
            decimals,
            ..Self::default()
        }
    }

    fn decimals_for(&self, dataset: &str) -> usize {
        self.dataset_decimals
            .get(dataset)
            .copied()
            .unwrap_or(self.decimals)
    }
}

/// Cell highlight within a table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    Best,
    SecondBest,
    None,
}

impl Flag {
    fn csv(self) -> &'static str {
        match self {
            Flag::Best => "best",
            Flag::SecondBest => "second",
            Flag::None => "",
        }
    }
}

/// Flags the maximum values as best and the next distinct value as second best.
/// Equal values share a flag.
pub fn flag_row(values: &[f64]) -> Vec<Flag> {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let second = values
        .iter()
        .copied()
        .filter(|&v| v < best)
        .fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if v == best {
                Flag::Best
            } else if v == second {
                Flag::SecondBest
            } else {
                Flag::None
            }
        })
        .collect()
}

fn percent(value: f64, decimals: usize) -> String {
    format!("{:.*}", decimals, value * 100.0)
}

fn row_label(k: usize) -> String {
    if k == 1 {
        "Top 1".to_owned()
    } else {
        format!("MV@{k}")
    }
}

pub const TOTAL_ROW: &str = "Total F1 Score";

struct Cell {
    text: String,
    weighted: String,
    std: String,
    flag: Flag,
}

struct Row {
    dataset: String,
    label: String,
    k: Option<usize>,
    cells: Vec<Cell>,
}

fn layout(
    reports: &[EvalReport],
    options: &TableOptions,
) -> Result<(Vec<String>, Vec<Row>), ReportError> {
    let first = reports.first().ok_or(ReportError::Empty)?;
    let k_grid: Vec<usize> = first.rows.keys().copied().collect();

    let mut datasets: Vec<&str> = Vec::new();
    let mut backends: Vec<&str> = Vec::new();
    let mut grid: HashMap<(&str, &str), &EvalReport> = HashMap::new();
    for r in reports {
        let ks: Vec<usize> = r.rows.keys().copied().collect();
        if ks != k_grid {
            return Err(ReportError::GridMismatch(format!(
                "{}/{} has k values {ks:?}, expected {k_grid:?}",
                r.dataset, r.backend
            )));
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !backends.contains(&r.backend.as_str()) {
            backends.push(&r.backend);
        }
        if grid.insert((&r.dataset, &r.backend), r).is_some() {
            return Err(ReportError::GridMismatch(format!(
                "duplicate report for {}/{}",
                r.dataset, r.backend
            )));
        }
    }
    let missing: BTreeSet<String> = datasets
        .iter()
        .flat_map(|d| backends.iter().map(move |b| (*d, *b)))
        .filter(|key| !grid.contains_key(key))
        .map(|(d, b)| format!("{d}/{b}"))
        .collect();
    if !missing.is_empty() {
        return Err(ReportError::GridMismatch(format!(
            "missing reports: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let mut rows = Vec::new();
    let mut column_values: Vec<Vec<f64>> = vec![Vec::new(); backends.len()];
    let mut column_weighted: Vec<Vec<f64>> = vec![Vec::new(); backends.len()];
    for dataset in &datasets {
        let decimals = options.decimals_for(dataset);
        for &k in &k_grid {
            let texts: Vec<(String, String)> = backends
                .iter()
                .enumerate()
                .map(|(b, backend)| {
                    let row = &grid[&(*dataset, *backend)].rows[&k];
                    column_values[b].push(row.macro_f1);
                    column_weighted[b].push(row.weighted_f1);
                    (
                        percent(row.macro_f1, decimals),
                        percent(row.weighted_f1, decimals),
                    )
                })
                .collect();
            // Flags follow the printed values so ties at the shown precision share them.
            let shown: Vec<f64> = texts
                .iter()
                .map(|(t, _)| t.parse().expect("formatted"))
                .collect();
            let cells = texts
                .into_iter()
                .zip(flag_row(&shown))
                .map(|((text, weighted), flag)| Cell {
                    text,
                    weighted,
                    std: String::new(),
                    flag,
                })
                .collect();
            rows.push(Row {
                dataset: (*dataset).to_owned(),
                label: row_label(k),
                k: Some(k),
                cells,
            });
        }
    }

    let total_decimals = datasets
        .iter()
        .map(|d| options.decimals_for(d))
        .max()
        .unwrap_or(options.decimals);
    let totals: Vec<(String, String, String)> = column_values
        .iter()
        .zip(&column_weighted)
        .map(|(values, weighted)| {
            let (mean, std) = mean_std(values);
            let (wmean, _) = mean_std(weighted);
            (
                percent(mean, total_decimals),
                percent(wmean, total_decimals),
                percent(std, total_decimals),
            )
        })
        .collect();
    let shown: Vec<f64> = totals
        .iter()
        .map(|(t, _, _)| t.parse().expect("formatted"))
        .collect();
    rows.push(Row {
        dataset: TOTAL_ROW.to_owned(),
        label: String::new(),
        k: None,
        cells: totals
            .into_iter()
            .zip(flag_row(&shown))
            .map(|((text, weighted, std), flag)| Cell {
                text,
                weighted,
                std,
                flag,
            })
            .collect(),
    });

    Ok((backends.iter().map(|b| (*b).to_owned()).collect(), rows))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Renders macro F1 per (dataset, k) row with one column per backend.
///
/// Markdown marks the best cell of each row `**` and the second best `*`, and
/// shows `mean ± std` in the total row. CSV carries macro and weighted F1, the
/// total-row standard deviation and the flag as separate columns.
pub fn render_table(
    reports: &[EvalReport],
    format: TableFormat,
    options: &TableOptions,
) -> Result<String, ReportError> {
    let (backends, rows) = layout(reports, options)?;
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            let _ = writeln!(out, "| Dataset | k | {} |", backends.join(" | "));
            let _ = writeln!(out, "|---|---|{}", "---:|".repeat(backends.len()));
            for row in &rows {
                let cells: Vec<String> = row
                    .cells
                    .iter()
                    .map(|c| {
                        let value = if row.k.is_some() {
                            format!("{}%", c.text)
                        } else {
                            format!("{}% ± {}%", c.text, c.std)
                        };
                        match c.flag {
                            Flag::Best => format!("**{value}**"),
                            Flag::SecondBest => format!("*{value}*"),
                            Flag::None => value,
                        }
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    "| {} | {} | {} |",
                    row.dataset,
                    row.label,
                    cells.join(" | ")
                );
            }
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "Cells: macro-averaged F1 (%). `**` best and `*` second best per row. \
                 {TOTAL_ROW}: mean ± population standard deviation over all (dataset, k) cells of a column."
            );
        }
        TableFormat::Csv => {
            let mut header = vec!["dataset".to_owned(), "row".to_owned(), "k".to_owned()];
            for b in &backends {
                for suffix in ["macro", "weighted", "std", "flag"] {
                    header.push(csv_field(&format!("{b}.{suffix}")));
                }
            }
            let _ = writeln!(out, "{}", header.join(","));
            for row in &rows {
                let mut fields = vec![
                    csv_field(&row.dataset),
                    csv_field(&row.label),
                    row.k.map(|k| k.to_string()).unwrap_or_default(),
                ];
                for c in &row.cells {
                    fields.push(c.text.clone());
                    fields.push(c.weighted.clone());
                    fields.push(c.std.clone());
                    fields.push(c.flag.csv().to_owned());
                }
                let _ = writeln!(out, "{}", fields.join(","));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn confusion_examples() {
        let cls = classes(&["A", "B"]);
        let cm = confusion([("A", "A"), ("B", "B"), ("B", "B")], &cls).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0], vec![0, 2]]);
        let empty = confusion(std::iter::empty(), &cls).unwrap();
        assert_eq!(empty.counts, vec![vec![0, 0], vec![0, 0]]);

        let cls = classes(&["A", "B", "C"]);
        let cm = confusion([("A", "A"), ("A", "B"), ("B", "B"), ("C", "A")], &cls).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
        assert_eq!(cm.total(), 4);
        assert_eq!(
            confusion([("A", "Z")], &cls),
            Err(ReportError::UnknownLabel("Z".into()))
        );
    }

    #[test]
    fn hand_worked_f1() {
        let cls = classes(&["A", "B"]);
        let cm = confusion([("A", "A"), ("A", "B"), ("B", "B"), ("B", "B")], &cls).unwrap();
        let s = f1_scores(&cm);
        assert_eq!(s.get("A"), Some(2.0 / 3.0));
        assert_eq!(s.get("B"), Some(0.8));
        assert_eq!(s.macro_f1, (2.0 / 3.0 + 0.8) / 2.0);
    }

    #[test]
    fn perfect_and_never_predicted() {
        let cls = classes(&["A", "B"]);
        let cm = confusion([("A", "A"), ("B", "B")], &cls).unwrap();
        assert_eq!(f1_scores(&cm).macro_f1, 1.0);

        let cm = confusion([("A", "A"), ("B", "A")], &cls).unwrap();
        let s = f1_scores(&cm);
        assert_eq!(s.get("B"), Some(0.0));
        assert_eq!(s.macro_f1, (2.0 / 3.0) / 2.0);
    }

    #[test]
    fn absent_class_is_excluded() {
        let cls = classes(&["A", "B", "C"]);
        let cm = confusion([("A", "A"), ("B", "B")], &cls).unwrap();
        let s = f1_scores(&cm);
        assert_eq!(s.per_class[2], ("C".to_owned(), None));
        assert_eq!(s.macro_f1, 1.0);
    }

    fn report(dataset: &str, backend: &str, values: &[(usize, f64)]) -> EvalReport {
        EvalReport {
            dataset: dataset.into(),
            backend: backend.into(),
            rows: values
                .iter()
                .map(|&(k, v)| {
                    (
                        k,
                        ReportRow {
                            per_class_f1: vec![],
                            macro_f1: v,
                            weighted_f1: v,
                            n_scored: 10,
                            n_skipped: 0,
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn single_backend_is_all_best() {
        let table = render_table(
            &[report("Liver", "net", &[(1, 0.5), (3, 0.6)])],
            TableFormat::Markdown,
            &TableOptions::default(),
        )
        .unwrap();
        assert!(table.contains("| Liver | Top 1 | **50%** |"));
        assert!(table.contains("| Liver | MV@3 | **60%** |"));
        assert!(table.contains("| Total F1 Score |  | **55% ± 5%** |"));
    }

    #[test]
    fn equal_cells_share_best() {
        let table = render_table(
            &[report("D", "a", &[(1, 0.6)]), report("D", "b", &[(1, 0.6)])],
            TableFormat::Markdown,
            &TableOptions::default(),
        )
        .unwrap();
        assert!(table.contains("| D | Top 1 | **60%** | **60%** |"));
    }

    #[test]
    fn three_distinct_backends() {
        let reports = [
            report("D", "a", &[(1, 0.5)]),
            report("D", "b", &[(1, 0.7)]),
            report("D", "c", &[(1, 0.6)]),
        ];
        let table =
            render_table(&reports, TableFormat::Markdown, &TableOptions::default()).unwrap();
        assert!(table.contains("| D | Top 1 | 50% | **70%** | *60%* |"));
    }

    #[test]
    fn grid_mismatch() {
        let reports = [report("D", "a", &[(1, 0.5)]), report("D", "b", &[(3, 0.7)])];
        assert!(matches!(
            render_table(&reports, TableFormat::Csv, &TableOptions::default()),
            Err(ReportError::GridMismatch(_))
        ));
        let reports = [
            report("D", "a", &[(1, 0.5)]),
            report("D", "b", &[(1, 0.7)]),
            report("E", "a", &[(1, 0.5)]),
        ];
        assert!(matches!(
            render_table(&reports, TableFormat::Csv, &TableOptions::default()),
            Err(ReportError::GridMismatch(_))
        ));
        assert_eq!(
            render_table(&[], TableFormat::Csv, &TableOptions::default()),
            Err(ReportError::Empty)
        );
    }

    #[test]
    fn csv_layout() {
        let reports = [
            report("D", "a", &[(1, 0.5), (5, 0.25)]),
            report("D", "b", &[(1, 0.75), (5, 0.125)]),
        ];
        let table =
            render_table(&reports, TableFormat::Csv, &TableOptions::with_decimals(1)).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            lines[0],
            "dataset,row,k,a.macro,a.weighted,a.std,a.flag,b.macro,b.weighted,b.std,b.flag"
        );
        assert_eq!(lines[1], "D,Top 1,1,50.0,50.0,,second,75.0,75.0,,best");
        assert_eq!(lines[2], "D,MV@5,5,25.0,25.0,,best,12.5,12.5,,second");
        assert_eq!(
            lines[3],
            "Total F1 Score,,,37.5,37.5,12.5,second,43.8,43.8,31.2,best"
        );
    }

    #[test]
    fn report_from_predictions_counts_skips() {
        let cls = classes(&["A", "B"]);
        let row = |q: &str, t: &str, p: Option<&str>| PredictionRow {
            query_wsi_id: q.into(),
            k: 1,
            true_label: t.into(),
            predicted_label: p.map(Into::into),
            n_candidates: usize::from(p.is_some()),
            tie_broken: false,
        };
        let preds = [
            row("1", "A", Some("A")),
            row("2", "B", Some("B")),
            row("3", "B", None),
        ];
        let r = EvalReport::from_predictions("D", "x", &cls, &preds).unwrap();
        assert_eq!(r.rows[&1].n_scored, 2);
        assert_eq!(r.rows[&1].n_skipped, 1);
        assert_eq!(r.rows[&1].macro_f1, 1.0);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.6, 0.7, 0.5, 0.6]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - (0.005f64).sqrt()).abs() < 1e-12);
    }
}
