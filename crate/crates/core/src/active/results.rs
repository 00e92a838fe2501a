//! Delimited result tables and the per-sweep summary document.
//!
//! `results.csv` has one row per (user, eta, function, seed) cell:
//!
//! | column | meaning |
//! |---|---|
//! | `user`, `eta`, `function`, `seed` | cell key |
//! | `phase` | `post` after fine-tuning, `pre` if only the baseline was evaluated, `none` on failure |
//! | `accuracy`, `macro_f1` | metrics of that phase on the test split |
//! | `per_class_f1` | per-class f1 joined by `;` |
//! | `pre_accuracy`, `pre_macro_f1` | baseline metrics on the same split |
//! | `pool_size`, `test_size`, `acquired`, `skipped` | window counts |
//! | `error` | failure message, empty on success |
//! | `score_seconds`, `train_seconds` | wall-clock timing |
//!
//! Only the trailing timing columns vary between identical runs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::experiment::{BaselineRecord, CellRecord, SweepResult};
use crate::error::Result;
use crate::metrics::Evaluation;

pub const CELL_COLUMNS: [&str; 17] = [
    "user",
    "eta",
    "function",
    "seed",
    "phase",
    "accuracy",
    "macro_f1",
    "per_class_f1",
    "pre_accuracy",
    "pre_macro_f1",
    "pool_size",
    "test_size",
    "acquired",
    "skipped",
    "error",
    "score_seconds",
    "train_seconds",
];

/// Columns holding wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 3] = ["score_seconds", "train_seconds", "train_seconds_baseline"];

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(e: Option<&Evaluation>, f: impl Fn(&Evaluation) -> String) -> String {
    e.map(f).unwrap_or_default()
}

fn per_class(e: &Evaluation) -> String {
    e.per_class_f1
        .iter()
        .map(|v| num(*v))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_cells_csv<W: Write>(cells: &[CellRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CELL_COLUMNS)?;
    for c in cells {
        let (phase, e) = match (&c.post, &c.pre) {
            (Some(p), _) => ("post", Some(p)),
            (None, Some(p)) => ("pre", Some(p)),
            _ => ("none", None),
        };
        w.write_record([
            c.user.clone(),
            num(c.eta),
            c.function.to_string(),
            c.seed.to_string(),
            phase.to_string(),
            opt(e, |e| num(e.accuracy)),
            opt(e, |e| num(e.macro_f1)),
            opt(e, per_class),
            opt(c.pre.as_ref(), |e| num(e.accuracy)),
            opt(c.pre.as_ref(), |e| num(e.macro_f1)),
            c.pool_size.to_string(),
            c.test_size.to_string(),
            c.acquired.len().to_string(),
            c.skipped.to_string(),
            c.error.clone().unwrap_or_default(),
            num(c.score_seconds),
            num(c.train_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_baselines_csv<W: Write>(baselines: &[BaselineRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "user",
        "train_windows",
        "accuracy",
        "macro_f1",
        "per_class_f1",
        "error",
        "train_seconds_baseline",
    ])?;
    for b in baselines {
        let e = b.evaluation.as_ref();
        w.write_record([
            b.user.clone(),
            b.train_windows.to_string(),
            opt(e, |e| num(e.accuracy)),
            opt(e, |e| num(e.macro_f1)),
            opt(e, per_class),
            b.error.clone().unwrap_or_default(),
            num(b.train_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean post-update metrics of one (function, eta) over users and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub function: String,
    pub eta: f64,
    pub cells: usize,
    pub failed: usize,
    pub mean_accuracy: Option<f64>,
    pub mean_macro_f1: Option<f64>,
    pub mean_pre_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline_mean_accuracy: Option<f64>,
    pub baseline_mean_macro_f1: Option<f64>,
    pub rows: Vec<SummaryRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(result: &SweepResult) -> Summary {
    let base: Vec<&Evaluation> = result
        .baselines
        .iter()
        .filter_map(|b| b.evaluation.as_ref())
        .collect();
    let mut groups: BTreeMap<(String, u64), Vec<&CellRecord>> = BTreeMap::new();
    for c in &result.cells {
        groups
            .entry((c.function.to_string(), c.eta.to_bits()))
            .or_default()
            .push(c);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((function, eta_bits), cells)| {
            let post: Vec<&Evaluation> = cells.iter().filter_map(|c| c.post.as_ref()).collect();
            let pre: Vec<f64> = cells
                .iter()
                .filter_map(|c| c.pre.as_ref().map(|e| e.accuracy))
                .collect();
            SummaryRow {
                function,
                eta: f64::from_bits(eta_bits),
                cells: cells.len(),
                failed: cells.iter().filter(|c| c.error.is_some()).count(),
                mean_accuracy: mean(&post.iter().map(|e| e.accuracy).collect::<Vec<_>>()),
                mean_macro_f1: mean(&post.iter().map(|e| e.macro_f1).collect::<Vec<_>>()),
                mean_pre_accuracy: mean(&pre),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.function.cmp(&b.function).then(a.eta.total_cmp(&b.eta)));
    Summary {
        baseline_mean_accuracy: mean(&base.iter().map(|e| e.accuracy).collect::<Vec<_>>()),
        baseline_mean_macro_f1: mean(&base.iter().map(|e| e.macro_f1).collect::<Vec<_>>()),
        rows,
    }
}

pub fn write_summary_json<W: Write>(summary: &Summary, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, summary)
        .map_err(|e| crate::Error::Data(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Drops timing columns from a result table, for comparing runs.
pub fn without_timing(csv_text: &str) -> Result<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let header = r.headers()?.clone();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !TIMING_COLUMNS.contains(&&header[i]))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(keep.iter().map(|&i| &header[i]))?;
    for rec in r.records() {
        let rec = rec?;
        w.write_record(keep.iter().map(|&i| &rec[i]))?;
    }
    Ok(String::from_utf8(
        w.into_inner()
            .map_err(|e| crate::Error::Data(e.to_string()))?,
    )
    .expect("utf-8 input"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquire::AcquisitionFn;

    fn cell(eta: f64, acc: f64, secs: f64) -> CellRecord {
        let e = Evaluation::from_predictions(2, &[0, 1], if acc > 0.5 { &[0, 1] } else { &[1, 1] });
        CellRecord {
            user: "u".into(),
            eta,
            function: AcquisitionFn::VariationRatio,
            seed: 1,
            pool_size: 10,
            test_size: 2,
            acquired: vec![1, 2],
            labels: vec![0, 1],
            skipped: 0,
            pre: Some(e.clone()),
            post: Some(e),
            trajectory: Vec::new(),
            error: None,
            score_seconds: secs,
            train_seconds: secs,
        }
    }

    #[test]
    fn timing_columns_are_the_only_difference() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_cells_csv(&[cell(0.2, 1.0, 0.5)], &mut a).unwrap();
        write_cells_csv(&[cell(0.2, 1.0, 9.0)], &mut b).unwrap();
        assert_ne!(a, b);
        let (a, b) = (String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
        assert_eq!(without_timing(&a).unwrap(), without_timing(&b).unwrap());
        assert!(a.starts_with("user,eta,function,seed,phase,accuracy,macro_f1,per_class_f1"));
        assert!(a.contains(",varratio,1,post,1,1,1;1,"));
    }

    #[test]
    fn summary_means_by_function_and_eta() {
        let result = SweepResult {
            baselines: Vec::new(),
            cells: vec![
                cell(0.2, 1.0, 0.0),
                cell(0.2, 0.0, 0.0),
                cell(0.4, 1.0, 0.0),
            ],
        };
        let s = summarize(&result);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.rows[0].mean_accuracy, Some(0.75));
        assert_eq!(s.rows[1].mean_accuracy, Some(1.0));
        assert_eq!(s.baseline_mean_accuracy, None);
    }
}
