//! Scoring prediction runs against a manifest and rendering reports.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::{read_jsonl, write_jsonl, BenchItem, Manifest, MatError, Split};
use crate::reward::{exact_match, f1_score};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRun {
    pub run_id: String,
    pub predictions: Vec<Prediction>,
}

impl PredictionRun {
    /// The run id is the file stem.
    pub fn load(path: &Path) -> Result<Self, MatError> {
        Ok(Self {
            run_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            predictions: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MatError> {
        write_jsonl(path, &self.predictions)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction for unknown item id {0}")]
    UnknownId(String),
    #[error("duplicate prediction for item id {0}")]
    DuplicateId(String),
}

/// Percentages for one split.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitScore {
    pub count: usize,
    pub f1: f64,
    pub em: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub simple: SplitScore,
    pub hard: SplitScore,
    pub avg: SplitScore,
}

/// Item-weighted mean of per-split values.
pub fn weighted_mean(parts: &[(f64, usize)]) -> f64 {
    let n: usize = parts.iter().map(|(_, c)| c).sum();
    if n == 0 {
        return 0.0;
    }
    parts.iter().map(|(v, c)| v * *c as f64).sum::<f64>() / n as f64
}

impl MetricReport {
    /// Builds a report from split scores; Avg is the item-weighted mean.
    pub fn from_splits(simple: SplitScore, hard: SplitScore) -> Self {
        let parts = |f: fn(&SplitScore) -> f64| weighted_mean(&[(f(&simple), simple.count), (f(&hard), hard.count)]);
        Self {
            simple,
            hard,
            avg: SplitScore {
                count: simple.count + hard.count,
                f1: parts(|s| s.f1),
                em: parts(|s| s.em),
            },
        }
    }

    /// Values in the fixed column order.
    pub fn columns(&self) -> [f64; 6] {
        [self.simple.f1, self.simple.em, self.hard.f1, self.hard.em, self.avg.f1, self.avg.em]
    }
}

pub const COLUMNS: [&str; 6] = ["Simple F1", "Simple EM", "Hard F1", "Hard EM", "Avg F1", "Avg EM"];

/// Per-item F1 and EM in [0, 1]; a missing answer scores 0 on both.
pub fn score_item(item: &BenchItem, answer: Option<&str>) -> (f64, f64) {
    match answer {
        Some(a) => (f1_score(a, &item.gold_answers), exact_match(a, &item.gold_answers) as f64),
        None => (0.0, 0.0),
    }
}

pub fn score_run(run: &PredictionRun, manifest: &Manifest) -> Result<MetricReport, EvalError> {
    let ids: HashSet<&str> = manifest.items.iter().map(|i| i.id.as_str()).collect();
    let mut answers: HashMap<&str, Option<&str>> = HashMap::new();
    for p in &run.predictions {
        if !ids.contains(p.id.as_str()) {
            return Err(EvalError::UnknownId(p.id.clone()));
        }
        if answers.insert(&p.id, p.answer.as_deref()).is_some() {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    let scored: Vec<(Split, f64, f64)> = manifest
        .items
        .par_iter()
        .map(|item| {
            let (f1, em) = score_item(item, answers.get(item.id.as_str()).copied().flatten());
            (item.split, f1, em)
        })
        .collect();
    let split = |which: Split| {
        let rows: Vec<_> = scored.iter().filter(|(s, ..)| *s == which).collect();
        let n = rows.len();
        if n == 0 {
            return SplitScore::default();
        }
        SplitScore {
            count: n,
            f1: 100.0 * rows.iter().map(|r| r.1).sum::<f64>() / n as f64,
            em: 100.0 * rows.iter().map(|r| r.2).sum::<f64>() / n as f64,
        }
    };
    Ok(MetricReport::from_splits(split(Split::Simple), split(Split::Hard)))
}

/// Two-decimal rendering with ties rounded away from zero, decided on the
/// shortest decimal representation of `x` (so 34.405 gives "34.41").
pub fn round2(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let repr = format!("{}", x.abs());
    let (int, frac) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int
        .bytes()
        .chain(frac.bytes().chain(std::iter::repeat(b'0')).take(2))
        .map(|b| b - b'0')
        .collect();
    if frac.as_bytes().get(2).is_some_and(|d| *d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 2;
    let s: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
    let sign = if x < 0.0 && digits.iter().any(|d| *d != 0) { "-" } else { "" };
    format!("{sign}{}.{}", &s[..split], &s[split..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Plain,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Self::Plain),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?} (plain, csv, json)")),
        }
    }
}

pub fn render_report(report: &MetricReport, format: ReportFormat) -> String {
    let cells: Vec<String> = report.columns().iter().map(|v| round2(*v)).collect();
    match format {
        ReportFormat::Csv => {
            let header = COLUMNS.iter().map(|c| c.replace(' ', "_").to_lowercase()).collect::<Vec<_>>().join(",");
            format!("{header}\n{}\n", cells.join(","))
        }
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("serializable") + "\n",
        ReportFormat::Plain => {
            let width = |i: usize| COLUMNS[i].len().max(cells[i].len());
            let header = (0..6).map(|i| format!("{:>w$}", COLUMNS[i], w = width(i))).collect::<Vec<_>>().join("  ");
            let row = (0..6).map(|i| format!("{:>w$}", cells[i], w = width(i))).collect::<Vec<_>>().join("  ");
            format!(
                "{header}\n{row}\nitems: simple {}, hard {}, total {}\n",
                report.simple.count, report.hard.count, report.avg.count
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::{Category, Task};

    fn item(id: &str, split: Split, gold: &str) -> BenchItem {
        BenchItem {
            id: id.into(),
            image_path: format!("{id}.png"),
            question: "q".into(),
            gold_answers: vec![gold.into()],
            category: if split == Split::Hard { Category::Crop } else { Category::None },
            split,
            task: Task::Coding,
            distortion: None,
            reference_queries: vec![],
            hops: None,
            crop_region: None,
        }
    }

    fn manifest() -> Manifest {
        Manifest {
            items: vec![
                item("a", Split::Simple, "Paris"),
                item("b", Split::Simple, "red car"),
                item("c", Split::Hard, "42"),
            ],
        }
    }

    fn pred(id: &str, a: &str) -> Prediction {
        Prediction {
            id: id.into(),
            answer: Some(a.into()),
            transcript: None,
        }
    }

    #[test]
    fn perfect_run() {
        let run = PredictionRun {
            run_id: "r".into(),
            predictions: vec![pred("a", "paris"), pred("b", "Red car."), pred("c", "42")],
        };
        let r = score_run(&run, &manifest()).unwrap();
        assert_eq!(r.columns(), [100.0; 6]);
        assert_eq!((r.simple.count, r.hard.count, r.avg.count), (2, 1, 3));
    }

    #[test]
    fn missing_prediction_lowers_scores() {
        let full = PredictionRun {
            run_id: "r".into(),
            predictions: vec![pred("a", "Paris"), pred("b", "red car"), pred("c", "42")],
        };
        let mut partial = full.clone();
        partial.predictions.remove(0);
        let (f, p) = (score_run(&full, &manifest()).unwrap(), score_run(&partial, &manifest()).unwrap());
        assert!(p.simple.f1 < f.simple.f1 && p.simple.em < f.simple.em);
        assert!(p.avg.f1 < f.avg.f1 && p.avg.em < f.avg.em);
    }

    #[test]
    fn unknown_and_duplicate_ids() {
        let run = PredictionRun {
            run_id: "r".into(),
            predictions: vec![pred("zzz", "x")],
        };
        assert_eq!(score_run(&run, &manifest()), Err(EvalError::UnknownId("zzz".into())));
        let run = PredictionRun {
            run_id: "r".into(),
            predictions: vec![pred("a", "x"), pred("a", "y")],
        };
        assert_eq!(score_run(&run, &manifest()), Err(EvalError::DuplicateId("a".into())));
    }

    #[test]
    fn weighted_average() {
        let r = MetricReport::from_splits(
            SplitScore {
                count: 70,
                f1: 47.12,
                em: 0.0,
            },
            SplitScore {
                count: 130,
                f1: 27.57,
                em: 0.0,
            },
        );
        assert!((r.avg.f1 - 34.4125).abs() < 1e-9);
        assert_eq!(round2(r.avg.f1), "34.41");
        assert_eq!(round2(weighted_mean(&[(68.55, 75), (53.61, 75)])), "61.08");
    }

    #[test]
    fn rounding() {
        assert_eq!(round2(34.405), "34.41");
        assert_eq!(round2(34.404999), "34.40");
        assert_eq!(round2(99.995), "100.00");
        assert_eq!(round2(0.0), "0.00");
        assert_eq!(round2(7.0), "7.00");
        assert_eq!(round2(2.5), "2.50");
        assert_eq!(round2(-1.005), "-1.01");
    }

    #[test]
    fn renderings() {
        let run = PredictionRun {
            run_id: "r".into(),
            predictions: vec![pred("a", "Paris"), pred("c", "41")],
        };
        let r = score_run(&run, &manifest()).unwrap();
        let csv = render_report(&r, ReportFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "simple_f1,simple_em,hard_f1,hard_em,avg_f1,avg_em");
        assert_eq!(lines[1], "50.00,50.00,0.00,0.00,33.33,33.33");
        let back: MetricReport = serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
        assert!(render_report(&r, ReportFormat::Plain).starts_with("Simple F1"));
    }
}
