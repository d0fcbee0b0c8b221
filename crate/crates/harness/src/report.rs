//! CSV/JSON emission for learning curves, evaluation grids, attack results
//! and timing tables. Floats are written with six decimals; absent values
//! are empty CSV cells and JSON `null`.

use std::path::{Path, PathBuf};

use betaat::models::write_atomic;
use betaat::training::EpochMetrics;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

pub const METRICS_HEADER: &str = "epoch,train_clean,train_robust,val_clean,val_robust,test_clean,test_robust,loss,seconds";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("malformed report: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

fn raw(v: f64) -> Box<RawValue> {
    let text = if v.is_finite() { fmt6(v) } else { "null".to_string() };
    RawValue::from_string(text).expect("numeric literal")
}

fn raw_opt(v: Option<f64>) -> Option<Box<RawValue>> {
    v.map(raw)
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let fields = [
            r.epoch.to_string(),
            fmt6(r.train_clean),
            cell(r.train_robust),
            cell(r.val_clean),
            cell(r.val_robust),
            cell(r.test_clean),
            cell(r.test_robust),
            fmt6(r.loss),
            cell(r.seconds),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct MetricsJson {
    epoch: usize,
    train_clean: Box<RawValue>,
    train_robust: Option<Box<RawValue>>,
    val_clean: Option<Box<RawValue>>,
    val_robust: Option<Box<RawValue>>,
    test_clean: Option<Box<RawValue>>,
    test_robust: Option<Box<RawValue>>,
    loss: Box<RawValue>,
    seconds: Option<Box<RawValue>>,
}

pub fn metrics_json(rows: &[EpochMetrics]) -> String {
    let rows: Vec<MetricsJson> = rows
        .iter()
        .map(|r| MetricsJson {
            epoch: r.epoch,
            train_clean: raw(r.train_clean),
            train_robust: raw_opt(r.train_robust),
            val_clean: raw_opt(r.val_clean),
            val_robust: raw_opt(r.val_robust),
            test_clean: raw_opt(r.test_clean),
            test_robust: raw_opt(r.test_robust),
            loss: raw(r.loss),
            seconds: raw_opt(r.seconds),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&rows).expect("serializable");
    s.push('\n');
    s
}

pub fn parse_metrics_json(text: &str) -> Result<Vec<EpochMetrics>, ReportError> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    write_atomic(path, text.as_bytes()).map_err(|source| ReportError::Write { path: path.to_path_buf(), source })
}

pub fn emit_report(rows: &[EpochMetrics], format: Format, path: &Path) -> Result<(), ReportError> {
    let text = match format {
        Format::Csv => metrics_csv(rows),
        Format::Json => metrics_json(rows),
    };
    write_text(path, &text)
}

/// One (checkpoint, attack) cell of an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub checkpoint: String,
    pub epoch: usize,
    pub attack: String,
    pub clean: f64,
    pub robust: f64,
    pub samples: usize,
}

pub fn eval_text(rows: &[EvalRow], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut out = String::from("checkpoint,epoch,attack,clean,robust,samples\n");
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.checkpoint,
                    r.epoch,
                    r.attack,
                    fmt6(r.clean),
                    fmt6(r.robust),
                    r.samples
                ));
            }
            out
        }
        Format::Json => {
            let vals: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "checkpoint": r.checkpoint,
                        "epoch": r.epoch,
                        "attack": r.attack,
                        "clean": raw(r.clean),
                        "robust": raw(r.robust),
                        "samples": r.samples,
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&vals).expect("serializable");
            s.push('\n');
            s
        }
    }
}

/// Per-sample attack outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub index: usize,
    pub label: usize,
    pub j_star: usize,
    pub margin: f64,
    pub success: bool,
    pub eta: Vec<f64>,
}

pub fn attack_text(rows: &[AttackRow], format: Format) -> String {
    match format {
        Format::Csv => {
            let mut out = String::from("index,label,j_star,margin,success,eta\n");
            for r in rows {
                let eta: Vec<String> = r.eta.iter().map(|&v| fmt6(v)).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.index,
                    r.label,
                    r.j_star,
                    fmt6(r.margin),
                    u8::from(r.success),
                    eta.join(" ")
                ));
            }
            out
        }
        Format::Json => {
            let vals: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "index": r.index,
                        "label": r.label,
                        "j_star": r.j_star,
                        "margin": raw(r.margin),
                        "success": r.success,
                        "eta": r.eta.iter().map(|&v| raw(v)).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&vals).expect("serializable");
            s.push('\n');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_clean: 0.987654321,
            train_robust: Some(0.5),
            val_clean: Some(1.0 / 3.0),
            val_robust: None,
            test_clean: Some(0.25),
            test_robust: Some(0.125),
            loss: 0.123456789,
            seconds: None,
        }
    }

    #[test]
    fn one_epoch_gives_header_and_one_row() {
        let csv = metrics_csv(&[row(1)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "1,0.987654,0.500000,0.333333,,0.250000,0.125000,0.123457,");
    }

    #[test]
    fn json_round_trip_to_six_decimals() {
        let rows = vec![row(1), row(2)];
        let back = parse_metrics_json(&metrics_json(&rows)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.train_clean - b.train_clean).abs() <= 5e-7);
            assert!((a.val_clean.unwrap() - b.val_clean.unwrap()).abs() <= 5e-7);
            assert_eq!(b.val_robust, None);
            assert!((a.loss - b.loss).abs() <= 5e-7);
        }
        assert!(metrics_json(&rows).contains("\"train_clean\": 0.987654"));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let r = emit_report(&[row(1)], Format::Csv, Path::new("/nonexistent-dir/x/metrics.csv"));
        assert!(matches!(r, Err(ReportError::Write { .. })));
    }

    #[test]
    fn eval_grid_has_one_line_per_cell() {
        let rows: Vec<EvalRow> = ["best", "last"]
            .iter()
            .flat_map(|c| {
                ["pgd", "beta"].iter().map(move |a| EvalRow {
                    checkpoint: c.to_string(),
                    epoch: 1,
                    attack: a.to_string(),
                    clean: 0.9,
                    robust: 0.7,
                    samples: 10,
                })
            })
            .collect();
        assert_eq!(eval_text(&rows, Format::Csv).lines().count(), 5);
        let v: serde_json::Value = serde_json::from_str(&eval_text(&rows, Format::Json)).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 4);
    }
}
