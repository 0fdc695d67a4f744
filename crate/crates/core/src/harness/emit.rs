use std::path::Path;

use serde_json::{json, Value};

use super::{BestKResult, HarnessError};
use crate::synthbench::EvalResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Plotdata,
}

impl std::str::FromStr for OutputFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "csv" => Ok(Self::Csv),
            "plotdata" | "json" => Ok(Self::Plotdata),
            other => Err(HarnessError::Config(format!("unknown output format \"{other}\""))),
        }
    }
}

impl OutputFormat {
    /// Picks plot data for `.json` paths and CSV otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Plotdata,
            _ => Self::Csv,
        }
    }
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `fsm,length,predictor,state,count,accuracy,mean_forwards`, one row per
/// (result, state).
pub fn eval_csv(results: &[EvalResult]) -> String {
    let rows = results
        .iter()
        .flat_map(|r| {
            r.per_state.iter().map(move |s| {
                vec![
                    r.fsm.clone(),
                    r.length.to_string(),
                    r.predictor.clone(),
                    s.state.clone(),
                    s.count.to_string(),
                    opt(s.accuracy),
                    opt(r.forwards_per_trace),
                ]
            })
        })
        .collect();
    csv_text(
        &["fsm", "length", "predictor", "state", "count", "accuracy", "mean_forwards"],
        rows,
    )
}

/// Groups items into labelled series, keeping first-appearance order.
fn group<'a, T>(items: &'a [T], label: impl Fn(&T) -> String) -> Vec<(String, Vec<&'a T>)> {
    let mut out: Vec<(String, Vec<&T>)> = Vec::new();
    for it in items {
        let l = label(it);
        match out.iter_mut().find(|(k, _)| *k == l) {
            Some((_, v)) => v.push(it),
            None => out.push((l, vec![it])),
        }
    }
    out
}

/// One series per (fsm, predictor): x = length, y = overall accuracy.
pub fn eval_plotdata(results: &[EvalResult]) -> Value {
    let series: Vec<Value> = group(results, |r| format!("{}/{}", r.fsm, r.predictor))
        .into_iter()
        .map(|(label, rs)| {
            json!({
                "label": label,
                "fsm": rs[0].fsm,
                "predictor": rs[0].predictor,
                "x": rs.iter().map(|r| r.length).collect::<Vec<_>>(),
                "y": rs.iter().map(|r| r.overall_accuracy).collect::<Vec<_>>(),
                "forwards": rs.iter().map(|r| r.forwards_per_trace).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({"x_label": "length", "y_label": "accuracy", "series": series})
}

/// Mean Best@k over episodes for k = 1..=K, per strategy.
fn bestk_curves(results: &[BestKResult]) -> Vec<(String, Vec<(usize, Option<f64>)>)> {
    group(results, |r| r.strategy.clone())
        .into_iter()
        .map(|(strategy, rs)| {
            let k_max = rs.iter().map(|r| r.k).max().unwrap_or(0);
            let points = (1..=k_max)
                .map(|k| {
                    let vals: Vec<f64> = rs.iter().filter_map(|r| r.best_at(k)).collect();
                    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                    (k, mean)
                })
                .collect();
            (strategy, points)
        })
        .collect()
}

/// `strategy,k,episodes,best_mean`.
pub fn bestk_csv(results: &[BestKResult]) -> String {
    let rows = bestk_curves(results)
        .into_iter()
        .flat_map(|(strategy, points)| {
            let episodes = results.iter().filter(|r| r.strategy == strategy).count();
            points
                .into_iter()
                .map(move |(k, mean)| vec![strategy.clone(), k.to_string(), episodes.to_string(), opt(mean)])
        })
        .collect();
    csv_text(&["strategy", "k", "episodes", "best_mean"], rows)
}

/// One series per strategy: x = k, y = mean best.
pub fn bestk_plotdata(results: &[BestKResult]) -> Value {
    let series: Vec<Value> = bestk_curves(results)
        .into_iter()
        .map(|(label, points)| {
            json!({
                "label": label,
                "x": points.iter().map(|p| p.0).collect::<Vec<_>>(),
                "y": points.iter().map(|p| p.1).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({"x_label": "k", "y_label": "best_mean", "series": series})
}

pub fn emit_eval(results: &[EvalResult], format: OutputFormat) -> Result<String, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    Ok(match format {
        OutputFormat::Csv => eval_csv(results),
        OutputFormat::Plotdata => pretty(&eval_plotdata(results)),
    })
}

pub fn emit_bestk(results: &[BestKResult], format: OutputFormat) -> Result<String, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    Ok(match format {
        OutputFormat::Csv => bestk_csv(results),
        OutputFormat::Plotdata => pretty(&bestk_plotdata(results)),
    })
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

pub fn write_output(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
