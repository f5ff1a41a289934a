//! Benchmark score arithmetic: accuracy with its standard error for
//! multiple-choice tasks, micro-F1 over `(span, label)` pairs for extraction
//! tasks, and aggregation across tasks.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;
use serde_json::Value;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Choice,
    SpanLabels,
}

impl PredictionKind {
    fn as_str(self) -> &'static str {
        match self {
            PredictionKind::Choice => "choice",
            PredictionKind::SpanLabels => "span-labels",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Answer {
    Choice(String),
    /// Set of `(span, polarity label)` pairs.
    Spans(BTreeSet<(String, String)>),
}

impl Answer {
    pub fn kind(&self) -> PredictionKind {
        match self {
            Answer::Choice(_) => PredictionKind::Choice,
            Answer::Spans(_) => PredictionKind::SpanLabels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionItem {
    pub id: String,
    pub predicted: Answer,
    pub gold: Answer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPredictions {
    pub task_name: String,
    pub kind: PredictionKind,
    pub items: Vec<PredictionItem>,
}

impl TaskPredictions {
    /// Infers the kind from the first item; ids must be unique and every
    /// answer must share that kind.
    pub fn new(task_name: impl Into<String>, items: Vec<PredictionItem>) -> Result<Self> {
        let task_name = task_name.into();
        let kind = items
            .first()
            .map(|i| i.gold.kind())
            .ok_or_else(|| Error::EmptyPredictions(task_name.clone()))?;
        let mut ids = HashSet::new();
        for item in &items {
            if !ids.insert(item.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "task {task_name:?} repeats item id {:?}",
                    item.id
                )));
            }
            for found in [item.predicted.kind(), item.gold.kind()] {
                if found != kind {
                    return Err(Error::KindMismatch {
                        task: task_name,
                        expected: kind.as_str(),
                        found: found.as_str(),
                    });
                }
            }
        }
        Ok(Self {
            task_name,
            kind,
            items,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task_name: String,
    pub metric: Metric,
    pub value: f64,
    /// Present for accuracy with at least two items.
    pub stderr: Option<f64>,
    pub n: usize,
}

fn require_kind(preds: &TaskPredictions, kind: PredictionKind) -> Result<()> {
    if preds.items.is_empty() {
        return Err(Error::EmptyPredictions(preds.task_name.clone()));
    }
    if preds.kind != kind {
        return Err(Error::KindMismatch {
            task: preds.task_name.clone(),
            expected: kind.as_str(),
            found: preds.kind.as_str(),
        });
    }
    Ok(())
}

/// Fraction correct, with standard error `sqrt(p(1 − p) / (n − 1))`.
///
/// This is the standard error of the mean of the 0/1 outcomes with the sample
/// (`n − 1`) variance, so 18/38 gives 0.4737 ± 0.0821.
pub fn score_accuracy(preds: &TaskPredictions) -> Result<TaskScore> {
    require_kind(preds, PredictionKind::Choice)?;
    let n = preds.items.len();
    let correct = preds.items.iter().filter(|i| i.predicted == i.gold).count();
    let p = correct as f64 / n as f64;
    let stderr = (n >= 2).then(|| (p * (1.0 - p) / (n - 1) as f64).sqrt());
    Ok(TaskScore {
        task_name: preds.task_name.clone(),
        metric: Metric::Accuracy,
        value: p,
        stderr,
        n,
    })
}

/// Micro-averaged F1 over `(span, label)` pairs pooled across items, using
/// exact string equality. F1 is 0 when precision and recall are both 0 (or undefined).
pub fn score_f1(preds: &TaskPredictions) -> Result<TaskScore> {
    require_kind(preds, PredictionKind::SpanLabels)?;
    let (mut hits, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for item in &preds.items {
        if let (Answer::Spans(p), Answer::Spans(g)) = (&item.predicted, &item.gold) {
            hits += p.intersection(g).count();
            n_pred += p.len();
            n_gold += g.len();
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (precision, recall) = (ratio(hits, n_pred), ratio(hits, n_gold));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TaskScore {
        task_name: preds.task_name.clone(),
        metric: Metric::F1,
        value: f1,
        stderr: None,
        n: preds.items.len(),
    })
}

/// Accuracy for choice tasks, F1 for span tasks.
pub fn score(preds: &TaskPredictions) -> Result<TaskScore> {
    match preds.kind {
        PredictionKind::Choice => score_accuracy(preds),
        PredictionKind::SpanLabels => score_f1(preds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    UnweightedMean,
    WeightedMean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overall {
    pub value: f64,
    pub aggregation: Aggregation,
}

/// Mean of task values; with `weights`, a weighted mean after normalizing the
/// weights to sum 1. Tasks absent from `weights` get weight 0.
pub fn aggregate(scores: &[TaskScore], weights: Option<&BTreeMap<String, f64>>) -> Result<Overall> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let Some(weights) = weights else {
        let value = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
        return Ok(Overall {
            value,
            aggregation: Aggregation::UnweightedMean,
        });
    };
    for (task, &w) in weights {
        if !scores.iter().any(|s| &s.task_name == task) {
            return Err(Error::UnknownTaskInWeights(task.clone()));
        }
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!("weight for {task:?} must be finite and non-negative")));
        }
    }
    let w_of = |s: &TaskScore| weights.get(&s.task_name).copied().unwrap_or(0.0);
    let total: f64 = scores.iter().map(w_of).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let value = scores.iter().map(|s| w_of(s) / total * s.value).sum();
    Ok(Overall {
        value,
        aggregation: Aggregation::WeightedMean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub tasks: Vec<TaskScore>,
    pub overall: Overall,
}

/// Gold answers keyed by `(task, id)`.
pub type GoldMap = BTreeMap<(String, String), Answer>;

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::MalformedRecord {
        line,
        message: message.into(),
    }
}

fn id_of(v: &Value, line: usize) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(bad(line, "missing or non-scalar \"id\"")),
    }
}

fn answer_of(v: &Value, line: usize, field: &str) -> Result<Answer> {
    match v {
        Value::String(s) => Ok(Answer::Choice(s.clone())),
        Value::Number(n) => Ok(Answer::Choice(n.to_string())),
        Value::Bool(b) => Ok(Answer::Choice(b.to_string())),
        Value::Array(pairs) => pairs
            .iter()
            .map(|p| match p.as_array().map(Vec::as_slice) {
                Some([Value::String(span), Value::String(label)]) => Ok((span.clone(), label.clone())),
                _ => Err(bad(line, format!("\"{field}\" must hold [span, label] string pairs"))),
            })
            .collect::<Result<BTreeSet<_>>>()
            .map(Answer::Spans),
        _ => Err(bad(line, format!("missing or invalid \"{field}\""))),
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, Result<serde_json::Map<String, Value>>)> + '_ {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| {
        let line = i + 1;
        let rec = match serde_json::from_str::<Value>(l) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(bad(line, "record is not a JSON object")),
            Err(e) => Err(bad(line, e.to_string())),
        };
        (line, rec)
    })
}

fn task_of(rec: &serde_json::Map<String, Value>, default_task: &str, line: usize) -> Result<String> {
    match rec.get("task") {
        None => Ok(default_task.to_string()),
        Some(Value::String(t)) => Ok(t.clone()),
        Some(_) => Err(bad(line, "\"task\" must be a string")),
    }
}

/// Parses a gold file: one `{"id", "gold"}` object per line, with an optional `"task"`.
pub fn parse_gold(text: &str, default_task: &str) -> Result<GoldMap> {
    let mut out = GoldMap::new();
    for (line, rec) in records(text) {
        let rec = rec?;
        let task = task_of(&rec, default_task, line)?;
        let id = id_of(rec.get("id").unwrap_or(&Value::Null), line)?;
        let gold = answer_of(rec.get("gold").unwrap_or(&Value::Null), line, "gold")?;
        if out.insert((task, id.clone()), gold).is_some() {
            return Err(bad(line, format!("duplicate id {id:?}")));
        }
    }
    Ok(out)
}

/// Parses prediction records, one JSON object per line:
/// `{"id", "pred", "gold"}` with an optional `"task"` (defaults to
/// `default_task`). `pred`/`gold` are scalars for choice tasks and arrays of
/// `[span, label]` pairs for span tasks. `gold` may instead come from `gold_map`.
///
/// Tasks are returned in name order.
pub fn parse_predictions(text: &str, default_task: &str, gold_map: Option<&GoldMap>) -> Result<Vec<TaskPredictions>> {
    let mut by_task: BTreeMap<String, Vec<(usize, PredictionItem)>> = BTreeMap::new();
    for (line, rec) in records(text) {
        let rec = rec?;
        let task = task_of(&rec, default_task, line)?;
        let id = id_of(rec.get("id").unwrap_or(&Value::Null), line)?;
        let predicted = answer_of(rec.get("pred").unwrap_or(&Value::Null), line, "pred")?;
        let gold = match rec.get("gold") {
            Some(g) => answer_of(g, line, "gold")?,
            None => gold_map
                .and_then(|m| m.get(&(task.clone(), id.clone())))
                .cloned()
                .ok_or_else(|| bad(line, format!("no gold answer for id {id:?}")))?,
        };
        if predicted.kind() != gold.kind() {
            return Err(bad(line, "\"pred\" and \"gold\" are of different kinds"));
        }
        by_task.entry(task).or_default().push((line, PredictionItem { id, predicted, gold }));
    }
    if by_task.is_empty() {
        return Err(Error::EmptyPredictions(default_task.to_string()));
    }
    by_task
        .into_iter()
        .map(|(task, items)| {
            let mut seen = HashSet::new();
            let mut kind = None;
            for (line, item) in &items {
                if !seen.insert(item.id.clone()) {
                    return Err(bad(*line, format!("duplicate id {:?} in task {task:?}", item.id)));
                }
                if *kind.get_or_insert(item.gold.kind()) != item.gold.kind() {
                    return Err(bad(*line, format!("task {task:?} mixes choice and span records")));
                }
            }
            TaskPredictions::new(task, items.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}
