use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Ground-truth-count bin edges: 0-5, 5-10, 10-15, 15-20, 20-25, 25+.
pub const TRUTH_COUNT_EDGES: [usize; 6] = [0, 5, 10, 15, 20, 25];
/// Input-length bin edges in estimated tokens.
pub const INPUT_LENGTH_EDGES: [usize; 6] = [0, 1000, 2000, 4000, 8000, 16000];

/// One scored unit: a review for recall, a field for accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_length: Option<usize>,
    /// Sub-aggregate membership, e.g. "text" or "numeric".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `None` for an empty set.
    pub mean: Option<f64>,
    pub count: usize,
    pub sum: f64,
}

impl Aggregate {
    pub fn of<'a>(scores: impl IntoIterator<Item = &'a f64>) -> Self {
        let (mut sum, mut count) = (0.0, 0);
        for s in scores {
            sum += s;
            count += 1;
        }
        Self { mean: (count > 0).then(|| sum / count as f64), count, sum }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Topic,
    TruthCountBin,
    InputLengthBin,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Topic => "topic",
            Axis::TruthCountBin => "truth_count_bin",
            Axis::InputLengthBin => "input_length_bin",
        }
    }

    pub fn default_edges(self) -> Option<BinEdges> {
        match self {
            Axis::Topic => None,
            Axis::TruthCountBin => Some(BinEdges(TRUTH_COUNT_EDGES.to_vec())),
            Axis::InputLengthBin => Some(BinEdges(INPUT_LENGTH_EDGES.to_vec())),
        }
    }
}

/// Lower bin edges, strictly ascending from 0; the last bin is open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinEdges(pub Vec<usize>);

impl BinEdges {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.0.first() != Some(&0) {
            return Err(EvalError::InvalidInput("bin edges must start at 0".into()));
        }
        if self.0.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidInput("bin edges must be strictly ascending".into()));
        }
        Ok(())
    }

    fn bin_of(&self, value: usize) -> usize {
        self.0.iter().rposition(|&e| e <= value).expect("first edge is 0")
    }

    fn label(&self, i: usize) -> String {
        match self.0.get(i + 1) {
            Some(hi) => format!("{}-{}", self.0[i], hi),
            None => format!("{}+", self.0[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<usize>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub axis: Axis,
    pub strata: Vec<Stratum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub items: Vec<ItemScore>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, Aggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strata: Vec<Stratification>,
}

impl MetricReport {
    pub fn new(task: &str, metric: &str, items: Vec<ItemScore>) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::InvalidInput(format!("{task} {metric}: no items")));
        }
        if let Some(bad) = items.iter().find(|i| !i.score.is_finite()) {
            return Err(EvalError::InvalidInput(format!("{}: non-finite score", bad.item_id)));
        }
        let aggregate = Aggregate::of(items.iter().map(|i| &i.score));
        let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for i in &items {
            if let Some(g) = &i.group {
                grouped.entry(g.clone()).or_default().push(i.score);
            }
        }
        let groups = grouped.into_iter().map(|(g, s)| (g, Aggregate::of(&s))).collect();
        Ok(Self { task: task.into(), metric: metric.into(), items, aggregate, groups, strata: Vec::new() })
    }

    pub fn mean(&self) -> f64 {
        self.aggregate.mean.expect("reports are never empty")
    }

    /// Adds a stratification along `axis` with its default edges.
    pub fn stratified(mut self, axis: Axis) -> Result<Self, EvalError> {
        let s = stratify(&self, axis, axis.default_edges().as_ref())?;
        self.strata.push(s);
        Ok(self)
    }
}

/// Partitions the report's items along `axis`. Numeric axes use `edges`
/// (their defaults when `None`); every bin is listed, empty ones included.
pub fn stratify(report: &MetricReport, axis: Axis, edges: Option<&BinEdges>) -> Result<Stratification, EvalError> {
    let missing = |i: &ItemScore| EvalError::MissingAxisMetadata(i.item_id.clone());
    let strata = match axis {
        Axis::Topic => {
            let mut by_topic: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for i in &report.items {
                by_topic.entry(i.topic.as_deref().ok_or_else(|| missing(i))?).or_default().push(i.score);
            }
            by_topic
                .into_iter()
                .map(|(t, s)| Stratum { label: t.to_string(), lower: None, upper: None, aggregate: Aggregate::of(&s) })
                .collect()
        }
        Axis::TruthCountBin | Axis::InputLengthBin => {
            let default = axis.default_edges().expect("numeric axis");
            let edges = edges.unwrap_or(&default);
            edges.validate()?;
            let mut bins: Vec<Vec<f64>> = vec![Vec::new(); edges.0.len()];
            for i in &report.items {
                let v = match axis {
                    Axis::TruthCountBin => i.truth_count,
                    _ => i.input_length,
                }
                .ok_or_else(|| missing(i))?;
                bins[edges.bin_of(v)].push(i.score);
            }
            bins.iter()
                .enumerate()
                .map(|(b, s)| Stratum {
                    label: edges.label(b),
                    lower: Some(edges.0[b]),
                    upper: edges.0.get(b + 1).copied(),
                    aggregate: Aggregate::of(s),
                })
                .collect()
        }
    };
    Ok(Stratification { axis, strata })
}

/// A (k, value) series for recall-versus-K plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

/// Everything written for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub metrics: Vec<MetricReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<Curve>,
}

fn csv_error(e: csv::Error) -> EvalError {
    EvalError::Io(std::io::Error::other(e))
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(&r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `{task}.json` and `{task}.csv` into `dir`, and plot-data tables
/// into `dir/plots`. Output depends only on the report, so reruns are
/// byte-identical.
pub fn write_reports(dir: &Path, report: &TaskReport) -> Result<Vec<PathBuf>, EvalError> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let task = &report.task;
    let mut written = Vec::new();

    let json_path = dir.join(format!("{task}.json"));
    let json = serde_json::to_string_pretty(report).map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    std::fs::write(&json_path, json + "\n")?;
    written.push(json_path);

    let table = dir.join(format!("{task}.csv"));
    let mut rows = Vec::new();
    for m in &report.metrics {
        for i in &m.items {
            rows.push(vec![
                m.metric.clone(),
                i.item_id.clone(),
                i.score.to_string(),
                opt(&i.topic),
                opt(&i.truth_count),
                opt(&i.input_length),
                opt(&i.group),
            ]);
        }
    }
    write_csv(&table, &["metric", "item_id", "score", "topic", "truth_count", "input_length", "group"], rows)?;
    written.push(table);

    let summary = plots.join(format!("{task}_summary.csv"));
    let mut rows = Vec::new();
    for m in &report.metrics {
        rows.push(vec![m.metric.clone(), "all".into(), opt(&m.aggregate.mean), m.aggregate.count.to_string()]);
        for (g, a) in &m.groups {
            rows.push(vec![m.metric.clone(), g.clone(), opt(&a.mean), a.count.to_string()]);
        }
    }
    write_csv(&summary, &["metric", "group", "mean", "count"], rows)?;
    written.push(summary);

    let strata = plots.join(format!("{task}_strata.csv"));
    let mut rows = Vec::new();
    for m in &report.metrics {
        for s in &m.strata {
            for st in &s.strata {
                rows.push(vec![
                    m.metric.clone(),
                    s.axis.as_str().into(),
                    st.label.clone(),
                    opt(&st.aggregate.mean),
                    st.aggregate.count.to_string(),
                ]);
            }
        }
    }
    write_csv(&strata, &["metric", "axis", "bin", "mean", "count"], rows)?;
    written.push(strata);

    if !report.curves.is_empty() {
        let curves = plots.join(format!("{task}_recall_curve.csv"));
        let rows = report
            .curves
            .iter()
            .flat_map(|c| c.points.iter().map(move |(k, v)| vec![c.name.clone(), k.to_string(), v.to_string()]))
            .collect();
        write_csv(&curves, &["curve", "k", "recall"], rows)?;
        written.push(curves);
    }
    Ok(written)
}
