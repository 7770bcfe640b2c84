use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Arm, ProjectState, Verdict, WorkbenchError};
use crate::eval::{evaluate_extraction, ExtractionCase, SoftMatchConfig};
use crate::gateway::Gateway;

/// Lower edges of the elapsed-time bins in seconds; the last bin is open.
pub const TIME_BIN_EDGES: [f64; 6] = [0.0, 180.0, 360.0, 540.0, 720.0, 900.0];
/// AI scores at or above this count as predicted eligible.
pub const SCORE_BAND_TRUE_MIN: f64 = 0.75;
/// AI scores at or below this count as predicted ineligible.
pub const SCORE_BAND_FALSE_MAX: f64 = -0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub arm: Arm,
    pub sessions: usize,
    /// Mean recall (screening) or accuracy (extraction) over sessions that
    /// have a reference to score against.
    pub mean_quality: Option<f64>,
    pub scored_sessions: usize,
    pub mean_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBin {
    pub arm: Arm,
    pub label: String,
    pub lower: f64,
    pub upper: Option<f64>,
    pub sessions: usize,
    pub mean_quality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindComparison {
    pub kind: String,
    pub arms: Vec<ArmStats>,
    /// (t_only - t_ai) / t_only.
    pub time_savings: f64,
    pub time_bins: Vec<TimeBin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBand {
    PredictedEligible,
    Undetermined,
    PredictedIneligible,
}

impl ScoreBand {
    pub fn of(score: f64) -> Self {
        if score >= SCORE_BAND_TRUE_MIN {
            ScoreBand::PredictedEligible
        } else if score <= SCORE_BAND_FALSE_MAX {
            ScoreBand::PredictedIneligible
        } else {
            ScoreBand::Undetermined
        }
    }
}

/// Candidates from submitted expert_ai sessions, counted by AI score band
/// against ground truth and against the expert's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBandRow {
    pub band: ScoreBand,
    pub in_ground_truth: usize,
    pub not_in_ground_truth: usize,
    pub expert_included: usize,
    pub expert_not_included: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub project_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screening: Option<KindComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<KindComparison>,
    pub score_bands: Vec<ScoreBandRow>,
}

struct SessionPoint {
    arm: Arm,
    seconds: f64,
    quality: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn time_bin(seconds: f64) -> usize {
    TIME_BIN_EDGES.iter().rposition(|&e| e <= seconds).unwrap_or(0)
}

fn compare(kind: &str, points: &[SessionPoint]) -> Option<KindComparison> {
    let arms: Vec<ArmStats> = Arm::ALL
        .iter()
        .map(|&arm| {
            let mine: Vec<&SessionPoint> = points.iter().filter(|p| p.arm == arm).collect();
            let scored: Vec<f64> = mine.iter().filter_map(|p| p.quality).collect();
            ArmStats {
                arm,
                sessions: mine.len(),
                mean_quality: mean(scored.iter().copied()),
                scored_sessions: scored.len(),
                mean_time_seconds: mean(mine.iter().map(|p| p.seconds)).unwrap_or(0.0),
            }
        })
        .collect();
    if arms.iter().any(|a| a.sessions == 0) {
        return None;
    }
    let (t_only, t_ai) = (arms[0].mean_time_seconds, arms[1].mean_time_seconds);
    let mut time_bins = Vec::new();
    for &arm in &Arm::ALL {
        for (b, &lower) in TIME_BIN_EDGES.iter().enumerate() {
            let upper = TIME_BIN_EDGES.get(b + 1).copied();
            let inside: Vec<&SessionPoint> = points.iter().filter(|p| p.arm == arm && time_bin(p.seconds) == b).collect();
            time_bins.push(TimeBin {
                arm,
                label: match upper {
                    Some(u) => format!("{lower}-{u}"),
                    None => format!(">{lower}"),
                },
                lower,
                upper,
                sessions: inside.len(),
                mean_quality: mean(inside.iter().filter_map(|p| p.quality)),
            });
        }
    }
    Some(KindComparison { kind: kind.into(), arms, time_savings: (t_only - t_ai) / t_only, time_bins })
}

/// Builds the arm comparison from submitted sessions, using corrected values
/// where a correction exists. Extraction accuracy is scored against gold
/// records with the evaluation rules.
pub async fn arm_comparison(state: &ProjectState, gateway: &Gateway) -> Result<ArmComparison, WorkbenchError> {
    let config = &state.config;
    let mut screening_points = Vec::new();
    let mut bands: BTreeMap<ScoreBand, ScoreBandRow> = BTreeMap::new();
    for s in state.screening.values() {
        let (Some(sub), Some((decisions, recall))) = (&s.submission, s.effective()) else { continue };
        screening_points.push(SessionPoint { arm: s.arm, seconds: sub.elapsed_seconds, quality: Some(recall) });
        if s.arm != Arm::ExpertAi {
            continue;
        }
        let review = config.review(&s.review_id).expect("validated review");
        let Some(sheet) = &review.ai_sheet else { continue };
        let included: std::collections::HashSet<&str> = decisions
            .iter()
            .filter(|d| d.verdict == Verdict::Include)
            .map(|d| d.citation_id.as_str())
            .collect();
        for e in &sheet.entries {
            let band = ScoreBand::of(e.score);
            let row = bands.entry(band).or_insert(ScoreBandRow {
                band,
                in_ground_truth: 0,
                not_in_ground_truth: 0,
                expert_included: 0,
                expert_not_included: 0,
            });
            if review.ground_truth.contains(&e.citation_id) {
                row.in_ground_truth += 1;
            } else {
                row.not_in_ground_truth += 1;
            }
            if included.contains(e.citation_id.as_str()) {
                row.expert_included += 1;
            } else {
                row.expert_not_included += 1;
            }
        }
    }

    let mut extraction_points = Vec::new();
    for s in state.extraction.values() {
        let (Some(sub), Some(record)) = (&s.submission, s.effective_record()) else { continue };
        let gold = config.task_materials(&s.citation_id, s.task).and_then(|m| m.gold.clone());
        let quality = match gold {
            Some(gold) => {
                let pred = ExtractionCase { citation_id: s.citation_id.clone(), record: record.clone(), topic: None, input_length: None };
                let gold = ExtractionCase { citation_id: s.citation_id.clone(), record: gold, topic: None, input_length: None };
                match evaluate_extraction(s.task.as_str(), &[pred], &[gold], gateway, SoftMatchConfig::default()).await {
                    Ok((report, _)) => Some(report.mean()),
                    Err(crate::eval::EvalError::InvalidInput(_)) => None,
                    Err(e) => return Err(e.into()),
                }
            }
            None => None,
        };
        extraction_points.push(SessionPoint { arm: s.arm, seconds: sub.elapsed_seconds, quality });
    }

    let screening = compare("screening", &screening_points);
    let extraction = compare("extraction", &extraction_points);
    if screening.is_none() && extraction.is_none() {
        return Err(WorkbenchError::InsufficientData(
            "need at least one submitted session in each arm for screening or extraction".into(),
        ));
    }
    let score_bands = [ScoreBand::PredictedEligible, ScoreBand::Undetermined, ScoreBand::PredictedIneligible]
        .into_iter()
        .map(|b| {
            bands.remove(&b).unwrap_or(ScoreBandRow {
                band: b,
                in_ground_truth: 0,
                not_in_ground_truth: 0,
                expert_included: 0,
                expert_not_included: 0,
            })
        })
        .collect();
    Ok(ArmComparison { project_id: config.project_id.clone(), screening, extraction, score_bands })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl ArmComparison {
    /// One row per task kind and arm: sessions, quality, time, savings.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "arm", "sessions", "scored_sessions", "mean_quality", "mean_time_seconds", "time_savings"])
            .expect("in-memory write");
        for k in [&self.screening, &self.extraction].into_iter().flatten() {
            for a in &k.arms {
                w.write_record([
                    k.kind.clone(),
                    a.arm.to_string(),
                    a.sessions.to_string(),
                    a.scored_sessions.to_string(),
                    opt(a.mean_quality),
                    a.mean_time_seconds.to_string(),
                    k.time_savings.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Quality by elapsed-time bin, per task kind and arm.
    pub fn time_bins_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "arm", "bin", "sessions", "mean_quality"]).expect("in-memory write");
        for k in [&self.screening, &self.extraction].into_iter().flatten() {
            for b in &k.time_bins {
                w.write_record([k.kind.clone(), b.arm.to_string(), b.label.clone(), b.sessions.to_string(), opt(b.mean_quality)])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}
