use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ScreeningError;

/// Research question of a review.
///
/// `comparison` and `outcome` are optional; `None` is the explicit "not
/// specified" marker, distinct from any text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pico {
    pub population: String,
    pub intervention: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub comparison: Option<String>,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub outcome: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let v: Option<String> = Option::deserialize(d)?;
    Ok(v.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()))
}

pub const NOT_SPECIFIED: &str = "Not specified";

impl Pico {
    pub fn new(population: &str, intervention: &str, comparison: Option<&str>, outcome: Option<&str>) -> Result<Self, ScreeningError> {
        let clean = |s: Option<&str>| s.map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
        let pico = Self {
            population: population.trim().to_string(),
            intervention: intervention.trim().to_string(),
            comparison: clean(comparison),
            outcome: clean(outcome),
        };
        pico.validate()?;
        Ok(pico)
    }

    pub fn validate(&self) -> Result<(), ScreeningError> {
        if self.population.trim().is_empty() || self.intervention.trim().is_empty() {
            return Err(ScreeningError::InvalidInput("PICO needs a population and an intervention".into()));
        }
        Ok(())
    }

    pub fn comparison_text(&self) -> String {
        self.comparison.clone().unwrap_or_else(|| NOT_SPECIFIED.to_string())
    }

    pub fn outcome_text(&self) -> String {
        self.outcome.clone().unwrap_or_else(|| NOT_SPECIFIED.to_string())
    }

    /// Prompt and embedding form.
    pub fn to_text(&self) -> String {
        format!(
            "Population: {}\nIntervention: {}\nComparison: {}\nOutcome: {}",
            self.population,
            self.intervention,
            self.comparison_text(),
            self.outcome_text()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    P,
    I,
    C,
    O,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Inclusion,
    Exclusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub criterion_id: String,
    pub category: Category,
    pub polarity: Polarity,
    pub text: String,
}

impl Criterion {
    /// One inclusion criterion per stated PICO element, ids `P1`, `I1`, `C1`, `O1`.
    pub fn from_pico(pico: &Pico) -> Vec<Criterion> {
        let mut out = vec![
            Criterion::inclusion("P1", Category::P, &format!("The study population is: {}", pico.population)),
            Criterion::inclusion("I1", Category::I, &format!("The study evaluates the intervention: {}", pico.intervention)),
        ];
        if let Some(c) = &pico.comparison {
            out.push(Criterion::inclusion("C1", Category::C, &format!("The study compares against: {c}")));
        }
        if let Some(o) = &pico.outcome {
            out.push(Criterion::inclusion("O1", Category::O, &format!("The study reports the outcome: {o}")));
        }
        out
    }

    pub fn inclusion(id: &str, category: Category, text: &str) -> Self {
        Self { criterion_id: id.into(), category, polarity: Polarity::Inclusion, text: text.into() }
    }

    pub fn exclusion(id: &str, category: Category, text: &str) -> Self {
        Self { criterion_id: id.into(), category, polarity: Polarity::Exclusion, text: text.into() }
    }

    /// Prompt line. Exclusion criteria are phrased so that YES means the
    /// study does not hit the exclusion.
    pub fn prompt_line(&self) -> String {
        match self.polarity {
            Polarity::Inclusion => format!("- {}: {}", self.criterion_id, self.text),
            Polarity::Exclusion => format!("- {}: The study does NOT meet this exclusion condition: {}", self.criterion_id, self.text),
        }
    }
}

pub fn validate_criteria(criteria: &[Criterion]) -> Result<(), ScreeningError> {
    if criteria.is_empty() {
        return Err(ScreeningError::InvalidInput("no criteria".into()));
    }
    let mut seen = HashSet::new();
    for c in criteria {
        if c.text.trim().is_empty() {
            return Err(ScreeningError::InvalidInput(format!("criterion {} has no text", c.criterion_id)));
        }
        if !seen.insert(c.criterion_id.as_str()) {
            return Err(ScreeningError::InvalidInput(format!("duplicate criterion id {}", c.criterion_id)));
        }
    }
    Ok(())
}

pub fn render_criteria(criteria: &[Criterion]) -> String {
    criteria.iter().map(Criterion::prompt_line).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    No,
    Uncertain,
    Partial,
    Yes,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Yes, Label::Partial, Label::Uncertain, Label::No];

    pub fn score(self) -> f64 {
        match self {
            Label::Yes => 1.0,
            Label::Partial => 0.5,
            Label::Uncertain => 0.0,
            Label::No => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "YES",
            Label::Partial => "PARTIAL",
            Label::Uncertain => "UNCERTAIN",
            Label::No => "NO",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ScreeningError;

    /// Case-insensitive; "Partially Yes" is the same label as PARTIAL.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.trim().to_ascii_uppercase().split(|c: char| c == '_' || c == '-' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        match key.as_str() {
            "YES" => Ok(Label::Yes),
            "PARTIAL" | "PARTIALLY YES" => Ok(Label::Partial),
            "UNCERTAIN" => Ok(Label::Uncertain),
            "NO" => Ok(Label::No),
            _ => Err(ScreeningError::UnparseableModelOutput(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionAssessment {
    pub criterion_id: String,
    pub label: Label,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityResult {
    pub citation_id: String,
    pub assessments: Vec<CriterionAssessment>,
    pub overall_score: f64,
}

/// Unweighted mean of label scores.
pub fn score_labels(labels: &[Label]) -> Result<f64, ScreeningError> {
    if labels.is_empty() {
        return Err(ScreeningError::EmptyAssessments);
    }
    Ok(labels.iter().map(|l| l.score()).sum::<f64>() / labels.len() as f64)
}

pub fn score_assessments(assessments: &[CriterionAssessment]) -> Result<f64, ScreeningError> {
    score_labels(&assessments.iter().map(|a| a.label).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranker {
    CriterionLlm,
    Dense,
    SimpleScore,
    TwoStage,
}

impl Ranker {
    pub const ALL: [Ranker; 4] = [Ranker::CriterionLlm, Ranker::Dense, Ranker::SimpleScore, Ranker::TwoStage];

    pub fn as_str(self) -> &'static str {
        match self {
            Ranker::CriterionLlm => "criterion_llm",
            Ranker::Dense => "dense",
            Ranker::SimpleScore => "simple_score",
            Ranker::TwoStage => "two_stage",
        }
    }
}

impl FromStr for Ranker {
    type Err = ScreeningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ranker::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| ScreeningError::InvalidInput(format!("unknown ranker {s:?}")))
    }
}

/// One ranked candidate, also the ranked-output file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub citation_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assessments: Vec<CriterionAssessment>,
    #[serde(default)]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RankedEntry {
    pub fn scored(citation_id: impl Into<String>, score: f64) -> Self {
        Self { citation_id: citation_id.into(), score, assessments: Vec::new(), failed: false, error: None }
    }

    pub fn failure(citation_id: impl Into<String>, error: impl fmt::Display) -> Self {
        Self { citation_id: citation_id.into(), score: 0.0, assessments: Vec::new(), failed: true, error: Some(error.to_string()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub review_id: String,
    pub ranker: Ranker,
    pub entries: Vec<RankedEntry>,
}

/// Score descending, then citation id ascending.
pub fn rank_order(a: &RankedEntry, b: &RankedEntry) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.citation_id.cmp(&b.citation_id))
}

impl RankedList {
    pub fn new(review_id: impl Into<String>, ranker: Ranker, mut entries: Vec<RankedEntry>) -> Result<Self, ScreeningError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !e.score.is_finite() {
                return Err(ScreeningError::InvalidInput(format!("non-finite score for {}", e.citation_id)));
            }
            if !seen.insert(e.citation_id.clone()) {
                return Err(ScreeningError::DuplicateCandidate(e.citation_id.clone()));
            }
        }
        entries.sort_by(rank_order);
        Ok(Self { review_id: review_id.into(), ranker, entries })
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.citation_id.clone()).collect()
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.failed).count()
    }

    /// One JSON record per line, in rank order.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            review_id: &'a str,
            ranker: Ranker,
            rank: usize,
            #[serde(flatten)]
            entry: &'a RankedEntry,
        }
        let mut out = String::new();
        for (i, entry) in self.entries.iter().enumerate() {
            let line = Line { review_id: &self.review_id, ranker: self.ranker, rank: i + 1, entry };
            out.push_str(&serde_json::to_string(&line).expect("ranked entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ScreeningError> {
        #[derive(Deserialize)]
        struct Line {
            review_id: String,
            ranker: Ranker,
            #[serde(flatten)]
            entry: RankedEntry,
        }
        let mut review = None;
        let mut ranker = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let line: Line = serde_json::from_str(raw)
                .map_err(|e| ScreeningError::InvalidInput(format!("ranked file line {}: {e}", n + 1)))?;
            if review.get_or_insert_with(|| line.review_id.clone()) != &line.review_id
                || *ranker.get_or_insert(line.ranker) != line.ranker
            {
                return Err(ScreeningError::InvalidInput(format!("ranked file line {} mixes lists", n + 1)));
            }
            entries.push(line.entry);
        }
        let (Some(review), Some(ranker)) = (review, ranker) else {
            return Err(ScreeningError::InvalidInput("empty ranked file".into()));
        };
        Self::new(review, ranker, entries)
    }
}
