use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InstructError;
use crate::extraction::ExtractionTask;
use crate::screening::Pico;

/// A systematic review with its research question and included studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTopic {
    pub review_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    /// Absent until extracted from the abstract.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pico: Option<Pico>,
    pub included_study_ids: BTreeSet<String>,
    pub publication_date: NaiveDate,
}

impl ReviewTopic {
    pub fn pico(&self) -> Result<&Pico, InstructError> {
        self.pico.as_ref().ok_or_else(|| InstructError::MissingPico(self.review_id.clone()))
    }

    pub fn validate(&self) -> Result<(), InstructError> {
        if self.included_study_ids.is_empty() {
            return Err(InstructError::InvalidInput(format!("review {} has no included studies", self.review_id)));
        }
        Ok(())
    }
}

/// The six corpus tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusTask {
    Search,
    Screening,
    StudyCharacteristics,
    ArmDesign,
    ParticipantStatistics,
    TrialResults,
}

impl CorpusTask {
    pub const ALL: [CorpusTask; 6] = [
        CorpusTask::Search,
        CorpusTask::Screening,
        CorpusTask::StudyCharacteristics,
        CorpusTask::ArmDesign,
        CorpusTask::ParticipantStatistics,
        CorpusTask::TrialResults,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusTask::Search => "search",
            CorpusTask::Screening => "screening",
            CorpusTask::StudyCharacteristics => "study_characteristics",
            CorpusTask::ArmDesign => "arm_design",
            CorpusTask::ParticipantStatistics => "participant_statistics",
            CorpusTask::TrialResults => "trial_results",
        }
    }
}

impl From<ExtractionTask> for CorpusTask {
    fn from(t: ExtractionTask) -> Self {
        match t {
            ExtractionTask::StudyCharacteristics => CorpusTask::StudyCharacteristics,
            ExtractionTask::ArmDesign => CorpusTask::ArmDesign,
            ExtractionTask::ParticipantStatistics => CorpusTask::ParticipantStatistics,
            ExtractionTask::TrialResults => CorpusTask::TrialResults,
        }
    }
}

impl fmt::Display for CorpusTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusTask {
    type Err = InstructError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorpusTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| InstructError::InvalidInput(format!("unknown corpus task {s:?}")))
    }
}

/// Where a datum came from. Every datum names the review whose split it
/// belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub review_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionDatum {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub task: CorpusTask,
    pub provenance: Provenance,
}

impl InstructionDatum {
    pub fn validate(&self) -> Result<(), InstructError> {
        for (name, text) in [("instruction", &self.instruction), ("input", &self.input), ("output", &self.output)] {
            if text.trim().is_empty() {
                return Err(InstructError::InvalidInput(format!("{} datum for {} has empty {name}", self.task, self.provenance.review_id)));
            }
        }
        if self.provenance.review_id.trim().is_empty() {
            return Err(InstructError::InvalidInput(format!("{} datum without review provenance", self.task)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const SPLIT_RATIO: [f64; 3] = [0.6, 0.2, 0.2];
pub const MIN_SPLIT_REVIEWS: usize = 5;

/// Review-level train/dev/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub dev: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn split_of(&self, review_id: &str) -> Option<Split> {
        if self.train.contains(review_id) {
            Some(Split::Train)
        } else if self.dev.contains(review_id) {
            Some(Split::Dev)
        } else if self.test.contains(review_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn assignments(&self) -> BTreeMap<String, Split> {
        Split::ALL.iter().flat_map(|&s| self.ids(s).iter().map(move |id| (id.clone(), s))).collect()
    }
}

/// Split sizes by largest remainder; ties go to the earlier split.
pub fn split_sizes(total: usize) -> [usize; 3] {
    let quotas: Vec<f64> = SPLIT_RATIO.iter().map(|r| r * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut rest = total - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    [sizes[0], sizes[1], sizes[2]]
}

/// Sorts ids, shuffles with a ChaCha8 generator seeded by `seed`, then cuts
/// 6:2:2.
pub fn split_dataset(review_ids: &[String], seed: u64) -> Result<DatasetSplit, InstructError> {
    let mut ids: Vec<String> = review_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < MIN_SPLIT_REVIEWS {
        return Err(InstructError::TooFewReviews(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let [n_train, n_dev, _] = split_sizes(ids.len());
    let test = ids.split_off(n_train + n_dev).into_iter().collect();
    let dev = ids.split_off(n_train).into_iter().collect();
    Ok(DatasetSplit { seed, train: ids.into_iter().collect(), dev, test })
}
