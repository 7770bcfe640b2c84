use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusTask, DatasetSplit, InstructError, InstructionDatum, Split, SPLIT_RATIO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub recall_threshold: f64,
    pub search_limit: usize,
    pub pool_capacity: usize,
    pub max_document_tokens: usize,
}

/// Counts before filtering, kept apart from the per-split datum counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawCounts {
    pub search_reviews: usize,
    pub search_accepted: usize,
    pub search_failed: usize,
    pub screening_generated: usize,
    pub screening_dropped_negative_included: usize,
    pub screening_failed: usize,
    pub extraction_pairs: usize,
    pub extraction_pairs_unassigned: usize,
    pub pool_sizes: BTreeMap<String, usize>,
    pub pool_injected: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub ratio: [f64; 3],
    pub thresholds: Thresholds,
    /// task -> split -> datum count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub raw: RawCounts,
    pub review_splits: BTreeMap<String, Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub data: BTreeMap<(CorpusTask, Split), Vec<InstructionDatum>>,
}

fn count_table(data: &BTreeMap<(CorpusTask, Split), Vec<InstructionDatum>>) -> BTreeMap<String, BTreeMap<String, usize>> {
    CorpusTask::ALL
        .iter()
        .map(|t| {
            let per_split = Split::ALL
                .iter()
                .map(|s| (s.as_str().to_string(), data.get(&(*t, *s)).map_or(0, Vec::len)))
                .collect();
            (t.as_str().to_string(), per_split)
        })
        .collect()
}

impl Corpus {
    /// Places each datum in its review's split, sorted by provenance within
    /// each (task, split) file.
    pub fn assemble(
        data: Vec<InstructionDatum>,
        split: DatasetSplit,
        thresholds: Thresholds,
        raw: RawCounts,
    ) -> Result<Self, InstructError> {
        let mut grouped: BTreeMap<(CorpusTask, Split), Vec<InstructionDatum>> = BTreeMap::new();
        for d in data {
            d.validate()?;
            let s = split.split_of(&d.provenance.review_id).ok_or_else(|| {
                InstructError::Corpus(format!("{} datum for review {} outside the split", d.task, d.provenance.review_id))
            })?;
            grouped.entry((d.task, s)).or_default().push(d);
        }
        for items in grouped.values_mut() {
            items.sort_by(|a, b| a.provenance.cmp(&b.provenance));
        }
        let manifest = Manifest {
            seed: split.seed,
            ratio: SPLIT_RATIO,
            thresholds,
            counts: count_table(&grouped),
            raw,
            review_splits: split.assignments(),
        };
        Ok(Self { manifest, data: grouped })
    }

    pub fn total(&self) -> usize {
        self.data.values().map(Vec::len).sum()
    }

    /// Writes `{task}/{split}.jsonl` for every task and split (empty files
    /// included) and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<(), InstructError> {
        let io = |e: std::io::Error| InstructError::Corpus(e.to_string());
        for task in CorpusTask::ALL {
            std::fs::create_dir_all(dir.join(task.as_str())).map_err(io)?;
            for split in Split::ALL {
                let mut text = String::new();
                for d in self.data.get(&(task, split)).map(Vec::as_slice).unwrap_or_default() {
                    text.push_str(&serde_json::to_string(d).expect("datum serializes"));
                    text.push('\n');
                }
                std::fs::write(dir.join(task.as_str()).join(format!("{split}.jsonl")), text).map_err(io)?;
            }
        }
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), manifest + "\n").map_err(io)
    }

    pub fn load(dir: &Path) -> Result<Self, InstructError> {
        let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| InstructError::Corpus(format!("manifest.json: {e}")))?;
        let manifest: Manifest =
            serde_json::from_str(&manifest_text).map_err(|e| InstructError::Corpus(format!("manifest.json: {e}")))?;
        let mut data = BTreeMap::new();
        for task in CorpusTask::ALL {
            for split in Split::ALL {
                let path = dir.join(task.as_str()).join(format!("{split}.jsonl"));
                let Ok(text) = std::fs::read_to_string(&path) else { continue };
                let mut items = Vec::new();
                for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let d: InstructionDatum = serde_json::from_str(line)
                        .map_err(|e| InstructError::Corpus(format!("{}:{}: {e}", path.display(), n + 1)))?;
                    items.push(d);
                }
                if !items.is_empty() {
                    data.insert((task, split), items);
                }
            }
        }
        Ok(Self { manifest, data })
    }
}

/// Datum counts per task and split as found on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub total: usize,
    pub reviews_per_split: BTreeMap<String, usize>,
    pub raw: RawCounts,
}

pub fn corpus_stats(dir: &Path) -> Result<CorpusStats, InstructError> {
    let corpus = Corpus::load(dir)?;
    let mut reviews_per_split = BTreeMap::new();
    for s in corpus.manifest.review_splits.values() {
        *reviews_per_split.entry(s.as_str().to_string()).or_insert(0) += 1;
    }
    Ok(CorpusStats {
        counts: count_table(&corpus.data),
        total: corpus.total(),
        reviews_per_split,
        raw: corpus.manifest.raw.clone(),
    })
}

/// Checks every line: schema, non-empty texts, task and split placement,
/// byte-exact re-serialization, and manifest counts.
pub fn validate_corpus(dir: &Path) -> Result<CorpusStats, InstructError> {
    let corpus = Corpus::load(dir)?;
    for ((task, split), items) in &corpus.data {
        let path = dir.join(task.as_str()).join(format!("{split}.jsonl"));
        let text = std::fs::read_to_string(&path).map_err(|e| InstructError::Corpus(e.to_string()))?;
        for ((n, line), d) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).zip(items) {
            let at = || format!("{}:{}", path.display(), n + 1);
            d.validate().map_err(|e| InstructError::Corpus(format!("{}: {e}", at())))?;
            if d.task != *task {
                return Err(InstructError::Corpus(format!("{}: task {} in {} file", at(), d.task, task)));
            }
            match corpus.manifest.review_splits.get(&d.provenance.review_id) {
                Some(s) if s == split => {}
                Some(s) => {
                    return Err(InstructError::Corpus(format!(
                        "{}: review {} belongs to {s}, found in {split}",
                        at(),
                        d.provenance.review_id
                    )))
                }
                None => return Err(InstructError::Corpus(format!("{}: unknown review {}", at(), d.provenance.review_id))),
            }
            if serde_json::to_string(d).expect("datum serializes") != line {
                return Err(InstructError::Corpus(format!("{}: line does not round-trip", at())));
            }
        }
    }
    let counts = count_table(&corpus.data);
    if counts != corpus.manifest.counts {
        return Err(InstructError::Corpus("manifest counts disagree with files".into()));
    }
    corpus_stats(dir)
}
