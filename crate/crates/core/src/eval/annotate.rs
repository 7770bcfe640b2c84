use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One annotator's judgment of one item, as loaded from a verdict file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorVerdict {
    pub item_id: String,
    pub annotator: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicatedItem {
    pub item_id: String,
    /// `None` when flagged.
    pub verdict: Option<bool>,
    pub flagged: bool,
    pub annotators: usize,
}

/// Strict majority of at least two annotators, otherwise the item is
/// flagged for review. Items come back sorted by id.
pub fn adjudicate(verdicts: &[AnnotatorVerdict]) -> Result<Vec<AdjudicatedItem>, EvalError> {
    let mut by_item: BTreeMap<&str, BTreeMap<&str, bool>> = BTreeMap::new();
    for v in verdicts {
        if by_item.entry(&v.item_id).or_default().insert(&v.annotator, v.correct).is_some() {
            return Err(EvalError::InvalidInput(format!("{} judged {} twice", v.annotator, v.item_id)));
        }
    }
    Ok(by_item
        .into_iter()
        .map(|(item, votes)| {
            let n = votes.len();
            let yes = votes.values().filter(|&&c| c).count();
            let verdict = if n < 2 {
                None
            } else if yes * 2 > n {
                Some(true)
            } else if (n - yes) * 2 > n {
                Some(false)
            } else {
                None
            };
            AdjudicatedItem { item_id: item.to_string(), verdict, flagged: verdict.is_none(), annotators: n }
        })
        .collect())
}

/// Reads JSON Lines verdicts.
pub fn load_verdicts(path: &Path) -> Result<Vec<AnnotatorVerdict>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}
