use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::*;
use super::WorkbenchError;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 64;

/// Facts recorded in a project's log. Nothing is ever rewritten; a
/// correction is a new event that supersedes an earlier submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    ProjectCreated { config: ProjectConfig, assignments: BTreeMap<String, BTreeMap<String, Arm>> },
    ScreeningOpened { session: ScreeningSession },
    ScreeningSubmitted { session_id: String, submission: ScreeningSubmission },
    ScreeningCorrected { session_id: String, correction: ScreeningCorrection },
    ExtractionOpened { session: ExtractionSession },
    ExtractionSubmitted { session_id: String, submission: ExtractionSubmission },
    ExtractionCorrected { session_id: String, correction: ExtractionCorrection },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub config: ProjectConfig,
    /// participant -> review -> arm.
    pub assignments: BTreeMap<String, BTreeMap<String, Arm>>,
    pub screening: BTreeMap<String, ScreeningSession>,
    pub extraction: BTreeMap<String, ExtractionSession>,
    pub last_seq: u64,
}

fn corrupt(msg: impl Into<String>) -> WorkbenchError {
    WorkbenchError::Storage(msg.into())
}

impl ProjectState {
    fn apply(&mut self, entry: &LogEntry) -> Result<(), WorkbenchError> {
        if entry.seq != self.last_seq + 1 {
            return Err(corrupt(format!("event {} follows {}", entry.seq, self.last_seq)));
        }
        match &entry.event {
            Event::ProjectCreated { .. } => return Err(corrupt("project created twice")),
            Event::ScreeningOpened { session } => {
                if self.screening.insert(session.session_id.clone(), session.clone()).is_some() {
                    return Err(corrupt(format!("session {} opened twice", session.session_id)));
                }
            }
            Event::ScreeningSubmitted { session_id, submission } => {
                let s = self.screening.get_mut(session_id).ok_or_else(|| corrupt(format!("unknown session {session_id}")))?;
                if s.submission.is_some() {
                    return Err(corrupt(format!("session {session_id} submitted twice")));
                }
                s.submission = Some(submission.clone());
            }
            Event::ScreeningCorrected { session_id, correction } => {
                let s = self.screening.get_mut(session_id).ok_or_else(|| corrupt(format!("unknown session {session_id}")))?;
                s.corrections.push(correction.clone());
            }
            Event::ExtractionOpened { session } => {
                if self.extraction.insert(session.session_id.clone(), session.clone()).is_some() {
                    return Err(corrupt(format!("session {} opened twice", session.session_id)));
                }
            }
            Event::ExtractionSubmitted { session_id, submission } => {
                let s = self.extraction.get_mut(session_id).ok_or_else(|| corrupt(format!("unknown session {session_id}")))?;
                if s.submission.is_some() {
                    return Err(corrupt(format!("session {session_id} submitted twice")));
                }
                s.submission = Some(submission.clone());
            }
            Event::ExtractionCorrected { session_id, correction } => {
                let s = self.extraction.get_mut(session_id).ok_or_else(|| corrupt(format!("unknown session {session_id}")))?;
                s.corrections.push(correction.clone());
            }
        }
        self.last_seq = entry.seq;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    state: ProjectState,
}

/// File-backed state of one project: an append-only event log plus a
/// periodic snapshot. One writer at a time.
#[derive(Debug)]
pub struct ProjectStore {
    dir: PathBuf,
    log: File,
    state: ProjectState,
    snapshot_every: u64,
}

impl ProjectStore {
    pub fn create(
        dir: &Path,
        config: ProjectConfig,
        assignments: BTreeMap<String, BTreeMap<String, Arm>>,
    ) -> Result<Self, WorkbenchError> {
        if dir.join(EVENTS_FILE).exists() {
            return Err(WorkbenchError::ProjectExists(config.project_id.clone()));
        }
        std::fs::create_dir_all(dir)?;
        let log = OpenOptions::new().create_new(true).append(true).open(dir.join(EVENTS_FILE))?;
        let entry = LogEntry { seq: 1, event: Event::ProjectCreated { config: config.clone(), assignments: assignments.clone() } };
        let state = ProjectState {
            config,
            assignments,
            screening: BTreeMap::new(),
            extraction: BTreeMap::new(),
            last_seq: 1,
        };
        let mut store = Self { dir: dir.to_path_buf(), log, state, snapshot_every: DEFAULT_SNAPSHOT_EVERY };
        store.write_line(&entry)?;
        Ok(store)
    }

    /// Rebuilds state from the snapshot and the events after it. A final
    /// line cut short by a crash is dropped from the log.
    pub fn open(dir: &Path) -> Result<Self, WorkbenchError> {
        let path = dir.join(EVENTS_FILE);
        let mut log = OpenOptions::new().read(true).append(true).open(&path)?;
        let mut text = String::new();
        log.read_to_string(&mut text)?;

        let mut state: Option<ProjectState> = match std::fs::read_to_string(dir.join(SNAPSHOT_FILE)) {
            Ok(s) => Some(serde_json::from_str::<Snapshot>(&s).map_err(|e| corrupt(format!("snapshot: {e}")))?.state),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut offset = 0usize;
        let mut good_end = 0usize;
        while offset < text.len() {
            let (line, next, complete) = match text[offset..].find('\n') {
                Some(i) => (&text[offset..offset + i], offset + i + 1, true),
                None => (&text[offset..], text.len(), false),
            };
            if line.trim().is_empty() {
                offset = next;
                good_end = next;
                continue;
            }
            let entry: LogEntry = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(_) if !complete => {
                    tracing::warn!(path = %path.display(), "dropping torn final log line");
                    break;
                }
                Err(e) => return Err(corrupt(format!("{}: {e}", path.display()))),
            };
            match (&mut state, &entry.event) {
                (None, Event::ProjectCreated { config, assignments }) if entry.seq == 1 => {
                    state = Some(ProjectState {
                        config: config.clone(),
                        assignments: assignments.clone(),
                        screening: BTreeMap::new(),
                        extraction: BTreeMap::new(),
                        last_seq: 1,
                    });
                }
                (None, _) => return Err(corrupt("log does not start with project creation")),
                (Some(s), _) if entry.seq <= s.last_seq => {}
                (Some(s), _) => s.apply(&entry)?,
            }
            offset = next;
            good_end = next;
        }
        if good_end < text.len() {
            log.set_len(good_end as u64)?;
            log.seek(SeekFrom::End(0))?;
        }
        let state = state.ok_or_else(|| corrupt("empty log"))?;
        Ok(Self { dir: dir.to_path_buf(), log, state, snapshot_every: DEFAULT_SNAPSHOT_EVERY })
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn state(&self) -> &ProjectState {
        &self.state
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_line(&mut self, entry: &LogEntry) -> Result<(), WorkbenchError> {
        let mut line = serde_json::to_string(entry).expect("events serialize");
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.sync_data()?;
        Ok(())
    }

    /// Persists `event`, then applies it. Nothing is applied if the write fails.
    pub fn append(&mut self, event: Event) -> Result<(), WorkbenchError> {
        let entry = LogEntry { seq: self.state.last_seq + 1, event };
        let mut next = self.state.clone();
        next.apply(&entry)?;
        self.write_line(&entry)?;
        self.state = next;
        if self.state.last_seq.is_multiple_of(self.snapshot_every) {
            self.snapshot()?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<(), WorkbenchError> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let text = serde_json::to_string(&Snapshot { state: self.state.clone() }).expect("state serializes");
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_data()?;
        std::fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }
}
