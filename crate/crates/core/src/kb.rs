//! Append-only store of reviewer feedback injected into expert prompts.
//!
//! The log is JSON Lines: a header `{"format":"trialmatch-kb","version":1}`
//! followed by one [`KnowledgeEntry`] per line in insertion order. Snapshot
//! version `v` is exactly the first `v` entries, so any past version can be
//! re-rendered byte for byte.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::{CriterionId, TrialId};

const FORMAT: &str = "trialmatch-kb";

/// Placed between entries when the KB is rendered into a prompt.
pub const ENTRY_DELIMITER: &str = "\n---\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    DomainKnowledge,
    Logical,
    MissingInformation,
    IrrelevantCriterion,
    Other,
}

/// Advisory metadata; rendering ignores it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryScope {
    pub trial_id: TrialId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion_id: Option<CriterionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeEntry {
    pub entry_id: String,
    pub text: String,
    pub error_mode: ErrorMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<EntryScope>,
    pub author: String,
    pub created_at: DateTime<Utc>,
}

/// Fields supplied by the caller of [`KnowledgeBase::append`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEntry {
    pub text: String,
    pub error_mode: ErrorMode,
    #[serde(default)]
    pub scope: Option<EntryScope>,
    pub author: String,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("knowledge entry text is empty")]
    EmptyText,
    #[error("knowledge entry author is empty")]
    EmptyAuthor,
    #[error("unknown knowledge base version {requested} (latest is {latest})")]
    UnknownVersion { requested: u64, latest: u64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("knowledge base log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Immutable view of the first `version` entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KbSnapshot {
    version: u64,
    entries: Arc<[KnowledgeEntry]>,
}

impl KbSnapshot {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render_for_prompt(&self) -> String {
        render_for_prompt(self)
    }

    /// Hex sha256 of the rendered block.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render_for_prompt().as_bytes()))
    }
}

/// Entry texts in insertion order joined by [`ENTRY_DELIMITER`]; empty for an empty snapshot.
pub fn render_for_prompt(snapshot: &KbSnapshot) -> String {
    snapshot
        .entries
        .iter()
        .map(|e| e.text.as_str())
        .collect::<Vec<_>>()
        .join(ENTRY_DELIMITER)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn header_line() -> String {
    serde_json::to_string(&Header {
        format: FORMAT.into(),
        version: 1,
    })
    .unwrap()
}

fn parse_log(name: &str, reader: impl BufRead) -> Result<Vec<KnowledgeEntry>, KbError> {
    let err = |line, message: String| KbError::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut entries = Vec::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let h: Header = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
            if h.format != FORMAT || h.version != 1 {
                return Err(err(i + 1, format!("unsupported header {}/{}", h.format, h.version)));
            }
            saw_header = true;
            continue;
        }
        let e: KnowledgeEntry =
            serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        if e.text.trim().is_empty() {
            return Err(err(i + 1, "empty entry text".into()));
        }
        entries.push(e);
    }
    Ok(entries)
}

/// The knowledge base. `append` is the only mutation.
#[derive(Debug, Default)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeEntry>,
    log: Option<(PathBuf, File)>,
}

impl KnowledgeBase {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file; later appends are written through to it.
    pub fn open(path: &Path) -> Result<Self, KbError> {
        let io = |source| KbError::Io {
            path: path.to_path_buf(),
            source,
        };
        let existing = path.exists() && std::fs::metadata(path).map_err(io)?.len() > 0;
        let entries = if existing {
            parse_log(
                &path.display().to_string(),
                BufReader::new(File::open(path).map_err(io)?),
            )?
        } else {
            Vec::new()
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if !existing {
            writeln!(file, "{}", header_line()).map_err(io)?;
        }
        Ok(KnowledgeBase {
            entries,
            log: Some((path.to_path_buf(), file)),
        })
    }

    pub fn version(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn append(
        &mut self,
        entry: NewEntry,
        created_at: DateTime<Utc>,
    ) -> Result<KnowledgeEntry, KbError> {
        if entry.text.trim().is_empty() {
            return Err(KbError::EmptyText);
        }
        if entry.author.trim().is_empty() {
            return Err(KbError::EmptyAuthor);
        }
        let stored = KnowledgeEntry {
            entry_id: format!("kb-{:04}", self.entries.len() + 1),
            text: entry.text,
            error_mode: entry.error_mode,
            scope: entry.scope,
            author: entry.author,
            created_at,
        };
        if let Some((path, file)) = &mut self.log {
            let line = serde_json::to_string(&stored).unwrap();
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|source| KbError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.entries.push(stored.clone());
        Ok(stored)
    }

    pub fn snapshot(&self) -> KbSnapshot {
        KbSnapshot {
            version: self.version(),
            entries: self.entries.clone().into(),
        }
    }

    pub fn snapshot_at(&self, version: u64) -> Result<KbSnapshot, KbError> {
        if version > self.version() {
            return Err(KbError::UnknownVersion {
                requested: version,
                latest: self.version(),
            });
        }
        Ok(KbSnapshot {
            version,
            entries: self.entries[..version as usize].to_vec().into(),
        })
    }

    /// The full log, header included.
    pub fn export(&self) -> String {
        let mut out = header_line();
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).unwrap());
            out.push('\n');
        }
        out
    }

    /// Appends every entry of an exported log that is not already present
    /// (same text, mode, scope, author and timestamp), keeping the export's
    /// order and timestamps. Returns the number of entries appended.
    pub fn import(&mut self, exported: &str) -> Result<usize, KbError> {
        let incoming = parse_log("import", exported.as_bytes())?;
        let mut added = 0;
        for e in incoming {
            let dup = self.entries.iter().any(|x| {
                x.text == e.text
                    && x.error_mode == e.error_mode
                    && x.scope == e.scope
                    && x.author == e.author
                    && x.created_at == e.created_at
            });
            if dup {
                continue;
            }
            self.append(
                NewEntry {
                    text: e.text,
                    error_mode: e.error_mode,
                    scope: e.scope,
                    author: e.author,
                },
                e.created_at,
            )?;
            added += 1;
        }
        Ok(added)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 9, 0, 0).unwrap()
    }

    fn entry(text: &str) -> NewEntry {
        NewEntry {
            text: text.into(),
            error_mode: ErrorMode::DomainKnowledge,
            scope: None,
            author: "crc-1".into(),
        }
    }

    #[test]
    fn versions_and_rendering() {
        let mut kb = KnowledgeBase::in_memory();
        assert_eq!(kb.snapshot().render_for_prompt(), "");
        let first = kb.append(entry("A"), t0()).unwrap();
        assert_eq!(first.entry_id, "kb-0001");
        assert_eq!(kb.version(), 1);
        let v1 = kb.snapshot();
        kb.append(entry("B"), t0()).unwrap();
        assert_eq!(kb.snapshot().render_for_prompt(), "A\n---\nB");
        assert_eq!(v1.render_for_prompt(), "A");
        assert_eq!(kb.snapshot_at(1).unwrap(), v1);
        assert!(kb.snapshot_at(3).is_err());
        assert!(matches!(kb.append(entry("  "), t0()), Err(KbError::EmptyText)));
        assert_eq!(kb.version(), 2);
    }

    #[test]
    fn reference_scale_version() {
        let mut kb = KnowledgeBase::in_memory();
        for i in 0..89 {
            kb.append(entry(&format!("clarification {i}")), t0()).unwrap();
        }
        assert_eq!(kb.version(), 89);
    }

    #[test]
    fn log_persists_and_import_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        {
            let mut kb = KnowledgeBase::open(&path).unwrap();
            kb.append(entry("A"), t0()).unwrap();
            kb.append(entry("B"), t0()).unwrap();
        }
        let kb = KnowledgeBase::open(&path).unwrap();
        assert_eq!(kb.version(), 2);
        assert_eq!(kb.export(), std::fs::read_to_string(&path).unwrap());

        let mut other = KnowledgeBase::in_memory();
        other.append(entry("A"), t0()).unwrap();
        assert_eq!(other.import(&kb.export()).unwrap(), 1);
        assert_eq!(other.import(&kb.export()).unwrap(), 0);
        assert_eq!(other.snapshot().render_for_prompt(), "A\n---\nB");
    }
}
