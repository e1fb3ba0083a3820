//! Record/replay of completions.
//!
//! A cassette is JSON Lines: a header `{"format":"trialmatch-cassette","version":1}`
//! followed by one [`CassetteEntry`] per distinct request digest. Replay never
//! falls through to a live backend; a missing digest is an error.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest, Completion, Usage};

const FORMAT: &str = "trialmatch-cassette";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub model_id: String,
    pub text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Error)]
pub enum CassetteError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("reading cassette {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

enum Mode {
    Replay,
    Record {
        inner: Box<dyn ChatBackend>,
        file: Mutex<File>,
    },
}

pub struct CassetteBackend {
    entries: Mutex<HashMap<String, CassetteEntry>>,
    mode: Mode,
    id: String,
}

impl std::fmt::Debug for CassetteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CassetteBackend").field("id", &self.id).finish()
    }
}

fn read_entries(path: &Path) -> Result<HashMap<String, CassetteEntry>, CassetteError> {
    let io = |source| CassetteError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parse = |line, message: String| CassetteError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut entries = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            let h: Header = serde_json::from_str(&line).map_err(|e| parse(1, e.to_string()))?;
            if h.format != FORMAT || h.version != 1 {
                return Err(parse(1, format!("unsupported header {}/{}", h.format, h.version)));
            }
            continue;
        }
        let e: CassetteEntry =
            serde_json::from_str(&line).map_err(|e| parse(i + 1, e.to_string()))?;
        entries.entry(e.digest.clone()).or_insert(e);
    }
    Ok(entries)
}

impl CassetteBackend {
    pub fn replay(path: &Path) -> Result<Self, CassetteError> {
        Ok(CassetteBackend {
            entries: Mutex::new(read_entries(path)?),
            mode: Mode::Replay,
            id: format!("replay:{}", path.display()),
        })
    }

    /// Answers from the cassette when possible, otherwise forwards to `inner`
    /// and appends the result. An existing file is extended, not truncated.
    pub fn record(path: &Path, inner: Box<dyn ChatBackend>) -> Result<Self, CassetteError> {
        let io = |source| CassetteError::Io {
            path: path.to_path_buf(),
            source,
        };
        let exists = path.exists() && std::fs::metadata(path).map_err(io)?.len() > 0;
        let entries = if exists { read_entries(path)? } else { HashMap::new() };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if !exists {
            let header = Header {
                format: FORMAT.into(),
                version: 1,
            };
            writeln!(file, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
        }
        Ok(CassetteBackend {
            id: format!("record:{}", inner.id()),
            entries: Mutex::new(entries),
            mode: Mode::Record {
                inner,
                file: Mutex::new(file),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ChatBackend for CassetteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let digest = request.digest();
        if let Some(e) = self.entries.lock().unwrap().get(&digest) {
            return Ok(Completion {
                text: e.text.clone(),
                usage: e.usage,
            });
        }
        match &self.mode {
            Mode::Replay => Err(BackendError::CassetteMiss { digest }),
            Mode::Record { inner, file } => {
                let completion = inner.complete(request)?;
                let entry = CassetteEntry {
                    digest: digest.clone(),
                    model_id: request.model_id.clone(),
                    text: completion.text.clone(),
                    usage: completion.usage,
                };
                let mut entries = self.entries.lock().unwrap();
                if let Entry::Vacant(slot) = entries.entry(digest) {
                    let line = serde_json::to_string(&entry).unwrap();
                    writeln!(file.lock().unwrap(), "{line}")
                        .map_err(|e| BackendError::Transport(format!("cassette write: {e}")))?;
                    slot.insert(entry);
                }
                Ok(completion)
            }
        }
    }
}
