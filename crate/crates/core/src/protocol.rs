//! Trials, eligibility criteria and the criterion flag taxonomy.
//!
//! Protocols are stored one trial per TOML file. Flags are data: a criterion
//! marked `vacuous` or `requires-human-review` is never sent to a model and
//! resolves to a predetermined status instead.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable criterion identifier, e.g. `"inclusion criterion 3"`.
pub type CriterionId = String;
/// Protocol number, e.g. `"16-323"`.
pub type TrialId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    Inclusion,
    Exclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionFlag {
    #[default]
    Normal,
    /// Always satisfied regardless of the patient.
    Vacuous,
    /// Outside automatable scope; left to a clinician.
    RequiresHumanReview,
}

/// The closed three-valued assessment outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionStatus {
    Met,
    NotMet,
    UnableToDetermine,
}

impl CriterionStatus {
    pub const ALL: [CriterionStatus; 3] = [
        CriterionStatus::Met,
        CriterionStatus::NotMet,
        CriterionStatus::UnableToDetermine,
    ];

    /// Human-readable label used in prompts and determination lines.
    pub fn label(self) -> &'static str {
        match self {
            CriterionStatus::Met => "Met",
            CriterionStatus::NotMet => "Not Met",
            CriterionStatus::UnableToDetermine => "Unable to determine",
        }
    }
}

impl fmt::Display for CriterionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetastaticGroup {
    MetastaticRequired,
    MetastaticExcluded,
    #[default]
    None,
}

impl MetastaticGroup {
    pub fn opposite(self) -> Option<MetastaticGroup> {
        match self {
            MetastaticGroup::MetastaticRequired => Some(MetastaticGroup::MetastaticExcluded),
            MetastaticGroup::MetastaticExcluded => Some(MetastaticGroup::MetastaticRequired),
            MetastaticGroup::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criterion {
    pub id: CriterionId,
    pub kind: CriterionKind,
    #[serde(default)]
    pub flag: CriterionFlag,
    pub text: String,
}

impl Criterion {
    /// Predetermined answer for flagged criteria; `None` means the criterion
    /// must be assessed by the expert panel.
    pub fn resolve_flagged(&self) -> Option<CriterionStatus> {
        resolve_flagged(self)
    }
}

pub fn resolve_flagged(criterion: &Criterion) -> Option<CriterionStatus> {
    match criterion.flag {
        CriterionFlag::Normal => None,
        CriterionFlag::Vacuous => Some(CriterionStatus::Met),
        CriterionFlag::RequiresHumanReview => Some(CriterionStatus::UnableToDetermine),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trial {
    pub id: TrialId,
    pub nct_id: String,
    #[serde(default)]
    pub metastatic_group: MetastaticGroup,
    pub criteria: Vec<Criterion>,
}

impl Trial {
    pub fn criterion(&self, id: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.id == id)
    }

    pub fn counts(&self) -> CriterionCounts {
        let mut counts = CriterionCounts::default();
        for c in &self.criteria {
            match c.kind {
                CriterionKind::Inclusion => counts.inclusion += 1,
                CriterionKind::Exclusion => counts.exclusion += 1,
            }
            match c.flag {
                CriterionFlag::Normal => {}
                CriterionFlag::Vacuous => counts.vacuous += 1,
                CriterionFlag::RequiresHumanReview => counts.requires_human_review += 1,
            }
        }
        counts
    }

    /// Checks the invariants that serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("trial id is empty".into());
        }
        let mut seen = HashSet::new();
        for (i, c) in self.criteria.iter().enumerate() {
            if c.id.trim().is_empty() {
                return Err(format!("criteria[{i}]: empty id"));
            }
            if c.text.trim().is_empty() {
                return Err(format!("criteria[{i}] ({}): empty text", c.id));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(format!("criteria[{i}]: duplicate criterion id `{}`", c.id));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("trial serializes to toml")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CriterionCounts {
    pub inclusion: usize,
    pub exclusion: usize,
    pub vacuous: usize,
    pub requires_human_review: usize,
}

impl CriterionCounts {
    pub fn total(&self) -> usize {
        self.inclusion + self.exclusion
    }
}

impl std::ops::Add for CriterionCounts {
    type Output = CriterionCounts;
    fn add(self, o: CriterionCounts) -> CriterionCounts {
        CriterionCounts {
            inclusion: self.inclusion + o.inclusion,
            exclusion: self.exclusion + o.exclusion,
            vacuous: self.vacuous + o.vacuous,
            requires_human_review: self.requires_human_review + o.requires_human_review,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
    #[error("duplicate trial id `{id}` in {first} and {second}")]
    DuplicateTrial {
        id: TrialId,
        first: String,
        second: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parses one protocol file. `name` is only used in error messages.
pub fn parse_protocol(name: &str, source: &str) -> Result<Trial, ProtocolError> {
    let trial: Trial = toml::from_str(source).map_err(|e| {
        let line = e
            .span()
            .map(|span| source[..span.start.min(source.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        ProtocolError::Parse {
            file: name.to_string(),
            line,
            message: e.message().to_string(),
        }
    })?;
    trial.validate().map_err(|message| ProtocolError::Invalid {
        file: name.to_string(),
        message,
    })?;
    Ok(trial)
}

/// Parses a set of `(name, contents)` protocol sources, rejecting duplicate trial ids.
pub fn load_protocol_sources<'a, I>(sources: I) -> Result<Vec<Trial>, ProtocolError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut trials: Vec<(String, Trial)> = Vec::new();
    for (name, source) in sources {
        let trial = parse_protocol(name, source)?;
        if let Some((first, _)) = trials.iter().find(|(_, t)| t.id == trial.id) {
            return Err(ProtocolError::DuplicateTrial {
                id: trial.id,
                first: first.clone(),
                second: name.to_string(),
            });
        }
        trials.push((name.to_string(), trial));
    }
    Ok(trials.into_iter().map(|(_, t)| t).collect())
}

/// Loads the given protocol files in order.
pub fn load_protocols<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<Trial>, ProtocolError> {
    let mut contents = Vec::with_capacity(paths.len());
    for p in paths {
        let path = p.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ProtocolError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        contents.push((path.display().to_string(), text));
    }
    load_protocol_sources(contents.iter().map(|(n, s)| (n.as_str(), s.as_str())))
}

/// Loads every `*.toml` file in `dir`, sorted by file name.
pub fn load_protocol_dir(dir: &Path) -> Result<Vec<Trial>, ProtocolError> {
    let io_err = |source| ProtocolError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.extension().is_some_and(|e| e == "toml") {
            paths.push(path);
        }
    }
    paths.sort();
    load_protocols(&paths)
}
