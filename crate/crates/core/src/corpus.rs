//! Longitudinal patient documents: ingest, cutoff filtering and specialty routing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::Tokenizer;

pub type PatientId = String;
pub type DocId = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientDocument {
    pub doc_id: DocId,
    pub patient_id: PatientId,
    pub note_type: String,
    pub created_date: NaiveDate,
    pub text: String,
}

/// Clinical specialties of the expert panel, in routing precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Specialty {
    Pathology,
    Radiology,
    SurgicalOncology,
    MedicalOncology,
    RadiationOncology,
    GeneralMedicine,
}

impl Specialty {
    pub const ALL: [Specialty; 6] = [
        Specialty::Pathology,
        Specialty::Radiology,
        Specialty::SurgicalOncology,
        Specialty::MedicalOncology,
        Specialty::RadiationOncology,
        Specialty::GeneralMedicine,
    ];

    /// The role name an agent of this specialty goes by.
    pub fn role_name(self) -> &'static str {
        match self {
            Specialty::Pathology => "pathologist",
            Specialty::Radiology => "radiologist",
            Specialty::SurgicalOncology => "surgical oncologist",
            Specialty::MedicalOncology => "medical oncologist",
            Specialty::RadiationOncology => "radiation oncologist",
            Specialty::GeneralMedicine => "general medicine practitioner",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Specialty::Pathology => "pathology",
            Specialty::Radiology => "radiology",
            Specialty::SurgicalOncology => "surgical-oncology",
            Specialty::MedicalOncology => "medical-oncology",
            Specialty::RadiationOncology => "radiation-oncology",
            Specialty::GeneralMedicine => "general-medicine",
        }
    }

    /// Accepts role names ("pathologist"), slugs and a few common short forms.
    pub fn from_name(name: &str) -> Option<Specialty> {
        let n = name
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase()
            .replace(['_', '-'], " ");
        let s = match n.as_str() {
            "pathologist" | "pathology" => Specialty::Pathology,
            "radiologist" | "radiology" => Specialty::Radiology,
            "surgical oncologist" | "surgical oncology" | "surgeon" => Specialty::SurgicalOncology,
            "medical oncologist" | "medical oncology" => Specialty::MedicalOncology,
            "radiation oncologist" | "radiation oncology" => Specialty::RadiationOncology,
            "general medicine practitioner" | "general medicine" | "generalist"
            | "general practitioner" => Specialty::GeneralMedicine,
            _ => return None,
        };
        Some(s)
    }
}

impl fmt::Display for Specialty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("general medicine is the fallback specialty and cannot have keywords")]
    GeneralMedicineKeywords,
    #[error("keyword `{keyword}` is assigned to both {first} and {second}")]
    Overlap {
        keyword: String,
        first: Specialty,
        second: Specialty,
    },
    #[error("empty keyword for {0}")]
    EmptyKeyword(Specialty),
}

/// Keyword table mapping note types to specialties.
///
/// Specialties are checked in declaration order and the first keyword hit
/// wins; a note type matching an excluded keyword is dropped before any
/// specialty is considered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialtyRouting {
    keyword_map: Vec<(Specialty, Vec<String>)>,
    excluded_keywords: Vec<String>,
}

impl SpecialtyRouting {
    pub fn new(
        keyword_map: Vec<(Specialty, Vec<String>)>,
        excluded_keywords: Vec<String>,
    ) -> Result<Self, RoutingError> {
        let mut owner: BTreeMap<String, Specialty> = BTreeMap::new();
        let mut map = Vec::with_capacity(keyword_map.len());
        for (specialty, keywords) in keyword_map {
            if specialty == Specialty::GeneralMedicine && !keywords.is_empty() {
                return Err(RoutingError::GeneralMedicineKeywords);
            }
            let mut lowered = Vec::with_capacity(keywords.len());
            for k in keywords {
                let k = k.trim().to_lowercase();
                if k.is_empty() {
                    return Err(RoutingError::EmptyKeyword(specialty));
                }
                if let Some(&first) = owner.get(&k) {
                    if first != specialty {
                        return Err(RoutingError::Overlap {
                            keyword: k,
                            first,
                            second: specialty,
                        });
                    }
                }
                owner.insert(k.clone(), specialty);
                lowered.push(k);
            }
            map.push((specialty, lowered));
        }
        Ok(SpecialtyRouting {
            keyword_map: map,
            excluded_keywords: excluded_keywords
                .into_iter()
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect(),
        })
    }

    pub fn keyword_map(&self) -> &[(Specialty, Vec<String>)] {
        &self.keyword_map
    }

    pub fn excluded_keywords(&self) -> &[String] {
        &self.excluded_keywords
    }

    /// Routes a note type; `None` means the document is dropped.
    pub fn route(&self, note_type: &str) -> Option<Specialty> {
        let nt = note_type.to_lowercase();
        if self.excluded_keywords.iter().any(|k| nt.contains(k.as_str())) {
            return None;
        }
        self.keyword_map
            .iter()
            .find(|(_, kws)| kws.iter().any(|k| nt.contains(k.as_str())))
            .map(|(s, _)| *s)
            .or(Some(Specialty::GeneralMedicine))
    }
}

impl Default for SpecialtyRouting {
    fn default() -> Self {
        let kw = |ks: &[&str]| ks.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        SpecialtyRouting::new(
            vec![
                (Specialty::Pathology, kw(&["patholog"])),
                (Specialty::Radiology, kw(&["radiolog", "imaging"])),
                (Specialty::SurgicalOncology, kw(&["surg", "operative"])),
                (
                    Specialty::MedicalOncology,
                    kw(&["medical oncolog", "chemo", "infusion"]),
                ),
                (Specialty::RadiationOncology, kw(&["radiation", "rad onc"])),
            ],
            kw(&["nursing", "rehabilitation", "survivorship"]),
        )
        .expect("default routing is consistent")
    }
}

pub fn assign_specialty(doc: &PatientDocument, routing: &SpecialtyRouting) -> Option<Specialty> {
    routing.route(&doc.note_type)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("record {index}: duplicate doc_id `{doc_id}` for patient `{patient_id}`")]
    DuplicateDoc {
        index: usize,
        patient_id: PatientId,
        doc_id: DocId,
    },
    #[error("unknown patient `{0}`")]
    UnknownPatient(PatientId),
    #[error("reading corpus: {0}")]
    Io(#[from] std::io::Error),
}

/// Patient-indexed document collection. Append-only while ingesting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    patients: BTreeMap<PatientId, Vec<PatientDocument>>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a document; `index` is only used in the error.
    pub fn insert(&mut self, index: usize, doc: PatientDocument) -> Result<(), CorpusError> {
        let docs = self.patients.entry(doc.patient_id.clone()).or_default();
        if docs.iter().any(|d| d.doc_id == doc.doc_id) {
            return Err(CorpusError::DuplicateDoc {
                index,
                patient_id: doc.patient_id,
                doc_id: doc.doc_id,
            });
        }
        docs.push(doc);
        Ok(())
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &PatientId> {
        self.patients.keys()
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    pub fn document_count(&self) -> usize {
        self.patients.values().map(Vec::len).sum()
    }

    pub fn documents(&self, patient_id: &str) -> Option<&[PatientDocument]> {
        self.patients.get(patient_id).map(Vec::as_slice)
    }

    pub fn sizes(&self) -> BTreeMap<&str, usize> {
        self.patients
            .iter()
            .map(|(p, d)| (p.as_str(), d.len()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PatientDocument> {
        self.patients.values().flatten()
    }
}

/// Parses one newline-delimited JSON record per line. Blank lines are skipped.
pub fn ingest<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: PatientDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            index,
            message: e.to_string(),
        })?;
        corpus.insert(index, doc)?;
        index += 1;
    }
    Ok(corpus)
}

pub fn ingest_records<I>(records: I) -> Result<Corpus, CorpusError>
where
    I: IntoIterator<Item = PatientDocument>,
{
    let mut corpus = Corpus::new();
    for (i, doc) in records.into_iter().enumerate() {
        corpus.insert(i, doc)?;
    }
    Ok(corpus)
}

/// Serializes documents in the ingest format.
pub fn to_ndjson<'a, I>(docs: I) -> String
where
    I: IntoIterator<Item = &'a PatientDocument>,
{
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

/// Documents created strictly before `cutoff`; documents on or after the
/// eligibility determination date are excluded to avoid leakage.
pub fn filter_by_cutoff<'a>(
    corpus: &'a Corpus,
    patient_id: &str,
    cutoff: NaiveDate,
) -> Result<Vec<&'a PatientDocument>, CorpusError> {
    let docs = corpus
        .documents(patient_id)
        .ok_or_else(|| CorpusError::UnknownPatient(patient_id.to_string()))?;
    Ok(docs.iter().filter(|d| d.created_date < cutoff).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub patient_count: usize,
    pub document_count: usize,
    pub token_count: usize,
    pub mean_documents_per_patient: f64,
    pub mean_tokens_per_patient: f64,
}

pub fn corpus_stats(corpus: &Corpus, tokenizer: &dyn Tokenizer) -> CorpusStats {
    let document_count = corpus.document_count();
    let token_count = corpus.iter().map(|d| tokenizer.count(&d.text)).sum();
    let patients = corpus.patient_count();
    let mean = |total: usize| {
        if patients == 0 {
            0.0
        } else {
            total as f64 / patients as f64
        }
    };
    CorpusStats {
        patient_count: patients,
        document_count,
        token_count,
        mean_documents_per_patient: mean(document_count),
        mean_tokens_per_patient: mean(token_count),
    }
}
