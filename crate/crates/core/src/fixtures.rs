//! Data packaged with the crate: the six-trial protocol set and the shape
//! of the original labeled cohort.

use chrono::NaiveDate;

use crate::eval::{Label, LabelSource, LabeledPair};
use crate::protocol::{load_protocol_sources, Trial};

const PROTOCOLS: [(&str, &str); 6] = [
    ("16-323.toml", include_str!("../data/protocols/16-323.toml")),
    ("18-486.toml", include_str!("../data/protocols/18-486.toml")),
    ("19-300.toml", include_str!("../data/protocols/19-300.toml")),
    ("19-410.toml", include_str!("../data/protocols/19-410.toml")),
    ("21-283.toml", include_str!("../data/protocols/21-283.toml")),
    ("22-259.toml", include_str!("../data/protocols/22-259.toml")),
];

/// The packaged breast-oncology protocol set, in protocol-number order.
pub fn six_trial_protocols() -> Vec<Trial> {
    load_protocol_sources(PROTOCOLS).expect("packaged protocols are valid")
}

/// Raw `(file name, contents)` pairs of the packaged protocols.
pub fn protocol_sources() -> &'static [(&'static str, &'static str)] {
    &PROTOCOLS
}

/// Per-trial size of the original labeled screening cohort:
/// `(trial id, eligible pairs, ineligible pairs)`.
pub const REFERENCE_COHORT: [(&str, usize, usize); 6] = [
    ("16-323", 387, 13),
    ("18-486", 56, 5),
    ("19-300", 167, 5),
    ("19-410", 29, 3),
    ("21-283", 27, 6),
    ("22-259", 30, 3),
];

/// Labeled pairs shaped like the original cohort. Each patient appears in
/// exactly one pair; ids are `REF-0001` onward in trial order.
pub fn reference_labels() -> Vec<LabeledPair> {
    let date = NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date");
    let mut n = 0;
    let mut out = Vec::new();
    for (trial, eligible, ineligible) in REFERENCE_COHORT {
        for i in 0..eligible + ineligible {
            n += 1;
            out.push(LabeledPair {
                patient_id: format!("REF-{n:04}"),
                trial_id: trial.to_string(),
                label: if i < eligible { Label::Eligible } else { Label::NotEligible },
                label_source: LabelSource::Original,
                determination_date: date,
            });
        }
    }
    out
}
