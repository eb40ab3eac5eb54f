use serde::{Deserialize, Serialize};

use crate::dataset::mask::{is_effective, validate_threshold};
use crate::dataset::{DatasetIndex, IndexEntry};
use crate::error::{config_err, Result};

/// One line of a skip/validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u32>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub index: DatasetIndex,
    /// Entries that could not be read.
    pub skipped: Vec<SkipRecord>,
    /// Entries dropped for having too few effective masks.
    pub dropped: Vec<SkipRecord>,
}

fn effective_indices(entry: &IndexEntry, threshold: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for i in 0..entry.len() {
        if is_effective(&entry.load_mask(i)?, threshold)? {
            out.push(i);
        }
    }
    Ok(out)
}

/// Keeps the sequences with at least `min_effective` effective masks and records their
/// effective frame indices. Unreadable entries go to the skip report.
pub fn filter_corpus(index: &DatasetIndex, min_effective: usize, threshold: f64) -> Result<FilterOutcome> {
    validate_threshold(threshold).map_err(|e| config_err!("{e}"))?;
    if min_effective == 0 {
        return Err(config_err!("minimum effective mask count must be at least 1"));
    }
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    let mut dropped = Vec::new();
    for entry in &index.entries {
        match effective_indices(entry, threshold) {
            Ok(effective) if effective.len() >= min_effective => {
                let mut e = entry.clone();
                e.effective = Some(effective);
                kept.push(e);
            }
            Ok(effective) => dropped.push(SkipRecord {
                key: entry.meta.key.clone(),
                identity: Some(entry.meta.identity),
                reason: format!(
                    "{} effective masks, need at least {min_effective}",
                    effective.len()
                ),
            }),
            Err(err) => {
                log::warn!("skipping `{}`: {err}", entry.meta.key);
                skipped.push(SkipRecord {
                    key: entry.meta.key.clone(),
                    identity: Some(entry.meta.identity),
                    reason: err.to_string(),
                })
            }
        }
    }
    let mut out = DatasetIndex::new(index.kind, kept);
    out.expected_slots = index.expected_slots;
    Ok(FilterOutcome {
        index: out,
        skipped,
        dropped,
    })
}
