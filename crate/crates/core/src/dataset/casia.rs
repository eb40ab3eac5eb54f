//! CASIA-B silhouette layout: `root/<id:3>/<cond>-<seq:2>/<view:3>/<frame>.png`.

use std::path::Path;

use crate::dataset::filter::SkipRecord;
use crate::dataset::io::{list_dirs, list_images};
use crate::dataset::{
    view_slot, Condition, CorpusKind, DatasetIndex, GaitMeta, IndexEntry, SequenceMeta, SequenceSource, Split,
    VIEW_ANGLES,
};
use crate::error::Result;

/// Identities up to and including this one form the training split.
pub const LAST_TRAIN_ID: u32 = 74;
/// Sequences per identity: (6 NM + 2 BG + 2 CL) × 11 views.
pub const SLOTS_PER_ID: usize = 110;
/// NM sequences 1..=4 of test identities form the gallery.
pub const GALLERY_NM_SEQS: u8 = 4;

#[derive(Debug, Clone)]
pub struct CasiaOutcome {
    pub index: DatasetIndex,
    /// Malformed folder names and empty sequences.
    pub skipped: Vec<SkipRecord>,
    /// Expected `<id>/<cond>-<seq>/<view>` slots absent from the tree.
    pub missing: Vec<String>,
}

pub fn split_for(identity: u32, condition: Condition, seq_no: u8) -> Split {
    if identity <= LAST_TRAIN_ID {
        Split::Train
    } else if condition == Condition::Normal && seq_no <= GALLERY_NM_SEQS {
        Split::Gallery
    } else {
        Split::Query
    }
}

fn parse_id(name: &str) -> Option<u32> {
    (name.len() == 3 && name.bytes().all(|b| b.is_ascii_digit())).then(|| name.parse().ok())?
}

fn parse_sequence(name: &str) -> Option<(Condition, u8)> {
    let (cond, seq) = name.split_once('-')?;
    if seq.len() != 2 || !seq.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let condition: Condition = cond.parse().ok()?;
    let seq_no: u8 = seq.parse().ok()?;
    (1..=condition.sequences()).contains(&seq_no).then_some((condition, seq_no))
}

fn parse_view(name: &str) -> Option<u16> {
    if name.len() != 3 || !name.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let v: u16 = name.parse().ok()?;
    view_slot(v).map(|_| v)
}

pub fn sequence_key(identity: u32, condition: Condition, seq_no: u8, view: u16) -> String {
    format!("{identity:03}/{}-{seq_no:02}/{view:03}", condition.code())
}

/// Walks a CASIA-B tree. With `frames_root`, RGB frames are read from the same relative
/// layout there; otherwise frames are gray renderings of the silhouettes.
pub fn parse_casia_b(root: &Path, frames_root: Option<&Path>) -> Result<CasiaOutcome> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut missing = Vec::new();
    let mut ids = Vec::new();
    if !root.is_dir() {
        log::warn!("CASIA-B root {} does not exist; empty index", root.display());
    }
    let id_dirs = if root.is_dir() { list_dirs(root)? } else { vec![] };
    for id_name in id_dirs {
        let Some(identity) = parse_id(&id_name) else {
            skipped.push(SkipRecord {
                key: id_name.clone(),
                identity: None,
                reason: "identity folder must be 3 digits".into(),
            });
            continue;
        };
        ids.push(identity);
        let mut present = std::collections::BTreeSet::new();
        for seq_name in list_dirs(&root.join(&id_name))? {
            let Some((condition, seq_no)) = parse_sequence(&seq_name) else {
                skipped.push(SkipRecord {
                    key: format!("{id_name}/{seq_name}"),
                    identity: Some(identity),
                    reason: "sequence folder must be <nm|bg|cl>-<2 digits> within range".into(),
                });
                continue;
            };
            for view_name in list_dirs(&root.join(&id_name).join(&seq_name))? {
                let key = format!("{id_name}/{seq_name}/{view_name}");
                let Some(view) = parse_view(&view_name) else {
                    skipped.push(SkipRecord {
                        key,
                        identity: Some(identity),
                        reason: "view folder must be one of 000, 018, …, 180".into(),
                    });
                    continue;
                };
                let rel = Path::new(&id_name).join(&seq_name).join(&view_name);
                let masks = list_images(&root.join(&rel))?;
                if masks.is_empty() {
                    skipped.push(SkipRecord {
                        key,
                        identity: Some(identity),
                        reason: "no silhouette frames".into(),
                    });
                    continue;
                }
                let source = match frames_root {
                    Some(fr) => {
                        let frames = list_images(&fr.join(&rel))?;
                        if frames.len() != masks.len() {
                            skipped.push(SkipRecord {
                                key,
                                identity: Some(identity),
                                reason: format!("{} frames for {} silhouettes", frames.len(), masks.len()),
                            });
                            continue;
                        }
                        SequenceSource::OnDisk { frames, masks }
                    }
                    None => SequenceSource::MasksOnly { masks },
                };
                present.insert((condition, seq_no, view));
                entries.push(IndexEntry {
                    meta: SequenceMeta {
                        identity,
                        camera: view_slot(view).unwrap() as u32,
                        key: sequence_key(identity, condition, seq_no, view),
                        split: split_for(identity, condition, seq_no),
                        gait: Some(GaitMeta {
                            view,
                            condition,
                            seq_no,
                        }),
                    },
                    source,
                    effective: None,
                });
            }
        }
        for condition in Condition::ALL {
            for seq_no in 1..=condition.sequences() {
                for view in VIEW_ANGLES {
                    if !present.contains(&(condition, seq_no, view)) {
                        missing.push(sequence_key(identity, condition, seq_no, view));
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        log::warn!("CASIA-B tree is missing {} of {} sequence slots", missing.len(), ids.len() * SLOTS_PER_ID);
    }
    let mut index = DatasetIndex::new(CorpusKind::CasiaB, entries);
    index.expected_slots = Some(ids.len() * SLOTS_PER_ID);
    Ok(CasiaOutcome {
        index,
        skipped,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::io::write_mask;
    use crate::dataset::RawMask;
    use std::fs;

    #[test]
    fn split_rule_by_numeric_id() {
        assert_eq!(split_for(74, Condition::Normal, 1), Split::Train);
        assert_eq!(split_for(75, Condition::Normal, 1), Split::Gallery);
        assert_eq!(split_for(75, Condition::Normal, 5), Split::Query);
        assert_eq!(split_for(120, Condition::Coat, 1), Split::Query);
    }

    #[test]
    fn empty_root_gives_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let out = parse_casia_b(dir.path(), None).unwrap();
        assert_eq!(out.index.sequence_count(), 0);
        assert_eq!(out.index.id_count(), 0);
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn malformed_names_skipped_partial_tree_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let m = RawMask::filled(8, 4, true).unwrap();
        write_mask(&m, &dir.path().join("074/nm-01/090/001.png")).unwrap();
        write_mask(&m, &dir.path().join("075/bg-02/018/001.png")).unwrap();
        write_mask(&m, &dir.path().join("075/bg-03/018/001.png")).unwrap();
        write_mask(&m, &dir.path().join("075/xx-01/018/001.png")).unwrap();
        write_mask(&m, &dir.path().join("075/nm-01/017/001.png")).unwrap();
        write_mask(&m, &dir.path().join("abc/nm-01/000/001.png")).unwrap();
        fs::create_dir_all(dir.path().join("075/cl-01/000")).unwrap();
        let out = parse_casia_b(dir.path(), None).unwrap();
        assert_eq!(out.index.id_count(), 2);
        assert_eq!(out.index.sequence_count(), 2);
        assert_eq!(out.index.expected_slots, Some(220));
        assert_eq!(out.skipped.len(), 5);
        assert_eq!(out.missing.len(), 218);
        let e = &out.index.entries[0];
        assert_eq!(e.meta.split, Split::Train);
        assert_eq!(out.index.entries[1].meta.split, Split::Query);
        assert_eq!(e.meta.gait.unwrap().view, 90);
    }
}
