//! Normalized Mask-MARS layout:
//!
//! ```text
//! root/frames/<id>/<tracklet>/<frame>.jpg
//! root/masks/<id>/<tracklet>/<frame>.png
//! root/manifest.jsonl   {id, tracklet, camera, split, frame_count} per line
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::io::{list_images, write_jsonl, write_mask, write_rgb};
use crate::dataset::{CorpusKind, DatasetIndex, IndexEntry, SequenceMeta, SequenceSource, Split};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u32,
    pub tracklet: String,
    pub camera: u32,
    pub split: Split,
    pub frame_count: usize,
}

pub fn id_dir(id: u32) -> String {
    format!("{id:04}")
}

fn sequence_dir(base: &Path, id: u32, tracklet: &str) -> PathBuf {
    let padded = base.join(id_dir(id)).join(tracklet);
    if padded.is_dir() {
        return padded;
    }
    let plain = base.join(id.to_string()).join(tracklet);
    if plain.is_dir() {
        plain
    } else {
        padded
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("{}:{}: {e}", path.display(), n + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(records)
}

/// Reads the manifest and checks it against the tree. All mismatches are reported together.
pub fn parse_mask_mars(root: &Path) -> Result<DatasetIndex> {
    parse_mask_mars_parts(&root.join("frames"), &root.join("masks"), &root.join(MANIFEST))
}

/// As [`parse_mask_mars`] with the two trees and the manifest given separately.
pub fn parse_mask_mars_parts(frames_root: &Path, masks_root: &Path, manifest: &Path) -> Result<DatasetIndex> {
    let records = read_manifest(manifest)?;
    let mut problems = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        let key = format!("{}/{}", id_dir(r.id), r.tracklet);
        if !seen.insert(key.clone()) {
            problems.push(format!("{key}: duplicate manifest record"));
            continue;
        }
        let frame_dir = sequence_dir(frames_root, r.id, &r.tracklet);
        let mask_dir = sequence_dir(masks_root, r.id, &r.tracklet);
        let mut ok = true;
        for dir in [&frame_dir, &mask_dir] {
            if !dir.is_dir() {
                problems.push(format!("{key}: missing directory {}", dir.display()));
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        let frames = list_images(&frame_dir)?;
        let masks = list_images(&mask_dir)?;
        if frames.len() != r.frame_count || masks.len() != r.frame_count {
            problems.push(format!(
                "{key}: manifest says {} frames, found {} frames and {} masks",
                r.frame_count,
                frames.len(),
                masks.len()
            ));
            continue;
        }
        entries.push(IndexEntry {
            meta: SequenceMeta {
                identity: r.id,
                camera: r.camera,
                key,
                split: r.split,
                gait: None,
            },
            source: SequenceSource::OnDisk { frames, masks },
            effective: None,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(DatasetIndex::new(CorpusKind::MaskMars, entries))
}

/// Tracklet name without the id prefix used in index keys.
pub fn tracklet_name(meta: &SequenceMeta) -> String {
    meta.key.rsplit('/').next().unwrap_or(&meta.key).to_string()
}

/// Materializes an index in the normalized layout (all frames of every entry).
pub fn write_mask_mars(index: &DatasetIndex, root: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let tracklet = tracklet_name(&entry.meta);
        let id = entry.meta.identity;
        let frame_dir = root.join("frames").join(id_dir(id)).join(&tracklet);
        let mask_dir = root.join("masks").join(id_dir(id)).join(&tracklet);
        for i in 0..entry.len() {
            write_rgb(&entry.load_frame(i)?, &frame_dir.join(format!("{i:04}.jpg")))?;
            write_mask(&entry.load_mask(i)?, &mask_dir.join(format!("{i:04}.png")))?;
        }
        records.push(ManifestRecord {
            id,
            tracklet,
            camera: entry.meta.camera,
            split: entry.meta.split,
            frame_count: entry.len(),
        });
    }
    write_jsonl(&root.join(MANIFEST), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{RawMask, RgbFrame, SequenceSample};

    fn tiny_index(ids: &[(u32, Split)]) -> DatasetIndex {
        let entries = ids
            .iter()
            .enumerate()
            .map(|(n, &(id, split))| {
                let frames = vec![RgbFrame::new(4, 2, vec![100; 24]).unwrap(); 2];
                let masks = vec![RawMask::filled(4, 2, true).unwrap(); 2];
                let meta = SequenceMeta {
                    identity: id,
                    camera: 1,
                    key: format!("{}/t{n}", id_dir(id)),
                    split,
                    gait: None,
                };
                IndexEntry::in_memory(SequenceSample::new(frames, masks, meta).unwrap())
            })
            .collect();
        DatasetIndex::new(CorpusKind::Synthetic, entries)
    }

    #[test]
    fn split_counts_echo_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_index(&[
            (1, Split::Train),
            (2, Split::Train),
            (3, Split::Train),
            (3, Split::Train),
            (4, Split::Query),
            (5, Split::Query),
            (4, Split::Gallery),
        ]);
        write_mask_mars(&index, dir.path()).unwrap();
        let parsed = parse_mask_mars(dir.path()).unwrap();
        assert_eq!(parsed.split_counts(Split::Train).ids, 3);
        assert_eq!(parsed.split_counts(Split::Query).ids, 2);
        assert_eq!(parsed.sequence_count(), 7);
        assert_eq!(parsed.entries[0].load_mask(1).unwrap(), RawMask::filled(4, 2, true).unwrap());
    }

    #[test]
    fn missing_directory_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_mask_mars(&tiny_index(&[(7, Split::Train)]), dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("masks/0007/t0")).unwrap();
        match parse_mask_mars(dir.path()) {
            Err(Error::Validation(msgs)) => {
                assert_eq!(msgs.len(), 1);
                assert!(msgs[0].contains("0007/t0") && msgs[0].contains("missing directory"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST),
            r#"{"id":1,"tracklet":"a","camera":0,"split":"train","frame_count":1,"extra":2}"#,
        )
        .unwrap();
        assert!(matches!(parse_mask_mars(dir.path()), Err(Error::Validation(_))));
    }
}
