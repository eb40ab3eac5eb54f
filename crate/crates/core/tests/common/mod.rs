#![allow(dead_code)]

use std::path::Path;

use seqmasks::dataset::synthetic::{generate, SplitMode, SyntheticConfig};
use seqmasks::dataset::{filter_corpus, AugmentConfig, DatasetIndex, SampleConfig};
use seqmasks::model::BackboneConfig;
use seqmasks::trainer::TrainConfig;

/// Filtered synthetic corpus: `ids` walkers × `seqs` sequences of 12 frames.
pub fn corpus(ids: usize, seqs: usize, split: SplitMode, seed: u64) -> DatasetIndex {
    let cfg = SyntheticConfig {
        identities: ids,
        sequences_per_id: seqs,
        frames_per_sequence: 12,
        split,
        seed,
        ..Default::default()
    };
    filter_corpus(&generate(&cfg).index, 8, 0.15).unwrap().index
}

/// Small and fast: 64×32 frames, a 32-channel reference backbone, P=2 Kseq=2 T=4 K=4.
pub fn config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.backbone = BackboneConfig::Reference { channels: 32 };
    cfg.model.bottleneck_hidden = 64;
    cfg.batch = SampleConfig {
        p: 2,
        kseq: 2,
        t: 4,
        k: 4,
        shared_frames: false,
        augment: true,
    };
    cfg.augment = AugmentConfig {
        frame_height: 64,
        frame_width: 32,
        mask_height: 4,
        mask_width: 2,
        ..Default::default()
    };
    cfg.extract.chunk = 4;
    cfg.epochs = 1;
    cfg.steps_per_epoch = Some(2);
    cfg.log_every = 0;
    cfg.output = out.to_path_buf();
    cfg
}
