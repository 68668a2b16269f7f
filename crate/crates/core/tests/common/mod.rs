#![allow(dead_code)]

use std::path::Path;

use pgode::simkit::{self, Split, SplitCounts, SplitSpec, System, TrajectorySample};
use pgode::trainer::TrainConfig;

pub fn tiny_spec(system: System) -> SplitSpec {
    let mut spec = SplitSpec::desk_scale(system);
    spec.counts = SplitCounts {
        train: 8,
        val: 4,
        test_id: 4,
        test_ood: 4,
    };
    spec.n_objects = 3;
    spec.n_frames = 16;
    spec
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        condition_length: 4,
        prediction_length: 4,
        batch_size: 4,
        epochs: 2,
        lr: 1e-3,
        k: 2,
        d: 8,
        encoder_layers: 1,
        decoder_hidden: 8,
        critic_hidden: 8,
        substeps: 1,
        ..TrainConfig::default()
    }
}

pub struct Splits {
    pub train: Vec<TrajectorySample>,
    pub val: Vec<TrajectorySample>,
    pub test_id: Vec<TrajectorySample>,
    pub test_ood: Vec<TrajectorySample>,
}

pub fn tiny_data(dir: &Path, seed: u64) -> Splits {
    simkit::build_dataset(&tiny_spec(System::Springs), System::Springs, seed, dir, true).unwrap();
    let load = |s| simkit::load_split(dir, s).unwrap();
    Splits {
        train: load(Split::Train),
        val: load(Split::Val),
        test_id: load(Split::TestId),
        test_ood: load(Split::TestOod),
    }
}
