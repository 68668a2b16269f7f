mod common;

use std::path::Path;

use pgode::simkit::{self, Split, System};
use sha2::{Digest, Sha256};

fn digest(dir: &Path) -> Vec<(String, String)> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let bytes = std::fs::read(dir.join(&n)).unwrap();
            let h = Sha256::digest(&bytes);
            let hex: String = h.iter().map(|b| format!("{b:02x}")).collect();
            (n, hex)
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for system in [System::Springs, System::Charged] {
        let spec = common::tiny_spec(system);
        simkit::build_dataset(&spec, system, 11, &a, true).unwrap();
        simkit::build_dataset(&spec, system, 11, &b, true).unwrap();
        simkit::build_dataset(&spec, system, 12, &c, true).unwrap();
        let da = digest(&a);
        assert_eq!(da.len(), 5);
        assert_eq!(da, digest(&b));
        let dc = digest(&c);
        assert!(da.iter().zip(&dc).filter(|(x, _)| x.0 != "manifest.json").all(|(x, y)| x.1 != y.1));
    }
}

#[test]
fn existing_dataset_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = common::tiny_spec(System::Springs);
    simkit::build_dataset(&spec, System::Springs, 0, tmp.path(), false).unwrap();
    let again = simkit::build_dataset(&spec, System::Springs, 0, tmp.path(), false);
    assert!(matches!(again, Err(pgode::Error::Config(_))));
    simkit::build_dataset(&spec, System::Springs, 0, tmp.path(), true).unwrap();
}

#[test]
fn splits_follow_their_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::tiny_data(tmp.path(), 3);
    let spec = common::tiny_spec(System::Springs);
    let m = simkit::load_manifest(tmp.path()).unwrap();
    assert_eq!(m.spec, spec);
    assert_eq!(m.seed, 3);
    for (split, samples) in [
        (Split::Train, &data.train),
        (Split::Val, &data.val),
        (Split::TestId, &data.test_id),
        (Split::TestOod, &data.test_ood),
    ] {
        assert_eq!(samples.len(), spec.counts.get(split));
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.split, split);
            assert_eq!(s.id, format!("{}-{i:05}", split.name()));
            assert_eq!((s.n_objects, s.n_frames), (3, 16));
            assert!(spec.ood_box.contains(&s.params));
            assert_eq!(spec.train_box.contains(&s.params), split != Split::TestOod);
        }
    }
}

#[test]
fn corrupt_split_file_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    common::tiny_data(tmp.path(), 0);
    let path = tmp.path().join("val.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(simkit::load_split(tmp.path(), Split::Val), Err(pgode::Error::Format(_))));
    assert!(simkit::load_split(&tmp.path().join("missing"), Split::Val).is_err());
}
