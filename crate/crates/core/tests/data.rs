use std::collections::BTreeSet;
use std::path::Path;

use waterformer::data::{
    build_synthetic_corpus, epoch_order, list_images, load_image, write_procedural_scenes, CorpusSpec, Dataset,
    GroundTruth, Interpolation, Manifest, Split, MANIFEST_FILE,
};
use waterformer::physics::{degrade, WaterTable};
use waterformer::Error;

fn corpus(root: &Path, seed: u64) -> Manifest {
    let clean = root.join("clean");
    write_procedural_scenes(&clean, 10, 24, 24, seed).unwrap();
    let spec = CorpusSpec { seed, ..CorpusSpec::default() };
    build_synthetic_corpus(&clean, &root.join("out"), &spec, &WaterTable::builtin()).unwrap()
}

#[test]
fn ten_instances_under_two_types_split_by_instance() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 0);
    assert_eq!(m.entries.len(), 20);
    assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (16, 2, 2));

    // both degradations of one clean image land in the same split
    for split in Split::ALL {
        let refs: BTreeSet<_> = m.split(split).map(|e| e.reference.clone()).collect();
        for other in Split::ALL.into_iter().filter(|s| *s != split) {
            assert!(m.split(other).all(|e| !refs.contains(&e.reference)));
        }
    }

    let reloaded = Manifest::load(&dir.path().join("out").join(MANIFEST_FILE)).unwrap();
    assert_eq!(reloaded.entries, m.entries);
    assert_eq!(list_images(&dir.path().join("out/degraded")).unwrap().len(), 20);
}

#[test]
fn stored_ground_truth_regenerates_each_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 3);
    for e in &m.entries {
        let truth = GroundTruth::load(&GroundTruth::path_for(e)).unwrap();
        let params = truth.params().unwrap();
        assert!(params.min_transmission() > 0.0);
        let clean = load_image(&e.reference).unwrap();
        let stored = load_image(&e.degraded).unwrap();
        let (expected, _) = degrade(&clean, &params).unwrap();
        // PNG storage quantizes to 8 bits
        for (a, b) in stored.pixels().iter().zip(expected.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9, "{}", e.id);
        }
    }
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb, mc) = (corpus(a.path(), 5), corpus(b.path(), 5), corpus(c.path(), 6));
    let read = |m: &Manifest| -> Vec<(String, Split, Vec<u8>)> {
        m.entries.iter().map(|e| (e.id.clone(), e.split, std::fs::read(&e.degraded).unwrap())).collect()
    };
    assert_eq!(read(&ma), read(&mb));
    assert_ne!(read(&ma), read(&mc));
}

#[test]
fn datasets_load_resized_batches() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 1);
    let train = Dataset::load(&m, Split::Train, Some((16, 16)), Interpolation::Bilinear).unwrap();
    assert_eq!(train.len(), 16);
    let batches = train.epoch_batches(0, 0, 6);
    assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 6, 4]);
    let b = train.batch::<f32>(&batches[0], Some((0, 0))).unwrap();
    assert_eq!(b.degraded.shape(), [6, 3, 16, 16]);
    assert_eq!(b.reference.shape(), [6, 3, 16, 16]);
    let again = train.batch::<f32>(&batches[0], Some((0, 0))).unwrap();
    assert_eq!(b.degraded, again.degraded);
}

#[test]
fn epoch_orders_are_seeded_permutations() {
    let o = epoch_order(40, 3, 9);
    let mut sorted = o.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..40).collect::<Vec<_>>());
    assert_eq!(o, epoch_order(40, 3, 9));
    assert_ne!(o, epoch_order(40, 4, 9));
}

#[test]
fn bad_inputs_are_reported_as_ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let err = build_synthetic_corpus(&empty, &dir.path().join("out"), &CorpusSpec::default(), &WaterTable::builtin());
    assert!(matches!(err, Err(Error::Ingestion { .. })));

    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(matches!(load_image(&junk), Err(Error::Ingestion { .. })));

    let bad_type = CorpusSpec { types: vec!["42".into()], ..CorpusSpec::default() };
    write_procedural_scenes(&dir.path().join("clean"), 1, 8, 8, 0).unwrap();
    assert!(build_synthetic_corpus(&dir.path().join("clean"), &dir.path().join("o2"), &bad_type, &WaterTable::builtin())
        .is_err());
}
