use std::fs;
use std::sync::Arc;

use seqrl::corpus::{build_vocab, load_mono, load_parallel, Dataset, Origin, UNK};
use tempfile::TempDir;

#[test]
fn parallel_files_load_with_filtering_and_round_trip() {
    let dir = TempDir::new().unwrap();
    let (src, tgt) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
    fs::write(&src, "x y\n\nx x x x x\ny z\n").unwrap();
    fs::write(&tgt, "p q\nq\np\nq p\n").unwrap();
    let sv = Arc::new(build_vocab(["x y", "x"], 1, 100));
    let tv = Arc::new(build_vocab(["p q"], 1, 100));
    let ds = load_parallel(&src, &tgt, sv.clone(), tv.clone(), 4).unwrap();
    // the empty source and the five-token source are dropped
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.pairs[1].src.ids()[1], UNK);

    let prefix = dir.path().join("saved");
    ds.save(&prefix).unwrap();
    let back = Dataset::load(&prefix, sv.clone(), tv.clone()).unwrap();
    assert_eq!(back.pairs, ds.pairs);
    assert_eq!(back.count_origin(Origin::Bilingual), 2);

    let mono = load_mono(&src, &sv, 4).unwrap();
    assert_eq!(mono.len(), 2);
}

#[test]
fn mismatched_files_are_rejected() {
    let dir = TempDir::new().unwrap();
    let (src, tgt) = (dir.path().join("b.src"), dir.path().join("b.tgt"));
    fs::write(&src, "x\nx\n").unwrap();
    fs::write(&tgt, "p\n").unwrap();
    let v = Arc::new(build_vocab(["x p"], 1, 100));
    assert!(matches!(
        load_parallel(&src, &tgt, v.clone(), v, 10),
        Err(seqrl::Error::LineCountMismatch { src: 2, tgt: 1 })
    ));
}

#[test]
fn missing_file_reports_its_path() {
    let v = Arc::new(build_vocab(["x"], 1, 100));
    let err = load_parallel("/nonexistent/a", "/nonexistent/b", v.clone(), v, 10).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/a"));
}
