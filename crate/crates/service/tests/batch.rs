use facade_core::fixtures::{write_pair_corpus, write_sketch_corpus};
use facade_service::batch::{run_batch, BatchMode};
use facade_service::PipelineConfig;

#[test]
fn empty_corpus_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [BatchMode::Reconstruct, BatchMode::Generate] {
        let r = run_batch(dir.path(), mode, &PipelineConfig::default(), 2).unwrap();
        assert!(r.rows.is_empty() && r.failures.is_empty());
    }
}

#[test]
fn a_corrupt_sketch_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let pngs = write_sketch_corpus(dir.path(), 10, 5).unwrap();
    std::fs::write(&pngs[3], b"\x89PNG not really").unwrap();
    let r = run_batch(
        dir.path(),
        BatchMode::Generate,
        &PipelineConfig::default(),
        3,
    )
    .unwrap();
    assert_eq!(r.rows.len(), 9);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(
        r.failures[0].item,
        pngs[3].file_stem().unwrap().to_string_lossy()
    );
    assert_eq!(r.preservation_failures(), 0);
    let table = r.to_string();
    assert!(
        table.contains("FAILED") && table.ends_with("9 rows, 1 failures, 0 preservation failures")
    );
}

#[test]
fn rows_are_sorted_and_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    write_pair_corpus(dir.path(), 6, 20).unwrap();
    let strip = |mut r: facade_service::batch::BatchReport| {
        r.rows.iter_mut().for_each(|row| row.wall_ms = 0);
        r
    };
    let one = strip(
        run_batch(
            dir.path(),
            BatchMode::Reconstruct,
            &PipelineConfig::default(),
            1,
        )
        .unwrap(),
    );
    let four = strip(
        run_batch(
            dir.path(),
            BatchMode::Reconstruct,
            &PipelineConfig::default(),
            4,
        )
        .unwrap(),
    );
    assert_eq!(one, four);
    let names: Vec<_> = one.rows.iter().map(|r| r.item.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    for row in &one.rows {
        let (m, n) = (row.matched_reference.unwrap(), row.reference_mods.unwrap());
        assert!(m <= n);
    }
}

#[test]
fn missing_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_batch(
        &dir.path().join("nope"),
        BatchMode::Generate,
        &PipelineConfig::default(),
        1
    )
    .is_err());
}
