mod support;

use facade_core::dataset::{build_dataset, derive_plan, read_conversations, reparse_sample};
use facade_core::fixtures::{synth_pair, write_pair_corpus, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use facade_core::guidance::{DETECT_INSTRUCTION, PROPOSE_INSTRUCTION};
use facade_core::Detection;

fn quantized(ds: &[Detection]) -> Vec<(facade_core::Label, [i32; 4])> {
    ds.iter()
        .map(|d| (d.label, d.bbox.quantize().unwrap().to_array()))
        .collect()
}

#[test]
fn corpus_exports_one_line_per_pair_and_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    let ids = write_pair_corpus(&pairs, 12, 500).unwrap();
    let summary = build_dataset(&pairs, None, &dir.path().join("out"), 0.5).unwrap();
    assert_eq!((summary.pairs, summary.lines), (12, 12));

    let text = std::fs::read_to_string(&summary.train_file).unwrap();
    assert_eq!(text.lines().count(), 12);
    let samples = read_conversations(&text).unwrap();
    for (i, (sample, id)) in samples.iter().zip(&ids).enumerate() {
        sample.check_schema().unwrap();
        assert_eq!(
            sample.conversations[0].content.as_bytes(),
            DETECT_INSTRUCTION.as_bytes()
        );
        assert_eq!(
            sample.conversations[2].content.as_bytes(),
            PROPOSE_INSTRUCTION.as_bytes()
        );
        assert!(sample.image.ends_with("before.png"), "{}", sample.image);

        let p = synth_pair(500 + i as u64, DEFAULT_WIDTH, DEFAULT_HEIGHT);
        assert_eq!(&p.pair_id, id);
        let plan = derive_plan(&p.before.detections, &p.after.detections, 0.5).unwrap();
        let (detections, additions) = reparse_sample(sample).unwrap();
        assert_eq!(
            quantized(&detections),
            quantized(&p.before.detections.items)
        );
        let mods: Vec<Detection> = plan
            .mods
            .iter()
            .map(|m| Detection::new(m.label, m.bbox))
            .collect();
        assert_eq!(quantized(&additions), quantized(&mods));
    }
}

#[test]
fn a_pair_that_removes_a_component_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let p = synth_pair(3, 256, 192);
    assert!(!p.after.detections.items.is_empty());
    // Swap sides: the "after" now lacks the additions, so some before box is unmatched.
    facade_core::dataset::write_pair(
        dir.path(),
        "swapped",
        &p.after.sketch.to_png(),
        &p.after.detections,
        &p.before.sketch.to_png(),
        &p.before.detections,
        p.before.sketch.meta(),
    )
    .unwrap();
    let err = build_dataset(dir.path(), None, &dir.path().join("out"), 0.5).unwrap_err();
    assert!(err.to_string().contains("swapped"), "{err}");
}
