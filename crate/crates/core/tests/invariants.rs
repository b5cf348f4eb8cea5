//! Property tests for structural invariants: serialization round trips,
//! partition laws, and parser totality.

use proptest::prelude::*;

use capforge::corpus::{read_manifest, write_manifest, LineageRecord, Manifest, SampleRecord};
use capforge::grounding::{parse_grounded_caption, split_by_length, GritRecord};
use capforge::prompts::{merge_captions, MergeMode, MergePolicy};
use capforge::rounds::detect_saturation;

fn arb_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 .,!?\\[\\]-]{0,80}"
}

fn arb_record(i: usize) -> impl Strategy<Value = SampleRecord> {
    (arb_text(), any::<bool>()).prop_map(move |(text, recaptionable)| SampleRecord {
        id: format!("prop{i:04}"),
        image_ref: format!("img://{i}"),
        source_dataset: "prop".into(),
        recaptionable,
        original_text: text,
        captions: Vec::new(),
        qa_turns: Vec::new(),
    })
}

fn arb_manifest() -> impl Strategy<Value = Manifest> {
    prop::collection::vec(any::<u8>(), 1..20).prop_flat_map(|sizes| {
        let records: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, _)| arb_record(i))
            .collect();
        records.prop_map(|recs| Manifest::new(recs, LineageRecord::root(0)).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_write_read_round_trip(manifest in arb_manifest()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&manifest, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        prop_assert_eq!(back.digest(), manifest.digest());
        prop_assert_eq!(back.records, manifest.records);
    }

    #[test]
    fn split_is_a_partition(
        captions in prop::collection::vec("[a-z ]{0,200}", 0..40),
        threshold in 1usize..100,
    ) {
        let records: Vec<GritRecord> = captions
            .iter()
            .enumerate()
            .map(|(i, c)| GritRecord {
                id: format!("r{i}"),
                image_ref: format!("img://{i}"),
                width: 100,
                height: 100,
                caption: c.clone(),
                boxes: Vec::new(),
            })
            .collect();
        let total = records.len();
        let (short, long) = split_by_length(records, threshold);
        prop_assert_eq!(short.len() + long.len(), total);
        for r in &short {
            prop_assert!(r.caption.split_whitespace().count() < threshold);
        }
        for r in &long {
            prop_assert!(r.caption.split_whitespace().count() >= threshold);
        }
    }

    #[test]
    fn grounded_parse_is_total_and_in_bounds(
        text in "[a-zA-Z0-9 .,\\[\\]-]{0,300}",
        width in 1u32..2000,
        height in 1u32..2000,
    ) {
        // Must never panic, and every surviving span's box must fit the image.
        let parsed = parse_grounded_caption(&text, width, height);
        for span in &parsed.spans {
            prop_assert!(span.bbox.xmin >= 0 && span.bbox.ymin >= 0);
            prop_assert!(span.bbox.xmin < span.bbox.xmax);
            prop_assert!(span.bbox.ymin < span.bbox.ymax);
            prop_assert!(span.bbox.xmax <= width as i32);
            prop_assert!(span.bbox.ymax <= height as i32);
            prop_assert!(!span.text_span.is_empty());
        }
    }

    #[test]
    fn concatenated_merge_keeps_original(original in arb_text(), synthetic in arb_text()) {
        let policy = MergePolicy { mode: MergeMode::Concatenated, separator: "\n".into() };
        let merged = merge_captions(&original, &synthetic, &policy);
        prop_assert!(merged.starts_with(&original));
        if synthetic.is_empty() {
            prop_assert_eq!(merged, original);
        }
    }

    #[test]
    fn saturation_round_respects_lower_bound(
        series in prop::collection::vec(0.1f64..1000.0, 2..12),
        min_rounds in 1usize..6,
    ) {
        if let Some(r) = detect_saturation(&series, 0.05, min_rounds).unwrap() {
            prop_assert!(r >= min_rounds);
            prop_assert!(r < series.len());
            let growth = (series[r] - series[r - 1]) / series[r - 1];
            prop_assert!(growth < 0.05);
        }
    }
}
