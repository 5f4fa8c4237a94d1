#![cfg(not(feature = "single-precision"))]

mod common;

use evf_core::data::{
    generate_dataset, generate_range, load_dataset, rle_decode, rle_encode, write_dataset, Difficulty, GeneratorConfig,
};
use evf_core::{Error, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{oracle_referents, oracle_visible};

#[test]
fn every_expression_has_a_unique_referent_and_exact_mask() {
    for difficulty in [Difficulty::Spatial, Difficulty::AttributesOnly] {
        let cfg = GeneratorConfig {
            difficulty,
            ..GeneratorConfig::default()
        };
        for g in generate_range(5, 0, 300, &cfg).unwrap() {
            let refs = oracle_referents(&g.scene, &g.sample.expression);
            assert_eq!(refs, vec![g.referent], "{:?}", g.sample.expression);
            assert!(g.sample.mask.count() > 0);
            assert_eq!(g.sample.mask, oracle_visible(&g.scene, g.referent));
        }
    }
}

#[test]
fn spatial_difficulty_uses_every_template() {
    let cfg = GeneratorConfig::default();
    let exprs: Vec<String> = generate_dataset(1, 200, &cfg)
        .unwrap()
        .into_iter()
        .map(|s| s.expression)
        .collect();
    assert!(exprs.iter().any(|e| e.contains(" on the left")));
    assert!(exprs.iter().any(|e| e.contains(" on the right")));
    assert!(exprs.iter().any(|e| e.contains(" above the ")));
    assert!(exprs.iter().any(|e| e.split_whitespace().count() == 3));
    assert!(exprs.iter().any(|e| e.split_whitespace().count() == 2));
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let cfg = GeneratorConfig::default();
    let a = generate_dataset(7, 50, &cfg).unwrap();
    let b = generate_dataset(7, 50, &cfg).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        let bits = |s: &evf_core::data::SegSample| s.image.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
    assert_ne!(a, generate_dataset(8, 50, &cfg).unwrap());
    // a sample does not depend on how many others are generated
    assert_eq!(generate_range(7, 10, 1, &cfg).unwrap()[0].sample, a[10]);
}

#[test]
fn impossible_budget_is_a_generation_error() {
    let cfg = GeneratorConfig {
        min_objects: 40,
        max_objects: 40,
        max_attempts: 5,
        ..GeneratorConfig::default()
    };
    assert!(matches!(generate_dataset(0, 1, &cfg), Err(Error::Generation(_))));
}

#[test]
fn rle_round_trips_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let density: f64 = rng.random();
        let bits = (0..h * w).map(|_| rng.random_bool(density)).collect();
        let m = Mask::new(h, w, bits).unwrap();
        let counts = rle_encode(&m);
        assert_eq!(counts.iter().sum::<u64>(), (h * w) as u64);
        assert_eq!(rle_decode(&counts, h, w).unwrap(), m);
    }
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(3, 20, &GeneratorConfig::default()).unwrap();
    let index = write_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(&index).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.expression, b.expression);
        assert_eq!(a.mask, b.mask);
        let worst = a
            .image
            .pixels()
            .iter()
            .zip(b.image.pixels())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0);
    }
}

#[test]
fn index_lines_have_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(3, 2, &GeneratorConfig::default()).unwrap();
    let index = write_dataset(dir.path(), &samples).unwrap();
    let text = std::fs::read_to_string(index).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "000000");
    assert_eq!(first["image"], "images/000000.ppm");
    assert_eq!(first["mask_rle"]["size"], serde_json::json!([48, 48]));
    assert!(first["expression"].is_string());
}

#[test]
fn loader_reports_bad_lines_by_number() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(3, 2, &GeneratorConfig::default()).unwrap();
    let index = write_dataset(dir.path(), &samples).unwrap();
    let text = std::fs::read_to_string(&index).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // drop the last run so the counts no longer cover the mask
    let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    rec["mask_rle"]["counts"].as_array_mut().unwrap().pop();
    lines[1] = rec.to_string();
    std::fs::write(&index, lines.join("\n")).unwrap();
    match load_dataset(&index) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a format error, got {other:?}"),
    }

    std::fs::write(&index, "{\"id\": \"x\"}\n").unwrap();
    assert!(matches!(load_dataset(&index), Err(Error::Format { line: 1, .. })));
}

#[test]
fn empty_index_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index.jsonl");
    std::fs::write(&index, "").unwrap();
    assert!(load_dataset(&index).unwrap().is_empty());
}

#[test]
fn non_p6_image_fails_loading() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(3, 1, &GeneratorConfig::default()).unwrap();
    let index = write_dataset(dir.path(), &samples).unwrap();
    let ppm = dir.path().join("images/000000.ppm");
    let mut bytes = std::fs::read(&ppm).unwrap();
    bytes.splice(0..2, b"P3".iter().copied());
    std::fs::write(&ppm, bytes).unwrap();
    assert!(matches!(load_dataset(&index), Err(Error::Format { line: 1, .. })));
}
