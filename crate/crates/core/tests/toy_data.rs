mod common;

use std::collections::BTreeMap;

use trinity_core::data::{
    generate_toy_dataset, generate_toy_samples, high_band_energy_ratio, load_manifest, load_samples, Label,
    PreprocessConfig, ThresholdOracle, ToyGenConfig,
};
use trinity_core::mcaf::{two_step_selection, zigzag_order};
use trinity_core::nn::adaptive_avg_pool;
use trinity_core::spectral::BasisIndex;

#[test]
fn band_energy_oracle_separates_toy_classes() {
    let cfg = ToyGenConfig { count_per_class: 200, seed: 5, ..Default::default() };
    let samples = generate_toy_samples(&cfg).unwrap();
    let values: Vec<f64> = samples.iter().map(|s| high_band_energy_ratio(&s.image).unwrap()).collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let oracle = ThresholdOracle::fit(&values, &labels).unwrap();
    assert!(oracle.fake_below, "fakes should have less high-band energy");
    assert!(oracle.accuracy(&values, &labels) >= 0.95);
}

#[test]
fn caption_only_classifier_is_at_chance() {
    let cfg = ToyGenConfig { count_per_class: 50, size: 16, ..Default::default() };
    let samples = generate_toy_samples(&cfg).unwrap();
    // Best caption-only rule: majority label per caption text.
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in &samples {
        let e = votes.entry(s.caption.text()).or_default();
        match s.label {
            Label::Real => e.0 += 1,
            Label::Fake => e.1 += 1,
        }
    }
    let correct: usize = votes.values().map(|(r, f)| r.max(f)).sum();
    assert_eq!(correct as f64 / samples.len() as f64, 0.5);
}

#[test]
fn two_step_ranking_on_toy_images_starts_at_dc() {
    let cfg = ToyGenConfig { count_per_class: 20, ..Default::default() };
    let pooled: Vec<_> = generate_toy_samples(&cfg)
        .unwrap()
        .into_iter()
        .map(|s| adaptive_avg_pool(&s.image, 7, 7))
        .collect();
    let score = |idx: BasisIndex| {
        Ok(pooled
            .iter()
            .map(|p| {
                (0..3)
                    .map(|c| {
                        let mut s = 0.0;
                        for i in 0..7 {
                            for j in 0..7 {
                                s += p.get(c, i, j) * common::basis_value(idx.u, idx.v, i, j, 7, 7);
                            }
                        }
                        s.abs()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>())
    };
    let ranked = two_step_selection(&zigzag_order(7, 7), 8, score).unwrap();
    assert_eq!(ranked[0], BasisIndex::DC);
    assert_eq!(ranked.len(), 8);
}

#[test]
fn samples_loaded_from_disk_match_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyGenConfig { count_per_class: 4, size: 32, ..Default::default() };
    let ds = generate_toy_dataset(&cfg, dir.path()).unwrap();
    let manifest = load_manifest(&ds.manifest_path).unwrap();
    let loaded = load_samples(&manifest, &PreprocessConfig { height: 32, width: 32 }).unwrap();
    let generated = generate_toy_samples(&cfg).unwrap();
    assert_eq!(loaded.len(), 8);
    for (l, g) in loaded.iter().zip(&generated) {
        assert_eq!(l.label, g.label);
        assert_eq!(l.caption, g.caption);
        assert!(l.image.max_abs_diff(&g.image) < 1e-12);
    }
}
