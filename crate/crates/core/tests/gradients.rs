mod common;

use common::{end_to_end_gradient_errors, mcaf_gradient_errors, random_image, rng};
use rand::Rng;
use trinity_core::data::Label;
use trinity_core::encoders::{CaptionRecord, EncoderRegistry};
use trinity_core::fusion::{AblationFlags, DetectorModel, ModelConfig};
use trinity_core::mcaf::{Criterion, FcLayout, Mcaf, McafConfig, McafState};

fn tiny_model(criterion: Criterion, seed: u64) -> DetectorModel {
    let mut cfg = ModelConfig::tiny();
    cfg.mcaf.criterion = criterion;
    let mut m = DetectorModel::init(cfg, AblationFlags::default(), seed, &EncoderRegistry::new()).unwrap();
    let mut r = rng(seed + 100);
    for a in &mut m.params_mut().mcaf.nas_alphas {
        *a = r.random_range(-1.0..1.0);
    }
    m
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut r = rng(5);
    for (criterion, label) in [(Criterion::Ts, Label::Fake), (Criterion::Nas, Label::Real), (Criterion::Lf, Label::Fake)] {
        let m = tiny_model(criterion, 21);
        let img = random_image(&mut r, 3, 16, 16);
        let errs = end_to_end_gradient_errors(&m, &img, &CaptionRecord::dataset("a red car"), label, 128);
        let mut groups = vec!["extractor", "mcaf.fc", "proj", "head"];
        if criterion == Criterion::Nas {
            groups.push("mcaf.nas_alpha");
        }
        for g in groups {
            let e = errs[g];
            assert!(e < 1e-3, "{criterion:?} {g}: rel err {e}");
        }
    }
}

#[test]
fn mcaf_gradients_match_finite_differences() {
    let mut r = rng(9);
    for (c, criterion, layout) in [
        (8, Criterion::Lf, FcLayout::Bottleneck),
        (16, Criterion::Ts, FcLayout::Bottleneck),
        (32, Criterion::Nas, FcLayout::Bottleneck),
        (8, Criterion::Nas, FcLayout::Single),
    ] {
        let cfg = McafConfig {
            fc_layout: layout,
            ..McafConfig::for_channels(c).with_criterion(criterion)
        };
        let unit = Mcaf::new(cfg.clone()).unwrap();
        let mut state = McafState::init(&cfg, &mut r);
        for a in &mut state.nas_alphas {
            *a = r.random_range(-1.0..1.0);
        }
        let x = random_image(&mut r, c, 9, 11);
        let w: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        for (name, e) in mcaf_gradient_errors(&unit, &state, &x, &w) {
            assert!(e < 1e-4, "C={c} {criterion:?} {name}: {e}");
        }
    }
}
