//! Whole-model gradients on the micro config, every parameter checked.

use mivolo_core::gradcheck::{check_model, Selection};
use mivolo_core::metrics::{AgeNormalizer, LdsWeights};
use mivolo_core::train::{synth, LabeledPair};
use mivolo_core::{CropPair, MiVolo, ModelConfig};
use rand_chacha::ChaCha8Rng;

/// Roundoff floor of a central difference at h = 1e-5: forward outputs
/// carry ~1e-16 relative error, divided by 2h.
const ABS_FLOOR: f64 = 1e-10;

/// At the default 0.02 init the micro model's gradients are tiny, so most
/// entries would sit under the roundoff floor; a wider init makes them
/// large enough to check.
fn config(multi: bool) -> ModelConfig {
    let mut cfg = ModelConfig::micro();
    cfg.model.init_std = 0.2;
    cfg.model.multi_input = multi;
    cfg.seed = 3;
    cfg
}

fn batch(cfg: &ModelConfig, views: &[(bool, bool)]) -> Vec<LabeledPair> {
    let data = synth::dataset(views.len(), 21);
    let norm = AgeNormalizer::new(cfg.age.min, cfg.age.max).unwrap();
    let lds = LdsWeights::from_ages(&data.ages(), &cfg.age, &cfg.lds).unwrap();
    views
        .iter()
        .enumerate()
        .map(|(i, &(face, body))| {
            let full = data.pair::<ChaCha8Rng>(i, cfg, None).unwrap();
            let r = &data.records[i];
            LabeledPair {
                pair: CropPair::new(full.face.filter(|_| face), full.body.filter(|_| body)).unwrap(),
                age_norm: norm.normalize(r.age),
                gender: r.gender.index(),
                weight: lds.weight_for(r.age),
            }
        })
        .collect()
}

#[test]
fn multi_input_every_parameter() {
    let cfg = config(true);
    let model = MiVolo::new(&cfg).unwrap();
    let b = batch(&cfg, &[(true, true), (true, false), (false, true)]);
    let report = check_model(&model, &b, Selection::All, 1e-5).unwrap();
    assert_eq!(report.checked(), model.store.numel());
    let bad = report.violations(1e-4, ABS_FLOOR);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn single_input_every_parameter() {
    let cfg = config(false);
    let model = MiVolo::new(&cfg).unwrap();
    let b = batch(&cfg, &[(true, false), (true, false)]);
    let report = check_model(&model, &b, Selection::All, 1e-5).unwrap();
    assert_eq!(report.checked(), model.store.numel());
    let bad = report.violations(1e-4, ABS_FLOOR);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn frozen_groups_are_skipped() {
    let cfg = config(true);
    let mut model = MiVolo::new(&cfg).unwrap();
    let frozen = model.store.set_frozen("face_embed.", true);
    assert!(frozen > 0);
    let b = batch(&cfg, &[(true, true)]);
    let report = check_model(&model, &b, Selection::PerGroup(4), 1e-5).unwrap();
    assert!(report.groups.iter().all(|g| !g.name.starts_with("face_embed.")));
}
