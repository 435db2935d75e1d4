//! Starting a two-input model from a trained single-input (face) model.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::fusion::{BODY_EMBED, FACE_EMBED};
use crate::nn::MiVolo;

/// Builds the two-input model of `config` with every shared weight taken
/// from `single`. The body embedding starts as a copy of the face
/// embedding, the enhancer is random (from `config.seed`), and the face
/// embedding is frozen.
pub fn init_from_single_input(single: &MiVolo, config: &ModelConfig) -> Result<MiVolo> {
    if single.is_multi_input() {
        return Err(Error::Input("initial checkpoint must be a single-input model".into()));
    }
    if !config.model.multi_input {
        return Err(Error::Config("init from a single-input model needs multi_input = true".into()));
    }
    if single.config.trunk_hash() != config.trunk_hash() {
        return Err(Error::Checkpoint("single-input checkpoint does not match this trunk configuration".into()));
    }
    let mut model = MiVolo::new(config)?;
    for p in single.store.iter() {
        model.store.set_value(&p.name, p.value.clone())?;
        if let Some(body) = p.name.strip_prefix(FACE_EMBED) {
            model.store.set_value(&format!("{BODY_EMBED}{body}"), p.value.clone())?;
        }
    }
    model.store.set_frozen(FACE_EMBED, true);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fusion::ENHANCER;

    fn single() -> MiVolo {
        let mut cfg = ModelConfig::micro();
        cfg.model.multi_input = false;
        cfg.seed = 5;
        MiVolo::new(&cfg).unwrap()
    }

    #[test]
    fn copies_trunk_and_face_embedding() {
        let s = single();
        let m = init_from_single_input(&s, &ModelConfig::micro()).unwrap();
        for p in s.store.iter() {
            assert_eq!(m.store.get(&p.name).unwrap().value, p.value, "{}", p.name);
        }
        for p in m.store.iter().filter(|p| p.name.starts_with(BODY_EMBED)) {
            let face = format!("{FACE_EMBED}{}", &p.name[BODY_EMBED.len()..]);
            assert_eq!(p.value, s.store.get(&face).unwrap().value);
        }
        let fresh = MiVolo::new(&ModelConfig::micro()).unwrap();
        for p in m.store.iter() {
            assert_eq!(p.frozen, p.name.starts_with(FACE_EMBED));
            if p.name.starts_with(ENHANCER) {
                assert_eq!(p.value, fresh.store.get(&p.name).unwrap().value);
            }
        }
    }

    #[test]
    fn enhancer_depends_on_seed() {
        let s = single();
        let a = init_from_single_input(&s, &ModelConfig::micro()).unwrap();
        let mut cfg = ModelConfig::micro();
        cfg.seed = 1;
        let b = init_from_single_input(&s, &cfg).unwrap();
        let enh = |m: &MiVolo| -> Vec<_> {
            m.store.iter().filter(|p| p.name.starts_with(ENHANCER)).map(|p| p.value.clone()).collect()
        };
        assert_ne!(enh(&a), enh(&b));
    }

    #[test]
    fn frozen_face_embedding_survives_training() {
        use crate::train::{loss_and_grads, synth, train, Control};
        let s = single();
        let mut cfg = ModelConfig::micro();
        cfg.train.steps = 3;
        cfg.train.batch_size = 2;
        let mut m = init_from_single_input(&s, &cfg).unwrap();
        let before: Vec<_> = m.store.iter().map(|p| p.value.clone()).collect();
        let data = synth::dataset(4, 8);
        let ex = data.pair::<rand_chacha::ChaCha8Rng>(0, &cfg, None).unwrap();
        let batch = [crate::train::LabeledPair { pair: ex, age_norm: 0.3, gender: 1, weight: 1.0 }];
        let (_, grads) = loss_and_grads(&m, &batch, None).unwrap();
        for (p, g) in m.store.iter().zip(&grads) {
            if p.frozen {
                assert!(g.data().iter().all(|&x| x == 0.0), "{}", p.name);
            }
        }
        train(&mut m, &data, |_, _| Ok(Control::Continue)).unwrap();
        for (p, b) in m.store.iter().zip(&before) {
            assert_eq!(p.name.starts_with(FACE_EMBED), p.value == *b, "{}", p.name);
        }
    }

    #[test]
    fn refuses_mismatched_trunk() {
        let s = single();
        let mut cfg = ModelConfig::micro();
        cfg.model.transformer_depth = 2;
        assert!(init_from_single_input(&s, &cfg).is_err());
        let multi = MiVolo::new(&ModelConfig::micro()).unwrap();
        assert!(init_from_single_input(&multi, &ModelConfig::micro()).is_err());
    }
}
