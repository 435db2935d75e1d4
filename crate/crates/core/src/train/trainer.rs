//! The seeded training loop and manifest evaluation.

use super::dataset::Dataset;
use super::objective::loss_and_grads;
use super::optimizer::{warmup_lr, AdamW};
use crate::error::{Error, Result};
use crate::metrics::{AgeNormalizer, LdsWeights, MetricsReport};
use crate::nn::layers::Stochastic;
use crate::nn::{CropPair, MiVolo};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Stream offsets so data order and dropout masks never share draws.
const DATA_STREAM: u64 = 0x5eed_0001;
const DROP_STREAM: u64 = 0x5eed_0002;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lr={:.3e} loss={:.6}", self.step, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub history: Vec<StepLog>,
    pub stopped_early: bool,
}

/// Runs `model.config.train.steps` AdamW steps on `data`. Batches come from
/// reshuffled epochs; everything random is derived from `config.seed`, so a
/// rerun reproduces the weights exactly. `observer` sees every step and may
/// stop the run.
pub fn train<F>(model: &mut MiVolo, data: &Dataset, mut observer: F) -> Result<TrainSummary>
where
    F: FnMut(&StepLog, &MiVolo) -> Result<Control>,
{
    let cfg = model.config.clone();
    data.validate(&cfg)?;
    let lds = LdsWeights::from_ages(&data.ages(), &cfg.age, &cfg.lds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let mut stochastic = (cfg.model.drop_rate > 0.0 || cfg.model.drop_path_rate > 0.0).then(|| Stochastic {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DROP_STREAM),
        drop_rate: cfg.model.drop_rate,
        drop_path_rate: cfg.model.drop_path_rate,
    });
    let mut opt = AdamW::new(&model.store);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.train.steps);
    let batch_size = cfg.train.batch_size.min(data.len());
    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            batch.push(data.training_example(i, &cfg, &lds, &mut rng)?);
        }
        let (loss, grads) = loss_and_grads(model, &batch, stochastic.as_mut())?;
        let lr = warmup_lr(step, &cfg);
        opt.step(&mut model.store, &grads, lr, &cfg.optim)?;
        let log = StepLog { step: step + 1, lr, loss };
        history.push(log);
        if observer(&log, model)? == Control::Stop {
            return Ok(TrainSummary { steps: step + 1, history, stopped_early: true });
        }
    }
    Ok(TrainSummary { steps: cfg.train.steps, history, stopped_early: false })
}

/// Which views of each record the model is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Face and body; records missing either are skipped.
    Both,
    /// Face only, body absent.
    Face,
    /// Body only, face absent.
    Body,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(EvalMode::Both),
            "face" => Ok(EvalMode::Face),
            "body" => Ok(EvalMode::Body),
            other => Err(Error::Input(format!("unknown eval mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub evaluated: usize,
    /// Records lacking a view the mode needs.
    pub skipped: usize,
    /// `(record index, age in years clamped to the age range, gender index)`.
    pub predictions: Vec<(usize, f64, usize)>,
}

/// Deterministic evaluation of `model` on every usable record.
pub fn evaluate(model: &MiVolo, data: &Dataset, mode: EvalMode) -> Result<Evaluation> {
    let cfg = &model.config;
    if !model.is_multi_input() && mode != EvalMode::Face {
        return Err(Error::Input("the single-input model only evaluates in face mode".into()));
    }
    let norm = AgeNormalizer::new(cfg.age.min, cfg.age.max)?;
    let mut predictions = Vec::new();
    let (mut pred_age, mut true_age, mut pred_g, mut true_g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for (i, r) in data.records.iter().enumerate() {
        let needed = match mode {
            EvalMode::Both => r.face_bbox.is_some() && r.body_bbox.is_some(),
            EvalMode::Face => r.face_bbox.is_some(),
            EvalMode::Body => r.body_bbox.is_some(),
        };
        if !needed {
            skipped += 1;
            continue;
        }
        let full = data.pair::<ChaCha8Rng>(i, cfg, None)?;
        let pred = match mode {
            EvalMode::Both => model.forward_pair(&full)?,
            EvalMode::Face if !model.is_multi_input() => model.forward_pair(&CropPair::new(full.face, None)?)?,
            EvalMode::Face => model.forward_pair_skip(&CropPair::new(full.face, None)?)?,
            EvalMode::Body => model.forward_pair_skip(&CropPair::new(None, full.body)?)?,
        };
        let age = norm.denormalize(pred.age_norm).clamp(cfg.age.min, cfg.age.max);
        predictions.push((i, age, pred.gender_index()));
        pred_age.push(age);
        true_age.push(r.age);
        pred_g.push(pred.gender_index());
        true_g.push(r.gender.index());
    }
    if predictions.is_empty() {
        return Err(Error::Input(format!("no record has the views needed for {mode:?} evaluation")));
    }
    let report = MetricsReport::compute(&pred_age, &true_age, Some((&pred_g, &true_g)))?;
    Ok(Evaluation { report, evaluated: predictions.len(), skipped, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::train::synth;

    fn quick_config() -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.model.image_size = 64;
        cfg.model.patch_size = 16;
        cfg.train.steps = 4;
        cfg.train.batch_size = 3;
        cfg.optim.warmup_steps = 2;
        cfg
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = synth::dataset(5, 1);
        let run = || {
            let mut m = MiVolo::new(&quick_config()).unwrap();
            let s = train(&mut m, &data, |_, _| Ok(Control::Continue)).unwrap();
            (m.store, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.steps, 4);
        assert_eq!(sa.history[0].lr, 1e-6);
    }

    #[test]
    fn observer_stops() {
        let data = synth::dataset(3, 2);
        let mut m = MiVolo::new(&quick_config()).unwrap();
        let s =
            train(&mut m, &data, |log, _| Ok(if log.step == 2 { Control::Stop } else { Control::Continue })).unwrap();
        assert!(s.stopped_early);
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn dropout_paths_train() {
        let mut cfg = quick_config();
        cfg.model.drop_rate = 0.2;
        cfg.model.drop_path_rate = 0.2;
        let data = synth::dataset(3, 3);
        let mut m = MiVolo::new(&cfg).unwrap();
        let s = train(&mut m, &data, |_, _| Ok(Control::Continue)).unwrap();
        assert!(s.history.iter().all(|l| l.loss.is_finite()));
    }

    #[test]
    fn evaluation_modes_and_skips() {
        let mut data = synth::dataset(4, 9);
        data.records[0].body_bbox = None;
        data.records[1].face_bbox = None;
        let m = MiVolo::new(&quick_config()).unwrap();
        let both = evaluate(&m, &data, EvalMode::Both).unwrap();
        assert_eq!((both.evaluated, both.skipped), (2, 2));
        let face = evaluate(&m, &data, EvalMode::Face).unwrap();
        assert_eq!((face.evaluated, face.skipped), (3, 1));
        let body = evaluate(&m, &data, EvalMode::Body).unwrap();
        assert_eq!((body.evaluated, body.skipped), (3, 1));
        // record 0 is face-only: face mode and the masked "both" input agree
        let full = m.forward_pair(&data.pair::<ChaCha8Rng>(0, &m.config, None).unwrap()).unwrap();
        let norm = AgeNormalizer::new(0.0, 100.0).unwrap();
        assert!((face.predictions[0].1 - norm.denormalize(full.age_norm).clamp(0.0, 100.0)).abs() < 1e-9);
        assert_eq!("body".parse::<EvalMode>().unwrap(), EvalMode::Body);
        assert!("x".parse::<EvalMode>().is_err());
    }
}
