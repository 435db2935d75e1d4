//! Training on a small synthetic set keeps driving the loss down.

use mivolo_core::train::{synth, train, Control};
use mivolo_core::{MiVolo, ModelConfig};

const STEPS: usize = 600;
const WINDOW: usize = 200;

#[test]
fn windowed_loss_falls() {
    let mut cfg = ModelConfig::tiny();
    cfg.augment.jitter_pos = 0.0;
    cfg.augment.jitter_size = 0.0;
    cfg.augment.flip_prob = 0.0;
    cfg.augment.erase_prob = 0.0;
    cfg.input_dropout.body = 0.0;
    cfg.input_dropout.face = 0.0;
    cfg.train.steps = STEPS;
    cfg.train.batch_size = 8;
    let data = synth::dataset(64, 7);
    let mut model = MiVolo::new(&cfg).unwrap();
    let summary = train(&mut model, &data, |_, _| Ok(Control::Continue)).unwrap();
    let loss: Vec<f64> = summary.history.iter().map(|l| l.loss).collect();
    // mean loss of every 200-step window, against the window right before it
    let mean: Vec<f64> = loss.windows(WINDOW).map(|w| w.iter().sum::<f64>() / WINDOW as f64).collect();
    for t in 0..mean.len() - WINDOW {
        assert!(
            mean[t + WINDOW] < mean[t],
            "mean loss over steps {}..{} is {}, over the previous window {}",
            t + WINDOW + 1,
            t + 2 * WINDOW + 1,
            mean[t + WINDOW],
            mean[t]
        );
    }
    assert!(mean[mean.len() - 1] < 0.1 * mean[0], "{} -> {}", mean[0], mean[mean.len() - 1]);
}
