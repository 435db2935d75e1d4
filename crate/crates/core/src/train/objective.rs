//! The training objective evaluated sample by sample, one tape per sample.

use crate::error::{Error, Result};
use crate::metrics::losses::{combined_loss_graph, gender_loss_graph, weighted_mse_graph};
use crate::nn::layers::Stochastic;
use crate::nn::{CropPair, MiVolo};
use crate::tensor::{Graph, Tensor};

/// A model input with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub pair: CropPair,
    /// Min-max normalised age.
    pub age_norm: f64,
    /// 0 = male, 1 = female.
    pub gender: usize,
    /// LDS weight of the sample's age bin.
    pub weight: f64,
}

/// Per-parameter gradients, aligned with the store order. Frozen
/// parameters carry zeros.
pub type Grads = Vec<Tensor>;

fn sample_graph(
    model: &MiVolo,
    sample: &LabeledPair,
    scale: f64,
    ctx: &mut Option<&mut Stochastic>,
) -> Result<(Graph, crate::nn::Bound, crate::tensor::Var)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let out = model.forward_graph(&mut g, &p, &sample.pair, ctx)?;
    let age = weighted_mse_graph(&mut g, out.age, &[sample.age_norm], &[sample.weight], scale)?;
    let gender = gender_loss_graph(&mut g, out.gender_logits, &[sample.gender], scale)?;
    let loss = combined_loss_graph(&mut g, age, gender, model.config.loss.gender_weight)?;
    Ok((g, p, loss))
}

/// Mean combined loss over `batch` (forward only).
pub fn batch_loss(model: &MiVolo, batch: &[LabeledPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let (g, _, loss) = sample_graph(model, s, scale, &mut None)?;
        total += g.value(loss).item()?;
    }
    Ok(total)
}

/// Mean combined loss and its gradient with respect to every parameter.
pub fn loss_and_grads(model: &MiVolo, batch: &[LabeledPair], mut ctx: Option<&mut Stochastic>) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Grads = model.store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    let mut total = 0.0;
    for s in batch {
        let (mut g, p, loss) = sample_graph(model, s, scale, &mut ctx)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss became {value}")));
        }
        total += value;
        g.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(gr) = g.grad(v) {
                for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok((total, grads))
}
