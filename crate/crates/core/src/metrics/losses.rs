//! Training objectives: LDS-weighted MSE on normalised age, two-logit
//! gender cross-entropy, and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Min-max age scaling: `(y - min) / (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeNormalizer {
    pub min: f64,
    pub max: f64,
}

impl AgeNormalizer {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Config(format!("age range [{min}, {max}] is empty")));
        }
        Ok(AgeNormalizer { min, max })
    }

    pub fn normalize(&self, years: f64) -> f64 {
        (years - self.min) / (self.max - self.min)
    }

    /// Back to years, clamped to the training range.
    pub fn denormalize(&self, norm: f64) -> f64 {
        (norm * (self.max - self.min) + self.min).clamp(self.min, self.max)
    }
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{what}: length mismatch {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Input(format!("{what}: empty input")));
    }
    Ok(())
}

/// `mean(w * (pred - target)^2)`.
pub fn weighted_mse(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), target.len(), "weighted_mse")?;
    check_lengths(pred.len(), weights.len(), "weighted_mse")?;
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Input("weighted_mse: weights must be positive".into()));
    }
    let total: f64 = pred.iter().zip(target).zip(weights).map(|((p, t), w)| w * (p - t) * (p - t)).sum();
    Ok(total / pred.len() as f64)
}

/// Tape version of [`weighted_mse`] over a `[n, 1]` (or `[n]`) prediction.
/// `scale` multiplies the mean, e.g. `1 / batches` when samples are split
/// across several tapes.
pub fn weighted_mse_graph(g: &mut Graph, pred: Var, target: &[f64], weights: &[f64], scale: f64) -> Result<Var> {
    let n = g.value(pred).len();
    check_lengths(n, target.len(), "weighted_mse")?;
    check_lengths(n, weights.len(), "weighted_mse")?;
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let w = g.constant(Tensor::new(shape, weights.to_vec())?);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, scale / n as f64))
}

/// Mean cross-entropy of softmaxed two-logit outputs; labels are 0 or 1.
pub fn gender_loss(logits: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    check_lengths(logits.len(), labels.len(), "gender_loss")?;
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        if y > 1 {
            return Err(Error::Input(format!("gender label {y} is not 0 or 1")));
        }
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        total += lse - l[y];
    }
    Ok(total / logits.len() as f64)
}

/// Tape version of [`gender_loss`] for `[n, 2]` logits.
pub fn gender_loss_graph(g: &mut Graph, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[1] != 2 {
        return Err(Error::Dimension(format!("gender logits must be [n, 2], got {s:?}")));
    }
    check_lengths(s[0], labels.len(), "gender_loss")?;
    let mut onehot = vec![0.0; s[0] * 2];
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::Input(format!("gender label {y} is not 0 or 1")));
        }
        onehot[i * 2 + y] = 1.0;
    }
    let onehot = g.constant(Tensor::new(s.clone(), onehot)?);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -scale / s[0] as f64))
}

/// `age_loss + w_gender * gender_loss`.
pub fn combined_loss(age_loss: f64, gender_loss: f64, w_gender: f64) -> f64 {
    age_loss + w_gender * gender_loss
}

pub fn combined_loss_graph(g: &mut Graph, age_loss: Var, gender_loss: Var, w_gender: f64) -> Result<Var> {
    let weighted = g.scale(gender_loss, w_gender);
    g.add(age_loss, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_roundtrip_and_clamp() {
        let n = AgeNormalizer::new(0.0, 100.0).unwrap();
        for age in [0.0, 1.5, 37.25, 99.999, 100.0] {
            assert!((n.denormalize(n.normalize(age)) - age).abs() < 1e-12);
        }
        assert_eq!(n.denormalize(1.7), 100.0);
        assert_eq!(n.denormalize(-0.2), 0.0);
        assert!(AgeNormalizer::new(5.0, 5.0).is_err());
    }

    #[test]
    fn weighted_mse_cases() {
        assert_eq!(weighted_mse(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 2.0]).unwrap(), 0.0);
        let v = weighted_mse(&[0.6], &[0.5], &[2.0]).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        assert!(weighted_mse(&[0.1], &[0.1, 0.2], &[1.0]).is_err());
        assert!(weighted_mse(&[0.1], &[0.1], &[0.0]).is_err());
    }

    #[test]
    fn uniform_weights_are_plain_mse() {
        let pred: Vec<f64> = (0..17).map(|i| (i as f64 * 0.37).sin()).collect();
        let target: Vec<f64> = (0..17).map(|i| (i as f64 * 0.11).cos()).collect();
        let mse = pred.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / 17.0;
        let w = weighted_mse(&pred, &target, &[1.0; 17]).unwrap();
        assert!((w - mse).abs() < 1e-12);
    }

    #[test]
    fn gender_loss_cases() {
        let v = gender_loss(&[[0.3, 0.3]], &[1]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = gender_loss(&[[20.0, -20.0]], &[0]).unwrap();
        assert!(v.abs() < 1e-8);
        assert!(gender_loss(&[[0.0, 0.0]], &[2]).is_err());
    }

    #[test]
    fn graph_losses_match_plain() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::from_rows(&[&[0.2, -1.0], &[3.0, 0.5]]));
        let l = gender_loss_graph(&mut g, logits, &[1, 0], 1.0).unwrap();
        let want = gender_loss(&[[0.2, -1.0], [3.0, 0.5]], &[1, 0]).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-14);

        let pred = g.param(Tensor::new(vec![3, 1], vec![0.1, 0.5, 0.9]).unwrap());
        let m = weighted_mse_graph(&mut g, pred, &[0.0, 0.5, 1.0], &[1.0, 2.0, 3.0], 1.0).unwrap();
        let want = weighted_mse(&[0.1, 0.5, 0.9], &[0.0, 0.5, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((g.value(m).item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn combined_cases() {
        assert!((combined_loss(1.0, 2.0, 0.03) - 1.06).abs() < 1e-15);
        assert_eq!(combined_loss(1.5, 9.0, 0.0), 1.5);
    }
}
