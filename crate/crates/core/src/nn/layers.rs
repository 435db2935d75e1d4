use super::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Training-time randomness for dropout and drop-path. Inference passes `None`.
pub struct Stochastic {
    pub rng: ChaCha8Rng,
    pub drop_rate: f64,
    pub drop_path_rate: f64,
}

pub type Ctx<'a, 'b> = &'a mut Option<&'b mut Stochastic>;

/// Inverted dropout on `x`.
pub fn dropout(g: &mut Graph, x: Var, ctx: Ctx<'_, '_>) -> Result<Var> {
    let Some(s) = ctx.as_deref_mut() else { return Ok(x) };
    if s.drop_rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - s.drop_rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if s.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// `x + branch`, where the whole branch is dropped with the drop-path rate
/// during training and rescaled otherwise.
pub fn residual(g: &mut Graph, x: Var, branch: Var, ctx: Ctx<'_, '_>) -> Result<Var> {
    if let Some(s) = ctx.as_deref_mut() {
        if s.drop_path_rate > 0.0 {
            let keep = 1.0 - s.drop_path_rate;
            if s.rng.random::<f64>() >= keep {
                return Ok(x);
            }
            let scaled = g.scale(branch, 1.0 / keep);
            return g.add(x, scaled);
        }
    }
    g.add(x, branch)
}

/// Affine map `x · W + b` with `W: [in, out]`; `b` is optional.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, vec![in_dim, out_dim], std));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// `x · W` only; used for the query/key/value projections.
    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(rng, vec![in_dim, out_dim], std));
        Linear { weight, bias: None, in_dim, out_dim }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self.bias {
            Some(b) => g.linear(x, p.get(self.weight), p.get(b)),
            None => g.matmul(x, p.get(self.weight)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta, eps }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

/// Two linear layers with GELU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) fn hidden_width(dim: usize, ratio: f64) -> usize {
    ((dim as f64 * ratio).round() as usize).max(1)
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden, std),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out_dim, std),
        }
    }

    pub fn param_count(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        Linear::param_count(in_dim, hidden) + Linear::param_count(hidden, out_dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: Ctx<'_, '_>) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = dropout(g, h, ctx)?;
        let y = self.fc2.forward(g, p, h)?;
        dropout(g, y, ctx)
    }
}
