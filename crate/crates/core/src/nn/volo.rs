//! VOLO-style trunk: patch embedding, Outlookers, token downsampling,
//! transformer blocks and the joint age/gender head.
//!
//! Token grids travel as `[N, C]` matrices in row-major grid order; blocks
//! that need the 2-D layout take the grid side lengths explicitly.

use super::layers::{hidden_width, residual, Ctx, LayerNorm, Linear, Mlp};
use super::params::{Bound, ParamStore};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, WindowGeom};
use rand_chacha::ChaCha8Rng;

/// Spatial layout of a token matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Linear projection of non-overlapping `patch x patch` image patches.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub proj: Linear,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        patch_size: usize,
        embed_dim: usize,
        std: f64,
    ) -> Self {
        let in_channels = 3;
        PatchEmbedding {
            proj: Linear::new(
                store,
                rng,
                &format!("{name}.proj"),
                in_channels * patch_size * patch_size,
                embed_dim,
                std,
            ),
            patch_size,
            in_channels,
            embed_dim,
        }
    }

    pub fn param_count(patch_size: usize, embed_dim: usize) -> usize {
        Linear::param_count(3 * patch_size * patch_size, embed_dim)
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<GridShape> {
        let p = self.patch_size;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
            return Err(Error::Dimension(format!("image {height}x{width} is not divisible into {p}x{p} patches")));
        }
        Ok(GridShape { height: height / p, width: width / p, channels: self.embed_dim })
    }

    /// `[3, H, W]` image -> `[(H/p)(W/p), C]` tokens.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<(Var, GridShape)> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::Dimension(format!("patch embedding expects [3, H, W], got {s:?}")));
        }
        let grid = self.grid_for(s[1], s[2])?;
        let ps = self.patch_size;
        let x = g.reshape(image, vec![3, grid.height, ps, grid.width, ps])?;
        let x = g.permute(x, &[1, 3, 0, 2, 4])?;
        let x = g.reshape(x, vec![grid.tokens(), 3 * ps * ps])?;
        Ok((self.proj.forward(g, p, x)?, grid))
    }

    /// The tokens produced by an all-zero image: the bias on every position.
    pub fn zero_input_tokens(&self, store: &ParamStore, grid: GridShape) -> Tensor {
        let bias = store.param(self.proj.bias.expect("patch projection has a bias")).value.data();
        let mut data = Vec::with_capacity(grid.tokens() * bias.len());
        for _ in 0..grid.tokens() {
            data.extend(bias.iter().map(|b| 0.0 + b));
        }
        Tensor::new(vec![grid.tokens(), self.embed_dim], data).expect("bias grid")
    }
}

/// Local attention whose `k² x k²` weights come straight from a linear
/// projection of the centre token.
#[derive(Debug, Clone)]
pub struct OutlookAttention {
    pub value: Linear,
    pub attn: Linear,
    pub proj: Linear,
    pub kernel: usize,
    pub heads: usize,
    pub dim: usize,
}

impl OutlookAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        kernel: usize,
        heads: usize,
        std: f64,
    ) -> Self {
        let k4 = kernel.pow(4);
        OutlookAttention {
            value: Linear::without_bias(store, rng, &format!("{name}.v"), dim, dim, std),
            attn: Linear::new(store, rng, &format!("{name}.attn"), dim, heads * k4, std),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, std),
            kernel,
            heads,
            dim,
        }
    }

    pub fn param_count(dim: usize, kernel: usize, heads: usize) -> usize {
        dim * dim + Linear::param_count(dim, dim) + Linear::param_count(dim, heads * kernel.pow(4))
    }

    /// Softmaxed attention weights, `[N * heads, k², k²]`.
    pub fn weights(&self, g: &mut Graph, p: &Bound, x: Var, n: usize) -> Result<Var> {
        let k2 = self.kernel * self.kernel;
        let head_dim = self.dim / self.heads;
        let a = self.attn.forward(g, p, x)?;
        let a = g.reshape(a, vec![n * self.heads, k2, k2])?;
        let a = g.scale(a, (head_dim as f64).powf(-0.5));
        g.softmax(a, 2)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, grid: GridShape) -> Result<Var> {
        let (k, h) = (self.kernel, self.heads);
        if k > grid.height || k > grid.width {
            return Err(Error::Config(format!(
                "outlook window {k} larger than token grid {}x{}",
                grid.height, grid.width
            )));
        }
        let n = grid.tokens();
        let k2 = k * k;
        let d = self.dim / h;
        let pad = k / 2;

        let v = self.value.forward(g, p, x)?;
        let v = g.reshape(v, vec![grid.height, grid.width, self.dim])?;
        let v = g.unfold(v, k, 1, pad)?;
        let v = if h == 1 {
            v
        } else {
            let v = g.reshape(v, vec![n, k2, h, d])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, vec![n * h, k2, d])?
        };

        let a = self.weights(g, p, x, n)?;
        let out = g.bmm(a, v, false)?;
        let out = if h == 1 {
            out
        } else {
            let o = g.reshape(out, vec![n, h, k2, d])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            g.reshape(o, vec![n, k2, self.dim])?
        };
        let folded = g.fold(out, grid.height, grid.width, k, 1, pad)?;

        // divide each cell by how many windows contributed to it
        let geom = WindowGeom::new(grid.height, grid.width, self.dim, k, 1, pad)?;
        let counts = geom.overlap_counts();
        let mut inv = Vec::with_capacity(n * self.dim);
        for c in counts {
            inv.extend(std::iter::repeat_n(1.0 / c, self.dim));
        }
        let inv = g.constant(Tensor::new(vec![grid.height, grid.width, self.dim], inv)?);
        let normed = g.mul(folded, inv)?;
        let normed = g.reshape(normed, vec![n, self.dim])?;
        self.proj.forward(g, p, normed)
    }
}

#[derive(Debug, Clone)]
pub struct OutlookerBlock {
    pub norm1: LayerNorm,
    pub attn: OutlookAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl OutlookerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ArchConfig) -> Self {
        let c = cfg.embed_dim;
        OutlookerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, cfg.ln_eps),
            attn: OutlookAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                c,
                cfg.outlook_kernel,
                cfg.outlook_heads,
                cfg.init_std,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, cfg.ln_eps),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), c, hidden_width(c, cfg.mlp_ratio), c, cfg.init_std),
        }
    }

    pub fn param_count(cfg: &ArchConfig) -> usize {
        let c = cfg.embed_dim;
        2 * LayerNorm::param_count(c)
            + OutlookAttention::param_count(c, cfg.outlook_kernel, cfg.outlook_heads)
            + Mlp::param_count(c, hidden_width(c, cfg.mlp_ratio), c)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, grid: GridShape, ctx: Ctx<'_, '_>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, grid)?;
        let x = residual(g, x, h, ctx)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h, ctx)?;
        residual(g, x, h, ctx)
    }
}

/// 2x2 patch merge: halves each side, doubles the width.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub proj: Linear,
    pub in_dim: usize,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, std: f64) -> Self {
        Downsample { proj: Linear::new(store, rng, &format!("{name}.proj"), 4 * in_dim, 2 * in_dim, std), in_dim }
    }

    pub fn param_count(in_dim: usize) -> usize {
        Linear::param_count(4 * in_dim, 2 * in_dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, grid: GridShape) -> Result<(Var, GridShape)> {
        if !grid.height.is_multiple_of(2) || !grid.width.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "downsample needs even grid sides, got {}x{}",
                grid.height, grid.width
            )));
        }
        let (h2, w2, c) = (grid.height / 2, grid.width / 2, grid.channels);
        let x = g.reshape(x, vec![h2, 2, w2, 2, c])?;
        let x = g.permute(x, &[0, 2, 1, 3, 4])?;
        let x = g.reshape(x, vec![h2 * w2, 4 * c])?;
        let y = self.proj.forward(g, p, x)?;
        Ok((y, GridShape { height: h2, width: w2, channels: 2 * c }))
    }
}

/// Multi-head attention where queries may come from a different token set
/// than keys and values.
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    /// `q: [Nq, D]`, `k`, `v`: `[Nk, D]` -> `[Nq, D]`; also returns the
    /// `[heads, Nq, Nk]` attention matrix.
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (h, d) = (self.heads, self.dim / self.heads);
        let nq = g.shape(q)[0];
        let nk = g.shape(k)[0];
        let split = |g: &mut Graph, t: Var, n: usize| -> Result<Var> {
            let t = g.reshape(t, vec![n, h, d])?;
            g.permute(t, &[1, 0, 2])
        };
        let q = split(g, q, nq)?;
        let k = split(g, k, nk)?;
        let v = split(g, v, nk)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, (d as f64).powf(-0.5));
        let attn = g.softmax(scores, 2)?;
        let out = g.bmm(attn, v, false)?;
        let out = g.permute(out, &[1, 0, 2])?;
        Ok((g.reshape(out, vec![nq, self.dim])?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub core: Attention,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, std: f64) -> Self {
        SelfAttention {
            qkv: Linear::without_bias(store, rng, &format!("{name}.qkv"), dim, 3 * dim, std),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, std),
            core: Attention { heads, dim },
        }
    }

    pub fn param_count(dim: usize) -> usize {
        3 * dim * dim + Linear::param_count(dim, dim)
    }

    pub fn forward_with_weights(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let d = self.core.dim;
        let qkv = self.qkv.forward(g, p, x)?;
        let q = g.slice(qkv, 1, 0, d)?;
        let k = g.slice(qkv, 1, d, d)?;
        let v = g.slice(qkv, 1, 2 * d, d)?;
        let (out, attn) = self.core.attend(g, q, k, v)?;
        Ok((self.proj.forward(g, p, out)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, cfg: &ArchConfig) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, cfg.ln_eps),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, cfg.transformer_heads, cfg.init_std),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, cfg.ln_eps),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, hidden_width(dim, cfg.mlp_ratio), dim, cfg.init_std),
        }
    }

    pub fn param_count(dim: usize, mlp_ratio: f64) -> usize {
        2 * LayerNorm::param_count(dim)
            + SelfAttention::param_count(dim)
            + Mlp::param_count(dim, hidden_width(dim, mlp_ratio), dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: Ctx<'_, '_>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let (h, _) = self.attn.forward_with_weights(g, p, h)?;
        let x = residual(g, x, h, ctx)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h, ctx)?;
        residual(g, x, h, ctx)
    }
}

/// Output of the joint head.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[1, 2]` gender logits.
    pub gender_logits: Var,
    /// `[1, 1]` min-max normalised age, unbounded.
    pub age: Var,
}

/// Mean pooling followed by two linear layers producing a single 3-vector.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const HEAD_OUTPUTS: usize = 3;

impl OutputHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize, std: f64) -> Self {
        OutputHead {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, std),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, HEAD_OUTPUTS, std),
        }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, HEAD_OUTPUTS)
    }

    /// Raw `[1, 3]` output for `[N, D]` tokens.
    pub fn logits(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        if g.shape(tokens)[0] == 0 {
            return Err(Error::Input("head needs at least one token".into()));
        }
        let d = g.shape(tokens)[1];
        let pooled = g.mean(tokens, 0)?;
        let pooled = g.reshape(pooled, vec![1, d])?;
        let h = self.fc1.forward(g, p, pooled)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<HeadOutput> {
        let out = self.logits(g, p, tokens)?;
        Ok(HeadOutput { gender_logits: g.slice(out, 1, 0, 2)?, age: g.slice(out, 1, 2, 1)? })
    }
}

/// Everything after the input embedding: Outlookers, downsampling,
/// transformers, final norm and head.
#[derive(Debug, Clone)]
pub struct VoloTrunk {
    pub outlookers: Vec<OutlookerBlock>,
    pub downsample: Downsample,
    pub transformers: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: OutputHead,
}

impl VoloTrunk {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ArchConfig) -> Self {
        let c = cfg.embed_dim;
        let outlookers = (0..cfg.outlooker_depth)
            .map(|i| OutlookerBlock::new(store, rng, &format!("outlookers.{i}"), cfg))
            .collect();
        let downsample = Downsample::new(store, rng, "downsample", c, cfg.init_std);
        let transformers = (0..cfg.transformer_depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("transformers.{i}"), 2 * c, cfg))
            .collect();
        let norm = LayerNorm::new(store, "norm", 2 * c, cfg.ln_eps);
        let head = OutputHead::new(store, rng, "head", 2 * c, cfg.head_hidden, cfg.init_std);
        VoloTrunk { outlookers, downsample, transformers, norm, head }
    }

    pub fn param_count(cfg: &ArchConfig) -> usize {
        let c = cfg.embed_dim;
        cfg.outlooker_depth * OutlookerBlock::param_count(cfg)
            + Downsample::param_count(c)
            + cfg.transformer_depth * TransformerBlock::param_count(2 * c, cfg.mlp_ratio)
            + LayerNorm::param_count(2 * c)
            + OutputHead::param_count(2 * c, cfg.head_hidden)
    }

    /// Runs the trunk, recording the `(tokens, channels)` shape after each stage.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        grid: GridShape,
        ctx: Ctx<'_, '_>,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<HeadOutput> {
        let mut x = x;
        for (i, block) in self.outlookers.iter().enumerate() {
            x = block.forward(g, p, x, grid, ctx)?;
            trace.push((format!("outlookers.{i}"), g.shape(x).to_vec()));
        }
        let (mut x, _grid) = self.downsample.forward(g, p, x, grid)?;
        trace.push(("downsample".into(), g.shape(x).to_vec()));
        for (i, block) in self.transformers.iter().enumerate() {
            x = block.forward(g, p, x, ctx)?;
            trace.push((format!("transformers.{i}"), g.shape(x).to_vec()));
        }
        let x = self.norm.forward(g, p, x)?;
        let out = self.head.forward(g, p, x)?;
        trace.push(("head".into(), vec![1, HEAD_OUTPUTS]));
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, grid: GridShape, ctx: Ctx<'_, '_>) -> Result<HeadOutput> {
        self.forward_traced(g, p, x, grid, ctx, &mut Vec::new())
    }
}
