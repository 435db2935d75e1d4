//! Face/body fusion: per-view patch embeddings, the cross-attention feature
//! enhancer and the full two-input model.

use super::layers::{residual, Ctx, LayerNorm, Linear, Mlp};
use super::params::{Bound, ParamStore};
use super::volo::{Attention, GridShape, HeadOutput, PatchEmbedding, VoloTrunk};
use crate::config::{digest_hex, ArchConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

/// One model input: a face crop and/or a body crop, each `[3, S, S]`.
/// An absent side is `None`; it behaves exactly like an all-zero image.
#[derive(Debug, Clone, PartialEq)]
pub struct CropPair {
    pub face: Option<Tensor>,
    pub body: Option<Tensor>,
}

impl CropPair {
    pub fn new(face: Option<Tensor>, body: Option<Tensor>) -> Result<Self> {
        let pair = CropPair { face, body };
        pair.validate()?;
        Ok(pair)
    }

    pub fn face_only(face: Tensor) -> Result<Self> {
        Self::new(Some(face), None)
    }

    pub fn body_only(body: Tensor) -> Result<Self> {
        Self::new(None, Some(body))
    }

    pub fn face_present(&self) -> bool {
        self.face.is_some()
    }

    pub fn body_present(&self) -> bool {
        self.body.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.face.is_none() && self.body.is_none() {
            return Err(Error::Input("crop pair has neither face nor body".into()));
        }
        for t in self.face.iter().chain(self.body.iter()) {
            if t.ndim() != 3 || t.shape()[0] != 3 {
                return Err(Error::Input(format!("crop must be [3, H, W], got {:?}", t.shape())));
            }
        }
        if let (Some(f), Some(b)) = (&self.face, &self.body) {
            if f.shape() != b.shape() {
                return Err(Error::shape("crop pair", f.shape(), b.shape()));
            }
        }
        Ok(())
    }

    /// Shape shared by the present crops.
    pub fn image_shape(&self) -> &[usize] {
        self.face.as_ref().or(self.body.as_ref()).expect("validated").shape()
    }
}

/// Residual cross-attention: queries from one view, keys and values from
/// the other, each side layer-normed first.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub core: Attention,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        eps: f64,
        std: f64,
    ) -> Self {
        CrossAttention {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim, eps),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim, eps),
            q: Linear::without_bias(store, rng, &format!("{name}.q"), dim, dim, std),
            kv: Linear::without_bias(store, rng, &format!("{name}.kv"), dim, 2 * dim, std),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, std),
            core: Attention { heads, dim },
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * LayerNorm::param_count(dim) + 3 * dim * dim + Linear::param_count(dim, dim)
    }

    /// Returns the enriched query tokens and the `[heads, Nq, Nk]` weights.
    pub fn forward(&self, g: &mut Graph, p: &Bound, query: Var, context: Var, ctx: Ctx<'_, '_>) -> Result<(Var, Var)> {
        let d = self.core.dim;
        let qn = self.norm_q.forward(g, p, query)?;
        let cn = self.norm_kv.forward(g, p, context)?;
        let q = self.q.forward(g, p, qn)?;
        let kv = self.kv.forward(g, p, cn)?;
        let k = g.slice(kv, 1, 0, d)?;
        let v = g.slice(kv, 1, d, d)?;
        let (out, attn) = self.core.attend(g, q, k, v)?;
        let out = self.proj.forward(g, p, out)?;
        Ok((residual(g, query, out, ctx)?, attn))
    }
}

/// Cross-view enhancement followed by concatenation and an MLP that maps
/// the `2C` joint features back to `C`.
#[derive(Debug, Clone)]
pub struct FeatureEnhancer {
    pub face_from_body: CrossAttention,
    pub body_from_face: Option<CrossAttention>,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
}

impl FeatureEnhancer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ArchConfig) -> Self {
        let c = cfg.embed_dim;
        let (eps, std) = (cfg.ln_eps, cfg.init_std);
        let face_from_body = CrossAttention::new(store, rng, "enhancer.face_from_body", c, cfg.fusion_heads, eps, std);
        let body_from_face = cfg
            .bidirectional_fusion
            .then(|| CrossAttention::new(store, rng, "enhancer.body_from_face", c, cfg.fusion_heads, eps, std));
        FeatureEnhancer {
            face_from_body,
            body_from_face,
            norm: LayerNorm::new(store, "enhancer.norm", 2 * c, eps),
            mlp: Mlp::new(store, rng, "enhancer.mlp", 2 * c, 2 * c, c, std),
            dim: c,
        }
    }

    pub fn param_count(cfg: &ArchConfig) -> usize {
        let c = cfg.embed_dim;
        let units = if cfg.bidirectional_fusion { 2 } else { 1 };
        units * CrossAttention::param_count(c) + LayerNorm::param_count(2 * c) + Mlp::param_count(2 * c, 2 * c, c)
    }

    /// Cross-attention stage only: `(face', body')`.
    pub fn enrich(&self, g: &mut Graph, p: &Bound, face: Var, body: Var, ctx: Ctx<'_, '_>) -> Result<(Var, Var)> {
        let (sf, sb) = (g.shape(face), g.shape(body));
        if sf != sb || sf.len() != 2 || sf[1] != self.dim {
            return Err(Error::shape("enhance", sf, sb));
        }
        let (face2, _) = self.face_from_body.forward(g, p, face, body, ctx)?;
        let body2 = match &self.body_from_face {
            Some(unit) => unit.forward(g, p, body, face, ctx)?.0,
            None => body,
        };
        Ok((face2, body2))
    }

    /// `[N, C]` x `[N, C]` -> `[N, C]` fused tokens.
    pub fn enhance(&self, g: &mut Graph, p: &Bound, face: Var, body: Var, ctx: Ctx<'_, '_>) -> Result<Var> {
        let (face2, body2) = self.enrich(g, p, face, body, ctx)?;
        let joint = g.concat(&[face2, body2], 1)?;
        let joint = self.norm.forward(g, p, joint)?;
        self.mlp.forward(g, p, joint, ctx)
    }
}

/// Inference result for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub gender_logits: [f64; 2],
    /// Normalised age, not clamped.
    pub age_norm: f64,
}

impl Prediction {
    /// Index of the larger gender logit (0 = male, 1 = female).
    pub fn gender_index(&self) -> usize {
        usize::from(self.gender_logits[1] > self.gender_logits[0])
    }
}

#[derive(Debug, Clone)]
struct ZeroCache {
    key: String,
    face: Tensor,
    body: Option<Tensor>,
}

/// Two-input age and gender model: separate face and body patch embeddings,
/// the feature enhancer, then the VOLO trunk and joint head. With
/// `multi_input = false` it is the plain single-input (face) model.
#[derive(Debug)]
pub struct MiVolo {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub face_embed: PatchEmbedding,
    pub body_embed: Option<PatchEmbedding>,
    pub enhancer: Option<FeatureEnhancer>,
    pub trunk: VoloTrunk,
    zero_cache: Mutex<Option<ZeroCache>>,
}

impl Clone for MiVolo {
    fn clone(&self) -> Self {
        MiVolo {
            config: self.config.clone(),
            store: self.store.clone(),
            face_embed: self.face_embed.clone(),
            body_embed: self.body_embed.clone(),
            enhancer: self.enhancer.clone(),
            trunk: self.trunk.clone(),
            zero_cache: Mutex::new(None),
        }
    }
}

pub const FACE_EMBED: &str = "face_embed.";
pub const BODY_EMBED: &str = "body_embed.";
pub const ENHANCER: &str = "enhancer.";

impl MiVolo {
    /// Randomly initialised model; weights depend only on `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::build(config, &mut rng))
    }

    fn build(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let cfg = &config.model;
        let mut store = ParamStore::new();
        let face_embed =
            PatchEmbedding::new(&mut store, rng, "face_embed", cfg.patch_size, cfg.embed_dim, cfg.init_std);
        let (body_embed, enhancer) = if cfg.multi_input {
            let body = PatchEmbedding::new(&mut store, rng, "body_embed", cfg.patch_size, cfg.embed_dim, cfg.init_std);
            (Some(body), Some(FeatureEnhancer::new(&mut store, rng, cfg)))
        } else {
            (None, None)
        };
        let trunk = VoloTrunk::new(&mut store, rng, cfg);
        MiVolo { config: config.clone(), store, face_embed, body_embed, enhancer, trunk, zero_cache: Mutex::new(None) }
    }

    /// Closed-form parameter count for `cfg`.
    pub fn param_count(cfg: &ArchConfig) -> usize {
        let embed = PatchEmbedding::param_count(cfg.patch_size, cfg.embed_dim);
        let multi = if cfg.multi_input { embed + FeatureEnhancer::param_count(cfg) } else { 0 };
        embed + multi + VoloTrunk::param_count(cfg)
    }

    pub fn is_multi_input(&self) -> bool {
        self.body_embed.is_some()
    }

    fn check_pair(&self, pair: &CropPair) -> Result<()> {
        pair.validate()?;
        let s = self.config.model.image_size;
        if pair.image_shape() != [3, s, s] {
            return Err(Error::Input(format!("crops must be [3, {s}, {s}], got {:?}", pair.image_shape())));
        }
        if !self.is_multi_input() && !pair.face_present() {
            return Err(Error::Input("single-input model needs a face crop".into()));
        }
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph,
        p: &Bound,
        embed: &PatchEmbedding,
        img: Option<&Tensor>,
    ) -> Result<(Var, GridShape)> {
        let s = self.config.model.image_size;
        let x = match img {
            Some(t) => g.constant(t.clone()),
            None => g.constant(Tensor::zeros(vec![3, s, s])),
        };
        embed.forward(g, p, x)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        p: &Bound,
        pair: &CropPair,
        skip: bool,
        ctx: Ctx<'_, '_>,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<HeadOutput> {
        self.check_pair(pair)?;
        let (Some(body_embed), Some(enhancer)) = (&self.body_embed, &self.enhancer) else {
            let (tokens, grid) = self.embed(g, p, &self.face_embed, pair.face.as_ref())?;
            trace.push(("face_embed".into(), g.shape(tokens).to_vec()));
            return self.trunk.forward_traced(g, p, tokens, grid, ctx, trace);
        };
        let grid = self.face_embed.grid_for(self.config.model.image_size, self.config.model.image_size)?;
        let (face, body) = if skip {
            let cached = self.zero_tokens();
            let face = match &pair.face {
                Some(_) => self.embed(g, p, &self.face_embed, pair.face.as_ref())?.0,
                None => g.constant(cached.face),
            };
            let body = match &pair.body {
                Some(_) => self.embed(g, p, body_embed, pair.body.as_ref())?.0,
                None => g.constant(cached.body.expect("multi-input cache")),
            };
            (face, body)
        } else {
            let face = self.embed(g, p, &self.face_embed, pair.face.as_ref())?.0;
            let body = self.embed(g, p, body_embed, pair.body.as_ref())?.0;
            (face, body)
        };
        trace.push(("face_embed".into(), g.shape(face).to_vec()));
        trace.push(("body_embed".into(), g.shape(body).to_vec()));
        let fused = enhancer.enhance(g, p, face, body, ctx)?;
        trace.push(("enhancer".into(), g.shape(fused).to_vec()));
        self.trunk.forward_traced(g, p, fused, grid, ctx, trace)
    }

    /// Full forward on a tape. Absent sides run through their embedding as
    /// zero images.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, pair: &CropPair, ctx: Ctx<'_, '_>) -> Result<HeadOutput> {
        self.forward_inner(g, p, pair, false, ctx, &mut Vec::new())
    }

    /// `(stage, shape)` after every block of a forward pass.
    pub fn shape_trace(&self, pair: &CropPair) -> Result<Vec<(String, Vec<usize>)>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let mut trace = Vec::new();
        self.forward_inner(&mut g, &p, pair, false, &mut None, &mut trace)?;
        Ok(trace)
    }

    fn predict(&self, pair: &CropPair, skip: bool) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward_inner(&mut g, &p, pair, skip, &mut None, &mut Vec::new())?;
        let gl = g.value(out.gender_logits).data();
        let pred = Prediction { gender_logits: [gl[0], gl[1]], age_norm: g.value(out.age).data()[0] };
        if !pred.age_norm.is_finite() || !gl.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite model output".into()));
        }
        Ok(pred)
    }

    /// Inference on one pair.
    pub fn forward_pair(&self, pair: &CropPair) -> Result<Prediction> {
        self.predict(pair, false)
    }

    /// Inference for a single-view pair that reuses the cached zero-input
    /// embedding for the missing side instead of running its projection.
    pub fn forward_pair_skip(&self, pair: &CropPair) -> Result<Prediction> {
        if !self.is_multi_input() {
            return Err(Error::Misuse("skip path needs the two-input model".into()));
        }
        if pair.face_present() && pair.body_present() {
            return Err(Error::Misuse("skip path needs exactly one absent input".into()));
        }
        self.predict(pair, true)
    }

    /// Digest of the embedding biases, which fully determine the zero-input
    /// token grids.
    fn weight_version(&self) -> String {
        let mut bytes = Vec::new();
        for embed in std::iter::once(&self.face_embed).chain(self.body_embed.as_ref()) {
            for v in self.store.param(embed.proj.bias.expect("patch projection has a bias")).value.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        digest_hex(&bytes)
    }

    fn zero_tokens(&self) -> ZeroCache {
        let key = self.weight_version();
        let mut cache = self.zero_cache.lock().expect("cache lock");
        if cache.as_ref().is_none_or(|c| c.key != key) {
            let s = self.config.model.image_size;
            let grid = self.face_embed.grid_for(s, s).expect("validated config");
            *cache = Some(ZeroCache {
                key,
                face: self.face_embed.zero_input_tokens(&self.store, grid),
                body: self.body_embed.as_ref().map(|b| b.zero_input_tokens(&self.store, grid)),
            });
        }
        cache.clone().expect("filled above")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::trunc_normal;

    fn micro() -> ModelConfig {
        ModelConfig::micro()
    }

    fn image(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
        trunc_normal(rng, vec![3, side, side], 0.5)
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [ModelConfig::micro(), ModelConfig::tiny()] {
            let m = MiVolo::new(&cfg).unwrap();
            assert_eq!(m.store.numel(), MiVolo::param_count(&cfg.model));
        }
        let tiny = MiVolo::param_count(&ModelConfig::tiny().model);
        assert!(tiny < 1_000_000, "{tiny}");
        let mut single = ModelConfig::micro();
        single.model.multi_input = false;
        let m = MiVolo::new(&single).unwrap();
        assert_eq!(m.store.numel(), MiVolo::param_count(&single.model));
    }

    #[test]
    fn both_absent_is_an_input_error() {
        assert!(matches!(CropPair::new(None, None), Err(Error::Input(_))));
    }

    #[test]
    fn single_view_pairs_produce_outputs() {
        let cfg = micro();
        let m = MiVolo::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = cfg.model.image_size;
        let f = m.forward_pair(&CropPair::face_only(image(&mut rng, s)).unwrap()).unwrap();
        let b = m.forward_pair(&CropPair::body_only(image(&mut rng, s)).unwrap()).unwrap();
        assert!(f.age_norm.is_finite() && b.age_norm.is_finite());
    }

    #[test]
    fn wrong_crop_size_rejected() {
        let m = MiVolo::new(&micro()).unwrap();
        let pair = CropPair::face_only(Tensor::zeros(vec![3, 8, 8])).unwrap();
        assert!(matches!(m.forward_pair(&pair), Err(Error::Input(_))));
    }

    #[test]
    fn skip_path_misuse() {
        let cfg = micro();
        let m = MiVolo::new(&cfg).unwrap();
        let s = cfg.model.image_size;
        let pair = CropPair::new(Some(Tensor::zeros(vec![3, s, s])), Some(Tensor::zeros(vec![3, s, s]))).unwrap();
        assert!(matches!(m.forward_pair_skip(&pair), Err(Error::Misuse(_))));
    }

    #[test]
    fn skip_cache_follows_weight_changes() {
        let cfg = micro();
        let mut m = MiVolo::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = cfg.model.image_size;
        let pair = CropPair::face_only(image(&mut rng, s)).unwrap();
        assert_eq!(m.forward_pair_skip(&pair).unwrap(), m.forward_pair(&pair).unwrap());
        let c = cfg.model.embed_dim;
        m.store.set_value("body_embed.proj.bias", trunc_normal(&mut rng, vec![c], 0.5)).unwrap();
        assert_eq!(m.forward_pair_skip(&pair).unwrap(), m.forward_pair(&pair).unwrap());
    }

    #[test]
    fn zero_body_leaves_face_untouched_by_cross_attention() {
        let cfg = micro();
        let m = MiVolo::new(&cfg).unwrap();
        let enh = m.enhancer.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let c = cfg.model.embed_dim;
        let face = g.constant(trunc_normal(&mut rng, vec![16, c], 1.0));
        let body = g.constant(Tensor::zeros(vec![16, c]));
        let (face2, _) = enh.enrich(&mut g, &p, face, body, &mut None).unwrap();
        assert_eq!(g.value(face2), g.value(face));
        let fused = enh.enhance(&mut g, &p, face, body, &mut None).unwrap();
        assert_eq!(g.shape(fused), &[16, c]);
        let bad = g.constant(Tensor::zeros(vec![8, c]));
        assert!(enh.enhance(&mut g, &p, face, bad, &mut None).is_err());
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let cfg = micro();
        let m = MiVolo::new(&cfg).unwrap();
        let enh = m.enhancer.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let c = cfg.model.embed_dim;
        let face = g.constant(trunc_normal(&mut rng, vec![16, c], 1.0));
        let body = g.constant(trunc_normal(&mut rng, vec![16, c], 1.0));
        let (_, attn) = enh.face_from_body.forward(&mut g, &p, face, body, &mut None).unwrap();
        for row in g.value(attn).data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_directional_fusion_ablation() {
        let mut cfg = micro();
        cfg.model.bidirectional_fusion = false;
        let m = MiVolo::new(&cfg).unwrap();
        assert!(m.enhancer.as_ref().unwrap().body_from_face.is_none());
        assert_eq!(m.store.numel(), MiVolo::param_count(&cfg.model));
        assert!(m.store.get("enhancer.body_from_face.q.weight").is_none());
    }
}
