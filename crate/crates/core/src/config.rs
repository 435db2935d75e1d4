//! Every architecture, loss, preprocessing and training knob in one place.
//!
//! Configs are TOML. Unknown keys are rejected at every level, and the
//! canonical serialization is hashed into each checkpoint.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seed: u64,
    pub model: ArchConfig,
    pub age: AgeRange,
    pub loss: LossConfig,
    pub lds: LdsConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub input_dropout: InputDropoutConfig,
    pub preprocess: PreprocessConfig,
    pub votes: VoteConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over all trunk tokens before the head.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width of the first stage; the second stage is twice as wide.
    pub embed_dim: usize,
    pub outlooker_depth: usize,
    /// Local window side of outlook attention (odd).
    pub outlook_kernel: usize,
    pub outlook_heads: usize,
    pub transformer_depth: usize,
    pub transformer_heads: usize,
    pub mlp_ratio: f64,
    pub head_hidden: usize,
    /// Two inputs with a feature enhancer, or the single-input (face) model.
    pub multi_input: bool,
    pub fusion_heads: usize,
    /// Cross-attention in both directions; `false` keeps only face <- body.
    pub bidirectional_fusion: bool,
    pub pooling: Pooling,
    pub ln_eps: f64,
    pub drop_rate: f64,
    pub drop_path_rate: f64,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgeRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gender_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdsConfig {
    pub enabled: bool,
    pub kernel_size: usize,
    pub sigma: f64,
    pub bin_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    /// Scale `lr` by `batch_size / lr_base_batch`.
    pub scale_lr_with_batch: bool,
    pub lr_base_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub jitter_pos: f64,
    pub jitter_size: f64,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub erase_min_area: f64,
    pub erase_max_area: f64,
    /// Reserved slot; only the flip/jitter/erase subset is implemented.
    pub randaugment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputDropoutConfig {
    pub body: f64,
    pub face: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub trim_threshold: f64,
    pub min_side: usize,
    pub min_area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteConfig {
    pub mae_floor: f64,
    pub kde_bandwidth: f64,
    pub kde_grid_step: f64,
    pub gender_min_frequency: f64,
    pub winsor_fraction: f64,
    pub truncate_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            outlooker_depth: 2,
            outlook_kernel: 3,
            outlook_heads: 1,
            transformer_depth: 2,
            transformer_heads: 4,
            mlp_ratio: 3.0,
            head_hidden: 128,
            multi_input: true,
            fusion_heads: 4,
            bidirectional_fusion: true,
            pooling: Pooling::Mean,
            ln_eps: 1e-6,
            drop_rate: 0.0,
            drop_path_rate: 0.0,
            init_std: 0.02,
        }
    }
}

impl Default for AgeRange {
    fn default() -> Self {
        AgeRange { min: 0.0, max: 100.0 }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gender_weight: 0.03 }
    }
}

impl Default for LdsConfig {
    fn default() -> Self {
        LdsConfig { enabled: true, kernel_size: 5, sigma: 2.0, bin_width: 1.0 }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1.0e-5,
            weight_decay: 5.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_lr: 1.0e-6,
            warmup_steps: 0,
            scale_lr_with_batch: false,
            lr_base_batch: 192,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 200, batch_size: 8, log_every: 10 }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_pos: 0.45,
            jitter_size: 0.45,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_min_area: 0.02,
            erase_max_area: 0.2,
            randaugment: false,
        }
    }
}

impl Default for InputDropoutConfig {
    fn default() -> Self {
        InputDropoutConfig { body: 0.1, face: 0.5 }
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { trim_threshold: 0.95, min_side: 16, min_area_fraction: 0.3 }
    }
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            mae_floor: 0.5,
            kde_bandwidth: 2.0,
            kde_grid_step: 0.1,
            gender_min_frequency: 0.75,
            winsor_fraction: 0.3,
            truncate_fraction: 0.3,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 64x64 inputs, well under a million parameters.
    pub fn tiny() -> Self {
        ModelConfig {
            seed: 0,
            model: ArchConfig::default(),
            age: AgeRange::default(),
            loss: LossConfig::default(),
            lds: LdsConfig::default(),
            optim: OptimConfig { lr: 5e-4, warmup_steps: 20, ..OptimConfig::default() },
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            input_dropout: InputDropoutConfig::default(),
            preprocess: PreprocessConfig::default(),
            votes: VoteConfig::default(),
        }
    }

    /// A very small network that can be finite-difference checked on every
    /// single parameter.
    pub fn micro() -> Self {
        let mut c = Self::tiny();
        c.model = ArchConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            outlooker_depth: 1,
            outlook_kernel: 3,
            outlook_heads: 1,
            transformer_depth: 1,
            transformer_heads: 2,
            mlp_ratio: 2.0,
            head_hidden: 8,
            fusion_heads: 2,
            ..ArchConfig::default()
        };
        c
    }

    /// The full-size recipe: 224x224 inputs with 8x8 patches, AdamW at
    /// 1.5e-5 with a 1e-6 warmup and 0.32 drop / drop-path.
    pub fn d1() -> Self {
        ModelConfig {
            seed: 0,
            model: ArchConfig {
                image_size: 224,
                patch_size: 8,
                embed_dim: 192,
                outlooker_depth: 4,
                outlook_kernel: 3,
                outlook_heads: 6,
                transformer_depth: 14,
                transformer_heads: 12,
                mlp_ratio: 3.0,
                head_hidden: 384,
                fusion_heads: 6,
                drop_rate: 0.32,
                drop_path_rate: 0.32,
                ..ArchConfig::default()
            },
            optim: OptimConfig { lr: 1.5e-5, warmup_steps: 25, scale_lr_with_batch: true, ..OptimConfig::default() },
            train: TrainConfig { steps: 220, batch_size: 192, log_every: 1 },
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            "d1" => Ok(Self::d1()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Hex digest of the canonical TOML form.
    pub fn hash(&self) -> String {
        digest_hex(self.to_toml_string().as_bytes())
    }

    /// Digest of the fields that fix the shared trunk: embedding, outlookers,
    /// transformers and head. Two configs with equal trunk hashes can
    /// exchange those weights.
    pub fn trunk_hash(&self) -> String {
        let m = &self.model;
        let key = format!(
            "{} {} {} {} {} {} {} {} {} {} {}",
            m.image_size,
            m.patch_size,
            m.embed_dim,
            m.outlooker_depth,
            m.outlook_kernel,
            m.outlook_heads,
            m.transformer_depth,
            m.transformer_heads,
            m.mlp_ratio,
            m.head_hidden,
            m.ln_eps
        );
        digest_hex(key.as_bytes())
    }

    /// Learning rate after optional linear batch-size scaling.
    pub fn base_lr(&self) -> f64 {
        if self.optim.scale_lr_with_batch {
            self.optim.lr * self.train.batch_size as f64 / self.optim.lr_base_batch as f64
        } else {
            self.optim.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.patch_size == 0 || m.image_size == 0 || !m.image_size.is_multiple_of(m.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                m.image_size, m.patch_size
            ));
        }
        let grid = m.image_size / m.patch_size;
        if !grid.is_multiple_of(2) {
            return fail(format!("token grid {grid} must be even for downsampling"));
        }
        if m.outlook_kernel.is_multiple_of(2) || m.outlook_kernel > grid {
            return fail(format!("outlook_kernel {} must be odd and at most the token grid {grid}", m.outlook_kernel));
        }
        let heads_ok = |dim: usize, h: usize| h > 0 && dim.is_multiple_of(h);
        if m.embed_dim == 0
            || !heads_ok(m.embed_dim, m.outlook_heads)
            || !heads_ok(m.embed_dim, m.fusion_heads)
            || !heads_ok(2 * m.embed_dim, m.transformer_heads)
        {
            return fail("head counts must divide their token widths".into());
        }
        if !(m.mlp_ratio > 0.0) || m.head_hidden == 0 || !(m.ln_eps > 0.0) || !(m.init_std > 0.0) {
            return fail("mlp_ratio, head_hidden, ln_eps and init_std must be positive".into());
        }
        let probs = [
            ("model.drop_rate", m.drop_rate),
            ("model.drop_path_rate", m.drop_path_rate),
            ("augment.flip_prob", self.augment.flip_prob),
            ("augment.erase_prob", self.augment.erase_prob),
            ("augment.erase_min_area", self.augment.erase_min_area),
            ("augment.erase_max_area", self.augment.erase_max_area),
            ("input_dropout.body", self.input_dropout.body),
            ("input_dropout.face", self.input_dropout.face),
            ("preprocess.trim_threshold", self.preprocess.trim_threshold),
            ("preprocess.min_area_fraction", self.preprocess.min_area_fraction),
            ("votes.gender_min_frequency", self.votes.gender_min_frequency),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        if m.drop_rate >= 1.0 || m.drop_path_rate >= 1.0 {
            return fail("drop rates must be below 1".into());
        }
        if self.input_dropout.body + self.input_dropout.face > 1.0 {
            return fail("input_dropout.body + input_dropout.face must not exceed 1".into());
        }
        if self.augment.erase_min_area > self.augment.erase_max_area {
            return fail("augment.erase_min_area exceeds erase_max_area".into());
        }
        if !(self.age.max > self.age.min) {
            return fail(format!("age.max {} must exceed age.min {}", self.age.max, self.age.min));
        }
        if self.loss.gender_weight < 0.0 {
            return fail("loss.gender_weight must be non-negative".into());
        }
        if self.lds.kernel_size.is_multiple_of(2) || !(self.lds.sigma > 0.0) || !(self.lds.bin_width > 0.0) {
            return fail("lds.kernel_size must be odd, sigma and bin_width positive".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0)
            || o.weight_decay < 0.0
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return fail("invalid optimizer settings".into());
        }
        if o.lr_base_batch == 0 || self.train.batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        let v = &self.votes;
        if !(v.mae_floor > 0.0) || !(v.kde_bandwidth > 0.0) || !(v.kde_grid_step > 0.0) {
            return fail("vote floor, bandwidth and grid step must be positive".into());
        }
        if !(0.0..0.5).contains(&v.winsor_fraction) || !(0.0..0.5).contains(&v.truncate_fraction) {
            return fail("winsor/truncate fractions must lie in [0, 0.5)".into());
        }
        Ok(())
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
