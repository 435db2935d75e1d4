//! Labelled sample manifests and their conversion into model inputs.

use super::augment::{augment_pair, input_dropout, jitter_box};
use super::objective::LabeledPair;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::{AgeNormalizer, LdsWeights};
use crate::nn::CropPair;
use crate::pairing::{prepare_crop, resolve, BBox, Image};
use crate::votes::Gender;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

/// Training/evaluation manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    #[serde(default)]
    pub face_bbox: Option<BBox>,
    #[serde(default)]
    pub body_bbox: Option<BBox>,
    /// Boxes of other objects whose pixels are filled in both crops.
    #[serde(default)]
    pub occluders: Vec<BBox>,
    pub age: f64,
    pub gender: Gender,
}

impl SampleRecord {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.face_bbox.is_none() && self.body_bbox.is_none() {
            return Err(Error::Input(format!("record for {} has neither face nor body box", self.image)));
        }
        for b in self.face_bbox.iter().chain(&self.body_bbox).chain(&self.occluders) {
            b.validate()?;
        }
        if !(self.age >= cfg.age.min && self.age <= cfg.age.max) {
            return Err(Error::Input(format!(
                "age {} of {} is outside [{}, {}]",
                self.age, self.image, cfg.age.min, cfg.age.max
            )));
        }
        Ok(())
    }
}

/// Records with their decoded images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    images: Vec<Arc<Image>>,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, images: Vec<Arc<Image>>) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::Input("one image per record is required".into()));
        }
        Ok(Dataset { records, images })
    }

    /// Reads a manifest and every image it names (each file once).
    pub fn load(manifest: &Path) -> Result<Self> {
        let records: Vec<SampleRecord> = crate::jsonl::read(manifest)?;
        let mut cache: HashMap<String, Arc<Image>> = HashMap::new();
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let img = match cache.get(&r.image) {
                Some(i) => i.clone(),
                None => {
                    let i = Arc::new(Image::read_ppm(&resolve(manifest, &r.image))?);
                    cache.insert(r.image.clone(), i.clone());
                    i
                }
            };
            images.push(img);
        }
        Self::new(records, images)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Input("empty manifest".into()));
        }
        self.records.iter().try_for_each(|r| r.validate(cfg))
    }

    /// Model inputs of record `i`. With an `rng`, boxes are jittered and the
    /// pair is flipped/erased as configured; input dropout is separate.
    pub fn pair<R: Rng + ?Sized>(&self, i: usize, cfg: &ModelConfig, rng: Option<&mut R>) -> Result<CropPair> {
        let r = &self.records[i];
        let img = &self.images[i];
        let side = cfg.model.image_size;
        match rng {
            None => {
                let crop = |b: &Option<BBox>| b.map(|b| prepare_crop(img, &b, &r.occluders, side)).transpose();
                CropPair::new(crop(&r.face_bbox)?, crop(&r.body_bbox)?)
            }
            Some(rng) => {
                let mut crop = |b: &Option<BBox>| {
                    b.map(|b| {
                        let j = jitter_box(&b, img.width, img.height, &cfg.augment, rng);
                        prepare_crop(img, &j, &r.occluders, side)
                    })
                    .transpose()
                };
                let face = crop(&r.face_bbox)?;
                let body = crop(&r.body_bbox)?;
                let mut pair = CropPair::new(face, body)?;
                augment_pair(&mut pair, &cfg.augment, rng);
                Ok(pair)
            }
        }
    }

    /// Training example `i`: augmented, with input dropout, normalised age
    /// target and LDS weight.
    pub fn training_example<R: Rng + ?Sized>(
        &self,
        i: usize,
        cfg: &ModelConfig,
        lds: &LdsWeights,
        rng: &mut R,
    ) -> Result<LabeledPair> {
        let mut pair = self.pair(i, cfg, Some(&mut *rng))?;
        if cfg.model.multi_input {
            input_dropout(&mut pair, &cfg.input_dropout, rng);
        } else {
            // the single-input model sees faces only
            pair.body = None;
            if !pair.face_present() {
                return Err(Error::Input(format!("record {i} has no face for the single-input model")));
            }
        }
        self.with_targets(i, pair, cfg, lds)
    }

    /// Evaluation-style example `i`: no augmentation, both available views.
    pub fn labeled(&self, i: usize, cfg: &ModelConfig, lds: &LdsWeights) -> Result<LabeledPair> {
        let pair = self.pair::<rand_chacha::ChaCha8Rng>(i, cfg, None)?;
        self.with_targets(i, pair, cfg, lds)
    }

    fn with_targets(&self, i: usize, pair: CropPair, cfg: &ModelConfig, lds: &LdsWeights) -> Result<LabeledPair> {
        let r = &self.records[i];
        let norm = AgeNormalizer::new(cfg.age.min, cfg.age.max)?;
        Ok(LabeledPair {
            pair,
            age_norm: norm.normalize(r.age),
            gender: r.gender.index(),
            weight: lds.weight_for(r.age),
        })
    }

    pub fn ages(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.age).collect()
    }
}
