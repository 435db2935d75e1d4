//! Detection post-processing: face/person matching and crop preparation.

pub mod hungarian;
pub mod image;
pub mod preprocess;

pub use image::{Image, CHANNEL_MEAN, CHANNEL_STD};
pub use preprocess::{
    assign, build_pairs, detach_objects, keep_crop, letterbox, prepare_crop, trim, trim_region, AssignmentResult, BBox,
    Detection, DetectionKind, PairBoxes, Region,
};

use crate::config::PreprocessConfig;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Detection manifest line: every detection found in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image: String,
    pub detections: Vec<Detection>,
}

/// Pair manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: String,
    #[serde(flatten)]
    pub boxes: PairBoxes,
}

/// Image paths in a manifest are taken relative to the manifest's folder.
pub fn resolve(manifest: &Path, image: &str) -> std::path::PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Runs [`build_pairs`] over a detection manifest.
pub fn pair_manifest(detections: &Path, cfg: &PreprocessConfig) -> Result<Vec<PairRecord>> {
    let records: Vec<DetectionRecord> = crate::jsonl::read(detections)?;
    let mut out = Vec::new();
    for r in records {
        let img = Image::read_ppm(&resolve(detections, &r.image))?;
        for boxes in build_pairs(img.width, img.height, &r.detections, cfg)? {
            out.push(PairRecord { image: r.image.clone(), boxes });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(40, 80, [0.2, 0.3, 0.4]).write_ppm(&dir.path().join("a.ppm")).unwrap();
        let det = dir.path().join("det.jsonl");
        std::fs::write(
            &det,
            r#"{"image":"a.ppm","detections":[{"kind":"person","x0":0,"y0":0,"x1":40,"y1":40,"score":0.9},{"kind":"face","x0":10,"y0":2,"x1":30,"y1":20,"score":0.7}]}"#,
        )
        .unwrap();
        let pairs = pair_manifest(&det, &PreprocessConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        let line = serde_json::to_string(&pairs[0]).unwrap();
        assert!(line.starts_with(r#"{"image":"a.ppm","face_bbox":{"x0":10"#), "{line}");
        let back: PairRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, pairs[0]);
    }
}
