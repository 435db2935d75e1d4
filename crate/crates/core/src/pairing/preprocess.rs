//! Face/person matching and crop clean-up: occluder removal, border trim,
//! size filter, letterbox resize and channel normalization.

use super::hungarian;
use super::image::{Image, CHANNEL_MEAN};
use crate::config::PreprocessConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0) * h.max(0)
    }

    /// Clipped to a `width x height` image; `None` if nothing is left.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.clamp(0, width as i64),
            y0: self.y0.clamp(0, height as i64),
            x1: self.x1.clamp(0, width as i64),
            y1: self.y1.clamp(0, height as i64),
        };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionKind {
    Face,
    Person,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub kind: DetectionKind,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentResult {
    /// `(face index, person index)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_faces: Vec<usize>,
    pub unmatched_persons: Vec<usize>,
}

/// `1 - |f ∩ p| / |f|`, or `None` when the boxes do not overlap.
pub fn pair_cost(face: &BBox, person: &BBox) -> Option<f64> {
    let inter = face.intersection_area(person);
    (inter > 0).then(|| 1.0 - inter as f64 / face.area() as f64)
}

/// Minimum-cost one-to-one face/person matching. Non-overlapping pairs are
/// infeasible: the matching first maximizes the number of overlapping
/// pairs, then minimizes their total cost.
pub fn assign(faces: &[BBox], persons: &[BBox]) -> Result<AssignmentResult> {
    for b in faces.iter().chain(persons) {
        b.validate()?;
    }
    // any single infeasible pair costs more than every feasible matching
    let infeasible = (faces.len().min(persons.len()) + 1) as f64;
    let cost: Vec<Vec<f64>> =
        faces.iter().map(|f| persons.iter().map(|p| pair_cost(f, p).unwrap_or(infeasible)).collect()).collect();
    let rows = hungarian::solve(&cost)?;
    let mut out = AssignmentResult::default();
    let mut person_used = vec![false; persons.len()];
    for (i, col) in rows.into_iter().enumerate() {
        match col {
            Some(j) if pair_cost(&faces[i], &persons[j]).is_some() => {
                out.pairs.push((i, j));
                person_used[j] = true;
            }
            _ => out.unmatched_faces.push(i),
        }
    }
    out.unmatched_persons = (0..persons.len()).filter(|&j| !person_used[j]).collect();
    Ok(out)
}

/// Pixels of the `crop` box covered by any of `others`, row-major over the
/// crop.
pub fn occlusion_mask(crop: &BBox, others: &[BBox]) -> Vec<bool> {
    let (w, h) = (crop.width().max(0) as usize, crop.height().max(0) as usize);
    let mut mask = vec![false; w * h];
    for o in others {
        let x0 = (o.x0.max(crop.x0) - crop.x0) as usize;
        let x1 = (o.x1.min(crop.x1) - crop.x0).max(0) as usize;
        let y0 = (o.y0.max(crop.y0) - crop.y0) as usize;
        let y1 = (o.y1.min(crop.y1) - crop.y0).max(0) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

/// Fills every pixel of `crop` (cut from the source at `at`) that lies in
/// any of `others` with the channel mean. Returns the image and the mask.
pub fn detach_objects(at: &BBox, crop: &Image, others: &[BBox]) -> Result<(Image, Vec<bool>)> {
    if crop.width as i64 != at.width() || crop.height as i64 != at.height() {
        return Err(Error::Input(format!("crop {}x{} does not match box {at:?}", crop.height, crop.width)));
    }
    let mask = occlusion_mask(at, others);
    let mut out = crop.clone();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out.set_pixel(i / crop.width, i % crop.width, CHANNEL_MEAN);
    }
    Ok((out, mask))
}

/// Region kept by [`trim_region`], relative to the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Peels border rows and columns whose filled fraction is at least
/// `threshold`, repeating until no border qualifies. `None` when nothing is
/// left.
pub fn trim_region(mask: &[bool], width: usize, height: usize, threshold: f64) -> Option<Region> {
    assert_eq!(mask.len(), width * height, "mask size");
    let (mut x0, mut x1, mut y0, mut y1) = (0, width, 0, height);
    let row_frac =
        |y: usize, x0: usize, x1: usize| (x0..x1).filter(|&x| mask[y * width + x]).count() as f64 / (x1 - x0) as f64;
    let col_frac =
        |x: usize, y0: usize, y1: usize| (y0..y1).filter(|&y| mask[y * width + x]).count() as f64 / (y1 - y0) as f64;
    loop {
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        if row_frac(y0, x0, x1) >= threshold {
            y0 += 1;
        } else if row_frac(y1 - 1, x0, x1) >= threshold {
            y1 -= 1;
        } else if col_frac(x0, y0, y1) >= threshold {
            x0 += 1;
        } else if col_frac(x1 - 1, y0, y1) >= threshold {
            x1 -= 1;
        } else {
            return Some(Region { x: x0, y: y0, width: x1 - x0, height: y1 - y0 });
        }
    }
}

/// [`trim_region`] applied to an image and its mask.
pub fn trim(image: &Image, mask: &[bool], threshold: f64) -> Option<(Image, Vec<bool>, Region)> {
    let r = trim_region(mask, image.width, image.height, threshold)?;
    let img = image.crop(r.y, r.x, r.height, r.width).expect("region inside image");
    let m = (r.y..r.y + r.height)
        .flat_map(|y| (r.x..r.x + r.width).map(move |x| y * image.width + x))
        .map(|i| mask[i])
        .collect();
    Some((img, m, r))
}

/// Whether a trimmed `width x height` crop is still useful next to the
/// `original_area` it came from.
pub fn keep_crop(width: usize, height: usize, original_area: usize, cfg: &PreprocessConfig) -> bool {
    if width.min(height) < cfg.min_side {
        return false;
    }
    // compare the fraction with a little slack so that exact boundary
    // cases are not lost to rounding of the configured ratio
    (width * height) as f64 >= cfg.min_area_fraction * original_area as f64 - 1e-9
}

/// `(content height, content width, top pad, left pad)` for fitting an
/// `h x w` image into a `target` square.
pub fn letterbox_geometry(h: usize, w: usize, target: usize) -> (usize, usize, usize, usize) {
    let long = h.max(w) as f64;
    let nh = ((h as f64 * target as f64 / long).round() as usize).clamp(1, target);
    let nw = ((w as f64 * target as f64 / long).round() as usize).clamp(1, target);
    (nh, nw, (target - nh) / 2, (target - nw) / 2)
}

/// Bilinear resize (half-pixel centres, edge clamped).
pub fn resize_bilinear(image: &Image, nh: usize, nw: usize) -> Image {
    let mut out = Image::filled(nh, nw, [0.0; 3]);
    let sy = image.height as f64 / nh as f64;
    let sx = image.width as f64 / nw as f64;
    let axis = |o: usize, s: f64, n: usize| {
        let f = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (f.floor() as usize).min(n - 1);
        let j = (i + 1).min(n - 1);
        (i, j, f - i as f64)
    };
    for y in 0..nh {
        let (y0, y1, ty) = axis(y, sy, image.height);
        for x in 0..nw {
            let (x0, x1, tx) = axis(x, sx, image.width);
            let (a, b, c, d) = (image.pixel(y0, x0), image.pixel(y0, x1), image.pixel(y1, x0), image.pixel(y1, x1));
            let mut px = [0.0; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bottom = c[k] + (d[k] - c[k]) * tx;
                px[k] = top + (bottom - top) * ty;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Aspect-preserving resize into a `target` square, padded with the channel
/// mean on the short side.
pub fn letterbox(image: &Image, target: usize) -> Result<Image> {
    if image.height == 0 || image.width == 0 || target == 0 {
        return Err(Error::Input("letterbox of an empty image".into()));
    }
    let (nh, nw, top, left) = letterbox_geometry(image.height, image.width, target);
    let content = resize_bilinear(image, nh, nw);
    let mut out = Image::filled(target, target, CHANNEL_MEAN);
    for y in 0..nh {
        for x in 0..nw {
            out.set_pixel(top + y, left + x, content.pixel(y, x));
        }
    }
    Ok(out)
}

/// Crop `bbox` from `image`, fill `occluders`, letterbox to `target` and
/// normalize: the model-ready `[3, target, target]` input.
pub fn prepare_crop(image: &Image, bbox: &BBox, occluders: &[BBox], target: usize) -> Result<Tensor> {
    let b = bbox
        .clamp_to(image.width, image.height)
        .ok_or_else(|| Error::Input(format!("box {bbox:?} is outside the {}x{} image", image.width, image.height)))?;
    let crop = image.crop(b.y0 as usize, b.x0 as usize, b.height() as usize, b.width() as usize)?;
    let (crop, _) = detach_objects(&b, &crop, occluders)?;
    Ok(letterbox(&crop, target)?.normalized())
}

/// One face/body input unit found in an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBoxes {
    pub face_bbox: Option<BBox>,
    pub body_bbox: Option<BBox>,
    /// Shift of the trimmed body box from the detected one, `[dx, dy]`.
    pub offsets: [i64; 2],
    /// Other detections overlapping either crop; their pixels are filled.
    pub occluders: Vec<BBox>,
}

/// Matches faces to persons, then cleans each body crop: occluders are
/// removed, filled borders trimmed, and too-small remains dropped (the
/// face, if any, is kept on its own).
pub fn build_pairs(
    width: usize,
    height: usize,
    detections: &[Detection],
    cfg: &PreprocessConfig,
) -> Result<Vec<PairBoxes>> {
    let mut faces = Vec::new();
    let mut persons = Vec::new();
    let mut all = Vec::new();
    for d in detections {
        d.bbox.validate()?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Input(format!("detection score {} outside [0, 1]", d.score)));
        }
        let Some(b) = d.bbox.clamp_to(width, height) else { continue };
        all.push(b);
        match d.kind {
            DetectionKind::Face => faces.push(all.len() - 1),
            DetectionKind::Person => persons.push(all.len() - 1),
        }
    }
    let face_boxes: Vec<BBox> = faces.iter().map(|&i| all[i]).collect();
    let person_boxes: Vec<BBox> = persons.iter().map(|&i| all[i]).collect();
    let a = assign(&face_boxes, &person_boxes)?;

    let mut units: Vec<(Option<usize>, Option<usize>)> =
        a.pairs.iter().map(|&(f, p)| (Some(faces[f]), Some(persons[p]))).collect();
    units.extend(a.unmatched_faces.iter().map(|&f| (Some(faces[f]), None)));
    units.extend(a.unmatched_persons.iter().map(|&p| (None, Some(persons[p]))));

    let mut out = Vec::new();
    for (f, p) in units {
        let own = [f, p];
        let others: Vec<BBox> = (0..all.len()).filter(|i| !own.contains(&Some(*i))).map(|i| all[i]).collect();
        let relevant = |b: &BBox| others.iter().copied().filter(|o| o.intersection_area(b) > 0).collect::<Vec<_>>();
        let mut rec =
            PairBoxes { face_bbox: f.map(|i| all[i]), body_bbox: None, offsets: [0, 0], occluders: Vec::new() };
        if let Some(p) = p {
            let body = all[p];
            let mask = occlusion_mask(&body, &others);
            let region = trim_region(&mask, body.width() as usize, body.height() as usize, cfg.trim_threshold);
            if let Some(r) = region.filter(|r| keep_crop(r.width, r.height, body.area() as usize, cfg)) {
                let trimmed = BBox {
                    x0: body.x0 + r.x as i64,
                    y0: body.y0 + r.y as i64,
                    x1: body.x0 + (r.x + r.width) as i64,
                    y1: body.y0 + (r.y + r.height) as i64,
                };
                rec.body_bbox = Some(trimmed);
                rec.offsets = [r.x as i64, r.y as i64];
            }
        }
        if rec.face_bbox.is_none() && rec.body_bbox.is_none() {
            continue;
        }
        let mut occ: Vec<BBox> = Vec::new();
        for b in rec.face_bbox.iter().chain(rec.body_bbox.iter()) {
            for o in relevant(b) {
                if !occ.contains(&o) {
                    occ.push(o);
                }
            }
        }
        rec.occluders = occ;
        out.push(rec);
    }
    Ok(out)
}
