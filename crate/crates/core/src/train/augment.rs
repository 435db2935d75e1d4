//! Training-time perturbations: box jitter, shared flip and random erase,
//! and input dropout of whole views.

use crate::config::{AugmentConfig, InputDropoutConfig};
use crate::nn::CropPair;
use crate::pairing::BBox;
use crate::tensor::Tensor;
use rand::Rng;

const JITTER_ATTEMPTS: usize = 5;
const ERASE_ATTEMPTS: usize = 10;

fn symmetric<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * magnitude
}

/// Shifts the box centre by up to `jitter_pos` of its size and rescales each
/// side by up to `jitter_size`, then clips to the image. Draws that leave an
/// empty box are retried; after five failures the clipped original is used,
/// or the original itself when it lies outside the image.
pub fn jitter_box<R: Rng + ?Sized>(b: &BBox, width: usize, height: usize, cfg: &AugmentConfig, rng: &mut R) -> BBox {
    let (w, h) = (b.width() as f64, b.height() as f64);
    let (cx, cy) = (b.x0 as f64 + w / 2.0, b.y0 as f64 + h / 2.0);
    for _ in 0..JITTER_ATTEMPTS {
        let ncx = cx + symmetric(rng, cfg.jitter_pos) * w;
        let ncy = cy + symmetric(rng, cfg.jitter_pos) * h;
        let nw = w * (1.0 + symmetric(rng, cfg.jitter_size));
        let nh = h * (1.0 + symmetric(rng, cfg.jitter_size));
        let cand = BBox {
            x0: (ncx - nw / 2.0).round() as i64,
            y0: (ncy - nh / 2.0).round() as i64,
            x1: (ncx + nw / 2.0).round() as i64,
            y1: (ncy + nh / 2.0).round() as i64,
        };
        if let Some(c) = cand.clamp_to(width, height) {
            return c;
        }
    }
    b.clamp_to(width, height).unwrap_or(*b)
}

/// Mirrors a `[3, H, W]` tensor left to right.
pub fn flip_tensor(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Zeroes (the normalized channel mean) one random rectangle covering
/// `erase_min_area..erase_max_area` of a `[3, H, W]` tensor.
pub fn erase_rect<R: Rng + ?Sized>(t: &mut Tensor, cfg: &AugmentConfig, rng: &mut R) {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let area = (h * w) as f64;
    let (lo, hi) = (0.3f64.ln(), (1.0f64 / 0.3).ln());
    for _ in 0..ERASE_ATTEMPTS {
        let target = area * (cfg.erase_min_area + rng.random::<f64>() * (cfg.erase_max_area - cfg.erase_min_area));
        let aspect = (lo + rng.random::<f64>() * (hi - lo)).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        let data = t.data_mut();
        for c in 0..3 {
            for y in y0..y0 + eh {
                let row = (c * h + y) * w;
                data[row + x0..row + x0 + ew].fill(0.0);
            }
        }
        return;
    }
}

/// Flip and erase with one decision each for the whole pair.
pub fn augment_pair<R: Rng + ?Sized>(pair: &mut CropPair, cfg: &AugmentConfig, rng: &mut R) {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let erase = rng.random::<f64>() < cfg.erase_prob;
    for side in [&mut pair.face, &mut pair.body].into_iter().flatten() {
        if flip {
            *side = flip_tensor(side);
        }
        if erase {
            erase_rect(side, cfg, rng);
        }
    }
}

/// Randomly hides one view of a two-view pair: the body with probability
/// `body`, otherwise the face with probability `face`. Single-view pairs
/// pass through unchanged.
pub fn input_dropout<R: Rng + ?Sized>(pair: &mut CropPair, cfg: &InputDropoutConfig, rng: &mut R) {
    if !(pair.face_present() && pair.body_present()) {
        return;
    }
    let u = rng.random::<f64>();
    if u < cfg.body {
        pair.body = None;
    } else if u < cfg.body + cfg.face {
        pair.face = None;
    }
}
