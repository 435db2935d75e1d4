//! Label-distribution smoothing: per-bin sample weights inversely
//! proportional to the kernel-smoothed label density.

use crate::config::{AgeRange, LdsConfig};
use crate::error::{Error, Result};

/// Sum-normalized Gaussian window of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Convolves `counts` with a centered `kernel`. Near the ends the kernel is
/// cut to the histogram support and renormalized, so a flat histogram stays
/// flat.
pub fn smooth(counts: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    (0..counts.len())
        .map(|i| {
            let (mut acc, mut mass) = (0.0, 0.0);
            for (j, &k) in kernel.iter().enumerate() {
                if let Some(idx) = (i + j).checked_sub(r).filter(|&t| t < counts.len()) {
                    acc += k * counts[idx];
                    mass += k;
                }
            }
            acc / mass
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdsWeights {
    min: f64,
    bin_width: f64,
    table: Vec<f64>,
}

impl LdsWeights {
    /// Weights from a per-bin count histogram. `kernel = None` means plain
    /// inverse frequency. Bins with zero smoothed density get the weight of
    /// the rarest populated bin.
    pub fn from_counts(counts: &[f64], kernel: Option<&[f64]>, min: f64, bin_width: f64) -> Result<Self> {
        if counts.is_empty() || counts.iter().all(|&c| c <= 0.0) {
            return Err(Error::Input("LDS histogram is empty".into()));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Input("LDS histogram has negative or non-finite counts".into()));
        }
        let density = match kernel {
            Some(k) => smooth(counts, k),
            None => counts.to_vec(),
        };
        let floor = density.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
        let mut table: Vec<f64> = density.iter().map(|&d| 1.0 / d.max(floor)).collect();
        let mean = table.iter().sum::<f64>() / table.len() as f64;
        table.iter_mut().for_each(|w| *w /= mean);
        Ok(LdsWeights { min, bin_width, table })
    }

    /// Weights for training ages binned over `range`; all ones when disabled.
    pub fn from_ages(ages: &[f64], range: &AgeRange, cfg: &LdsConfig) -> Result<Self> {
        let bins = ((range.max - range.min) / cfg.bin_width).floor() as usize + 1;
        if !cfg.enabled {
            return Ok(LdsWeights { min: range.min, bin_width: cfg.bin_width, table: vec![1.0; bins] });
        }
        let mut counts = vec![0.0; bins];
        let probe = LdsWeights { min: range.min, bin_width: cfg.bin_width, table: vec![0.0; bins] };
        for &a in ages {
            counts[probe.bin(a)] += 1.0;
        }
        let kernel = gaussian_kernel(cfg.kernel_size, cfg.sigma);
        Self::from_counts(&counts, Some(&kernel), range.min, cfg.bin_width)
    }

    /// Bin of `age`, clamped to the table.
    pub fn bin(&self, age: f64) -> usize {
        let b = ((age - self.min) / self.bin_width).floor();
        if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(self.table.len() - 1)
        }
    }

    pub fn weight_for(&self, age: f64) -> f64 {
        self.table[self.bin(age)]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}
