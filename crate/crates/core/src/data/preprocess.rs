//! Resize, train-time affine augmentation (rotation up to 10 degrees, scale
//! by up to 20%), and per-channel normalization.

use crate::error::Result;
use crate::rng;
use crate::transform;
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub input_size: usize,
    /// Per-channel normalization statistics (grayscale: one channel).
    pub mean: f64,
    pub std: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            input_size: 64,
            mean: 0.5,
            std: 0.25,
            max_rotation_deg: 10.0,
            scale_range: (0.8, 1.2),
        }
    }
}

/// Resize, optionally augment (rotation/scale drawn from `aug`), normalize.
/// Returns [1, S, S]. Deterministic whenever `aug` is None.
pub fn preprocess(
    image: &Array2<f64>,
    cfg: &PreprocessConfig,
    aug: Option<&mut ChaCha8Rng>,
) -> Result<Array3<f64>> {
    let s = cfg.input_size;
    let mut img = if image.shape() == [s, s] {
        image.clone()
    } else {
        transform::resize_bilinear(image, s, s)
    };
    if let Some(r) = aug {
        let angle = rng::uniform(r, -cfg.max_rotation_deg, cfg.max_rotation_deg);
        let scale = rng::uniform(r, cfg.scale_range.0, cfg.scale_range.1);
        img = transform::rotate_scale(&img, angle, scale);
    }
    let mut out = Array3::<f64>::zeros((1, s, s));
    for i in 0..s {
        for j in 0..s {
            out[[0, i, j]] = (img[[i, j]] - cfg.mean) / cfg.std;
        }
    }
    Ok(out)
}

/// Mean and standard deviation over a set of images (for dataset-statistics
/// normalization of the synthetic corpus).
pub fn pixel_statistics(images: &[&Array2<f64>]) -> (f64, f64) {
    let mut n = 0usize;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for img in images {
        for &v in img.iter() {
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt())
}
