//! The two comparison baselines: ProtoPNet-style fixed-patch similarity and
//! global average pooling. Both share the prototype layer, heads, losses
//! (minus the occurrence terms, which they do not have), and training scheme
//! with the main model; only the feature comparison differs. Variant
//! selection lives in [`crate::model::Variant`].

use crate::autodiff::{best_patch, cosine, extract_patch};
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayView3};

#[derive(Debug, Clone, Copy)]
pub struct PatchConfig {
    /// Patch side length in feature cells.
    pub r: usize,
}

impl PatchConfig {
    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.r < 1 || self.r > grid.0.min(grid.1) {
            return Err(Error::Config(format!(
                "patch size {} out of range for feature grid {:?}",
                self.r, grid
            )));
        }
        Ok(())
    }
}

/// Maximum cosine similarity between the flattened prototype and every
/// r x r patch of the feature map (stride 1, valid positions).
/// `feat` is [D, H, W]; `proto` has length r*r*D (channel-major flattening).
pub fn patch_similarity(feat: ArrayView3<f64>, proto: &[f64], r: usize) -> Result<f64> {
    let (d, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    if r < 1 || r > h.min(w) {
        return Err(Error::Shape(format!("patch size {r} exceeds feature grid {h}x{w}")));
    }
    if proto.len() != r * r * d {
        return Err(Error::Shape(format!(
            "prototype length {} != r*r*D = {}",
            proto.len(),
            r * r * d
        )));
    }
    Ok(best_patch(feat, proto, r).0)
}

/// Argmax position of the patch similarity map; ties resolve to the lowest
/// row-major index. Used for visualization.
pub fn patch_argmax(feat: ArrayView3<f64>, proto: &[f64], r: usize) -> (usize, usize) {
    let (_, i, j) = best_patch(feat, proto, r);
    (i, j)
}

/// Global average pooling: mean over spatial positions. `feat` is [D, H, W].
pub fn gap_pooled_feature(feat: ArrayView3<f64>) -> Array1<f64> {
    let (d, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let mut out = Array1::<f64>::zeros(d);
    for di in 0..d {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                s += feat[[di, i, j]];
            }
        }
        out[di] = s / (h * w) as f64;
    }
    out
}

#[allow(unused)]
fn whole_map_cosine(feat: ArrayView3<f64>, proto: &[f64]) -> f64 {
    let flat = extract_patch(feat, 0, 0, feat.shape()[1]);
    cosine(&flat, proto)
}
