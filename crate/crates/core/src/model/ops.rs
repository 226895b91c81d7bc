//! Forward-pass primitives in plain array form. The training path computes
//! the same quantities through the autodiff tape; these standalone versions
//! are used by inference, projection, explanation, and as the recomputation
//! route in tests.

use crate::error::{Error, Result};
use ndarray::{Array1, ArrayView2, ArrayView3};

/// Occurrence-weighted pooling: out[d] = sum_u map[u] * feat[d, u].
/// `feat` is channels-first [D, H, W]; `map` is [H, W]. No normalization by
/// area; downstream cosine similarity removes scale.
pub fn pool_feature(feat: ArrayView3<f64>, map: ArrayView2<f64>) -> Result<Array1<f64>> {
    let (d, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    if map.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "pool_feature: map grid {:?} vs feature grid [{h}, {w}]",
            map.shape()
        )));
    }
    let mut out = Array1::<f64>::zeros(d);
    for di in 0..d {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                s += map[[i, j]] * feat[[di, i, j]];
            }
        }
        out[di] = s;
    }
    Ok(out)
}

/// Cosine similarity in [-1, 1]. A zero-norm feature vector yields
/// similarity 0; the second return value flags that case for diagnostics.
pub fn cosine_similarity(f: &[f64], p: &[f64]) -> (f64, bool) {
    let nf = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nf == 0.0 {
        return (0.0, true);
    }
    (crate::autodiff::cosine(f, p), false)
}

/// Per-class prediction score: sigmoid of the active-masked weighted
/// similarity sum. Errors if the class has no active prototype.
pub fn predict_class_score(sims: &[f64], weights: &[f64], active: &[bool]) -> Result<f64> {
    assert_eq!(sims.len(), weights.len());
    assert_eq!(sims.len(), active.len());
    if !active.iter().any(|&a| a) {
        return Err(Error::Shape("predict_class_score: class has no active prototype".into()));
    }
    let z: f64 = sims
        .iter()
        .zip(weights)
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|((s, w), _)| s * w)
        .sum();
    Ok(crate::autodiff::sigmoid(z))
}
