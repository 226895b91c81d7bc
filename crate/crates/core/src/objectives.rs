//! Loss terms: count-balanced focal classification loss, cluster/separation
//! losses over max prototype similarity, occurrence-map equivariance and L1
//! locality losses, and their weighted combination. All builders operate on
//! the autodiff tape, so gradients are exact.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to [EPS, 1-EPS] before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_clst: f64,
    pub lambda_sep: f64,
    pub lambda_occur: f64,
    /// Balance exponent of the classification loss.
    pub gamma: f64,
    /// Cluster/separation weight for box-annotated samples (prior-condition
    /// mode); box-unannotated samples use the base lambdas.
    pub lambda_clst_annotated: f64,
    pub lambda_sep_annotated: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_clst: 0.5,
            lambda_sep: 0.5,
            lambda_occur: 0.5,
            gamma: 2.0,
            lambda_clst_annotated: 1.5,
            lambda_sep_annotated: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.lambda_clst,
            self.lambda_sep,
            self.lambda_occur,
            self.gamma,
            self.lambda_clst_annotated,
            self.lambda_sep_annotated,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss hyperparameters must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Batch labels with per-class positive/negative counts.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    /// [B, C] in {0, 1}
    pub y: Array2<f64>,
    pub n_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
}

impl BatchLabels {
    pub fn new(y: Array2<f64>) -> Self {
        let (b, c) = (y.shape()[0], y.shape()[1]);
        let mut n_pos = vec![0usize; c];
        for bi in 0..b {
            for ci in 0..c {
                if y[[bi, ci]] > 0.5 {
                    n_pos[ci] += 1;
                }
            }
        }
        let n_neg = n_pos.iter().map(|&p| b - p).collect();
        BatchLabels { y, n_pos, n_neg }
    }

    /// y / N_pos per entry; zero where the class has no positives.
    fn pos_weights(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.y.raw_dim(), |(b, c)| {
            if self.y[[b, c]] > 0.5 && self.n_pos[c] > 0 {
                1.0 / self.n_pos[c] as f64
            } else {
                0.0
            }
        })
    }

    /// (1-y) / N_neg per entry; zero where the class has no negatives.
    fn neg_weights(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.y.raw_dim(), |(b, c)| {
            if self.y[[b, c]] < 0.5 && self.n_neg[c] > 0 {
                1.0 / self.n_neg[c] as f64
            } else {
                0.0
            }
        })
    }
}

fn const_of(tape: &mut Tape, arr: Array2<f64>) -> Var {
    tape.constant(arr.into_dyn())
}

/// Count-balanced focal loss over the batch:
/// -sum_c sum_i [ y/N_pos (1-p)^g log p + (1-y)/N_neg p^g log(1-p) ].
/// Classes with a zero count on one side contribute 0 for that side.
pub fn classification_loss(tape: &mut Tape, probs: Var, labels: &BatchLabels, gamma: f64) -> Var {
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let one_minus_p = {
        let n = tape.neg(p);
        tape.add_scalar(n, 1.0)
    };
    let pos_w = const_of(tape, labels.pos_weights());
    let neg_w = const_of(tape, labels.neg_weights());
    // positive side: (1-p)^g * log p, weighted
    let focal_pos = tape.pow_const(one_minus_p, gamma);
    let log_p = tape.ln(p);
    let pos_term = tape.mul(focal_pos, log_p);
    let pos_term = tape.mul(pos_term, pos_w);
    // negative side: p^g * log(1-p), weighted
    let focal_neg = tape.pow_const(p, gamma);
    let log_1mp = tape.ln(one_minus_p);
    let neg_term = tape.mul(focal_neg, log_1mp);
    let neg_term = tape.mul(neg_term, neg_w);
    let s = tape.add(pos_term, neg_term);
    let s = tape.sum_all(s);
    tape.neg(s)
}

/// Cluster and separation losses from per-(sample, class) max similarities.
/// `clst_max` and `sep_max` are [B, C] (they differ only in prior-condition
/// mode, where the cluster side uses bbox-restricted similarities for
/// annotated samples). Optional scales multiply individual (sample, class)
/// terms; the trainer uses them to route per-subset lambda ratios.
pub fn cluster_separation_losses(
    tape: &mut Tape,
    clst_max: Var,
    sep_max: Var,
    labels: &BatchLabels,
    clst_scale: Option<&Array2<f64>>,
    sep_scale: Option<&Array2<f64>>,
) -> (Var, Var) {
    let mut pw = labels.pos_weights();
    if let Some(s) = clst_scale {
        pw *= s;
    }
    let mut nw = labels.neg_weights();
    if let Some(s) = sep_scale {
        nw *= s;
    }
    let pw = const_of(tape, pw);
    let nw = const_of(tape, nw);
    let clst = tape.mul(clst_max, pw);
    let clst = tape.sum_all(clst);
    let clst = tape.neg(clst);
    let sep = tape.mul(sep_max, nw);
    let sep = tape.sum_all(sep);
    (clst, sep)
}

/// Equivariance penalty: sum of element-wise L1 differences between the
/// transformed occurrence maps and the occurrence maps of the transformed
/// input. Both tensors are [B, M, H, W] (or [M, H, W]-like; any matching
/// shapes work).
pub fn transformation_loss(tape: &mut Tape, transformed_maps: Var, maps_of_transformed: Var) -> Var {
    let d = tape.sub(transformed_maps, maps_of_transformed);
    let d = tape.abs(d);
    tape.sum_all(d)
}

/// Occurrence loss: trans_term plus the L1 mass of the occurrence maps
/// (restricted to cells outside the bounding box where a mask is given;
/// mask entries are 1 for cells that count). Maps are in [0, 1], so the L1
/// norm is a plain sum.
pub fn occurrence_loss(tape: &mut Tape, maps: Var, trans_term: Var, outside_mask: Option<Tensor>) -> Var {
    let l1 = match outside_mask {
        Some(mask) => {
            let m = tape.constant(mask);
            let masked = tape.mul(maps, m);
            tape.sum_all(masked)
        }
        None => tape.sum_all(maps),
    };
    tape.add(trans_term, l1)
}

/// Weighted combination of the loss components.
pub fn total_loss(tape: &mut Tape, cls: Var, clst: Var, sep: Var, occur: Var, cfg: &LossConfig) -> Var {
    let a = tape.scale(clst, cfg.lambda_clst);
    let b = tape.scale(sep, cfg.lambda_sep);
    let c = tape.scale(occur, cfg.lambda_occur);
    let s = tape.add(cls, a);
    let s = tape.add(s, b);
    tape.add(s, c)
}

/// The four loss components and their weighted total for one batch. In
/// prior-condition mode the cluster/separation values already include the
/// per-subset lambda ratio (annotated lambda divided by the base lambda), so
/// the decomposition below always holds with the base lambdas.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub clst: f64,
    pub sep: f64,
    pub occur: f64,
    pub trans: f64,
    pub total: f64,
    pub per_class: Vec<PerClassLoss>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PerClassLoss {
    pub cls: f64,
    pub clst: f64,
    pub sep: f64,
    pub occur_l1: f64,
}

/// Per-class components recomputed from plain values (for the metrics log).
pub fn per_class_components(
    probs: ArrayView2<f64>,
    clst_max: ArrayView2<f64>,
    sep_max: ArrayView2<f64>,
    labels: &BatchLabels,
    gamma: f64,
    map_l1_per_class: Option<&Array1<f64>>,
) -> Vec<PerClassLoss> {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let mut out = vec![PerClassLoss::default(); c];
    for ci in 0..c {
        for bi in 0..b {
            let p = probs[[bi, ci]].clamp(PROB_EPS, 1.0 - PROB_EPS);
            if labels.y[[bi, ci]] > 0.5 {
                if labels.n_pos[ci] > 0 {
                    let w = 1.0 / labels.n_pos[ci] as f64;
                    out[ci].cls -= w * (1.0 - p).powf(gamma) * p.ln();
                    out[ci].clst -= w * clst_max[[bi, ci]];
                }
            } else if labels.n_neg[ci] > 0 {
                let w = 1.0 / labels.n_neg[ci] as f64;
                out[ci].cls -= w * p.powf(gamma) * (1.0 - p).ln();
                out[ci].sep += w * sep_max[[bi, ci]];
            }
        }
        if let Some(l1) = map_l1_per_class {
            out[ci].occur_l1 = l1[ci];
        }
    }
    out
}

/// Occurrence-weighted pooling restricted to a bounding-box mask:
/// out[d] = sum_{u in bbox} map[u] * feat[d, u]. Errors on an empty mask.
pub fn bbox_pooled_feature(
    feat: ArrayView3<f64>,
    map: ArrayView2<f64>,
    mask: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    if mask.shape() != map.shape() {
        return Err(Error::Shape(format!(
            "bbox mask shape {:?} vs map shape {:?}",
            mask.shape(),
            map.shape()
        )));
    }
    if mask.iter().all(|&v| v == 0.0) {
        return Err(Error::Shape("bbox mask rasterized to an empty cell set".into()));
    }
    let masked = &map.to_owned() * &mask;
    crate::model::ops::pool_feature(feat, masked.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn labels(rows: &[&[f64]]) -> BatchLabels {
        let b = rows.len();
        let c = rows[0].len();
        BatchLabels::new(Array2::from_shape_fn((b, c), |(i, j)| rows[i][j]))
    }

    fn eval_cls(p: &[&[f64]], y: &[&[f64]], gamma: f64) -> f64 {
        let b = p.len();
        let c = p[0].len();
        let mut tape = Tape::new();
        let probs = tape.constant(
            Array2::from_shape_fn((b, c), |(i, j)| p[i][j]).into_dyn(),
        );
        let l = classification_loss(&mut tape, probs, &labels(y), gamma);
        tape.scalar_value(l)
    }

    #[test]
    fn classification_loss_examples() {
        // confident correct positive contributes ~0
        assert!(eval_cls(&[&[1.0 - 1e-7]], &[&[1.0]], 2.0) <= 1e-5);
        // y=(1,0), p=(0.5,0.5), gamma=2 -> 2 * 0.25 * ln 2
        assert_abs_diff_eq!(
            eval_cls(&[&[0.5], &[0.5]], &[&[1.0], &[0.0]], 2.0),
            0.34657359,
            epsilon = 1e-6
        );
        // single positive, p=0.9 -> 0.01 * (-ln 0.9)
        assert_abs_diff_eq!(eval_cls(&[&[0.9]], &[&[1.0]], 2.0), 0.00105361, epsilon = 1e-8);
    }

    #[test]
    fn gamma_zero_reduces_to_weighted_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = 6;
        let c = 3;
        let p = Array2::from_shape_fn((b, c), |_| rng.random::<f64>() * 0.98 + 0.01);
        let y = Array2::from_shape_fn((b, c), |_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let lab = BatchLabels::new(y.clone());
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone().into_dyn());
        let l = classification_loss(&mut tape, pv, &lab, 0.0);
        // independent count-weighted BCE
        let mut expect = 0.0;
        for ci in 0..c {
            for bi in 0..b {
                let pi = p[[bi, ci]];
                if y[[bi, ci]] > 0.5 {
                    expect -= pi.ln() / lab.n_pos[ci].max(1) as f64;
                } else {
                    expect -= (1.0 - pi).ln() / lab.n_neg[ci].max(1) as f64;
                }
            }
        }
        assert_abs_diff_eq!(tape.scalar_value(l), expect, epsilon = 1e-8);
    }

    #[test]
    fn cluster_separation_examples() {
        // positive sample, sims (0.2, 0.9, -0.1): clst = -0.9, sep = 0
        let mut tape = Tape::new();
        let sims = tape.constant(Array2::from_shape_vec((1, 3), vec![0.2, 0.9, -0.1]).unwrap().into_dyn());
        let mx = tape.group_max(sims, 3, vec![true; 3]);
        let lab = labels(&[&[1.0]]);
        let (clst, sep) = cluster_separation_losses(&mut tape, mx, mx, &lab, None, None);
        assert_abs_diff_eq!(tape.scalar_value(clst), -0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.scalar_value(sep), 0.0, epsilon = 1e-12);

        // same sims, negative sample: clst = 0, sep = 0.9
        let mut tape = Tape::new();
        let sims = tape.constant(Array2::from_shape_vec((1, 3), vec![0.2, 0.9, -0.1]).unwrap().into_dyn());
        let mx = tape.group_max(sims, 3, vec![true; 3]);
        let lab = labels(&[&[0.0]]);
        let (clst, sep) = cluster_separation_losses(&mut tape, mx, mx, &lab, None, None);
        assert_abs_diff_eq!(tape.scalar_value(clst), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.scalar_value(sep), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn clst_decreases_when_positive_max_similarity_rises() {
        let lab = labels(&[&[1.0]]);
        let mut vals = Vec::new();
        for s in [0.1, 0.4, 0.8] {
            let mut tape = Tape::new();
            let sims = tape.constant(Array2::from_shape_vec((1, 2), vec![s, 0.0]).unwrap().into_dyn());
            let mx = tape.group_max(sims, 2, vec![true; 2]);
            let (clst, _) = cluster_separation_losses(&mut tape, mx, mx, &lab, None, None);
            vals.push(tape.scalar_value(clst));
        }
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    #[test]
    fn transformation_loss_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Array4::from_elem((1, 1, 2, 2), 0.5).into_dyn());
        let l = transformation_loss(&mut tape, a, a);
        assert_eq!(tape.scalar_value(l), 0.0);

        let mut tape = Tape::new();
        let a = tape.constant(Array4::from_elem((1, 1, 2, 2), 0.5).into_dyn());
        let b = tape.constant(Array4::from_elem((1, 1, 2, 2), 0.6).into_dyn());
        let l = transformation_loss(&mut tape, a, b);
        assert_abs_diff_eq!(tape.scalar_value(l), 0.4, epsilon = 1e-7);

        // duplicated prototype doubles the value
        let mut tape = Tape::new();
        let a = tape.constant(Array4::from_elem((1, 2, 2, 2), 0.5).into_dyn());
        let b = tape.constant(Array4::from_elem((1, 2, 2, 2), 0.6).into_dyn());
        let l = transformation_loss(&mut tape, a, b);
        assert_abs_diff_eq!(tape.scalar_value(l), 0.8, epsilon = 1e-7);
    }

    #[test]
    fn occurrence_loss_examples() {
        let mut tape = Tape::new();
        let zero = tape.constant(crate::autodiff::scalar(0.0));
        let maps = tape.constant(Array4::<f64>::zeros((1, 1, 2, 2)).into_dyn());
        let l = occurrence_loss(&mut tape, maps, zero, None);
        assert_eq!(tape.scalar_value(l), 0.0);

        let mut tape = Tape::new();
        let zero = tape.constant(crate::autodiff::scalar(0.0));
        let maps = tape.constant(Array4::from_elem((1, 1, 2, 2), 1.0).into_dyn());
        let l = occurrence_loss(&mut tape, maps, zero, None);
        assert_abs_diff_eq!(tape.scalar_value(l), 4.0, epsilon = 1e-12);

        // box covering the whole grid: outside set empty -> 0
        let mut tape = Tape::new();
        let zero = tape.constant(crate::autodiff::scalar(0.0));
        let maps = tape.constant(Array4::from_elem((1, 1, 2, 2), 1.0).into_dyn());
        let outside = Array4::<f64>::zeros((1, 1, 2, 2)).into_dyn();
        let l = occurrence_loss(&mut tape, maps, zero, Some(outside));
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let combine = |cls: f64, clst: f64, sep: f64, occur: f64, cfg: &LossConfig| {
            let mut tape = Tape::new();
            let c = tape.constant(crate::autodiff::scalar(cls));
            let cl = tape.constant(crate::autodiff::scalar(clst));
            let se = tape.constant(crate::autodiff::scalar(sep));
            let oc = tape.constant(crate::autodiff::scalar(occur));
            let t = total_loss(&mut tape, c, cl, se, oc, cfg);
            tape.scalar_value(t)
        };
        let zero_lambda = LossConfig {
            lambda_clst: 0.0,
            lambda_sep: 0.0,
            lambda_occur: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(combine(1.0, 9.0, 9.0, 9.0, &zero_lambda), 1.0);
        assert_abs_diff_eq!(
            combine(1.0, 0.2, 0.3, 0.4, &LossConfig::default()),
            1.45,
            epsilon = 1e-9
        );
        assert_eq!(combine(0.0, 0.0, 0.0, 0.0, &LossConfig::default()), 0.0);
    }

    #[test]
    fn bbox_pooling_examples_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let feat = Array3::from_shape_fn((5, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let map = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());

        // full-grid box equals unrestricted pooling
        let full = Array2::from_elem((4, 4), 1.0);
        let a = bbox_pooled_feature(feat.view(), map.view(), full.view()).unwrap();
        let b = crate::model::ops::pool_feature(feat.view(), map.view()).unwrap();
        for d in 0..5 {
            assert_eq!(a[d], b[d]);
        }

        // one-cell box with map value 1 selects that cell
        let mut map1 = Array2::<f64>::zeros((4, 4));
        map1[[2, 1]] = 1.0;
        let mut mask1 = Array2::<f64>::zeros((4, 4));
        mask1[[2, 1]] = 1.0;
        let sel = bbox_pooled_feature(feat.view(), map1.view(), mask1.view()).unwrap();
        for d in 0..5 {
            assert_eq!(sel[d], feat[[d, 2, 1]]);
        }

        // brute-force masked double loop
        for _ in 0..100 {
            let feat = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
            let map = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
            let mask = Array2::from_shape_fn((4, 4), |_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
            if mask.iter().all(|&v| v == 0.0) {
                assert!(bbox_pooled_feature(feat.view(), map.view(), mask.view()).is_err());
                continue;
            }
            let got = bbox_pooled_feature(feat.view(), map.view(), mask.view()).unwrap();
            for d in 0..3 {
                let mut expect = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        if mask[[i, j]] > 0.0 {
                            expect += map[[i, j]] * feat[[d, i, j]];
                        }
                    }
                }
                assert_abs_diff_eq!(got[d], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let feat = Array3::<f64>::zeros((2, 2, 2));
        let map = Array2::<f64>::zeros((2, 2));
        let mask = Array2::<f64>::zeros((2, 2));
        assert!(bbox_pooled_feature(feat.view(), map.view(), mask.view()).is_err());
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..20 {
            let p: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..4).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
            let rows_p: Vec<&[f64]> = p.chunks(2).collect();
            let rows_y: Vec<&[f64]> = y.chunks(2).collect();
            assert!(eval_cls(&rows_p, &rows_y, 2.0) >= 0.0);

            let mut tape = Tape::new();
            let a = tape.constant(Array4::from_shape_fn((1, 2, 2, 2), |_| rng.random::<f64>()).into_dyn());
            let b = tape.constant(Array4::from_shape_fn((1, 2, 2, 2), |_| rng.random::<f64>()).into_dyn());
            let t = transformation_loss(&mut tape, a, b);
            assert!(tape.scalar_value(t) >= 0.0);
            let maps = tape.constant(Array4::from_shape_fn((1, 2, 2, 2), |_| rng.random::<f64>()).into_dyn());
            let o = occurrence_loss(&mut tape, maps, t, None);
            assert!(tape.scalar_value(o) >= 0.0);
        }
    }
}
