//! Evaluation (per-class ROC AUC) and explanation rendering: occurrence maps
//! upsampled to input size, max-normalized, contoured at a fraction of the
//! maximum, and composited over the input; plus global prototype records from
//! projection provenance.

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::transform;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

/// Rank-based ROC AUC with tie averaging. `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie block [i, j]
        let avg = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// AUC per class; None where the split has a single class only.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a defined AUC.
    pub mean_auc: Option<f64>,
}

/// An image ready for evaluation/explanation: preprocessed pixels plus
/// ground truth.
pub struct ExplainSample {
    pub id: String,
    /// [1, H0, W0], preprocessed without augmentation
    pub image: Array3<f64>,
    pub labels: Vec<u8>,
    /// Ground-truth boxes in input-pixel units.
    pub boxes: Vec<(usize, BBox)>,
}

fn batch_images(samples: &[&ExplainSample], size: (usize, usize)) -> ArrayD<f64> {
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[samples.len(), 1, size.0, size.1]));
    for (b, s) in samples.iter().enumerate() {
        images.slice_mut(ndarray::s![b, .., .., ..]).assign(&s.image.view());
    }
    images
}

/// Per-class AUC of the model's probabilities over a sample set.
pub fn evaluate(model: &Model, samples: &[ExplainSample]) -> Result<EvalReport> {
    let c = model.config.num_classes;
    let mut scores = vec![Vec::with_capacity(samples.len()); c];
    let mut labels = vec![Vec::with_capacity(samples.len()); c];
    for chunk in samples.chunks(32) {
        let refs: Vec<&ExplainSample> = chunk.iter().collect();
        let images = batch_images(&refs, model.config.input_size);
        let out = model.forward(&images)?;
        for (b, s) in chunk.iter().enumerate() {
            for ci in 0..c {
                scores[ci].push(out.probabilities[[b, ci]]);
                labels[ci].push(s.labels[ci]);
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..c).map(|ci| auc(&scores[ci], &labels[ci])).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(EvalReport { per_class, mean_auc })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    /// Contour level as a fraction of the map maximum.
    pub contour_level: f64,
    pub overlay_alpha: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { contour_level: 0.3, overlay_alpha: 0.5 }
    }
}

pub const EXPLANATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub schema_version: u32,
    pub image_id: String,
    pub classes: Vec<ClassExplanation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassExplanation {
    pub class_name: String,
    pub probability: f64,
    pub prototypes: Vec<PrototypeContribution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeContribution {
    /// k within the class
    pub slot: usize,
    pub similarity: f64,
    pub head_weight: f64,
    /// w * s
    pub contribution: f64,
    /// The occurrence map was identically zero (rendered as zeros).
    pub zero_map: bool,
    /// Argmax of the upsampled map, (row, col) in input pixels.
    pub peak: (usize, usize),
    /// Max-normalized map upsampled to input size.
    pub normalized_map: Vec<Vec<f64>>,
    /// Closed rectilinear polygons bounding {normalized > contour_level},
    /// vertices (x, y) in input-pixel corner coordinates.
    pub contours: Vec<Vec<(f64, f64)>>,
}

/// The per-slot spatial map used for explanation, on the feature grid. For
/// the xprotonet variant this is the predicted occurrence map; Patch uses the
/// best-patch footprint and GAP a uniform map.
fn slot_grid_map(model: &Model, out: &crate::model::ModelOutput, b: usize, mi: usize) -> Array2<f64> {
    let (gh, gw) = model.config.feature_grid();
    match model.variant {
        Variant::Xprotonet => out
            .occurrence_maps
            .as_ref()
            .expect("xprotonet forward carries occurrence maps")
            .slice(ndarray::s![b, mi, .., ..])
            .to_owned(),
        Variant::Gap => Array2::from_elem((gh, gw), 1.0 / (gh * gw) as f64),
        Variant::Patch { r } => {
            let fb = out.feature_maps.index_axis(Axis(0), b);
            let protos = model.prototypes();
            let (pi, pj) = crate::baselines::patch_argmax(fb, protos.row(mi).as_slice().unwrap(), r);
            let mut map = Array2::zeros((gh, gw));
            for ri in 0..r {
                for rj in 0..r {
                    map[[pi + ri, pj + rj]] = 1.0;
                }
            }
            map
        }
    }
}

/// Upsample to input size and divide by the maximum. Returns (map, zero flag).
pub fn normalize_upsampled(map: &Array2<f64>, input_size: (usize, usize)) -> (Array2<f64>, bool) {
    let up = transform::resize_bilinear(map, input_size.0, input_size.1);
    let mx = up.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if mx <= 0.0 {
        return (Array2::zeros((input_size.0, input_size.1)), true);
    }
    (up.mapv(|v| v / mx), false)
}

/// Boundary polygons of the region {map > level}: closed rectilinear loops on
/// the pixel-corner lattice, collinear runs merged, deterministic order.
pub fn threshold_contours(map: &Array2<f64>, level: f64) -> Vec<Vec<(f64, f64)>> {
    let (h, w) = (map.shape()[0] as i64, map.shape()[1] as i64);
    let inside = |i: i64, j: i64| {
        i >= 0 && j >= 0 && i < h && j < w && map[[i as usize, j as usize]] > level
    };
    // directed boundary edges on corner lattice points (x, y)
    let mut edges: std::collections::BTreeMap<(i64, i64), Vec<(i64, i64)>> = Default::default();
    for i in 0..h {
        for j in 0..w {
            if !inside(i, j) {
                continue;
            }
            let (x, y) = (j, i);
            if !inside(i - 1, j) {
                edges.entry((x, y)).or_default().push((x + 1, y));
            }
            if !inside(i, j + 1) {
                edges.entry((x + 1, y)).or_default().push((x + 1, y + 1));
            }
            if !inside(i + 1, j) {
                edges.entry((x + 1, y + 1)).or_default().push((x, y + 1));
            }
            if !inside(i, j - 1) {
                edges.entry((x, y + 1)).or_default().push((x, y));
            }
        }
    }
    for v in edges.values_mut() {
        v.sort_unstable();
    }
    let mut polys = Vec::new();
    while let Some((&start, _)) = edges.iter().next() {
        let mut poly = vec![start];
        let mut cur = start;
        loop {
            let nexts = edges.get_mut(&cur).expect("boundary loops are closed");
            let next = nexts.remove(0);
            if nexts.is_empty() {
                edges.remove(&cur);
            }
            if next == start {
                break;
            }
            poly.push(next);
            cur = next;
        }
        // merge collinear runs
        let n = poly.len();
        let mut simplified = Vec::with_capacity(n);
        for idx in 0..n {
            let prev = poly[(idx + n - 1) % n];
            let here = poly[idx];
            let next = poly[(idx + 1) % n];
            let collinear = (here.0 - prev.0, here.1 - prev.1) == (next.0 - here.0, next.1 - here.1);
            if !collinear {
                simplified.push((here.0 as f64, here.1 as f64));
            }
        }
        polys.push(simplified);
    }
    polys
}

/// Local explanation for one image, plus one overlay per rendered map
/// (keyed "class-name.k").
pub fn render_local(
    model: &Model,
    sample: &ExplainSample,
    cfg: &ExplainConfig,
) -> Result<(LocalExplanation, Vec<(String, image::RgbImage)>)> {
    let refs = [sample];
    let images = batch_images(&refs, model.config.input_size);
    let out = model.forward(&images)?;
    let (c, k) = (model.config.num_classes, model.config.prototypes_per_class);
    let head = model.head_weights();
    let mut classes = Vec::with_capacity(c);
    let mut overlays = Vec::new();
    for ci in 0..c {
        let mut prototypes = Vec::new();
        for ki in 0..k {
            let mi = ci * k + ki;
            if !model.active[mi] {
                continue;
            }
            let grid = slot_grid_map(model, &out, 0, mi);
            let (norm, zero_map) = normalize_upsampled(&grid, model.config.input_size);
            let mut peak = (0usize, 0usize);
            let mut best = f64::NEG_INFINITY;
            for (idx, &v) in norm.iter().enumerate() {
                if v > best {
                    best = v;
                    peak = (idx / norm.shape()[1], idx % norm.shape()[1]);
                }
            }
            let contours = if zero_map {
                Vec::new()
            } else {
                threshold_contours(&norm, cfg.contour_level)
            };
            let similarity = out.similarities[[0, ci, ki]];
            let head_weight = head[[ci, ki]];
            overlays.push((
                format!("{}.{}", model.class_names[ci], ki),
                overlay(&sample.image, &norm, &contours, cfg.overlay_alpha),
            ));
            prototypes.push(PrototypeContribution {
                slot: ki,
                similarity,
                head_weight,
                contribution: head_weight * similarity,
                zero_map,
                peak,
                normalized_map: norm.rows().into_iter().map(|r| r.to_vec()).collect(),
                contours,
            });
        }
        classes.push(ClassExplanation {
            class_name: model.class_names[ci].clone(),
            probability: out.probabilities[[0, ci]],
            prototypes,
        });
    }
    Ok((
        LocalExplanation {
            schema_version: EXPLANATION_SCHEMA_VERSION,
            image_id: sample.id.clone(),
            classes,
        },
        overlays,
    ))
}

/// Composite a normalized heat map over a grayscale input in red, and draw
/// contour edges in green. `image` is [1, H, W] (possibly normalized; it is
/// min-max rescaled for display).
pub fn overlay(
    image: &Array3<f64>,
    norm_map: &Array2<f64>,
    contours: &[Vec<(f64, f64)>],
    alpha: f64,
) -> image::RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in image.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let g = (image[[0, i, j]] - lo) / span;
            let m = norm_map[[i, j]].clamp(0.0, 1.0) * alpha;
            let r = g * (1.0 - m) + m;
            let gb = g * (1.0 - m);
            img.put_pixel(
                j as u32,
                i as u32,
                image::Rgb([(r * 255.0) as u8, (gb * 255.0) as u8, (gb * 255.0) as u8]),
            );
        }
    }
    for poly in contours {
        for seg in 0..poly.len() {
            let (x0, y0) = poly[seg];
            let (x1, y1) = poly[(seg + 1) % poly.len()];
            let steps = ((x1 - x0).abs() + (y1 - y0).abs()) as usize + 1;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = (x0 + t * (x1 - x0)).clamp(0.0, w as f64 - 1.0);
                let y = (y0 + t * (y1 - y0)).clamp(0.0, h as f64 - 1.0);
                img.put_pixel(x as u32, y as u32, image::Rgb([0, 255, 0]));
            }
        }
    }
    img
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalExplanation {
    pub schema_version: u32,
    pub prototypes: Vec<PrototypeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub class_name: String,
    pub class_index: usize,
    pub slot: usize,
    pub head_weight: f64,
    pub source_image_id: String,
    /// Occurrence map snapshot on the feature grid, from projection.
    pub occurrence_map: Vec<Vec<f64>>,
    pub nearest_annotated: Option<NearestAnnotated>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NearestAnnotated {
    pub image_id: String,
    pub similarity: f64,
    /// Fraction of occurrence mass (normalized map > contour level) inside
    /// the ground-truth box.
    pub box_overlap_fraction: f64,
}

/// Pooled feature for one slot of one image, matching the variant's pooling.
fn slot_pooled(model: &Model, out: &crate::model::ModelOutput, b: usize, mi: usize) -> Vec<f64> {
    let k = model.config.prototypes_per_class;
    out.pooled_features
        .slice(ndarray::s![b, mi / k, mi % k, ..])
        .to_vec()
}

/// One record per active prototype from projection provenance; when
/// box-annotated samples are provided, the most-similar annotated image and
/// its occurrence/box overlap are attached.
pub fn render_global(
    model: &Model,
    annotated: &[ExplainSample],
    cfg: &ExplainConfig,
) -> Result<GlobalExplanation> {
    let (c, k) = (model.config.num_classes, model.config.prototypes_per_class);
    let head = model.head_weights();
    let protos = model.prototypes();
    let mut records = Vec::new();
    // nearest annotated positive per slot: (similarity, sample index, map)
    let mut nearest: Vec<Option<(f64, usize, Array2<f64>)>> = vec![None; c * k];
    for chunk_start in (0..annotated.len()).step_by(32) {
        let chunk: Vec<&ExplainSample> = annotated[chunk_start..(chunk_start + 32).min(annotated.len())]
            .iter()
            .collect();
        let images = batch_images(&chunk, model.config.input_size);
        let out = model.forward(&images)?;
        for (b, s) in chunk.iter().enumerate() {
            for ci in 0..c {
                if s.labels[ci] != 1 || !s.boxes.iter().any(|(bc, _)| *bc == ci) {
                    continue;
                }
                for ki in 0..k {
                    let mi = ci * k + ki;
                    if !model.active[mi] {
                        continue;
                    }
                    let pooled = slot_pooled(model, &out, b, mi);
                    let (sim, _) =
                        crate::model::ops::cosine_similarity(&pooled, protos.row(mi).as_slice().unwrap());
                    let better = nearest[mi].as_ref().map_or(true, |(s0, _, _)| sim > *s0);
                    if better {
                        nearest[mi] = Some((sim, chunk_start + b, slot_grid_map(model, &out, b, mi)));
                    }
                }
            }
        }
    }
    for ci in 0..c {
        for ki in 0..k {
            let mi = ci * k + ki;
            if !model.active[mi] {
                continue;
            }
            let prov = model.provenance[mi].as_ref().ok_or_else(|| {
                Error::Train(format!(
                    "prototype {}/{ki} has no projection provenance; run projection first",
                    model.class_names[ci]
                ))
            })?;
            let nearest_annotated = nearest[mi].take().map(|(sim, si, grid)| {
                let s = &annotated[si];
                let (norm, _) = normalize_upsampled(&grid, model.config.input_size);
                let mut mass = 0.0;
                let mut inside = 0.0;
                for i in 0..norm.shape()[0] {
                    for j in 0..norm.shape()[1] {
                        let v = norm[[i, j]];
                        if v <= cfg.contour_level {
                            continue;
                        }
                        mass += v;
                        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                        if s.boxes.iter().any(|(bc, bb)| {
                            *bc == ci
                                && px >= bb.x
                                && px < bb.x + bb.w
                                && py >= bb.y
                                && py < bb.y + bb.h
                        }) {
                            inside += v;
                        }
                    }
                }
                NearestAnnotated {
                    image_id: s.id.clone(),
                    similarity: sim,
                    box_overlap_fraction: if mass > 0.0 { inside / mass } else { 0.0 },
                }
            });
            records.push(PrototypeRecord {
                class_name: model.class_names[ci].clone(),
                class_index: ci,
                slot: ki,
                head_weight: head[[ci, ki]],
                source_image_id: prov.image_id.clone(),
                occurrence_map: prov.occurrence_map.clone(),
                nearest_annotated,
            });
        }
    }
    Ok(GlobalExplanation { schema_version: EXPLANATION_SCHEMA_VERSION, prototypes: records })
}

/// Localization hits: over every (positive test image, positive class) pair,
/// does the peak of the class's top-contributing occurrence map fall inside
/// the planted ground-truth box? Returns (hits, pairs).
pub fn localization_score(model: &Model, samples: &[ExplainSample]) -> Result<(usize, usize)> {
    let (c, k) = (model.config.num_classes, model.config.prototypes_per_class);
    let head = model.head_weights();
    let mut hits = 0;
    let mut pairs = 0;
    for chunk in samples.chunks(32) {
        let refs: Vec<&ExplainSample> = chunk.iter().collect();
        let images = batch_images(&refs, model.config.input_size);
        let out = model.forward(&images)?;
        for (b, s) in chunk.iter().enumerate() {
            for ci in 0..c {
                if s.labels[ci] != 1 {
                    continue;
                }
                let boxes: Vec<&BBox> =
                    s.boxes.iter().filter(|(bc, _)| *bc == ci).map(|(_, bb)| bb).collect();
                if boxes.is_empty() {
                    continue;
                }
                // top-contributing active slot of the class
                let mut top: Option<(f64, usize)> = None;
                for ki in 0..k {
                    let mi = ci * k + ki;
                    if !model.active[mi] {
                        continue;
                    }
                    let contrib = head[[ci, ki]] * out.similarities[[0usize.max(b), ci, ki]];
                    if top.map_or(true, |(t, _)| contrib > t) {
                        top = Some((contrib, mi));
                    }
                }
                let Some((_, mi)) = top else { continue };
                let grid = slot_grid_map(model, &out, b, mi);
                let (norm, zero) = normalize_upsampled(&grid, model.config.input_size);
                pairs += 1;
                if zero {
                    continue;
                }
                let mut peak = (0usize, 0usize);
                let mut best = f64::NEG_INFINITY;
                for (idx, &v) in norm.iter().enumerate() {
                    if v > best {
                        best = v;
                        peak = (idx / norm.shape()[1], idx % norm.shape()[1]);
                    }
                }
                let (py, px) = (peak.0 as f64 + 0.5, peak.1 as f64 + 0.5);
                if boxes
                    .iter()
                    .any(|bb| px >= bb.x && px < bb.x + bb.w && py >= bb.y && py < bb.y + bb.h)
                {
                    hits += 1;
                }
            }
        }
    }
    Ok((hits, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]), Some(0.5));
        assert_abs_diff_eq!(
            auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
            0.75,
            epsilon = 1e-12
        );
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auc(&[0.1, 0.2], &[0, 0]), None);
    }

    fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let n = 2 + (rng.random::<u32>() % 49) as usize;
            // coarse score lattice to force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<u32>() % 7) as f64 / 7.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.random::<u32>() % 2) as u8).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                labels[0] ^= 1;
            }
            assert_abs_diff_eq!(
                auc(&scores, &labels).unwrap(),
                pair_auc(&scores, &labels),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn normalized_map_max_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let map = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
            let (norm, zero) = normalize_upsampled(&map, (64, 64));
            assert!(!zero);
            let mx = norm.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            assert_eq!(mx, 1.0);
        }
        let (z, flag) = normalize_upsampled(&Array2::zeros((4, 4)), (64, 64));
        assert!(flag);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rectangle_region_contours_to_four_corners() {
        let mut map = Array2::<f64>::zeros((8, 8));
        for i in 2..5 {
            for j in 3..7 {
                map[[i, j]] = 1.0;
            }
        }
        let polys = threshold_contours(&map, 0.3);
        assert_eq!(polys.len(), 1);
        let mut corners = polys[0].clone();
        corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(corners, vec![(3.0, 2.0), (3.0, 5.0), (7.0, 2.0), (7.0, 5.0)]);
    }

    #[test]
    fn one_hot_cell_contour_encloses_its_upsampled_footprint() {
        // one-hot 2x2 grid upsampled to 8x8: the > 0.3 region is connected
        // around the hot cell's corner; the contour bounds exactly that set
        let mut grid = Array2::<f64>::zeros((2, 2));
        grid[[0, 1]] = 1.0;
        let (norm, _) = normalize_upsampled(&grid, (8, 8));
        let polys = threshold_contours(&norm, 0.3);
        assert_eq!(polys.len(), 1);
        // every above-threshold pixel is inside the polygon's bounding box
        // and every boundary vertex touches the region's hull
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in &polys[0] {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        for i in 0..8 {
            for j in 0..8 {
                if norm[[i, j]] > 0.3 {
                    assert!(j as f64 >= xmin && (j + 1) as f64 <= xmax);
                    assert!(i as f64 >= ymin && (i + 1) as f64 <= ymax);
                }
            }
        }
        // hand geometry: the hot cell sits in the right half
        assert!(xmin >= 3.0, "region should be right of center, got xmin {xmin}");
    }

    #[test]
    fn contours_partition_boundary_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let map = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
            let polys = threshold_contours(&map, 0.5);
            // expected number of boundary edge segments
            let mut expect = 0usize;
            let inside =
                |i: i64, j: i64| i >= 0 && j >= 0 && i < 6 && j < 6 && map[[i as usize, j as usize]] > 0.5;
            for i in 0..6i64 {
                for j in 0..6i64 {
                    if inside(i, j) {
                        for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                            if !inside(i + di, j + dj) {
                                expect += 1;
                            }
                        }
                    }
                }
            }
            // after collinear merging, polygon segment lengths sum to the
            // same total boundary length
            let total: f64 = polys
                .iter()
                .flat_map(|p| {
                    (0..p.len()).map(move |s| {
                        let (x0, y0) = p[s];
                        let (x1, y1) = p[(s + 1) % p.len()];
                        (x1 - x0).abs() + (y1 - y0).abs()
                    })
                })
                .sum();
            assert_abs_diff_eq!(total, expect as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn evaluate_constant_and_oracle_models() {
        // synthetic model-free check of the aggregation path via auc directly
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let constant = vec![0.5f64; 40];
        assert_eq!(auc(&constant, &labels), Some(0.5));
        let oracle: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        assert_eq!(auc(&oracle, &labels), Some(1.0));
    }
}
