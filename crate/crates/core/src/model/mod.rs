//! The network: backbone, feature module, occurrence module, prototype
//! layer, and per-class classification heads, plus prototype projection and
//! pruning. The Patch and GAP comparison variants share everything except
//! how features are compared with prototypes.

pub mod ops;

use crate::autodiff::{best_patch, extract_patch, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::{Array2, Array3, Array4, ArrayD, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

/// Total spatial stride of the backbone (three stride-2 blocks, one stride-1).
pub const BACKBONE_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    /// Four 3x3 convolution blocks trained from scratch (strides 2,2,2,1).
    SmallCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    Xprotonet,
    Patch { r: usize },
    Gap,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Xprotonet => "xprotonet",
            Variant::Patch { .. } => "patch",
            Variant::Gap => "gap",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// K
    pub prototypes_per_class: usize,
    /// D
    pub feature_dim: usize,
    /// (H0, W0) in pixels
    pub input_size: (usize, usize),
    pub backbone: BackboneId,
    /// Output channels of the four backbone blocks.
    pub backbone_channels: [usize; 4],
    pub seed: u64,
}

impl ModelConfig {
    pub fn feature_grid(&self) -> (usize, usize) {
        (self.input_size.0 / BACKBONE_STRIDE, self.input_size.1 / BACKBONE_STRIDE)
    }

    pub fn num_slots(&self) -> usize {
        self.num_classes * self.prototypes_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.prototypes_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Config("C, K, and D must all be >= 1".into()));
        }
        if self.input_size.0 % BACKBONE_STRIDE != 0 || self.input_size.1 % BACKBONE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input size {:?} not divisible by backbone stride {BACKBONE_STRIDE}",
                self.input_size
            )));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    FeatureModule,
    OccurrenceModule,
    Prototypes,
    Head,
}

pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn push(&mut self, name: &str, group: ParamGroup, value: Tensor) {
        self.entries.push(ParamEntry { name: name.to_string(), group, value });
    }

    pub fn index(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index(name);
        &mut self.entries[i].value
    }

    /// Order-insensitive content hash, for freeze-contract assertions.
    pub fn group_digest(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| e.group == group) {
            for v in e.value.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Where a projected prototype came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    /// Occurrence map snapshot on the feature grid (masked to the source box
    /// when projection was bbox-restricted).
    pub occurrence_map: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

impl Provenance {
    pub fn occurrence_array(&self) -> Array2<f64> {
        let h = self.occurrence_map.len();
        let w = self.occurrence_map.first().map_or(0, |r| r.len());
        Array2::from_shape_fn((h, w), |(i, j)| self.occurrence_map[i][j])
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub class_names: Vec<String>,
    pub params: ParamStore,
    /// Active mask over the C*K prototype slots (row-major [C, K]).
    pub active: Vec<bool>,
    pub provenance: Vec<Option<Provenance>>,
}

/// Tape handles for one full forward pass.
pub struct Graph {
    /// Parallel to `params.entries`.
    pub param_vars: Vec<Var>,
    pub backbone: Var,
    /// [B, D, H, W]
    pub features: Var,
    /// [B, M, H, W]; None for Patch/GAP variants
    pub occurrence: Option<Var>,
    /// [B, M, D]; None for the Patch variant
    pub pooled: Option<Var>,
    /// [B, M]
    pub sims: Var,
    /// [B, C]
    pub logits: Var,
    /// [B, C]
    pub probs: Var,
}

/// All intermediates of a forward pass, in plain arrays.
pub struct ModelOutput {
    /// [B, C]
    pub probabilities: Array2<f64>,
    /// [B, C, K]
    pub similarities: Array3<f64>,
    /// [B, C, K, P] where P = D (xprotonet, gap) or r*r*D (patch)
    pub pooled_features: Array4<f64>,
    /// [B, C*K, H, W]; None for Patch/GAP
    pub occurrence_maps: Option<Array4<f64>>,
    /// [B, D, H, W]
    pub feature_maps: Array4<f64>,
    /// Slots whose pooled feature had zero norm (similarity pinned to 0).
    pub zero_norm: Vec<(usize, usize)>,
}

impl Model {
    pub fn prototype_len(config: &ModelConfig, variant: Variant) -> usize {
        match variant {
            Variant::Patch { r } => r * r * config.feature_dim,
            _ => config.feature_dim,
        }
    }

    pub fn new(config: ModelConfig, variant: Variant, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        if let Variant::Patch { r } = variant {
            let (h, w) = config.feature_grid();
            if r < 1 || r > h.min(w) {
                return Err(Error::Config(format!("patch size {r} out of range for grid {h}x{w}")));
            }
        }
        let mut rng = rng::stream(config.seed, "init", &[]);
        let mut params = ParamStore::default();
        let ch = config.backbone_channels;
        let mut cin = 1usize;
        for (i, &cout) in ch.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.push(
                &format!("backbone.conv{i}.weight"),
                ParamGroup::Backbone,
                randn(&mut rng, &[cout, cin, 3, 3], std),
            );
            params.push(&format!("backbone.conv{i}.bias"), ParamGroup::Backbone, Tensor::zeros(IxDyn(&[cout])));
            cin = cout;
        }
        let cb = ch[3];
        let d = config.feature_dim;
        for (name, group, cout_final) in [
            ("feature", ParamGroup::FeatureModule, d),
            ("occurrence", ParamGroup::OccurrenceModule, config.num_slots()),
        ] {
            if group == ParamGroup::OccurrenceModule && variant != Variant::Xprotonet {
                continue;
            }
            let mid = d.max(cb);
            let std0 = (2.0 / cb as f64).sqrt();
            params.push(&format!("{name}.conv0.weight"), group, randn(&mut rng, &[mid, cb, 1, 1], std0));
            params.push(&format!("{name}.conv0.bias"), group, Tensor::zeros(IxDyn(&[mid])));
            let std1 = (2.0 / mid as f64).sqrt();
            params.push(&format!("{name}.conv1.weight"), group, randn(&mut rng, &[cout_final, mid, 1, 1], std1));
            params.push(&format!("{name}.conv1.bias"), group, Tensor::zeros(IxDyn(&[cout_final])));
        }
        let plen = Self::prototype_len(&config, variant);
        let mut protos = randn(&mut rng, &[config.num_slots(), plen], 1.0);
        // unit-norm rows: cosine similarity requires strictly positive norm
        for mut row in protos.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap().rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
        }
        params.push("prototypes", ParamGroup::Prototypes, protos);
        // classification weights start at 1 so high similarity means high score
        params.push("head.weight", ParamGroup::Head, Tensor::ones(IxDyn(&[config.num_slots()])));
        let m = config.num_slots();
        Ok(Model {
            config,
            variant,
            class_names,
            params,
            active: vec![true; m],
            provenance: vec![None; m],
        })
    }

    /// Head weights as a [C, K] view of the flat parameter.
    pub fn head_weights(&self) -> Array2<f64> {
        let (c, k) = (self.config.num_classes, self.config.prototypes_per_class);
        let w = self.params.get("head.weight");
        Array2::from_shape_fn((c, k), |(ci, ki)| w[[ci * k + ki]])
    }

    pub fn prototypes(&self) -> Array2<f64> {
        self.params
            .get("prototypes")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    // ---- tape graph builders -------------------------------------------------

    /// Register every parameter on the tape; `trainable` decides which groups
    /// receive gradients.
    pub fn tape_params(&self, tape: &mut Tape, trainable: &dyn Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.params
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable(e.group)))
            .collect()
    }

    fn pv(&self, pvars: &[Var], name: &str) -> Var {
        pvars[self.params.index(name)]
    }

    pub fn backbone_graph(&self, tape: &mut Tape, pvars: &[Var], images: Var) -> Var {
        let mut x = images;
        for i in 0..4 {
            let w = self.pv(pvars, &format!("backbone.conv{i}.weight"));
            let b = self.pv(pvars, &format!("backbone.conv{i}.bias"));
            // last block keeps resolution: total stride 8, not 16
            let stride = if i == 3 { 1 } else { 2 };
            x = tape.conv2d(x, w, b, stride, 1);
            x = tape.relu(x);
        }
        x
    }

    fn module_graph(&self, tape: &mut Tape, pvars: &[Var], backbone: Var, name: &str) -> Var {
        let w0 = self.pv(pvars, &format!("{name}.conv0.weight"));
        let b0 = self.pv(pvars, &format!("{name}.conv0.bias"));
        let w1 = self.pv(pvars, &format!("{name}.conv1.weight"));
        let b1 = self.pv(pvars, &format!("{name}.conv1.bias"));
        let x = tape.conv2d(backbone, w0, b0, 1, 0);
        let x = tape.relu(x);
        tape.conv2d(x, w1, b1, 1, 0)
    }

    pub fn feature_graph(&self, tape: &mut Tape, pvars: &[Var], backbone: Var) -> Var {
        self.module_graph(tape, pvars, backbone, "feature")
    }

    /// Occurrence maps in [0, 1] (sigmoid-squashed), [B, M, H, W].
    pub fn occurrence_graph(&self, tape: &mut Tape, pvars: &[Var], backbone: Var) -> Var {
        let pre = self.module_graph(tape, pvars, backbone, "occurrence");
        tape.sigmoid(pre)
    }

    /// Similarities [B, M] plus pooled features [B, M, D] where applicable.
    pub fn sims_graph(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        features: Var,
        occurrence: Option<Var>,
    ) -> (Var, Option<Var>) {
        let protos = self.pv(pvars, "prototypes");
        match self.variant {
            Variant::Xprotonet => {
                let occ = occurrence.expect("xprotonet requires occurrence maps");
                let pooled = tape.weighted_pool(features, occ);
                (tape.cosine_sim(pooled, protos), Some(pooled))
            }
            Variant::Gap => {
                let g = tape.mean_spatial(features);
                let e = tape.expand_mid(g, self.config.num_slots());
                (tape.cosine_sim(e, protos), Some(e))
            }
            Variant::Patch { r } => (tape.patch_cos_max(features, protos, r), None),
        }
    }

    /// Active-masked class logits and probabilities, [B, C] each.
    pub fn head_graph(&self, tape: &mut Tape, pvars: &[Var], sims: Var) -> (Var, Var) {
        let w = self.pv(pvars, "head.weight");
        let mask = Tensor::from_shape_vec(
            IxDyn(&[self.config.num_slots()]),
            self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let mask = tape.constant(mask);
        let wm = tape.mul(w, mask);
        let logits = tape.group_dot(sims, wm, self.config.prototypes_per_class);
        let probs = tape.sigmoid(logits);
        (logits, probs)
    }

    pub fn full_graph(&self, tape: &mut Tape, pvars: Vec<Var>, images: Var) -> Graph {
        let backbone = self.backbone_graph(tape, &pvars, images);
        let features = self.feature_graph(tape, &pvars, backbone);
        let occurrence = match self.variant {
            Variant::Xprotonet => Some(self.occurrence_graph(tape, &pvars, backbone)),
            _ => None,
        };
        let (sims, pooled) = self.sims_graph(tape, &pvars, features, occurrence);
        let (logits, probs) = self.head_graph(tape, &pvars, sims);
        Graph { param_vars: pvars, backbone, features, occurrence, pooled, sims, logits, probs }
    }

    fn check_input(&self, images: &ArrayD<f64>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != self.config.input_size {
            return Err(Error::Config(format!(
                "input shape {s:?} does not match configured input size {:?}",
                self.config.input_size
            )));
        }
        Ok(())
    }

    // ---- inference ------------------------------------------------------------

    /// Forward pass retaining all intermediates. `images` is [B, 1, H0, W0].
    pub fn forward(&self, images: &ArrayD<f64>) -> Result<ModelOutput> {
        self.check_input(images)?;
        let batch = images.shape()[0];
        let (c, k) = (self.config.num_classes, self.config.prototypes_per_class);
        let m = c * k;
        let mut tape = Tape::new();
        let pvars = self.tape_params(&mut tape, &|_| false);
        let img = tape.constant(images.clone());
        let g = self.full_graph(&mut tape, pvars, img);

        let probs = tape.value(g.probs).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let sims_flat = tape.value(g.sims).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let similarities = Array3::from_shape_fn((batch, c, k), |(b, ci, ki)| sims_flat[[b, ci * k + ki]]);
        let feature_maps = tape.value(g.features).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let occurrence_maps = g
            .occurrence
            .map(|o| tape.value(o).view().into_dimensionality::<Ix4>().unwrap().to_owned());

        let plen = Self::prototype_len(&self.config, self.variant);
        let mut pooled_features = Array4::<f64>::zeros((batch, c, k, plen));
        let mut zero_norm = Vec::new();
        match self.variant {
            Variant::Patch { r } => {
                for b in 0..batch {
                    let fb = feature_maps.index_axis(ndarray::Axis(0), b);
                    let protos = self.prototypes();
                    for mi in 0..m {
                        let (_, pi, pj) = best_patch(fb, protos.row(mi).as_slice().unwrap(), r);
                        let patch = extract_patch(fb, pi, pj, r);
                        if patch.iter().all(|&x| x == 0.0) {
                            zero_norm.push((b, mi));
                        }
                        for (idx, v) in patch.iter().enumerate() {
                            pooled_features[[b, mi / k, mi % k, idx]] = *v;
                        }
                    }
                }
            }
            _ => {
                let pooled = tape
                    .value(g.pooled.unwrap())
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                for b in 0..batch {
                    for mi in 0..m {
                        let row = pooled.slice(ndarray::s![b, mi, ..]);
                        if row.iter().all(|&x| x == 0.0) {
                            zero_norm.push((b, mi));
                        }
                        for di in 0..plen {
                            pooled_features[[b, mi / k, mi % k, di]] = row[di];
                        }
                    }
                }
            }
        }
        Ok(ModelOutput {
            probabilities: probs,
            similarities,
            pooled_features,
            occurrence_maps,
            feature_maps,
            zero_norm,
        })
    }

    /// Feature map [B, D, H, W] only.
    pub fn extract_feature_maps(&self, images: &ArrayD<f64>) -> Result<Array4<f64>> {
        self.check_input(images)?;
        let mut tape = Tape::new();
        let pvars = self.tape_params(&mut tape, &|_| false);
        let img = tape.constant(images.clone());
        let bb = self.backbone_graph(&mut tape, &pvars, img);
        let f = self.feature_graph(&mut tape, &pvars, bb);
        Ok(tape.value(f).view().into_dimensionality::<Ix4>().unwrap().to_owned())
    }

    /// Occurrence maps [B, M, H, W] only (xprotonet variant).
    pub fn predict_occurrence_maps(&self, images: &ArrayD<f64>) -> Result<Array4<f64>> {
        if self.variant != Variant::Xprotonet {
            return Err(Error::Config("occurrence maps only exist for the xprotonet variant".into()));
        }
        self.check_input(images)?;
        let mut tape = Tape::new();
        let pvars = self.tape_params(&mut tape, &|_| false);
        let img = tape.constant(images.clone());
        let bb = self.backbone_graph(&mut tape, &pvars, img);
        let o = self.occurrence_graph(&mut tape, &pvars, bb);
        Ok(tape.value(o).view().into_dimensionality::<Ix4>().unwrap().to_owned())
    }

    // ---- projection and pruning ------------------------------------------------

    /// Replace each active prototype with the most similar candidate feature
    /// vector from positive samples, recording provenance. With
    /// `bbox_restricted`, only candidates carrying a grid mask for the class
    /// participate and pooling is restricted to the mask.
    pub fn project_prototypes(&mut self, candidates: &[Candidate], bbox_restricted: bool) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::Train("projection: empty candidate set".into()));
        }
        let (c, k) = (self.config.num_classes, self.config.prototypes_per_class);
        let (gh, gw) = self.config.feature_grid();
        let protos = self.prototypes();
        let mut best: Vec<Option<(f64, Provenance)>> = vec![None; c * k];
        for chunk in candidates.chunks(32) {
            let batch = chunk.len();
            let mut images = ArrayD::<f64>::zeros(IxDyn(&[
                batch,
                1,
                self.config.input_size.0,
                self.config.input_size.1,
            ]));
            for (b, cand) in chunk.iter().enumerate() {
                images
                    .slice_mut(ndarray::s![b, .., .., ..])
                    .assign(&cand.image.view());
            }
            let feats = self.extract_feature_maps(&images)?;
            let occ = match self.variant {
                Variant::Xprotonet => Some(self.predict_occurrence_maps(&images)?),
                _ => None,
            };
            for (b, cand) in chunk.iter().enumerate() {
                let fb = feats.index_axis(ndarray::Axis(0), b);
                for ci in 0..c {
                    if cand.labels[ci] == 0 {
                        continue;
                    }
                    let grid_mask = cand.class_grid_masks.get(ci).and_then(|m| m.clone());
                    if bbox_restricted && grid_mask.is_none() {
                        continue;
                    }
                    for ki in 0..k {
                        let mi = ci * k + ki;
                        if !self.active[mi] {
                            continue;
                        }
                        let (pooled, snapshot) = match self.variant {
                            Variant::Xprotonet => {
                                let occ = occ.as_ref().unwrap();
                                let mut map =
                                    occ.slice(ndarray::s![b, mi, .., ..]).to_owned();
                                if bbox_restricted {
                                    map *= grid_mask.as_ref().unwrap();
                                }
                                let pooled = ops::pool_feature(fb, map.view())?;
                                (pooled.to_vec(), map)
                            }
                            Variant::Gap => {
                                let pooled = crate::baselines::gap_pooled_feature(fb);
                                let map = Array2::from_elem((gh, gw), 1.0 / (gh * gw) as f64);
                                (pooled.to_vec(), map)
                            }
                            Variant::Patch { r } => {
                                let (_, pi, pj) =
                                    best_patch(fb, protos.row(mi).as_slice().unwrap(), r);
                                let patch = extract_patch(fb, pi, pj, r);
                                let mut map = Array2::zeros((gh, gw));
                                for ri in 0..r {
                                    for rj in 0..r {
                                        map[[pi + ri, pj + rj]] = 1.0;
                                    }
                                }
                                (patch, map)
                            }
                        };
                        let (sim, _) =
                            ops::cosine_similarity(&pooled, protos.row(mi).as_slice().unwrap());
                        let better = match &best[mi] {
                            None => true,
                            Some((s, _)) => sim > *s,
                        };
                        if better {
                            best[mi] = Some((
                                sim,
                                Provenance {
                                    image_id: cand.id.clone(),
                                    occurrence_map: snapshot
                                        .rows()
                                        .into_iter()
                                        .map(|r| r.to_vec())
                                        .collect(),
                                    pooled: pooled.clone(),
                                },
                            ));
                        }
                    }
                }
            }
        }
        // atomic bank swap
        let mut new_protos = protos.clone();
        for ci in 0..c {
            let found = (0..k).any(|ki| best[ci * k + ki].is_some());
            if !found {
                if bbox_restricted {
                    return Err(Error::Train(format!(
                        "projection: no box-annotated positive candidate for class {}",
                        self.class_names[ci]
                    )));
                }
                log::warn!(
                    "projection: no positive candidate for class {}; prototypes left unchanged",
                    self.class_names[ci]
                );
                continue;
            }
            for ki in 0..k {
                let mi = ci * k + ki;
                if let Some((_, prov)) = best[mi].take() {
                    for (d, v) in prov.pooled.iter().enumerate() {
                        new_protos[[mi, d]] = *v;
                    }
                    self.provenance[mi] = Some(prov);
                }
            }
        }
        let plen = Self::prototype_len(&self.config, self.variant);
        *self.params.get_mut("prototypes") =
            new_protos.into_shape_with_order(IxDyn(&[c * k, plen])).unwrap();
        Ok(())
    }

    /// Deactivate prototypes with strictly negative head weight; zero-weight
    /// prototypes are retained. Errors if a class would lose all prototypes.
    pub fn prune_prototypes(&mut self) -> Result<()> {
        let (c, k) = (self.config.num_classes, self.config.prototypes_per_class);
        let weights = self.params.get("head.weight").clone();
        let mut new_active = self.active.clone();
        for ci in 0..c {
            for ki in 0..k {
                let mi = ci * k + ki;
                if weights[[mi]] < 0.0 {
                    new_active[mi] = false;
                }
            }
            if !(0..k).any(|ki| new_active[ci * k + ki]) {
                return Err(Error::Train(format!(
                    "pruning would remove every prototype of class {}",
                    self.class_names[ci]
                )));
            }
        }
        self.active = new_active;
        Ok(())
    }
}

/// One projection/evaluation candidate: a preprocessed image with labels and
/// optional per-class grid masks rasterized from its bounding boxes.
pub struct Candidate {
    pub id: String,
    /// [1, H0, W0], already preprocessed (no augmentation)
    pub image: Array3<f64>,
    pub labels: Vec<u8>,
    /// Per class: Some(mask) when the sample is box-annotated for the class.
    pub class_grid_masks: Vec<Option<Array2<f64>>>,
}

fn randn(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng::normal(rng) * std)
}
