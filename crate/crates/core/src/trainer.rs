//! Training loop: warm-up, then repeated (joint training with early stopping
//! on validation mean AUC, prototype projection, head training) until a full
//! cycle stops improving, followed by one pruning pass. Includes the
//! prior-condition variant that constrains prototypes with bounding boxes.

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::checkpoint;
use crate::data::preprocess::{preprocess, PreprocessConfig};
use crate::data::split::Splits;
use crate::data::{rasterize_box, Sample};
use crate::error::{Error, Result};
use crate::explain::{evaluate, ExplainSample};
use crate::model::{Candidate, Model, ParamGroup, Variant};
use crate::objectives::{
    classification_loss, cluster_separation_losses, occurrence_loss, per_class_components,
    total_loss, transformation_loss, BatchLabels, LossBreakdown, LossConfig,
};
use crate::rng;
use crate::transform;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Joint-stage early stopping patience, in validation evaluations.
    pub early_stop_patience: usize,
    pub max_cycles: usize,
    /// Hard cap on joint epochs per cycle.
    pub joint_epoch_cap: usize,
    pub head_epochs: usize,
    /// A cycle that improves best validation mean AUC by less than this ends
    /// the convergence loop.
    pub min_cycle_improvement: f64,
    pub lr_backbone: f64,
    pub lr_features: f64,
    pub lr_prototypes: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub prior_condition: bool,
    pub augment: bool,
    /// Write a resumable checkpoint after every epoch (under out/epochs/).
    pub checkpoint_every_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            warmup_epochs: 5,
            early_stop_patience: 3,
            max_cycles: 2,
            joint_epoch_cap: 12,
            head_epochs: 3,
            min_cycle_improvement: 1e-4,
            lr_backbone: 1e-4,
            lr_features: 1e-3,
            lr_prototypes: 1e-3,
            lr_head: 1e-3,
            weight_decay: 0.0,
            prior_condition: false,
            augment: true,
            checkpoint_every_epoch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size, warmup_epochs, early_stop_patience must be positive".into()));
        }
        if self.max_cycles == 0 || self.joint_epoch_cap == 0 || self.head_epochs == 0 {
            return Err(Error::Config("max_cycles, joint_epoch_cap, head_epochs must be positive".into()));
        }
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_features", self.lr_features),
            ("lr_prototypes", self.lr_prototypes),
            ("lr_head", self.lr_head),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 || self.min_cycle_improvement < 0.0 {
            return Err(Error::Config("weight_decay and min_cycle_improvement must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Joint,
    Project,
    Head,
    Done,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Project => "project",
            Stage::Head => "head",
            Stage::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub cycle: usize,
    pub stage: Stage,
    /// Global epoch counter (every logged record advances it).
    pub epoch: usize,
    pub stage_epoch: usize,
    /// Best validation mean AUC seen anywhere in the run.
    pub best_val_auc: f64,
    /// Joint-stage early stopper state.
    pub stopper_best: f64,
    pub stopper_since: usize,
    /// best_val_auc when the current cycle's joint stage began.
    pub cycle_start_best: f64,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            cycle: 0,
            stage: Stage::Warmup,
            epoch: 0,
            stage_epoch: 0,
            best_val_auc: f64::NEG_INFINITY,
            stopper_best: f64::NEG_INFINITY,
            stopper_since: 0,
            cycle_start_best: f64::NEG_INFINITY,
        }
    }
}

/// Early stopping on a metric stream: stop after `patience` consecutive
/// non-improving observations. A constant stream stops after exactly
/// patience + 1 observations (the first one sets the baseline).
pub struct EarlyStopper {
    pub best: f64,
    pub since: usize,
    pub patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { best: f64::NEG_INFINITY, since: 0, patience }
    }

    /// Returns true when the stage should stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.since = 0;
            false
        } else {
            self.since += 1;
            self.since >= self.patience
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cycle: usize,
    pub stage: String,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub val_mean_auc: Option<f64>,
}

/// Adaptive-moment optimizer with per-group learning rates. Moments are
/// stored parallel to the parameter list.
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        Adam {
            m: model.params.entries.iter().map(|e| Tensor::zeros(e.value.raw_dim())).collect(),
            v: model.params.entries.iter().map(|e| Tensor::zeros(e.value.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &Gradients,
        pvars: &[Var],
        lr_of: &dyn Fn(ParamGroup) -> f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, e) in model.params.entries.iter_mut().enumerate() {
            let lr = lr_of(e.group);
            if lr == 0.0 {
                continue;
            }
            let Some(g) = grads.get(pvars[i]) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((p, gv), (mi, vi)) in
                e.value.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let grad = gv + weight_decay * *p;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * grad;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * grad * grad;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Round moments to f32, matching the checkpoint's on-disk precision.
    pub fn snap(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Affine transform for the equivariance loss: an image-space scaling ratio
/// plus its exact map-space linear operator.
pub struct AffineDescriptor {
    pub ratio: f64,
    /// [H*W, H*W] operator on flattened occurrence maps.
    pub grid_matrix: Array2<f64>,
}

/// Uniform choice between the two resizing ratios.
pub fn sample_affine(r: &mut rand_chacha::ChaCha8Rng, grid: (usize, usize)) -> AffineDescriptor {
    let ratio = if rng::uniform(r, 0.0, 1.0) < 0.5 { 0.75 } else { 0.875 };
    AffineDescriptor { ratio, grid_matrix: transform::grid_scale_matrix(grid.0, grid.1, ratio) }
}

/// One training sample, resized to the input resolution but not normalized
/// (normalization happens after augmentation).
pub struct TrainSample {
    pub id: String,
    pub pixels: Array2<f64>,
    pub labels: Vec<u8>,
    /// Per class: grid mask rasterized from the sample's boxes.
    pub grid_masks: Vec<Option<Array2<f64>>>,
    pub annotated: bool,
}

pub struct TrainData {
    pub train: Vec<TrainSample>,
    pub val: Vec<ExplainSample>,
    pub pre: PreprocessConfig,
}

impl TrainData {
    /// Assemble trainer inputs from raw samples and index splits. Boxes are
    /// rescaled from the source resolution to the configured input size and
    /// rasterized onto the feature grid.
    pub fn build(
        samples: &[Sample],
        splits: &Splits,
        pre: &PreprocessConfig,
        grid: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let s = pre.input_size;
        let mut train = Vec::with_capacity(splits.train.len());
        for &i in &splits.train {
            let smp = &samples[i];
            smp.validate(num_classes)?;
            let pixels = if smp.pixels.shape() == [s, s] {
                smp.pixels.clone()
            } else {
                transform::resize_bilinear(&smp.pixels, s, s)
            };
            let mut grid_masks = vec![None; num_classes];
            for (c, b) in scaled_boxes(smp, s) {
                let mask = rasterize_box(&b, s, grid)?;
                grid_masks[c] = Some(match grid_masks[c].take() {
                    // multiple boxes for a class: union of rasterizations
                    Some(prev) => {
                        ndarray::Zip::from(&prev).and(&mask).map_collect(|&a: &f64, &b: &f64| a.max(b))
                    }
                    None => mask,
                });
            }
            train.push(TrainSample {
                id: smp.image_id.clone(),
                pixels,
                labels: smp.labels.clone(),
                grid_masks,
                annotated: smp.annotated,
            });
        }
        let mut val = Vec::with_capacity(splits.val.len());
        for &i in &splits.val {
            val.push(explain_sample(&samples[i], pre)?);
        }
        Ok(TrainData { train, val, pre: pre.clone() })
    }
}

/// Boxes rescaled from source pixels to the configured input size.
fn scaled_boxes(s: &Sample, input_size: usize) -> Vec<(usize, crate::data::BBox)> {
    let (h, w) = (s.pixels.shape()[0] as f64, s.pixels.shape()[1] as f64);
    let (fy, fx) = (input_size as f64 / h, input_size as f64 / w);
    s.boxes
        .iter()
        .map(|(c, b)| {
            (*c, crate::data::BBox { x: b.x * fx, y: b.y * fy, w: b.w * fx, h: b.h * fy })
        })
        .collect()
}

/// Build an evaluation/explanation sample (preprocessed, no augmentation).
pub fn explain_sample(s: &Sample, pre: &PreprocessConfig) -> Result<ExplainSample> {
    Ok(ExplainSample {
        id: s.image_id.clone(),
        image: preprocess(&s.pixels, pre, None)?,
        labels: s.labels.clone(),
        boxes: scaled_boxes(s, pre.input_size),
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrainerSection {
    state: TrainState,
    adam_t: u64,
}

struct Loop<'a> {
    model: Model,
    adam: Adam,
    state: TrainState,
    data: &'a TrainData,
    cfg: &'a TrainConfig,
    loss_cfg: &'a LossConfig,
    out_dir: Option<&'a Path>,
    metrics: Vec<MetricsRecord>,
}

/// Full training run: warmup, then (joint, project, head) cycles until the
/// cycle improvement falls below threshold or max_cycles, then pruning.
pub fn run_training(
    model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let adam = Adam::new(&model);
    let state = TrainState::default();
    run_loop(Loop { model, adam, state, data, cfg, loss_cfg, out_dir, metrics: Vec::new() })
}

/// Prior-condition run: box-annotated samples get annotated lambdas,
/// bbox-restricted cluster similarities, outside-box occurrence L1, and the
/// projection pool restricted to annotated positives.
pub fn run_training_prior_condition(
    model: Model,
    data: &TrainData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig { prior_condition: true, ..cfg.clone() };
    run_training(model, data, &cfg, loss_cfg, out_dir)
}

/// Resume a run from a checkpoint directory written with
/// checkpoint_every_epoch (or the final checkpoint of an interrupted run).
pub fn resume_training(
    ckpt_dir: &Path,
    data: &TrainData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let (model, trainer) = checkpoint::load(ckpt_dir)?;
    let section: TrainerSection = trainer
        .ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state".into()))?
        .try_into()
        .map_err(|e| Error::Checkpoint(format!("trainer state parse: {e}")))?;
    let mut adam = Adam::new(&model);
    adam.t = section.adam_t;
    let n = model.params.entries.len();
    let moments = checkpoint::read_tensors(&ckpt_dir.join("optimizer.bin"), 2 * n)?;
    for (i, t) in moments.into_iter().enumerate() {
        if i < n {
            adam.m[i] = t;
        } else {
            adam.v[i - n] = t;
        }
    }
    run_loop(Loop {
        model,
        adam,
        state: section.state,
        data,
        cfg,
        loss_cfg,
        out_dir,
        metrics: Vec::new(),
    })
}

fn write_train_checkpoint(dir: &Path, lp: &mut Loop) -> Result<()> {
    let section = TrainerSection { state: lp.state.clone(), adam_t: lp.adam.t };
    let value = toml::Value::try_from(&section)
        .map_err(|e| Error::Checkpoint(format!("trainer state serialization: {e}")))?;
    checkpoint::save(dir, &mut lp.model, Some(value))?;
    let names: Vec<String> = lp
        .model
        .params
        .entries
        .iter()
        .map(|e| format!("m.{}", e.name))
        .chain(lp.model.params.entries.iter().map(|e| format!("v.{}", e.name)))
        .collect();
    let tensors: Vec<(&str, &Tensor)> = names
        .iter()
        .map(|n| n.as_str())
        .zip(lp.adam.m.iter().chain(lp.adam.v.iter()))
        .collect();
    checkpoint::write_tensors(&dir.join("optimizer.bin"), &tensors)
}

fn run_loop(mut lp: Loop) -> Result<TrainOutcome> {
    lp.cfg.validate()?;
    lp.loss_cfg.validate()?;
    if lp.data.val.is_empty() {
        return Err(Error::Train("validation split is empty".into()));
    }
    if lp.cfg.prior_condition && lp.model.variant != Variant::Xprotonet {
        return Err(Error::Config("prior condition requires the xprotonet variant".into()));
    }
    let c = lp.model.config.num_classes;
    for ci in 0..c {
        if !lp.data.train.iter().any(|s| s.labels[ci] == 1) {
            log::warn!(
                "class {} has no positive training sample; cluster/separation terms are inactive for it",
                lp.model.class_names[ci]
            );
        }
    }
    let any_annotated = lp.data.train.iter().any(|s| s.annotated);
    if lp.cfg.prior_condition && any_annotated {
        for ci in 0..c {
            let ok = lp
                .data
                .train
                .iter()
                .any(|s| s.annotated && s.labels[ci] == 1 && s.grid_masks[ci].is_some());
            if !ok {
                return Err(Error::Train(format!(
                    "prior condition: no box-annotated positive sample for class {}",
                    lp.model.class_names[ci]
                )));
            }
        }
    }
    let prior_active = lp.cfg.prior_condition && any_annotated;

    loop {
        match lp.state.stage {
            Stage::Done => break,
            Stage::Warmup => {
                let bd = train_epoch(&mut lp, Stage::Warmup, prior_active)?;
                lp.state.stage_epoch += 1;
                finish_epoch(&mut lp, Stage::Warmup, bd)?;
                if lp.state.stage_epoch >= lp.cfg.warmup_epochs {
                    enter_joint(&mut lp.state);
                }
            }
            Stage::Joint => {
                let bd = train_epoch(&mut lp, Stage::Joint, prior_active)?;
                lp.state.stage_epoch += 1;
                let auc = finish_epoch(&mut lp, Stage::Joint, bd)?;
                let mut stopper = EarlyStopper {
                    best: lp.state.stopper_best,
                    since: lp.state.stopper_since,
                    patience: lp.cfg.early_stop_patience,
                };
                let stop = stopper.observe(auc.unwrap_or(f64::NEG_INFINITY));
                lp.state.stopper_best = stopper.best;
                lp.state.stopper_since = stopper.since;
                if stop || lp.state.stage_epoch >= lp.cfg.joint_epoch_cap {
                    lp.state.stage = Stage::Project;
                    lp.state.stage_epoch = 0;
                }
            }
            Stage::Project => {
                let candidates = projection_candidates(lp.data, prior_active)?;
                lp.model.project_prototypes(&candidates, prior_active)?;
                finish_epoch(&mut lp, Stage::Project, LossBreakdown::default())?;
                lp.state.stage = Stage::Head;
                lp.state.stage_epoch = 0;
            }
            Stage::Head => {
                let bd = train_epoch(&mut lp, Stage::Head, prior_active)?;
                lp.state.stage_epoch += 1;
                finish_epoch(&mut lp, Stage::Head, bd)?;
                if lp.state.stage_epoch >= lp.cfg.head_epochs {
                    let improvement = lp.state.best_val_auc - lp.state.cycle_start_best;
                    let done = lp.state.cycle + 1 >= lp.cfg.max_cycles
                        || improvement < lp.cfg.min_cycle_improvement;
                    if done {
                        lp.model.prune_prototypes()?;
                        finish_epoch(&mut lp, Stage::Done, LossBreakdown::default())?;
                        lp.state.stage = Stage::Done;
                    } else {
                        lp.state.cycle += 1;
                        enter_joint(&mut lp.state);
                    }
                }
            }
        }
    }
    if let Some(dir) = lp.out_dir {
        write_train_checkpoint(&dir.join("checkpoint"), &mut lp)?;
    }
    Ok(TrainOutcome { model: lp.model, metrics: lp.metrics })
}

fn enter_joint(state: &mut TrainState) {
    state.stage = Stage::Joint;
    state.stage_epoch = 0;
    state.stopper_best = f64::NEG_INFINITY;
    state.stopper_since = 0;
    state.cycle_start_best = state.best_val_auc;
}

/// Evaluate, log a metrics record, snap to storage precision, and checkpoint
/// if configured. Returns the validation mean AUC.
fn finish_epoch(lp: &mut Loop, stage: Stage, loss: LossBreakdown) -> Result<Option<f64>> {
    checkpoint::snap_to_f32(&mut lp.model);
    lp.adam.snap();
    let report = evaluate(&lp.model, &lp.data.val)?;
    let auc = report.mean_auc;
    if let Some(a) = auc {
        if a > lp.state.best_val_auc {
            lp.state.best_val_auc = a;
        }
    }
    let record = MetricsRecord {
        cycle: lp.state.cycle,
        stage: stage.name().to_string(),
        epoch: lp.state.epoch,
        loss,
        val_mean_auc: auc,
    };
    if let Some(dir) = lp.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?;
        writeln!(
            f,
            "{}",
            serde_json::to_string(&record).map_err(|e| Error::Train(format!("metrics: {e}")))?
        )?;
    }
    lp.metrics.push(record);
    lp.state.epoch += 1;
    if lp.cfg.checkpoint_every_epoch {
        if let Some(dir) = lp.out_dir {
            write_train_checkpoint(&dir.join(format!("epochs/epoch_{:04}", lp.state.epoch - 1)), lp)?;
        }
    }
    Ok(auc)
}

fn trainable_for(stage: Stage, group: ParamGroup) -> bool {
    match stage {
        Stage::Warmup => matches!(
            group,
            ParamGroup::FeatureModule | ParamGroup::OccurrenceModule | ParamGroup::Prototypes
        ),
        Stage::Joint => group != ParamGroup::Head,
        Stage::Head => group == ParamGroup::Head,
        _ => false,
    }
}

fn lr_for(cfg: &TrainConfig, stage: Stage, group: ParamGroup) -> f64 {
    if !trainable_for(stage, group) {
        return 0.0;
    }
    match group {
        ParamGroup::Backbone => cfg.lr_backbone,
        ParamGroup::FeatureModule | ParamGroup::OccurrenceModule => cfg.lr_features,
        ParamGroup::Prototypes => cfg.lr_prototypes,
        ParamGroup::Head => cfg.lr_head,
    }
}

fn projection_candidates(data: &TrainData, prior: bool) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for s in &data.train {
        if s.labels.iter().all(|&l| l == 0) {
            continue;
        }
        if prior && !s.annotated {
            continue;
        }
        out.push(Candidate {
            id: s.id.clone(),
            image: preprocess(&s.pixels, &data.pre, None)?,
            labels: s.labels.clone(),
            class_grid_masks: s.grid_masks.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Train("projection: no positive candidates in the training split".into()));
    }
    Ok(out)
}

fn add_scaled(acc: &mut LossBreakdown, bd: &LossBreakdown, w: f64) {
    acc.cls += w * bd.cls;
    acc.clst += w * bd.clst;
    acc.sep += w * bd.sep;
    acc.occur += w * bd.occur;
    acc.trans += w * bd.trans;
    acc.total += w * bd.total;
    if acc.per_class.len() < bd.per_class.len() {
        acc.per_class.resize(bd.per_class.len(), Default::default());
    }
    for (a, b) in acc.per_class.iter_mut().zip(&bd.per_class) {
        a.cls += w * b.cls;
        a.clst += w * b.clst;
        a.sep += w * b.sep;
        a.occur_l1 += w * b.occur_l1;
    }
}

fn train_epoch(lp: &mut Loop, stage: Stage, prior: bool) -> Result<LossBreakdown> {
    let cfg = lp.cfg;
    let n = lp.data.train.len();
    if n == 0 {
        return Err(Error::Train("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(cfg.seed, "shuffle", &[lp.state.epoch as u64]);
        order.shuffle(&mut r);
    }
    let mut acc = LossBreakdown::default();
    let mut seen = 0usize;
    for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
        let bd = train_step(lp, stage, prior, batch, bi as u64)?;
        let w = batch.len() as f64;
        add_scaled(&mut acc, &bd, w);
        seen += batch.len();
    }
    let inv = 1.0 / seen as f64;
    let mut mean = LossBreakdown::default();
    add_scaled(&mut mean, &acc, inv);
    Ok(mean)
}

fn train_step(lp: &mut Loop, stage: Stage, prior: bool, batch: &[usize], batch_idx: u64) -> Result<LossBreakdown> {
    let cfg = lp.cfg;
    let loss_cfg = lp.loss_cfg;
    let model = &lp.model;
    let b = batch.len();
    let s = model.config.input_size.0;
    let (gh, gw) = model.config.feature_grid();
    let (c, k) = (model.config.num_classes, model.config.prototypes_per_class);
    let m = c * k;
    let epoch = lp.state.epoch as u64;

    // assemble the (augmented) batch
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[b, 1, s, s]));
    let mut y = Array2::<f64>::zeros((b, c));
    for (row, &si) in batch.iter().enumerate() {
        let smp = &lp.data.train[si];
        // augmentation would desynchronize boxes from pixels, so annotated
        // samples are fed unaugmented in prior-condition mode
        let use_aug = cfg.augment && !(prior && smp.annotated);
        let img = if use_aug {
            let mut r = rng::stream(cfg.seed, "augment", &[rng::tag(&smp.id), epoch]);
            preprocess(&smp.pixels, &lp.data.pre, Some(&mut r))?
        } else {
            preprocess(&smp.pixels, &lp.data.pre, None)?
        };
        images.slice_mut(ndarray::s![row, .., .., ..]).assign(&img.view());
        for ci in 0..c {
            y[[row, ci]] = smp.labels[ci] as f64;
        }
    }
    let labels = BatchLabels::new(y);

    let head_only = stage == Stage::Head;
    let mut tape = Tape::new();
    let pvars = model.tape_params(&mut tape, &|g| trainable_for(stage, g));
    let img = tape.constant(images.clone());
    let g = model.full_graph(&mut tape, pvars.clone(), img);

    let cls = classification_loss(&mut tape, g.probs, &labels, loss_cfg.gamma);
    let zero = tape.constant(crate::autodiff::scalar(0.0));
    let (mut clst_v, mut sep_v, mut occur_v, mut trans_v) = (zero, zero, zero, zero);
    let mut clst_max_vals = Array2::<f64>::zeros((b, c));
    let mut sep_max_vals = Array2::<f64>::zeros((b, c));
    let mut map_l1_pc: Option<ndarray::Array1<f64>> = None;

    if !head_only {
        let sep_max = tape.group_max(g.sims, k, model.active.clone());
        // cluster side: bbox-restricted similarities for annotated samples
        let (clst_max, clst_scale, sep_scale) = if prior {
            let mut mask = Array4::<f64>::from_elem((b, m, gh, gw), 1.0);
            let mut clst_scale = Array2::<f64>::from_elem((b, c), 1.0);
            let mut sep_scale = Array2::<f64>::from_elem((b, c), 1.0);
            let clst_ratio = safe_ratio(loss_cfg.lambda_clst_annotated, loss_cfg.lambda_clst);
            let sep_ratio = safe_ratio(loss_cfg.lambda_sep_annotated, loss_cfg.lambda_sep);
            for (row, &si) in batch.iter().enumerate() {
                let smp = &lp.data.train[si];
                if !smp.annotated {
                    continue;
                }
                for ci in 0..c {
                    sep_scale[[row, ci]] = sep_ratio;
                    if let Some(gm) = &smp.grid_masks[ci] {
                        clst_scale[[row, ci]] = clst_ratio;
                        for ki in 0..k {
                            mask.slice_mut(ndarray::s![row, ci * k + ki, .., ..]).assign(gm);
                        }
                    }
                }
            }
            let mask_c = tape.constant(mask.into_dyn());
            let occ = g.occurrence.expect("prior condition implies xprotonet");
            let occ_boxed = tape.mul(occ, mask_c);
            let pooled_boxed = tape.weighted_pool(g.features, occ_boxed);
            let protos = pvars[model.params.index("prototypes")];
            let sims_boxed = tape.cosine_sim(pooled_boxed, protos);
            let clst_max = tape.group_max(sims_boxed, k, model.active.clone());
            (clst_max, Some(clst_scale), Some(sep_scale))
        } else {
            (sep_max, None, None)
        };
        let (clst, sep) = cluster_separation_losses(
            &mut tape,
            clst_max,
            sep_max,
            &labels,
            clst_scale.as_ref(),
            sep_scale.as_ref(),
        );
        clst_v = clst;
        sep_v = sep;
        clst_max_vals = tape.value(clst_max).view().into_dimensionality().unwrap().to_owned();
        sep_max_vals = tape.value(sep_max).view().into_dimensionality().unwrap().to_owned();

        if let Some(occ) = g.occurrence {
            // equivariance branch: transform the input, share all weights
            let mut r = rng::stream(cfg.seed, "affine", &[epoch, batch_idx]);
            let aff = sample_affine(&mut r, (gh, gw));
            let mut images_t = ArrayD::<f64>::zeros(IxDyn(&[b, 1, s, s]));
            for row in 0..b {
                let plane = images
                    .slice(ndarray::s![row, 0, .., ..])
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let scaled = transform::scale_about_center(&plane, aff.ratio);
                images_t.slice_mut(ndarray::s![row, 0, .., ..]).assign(&scaled);
            }
            let img_t = tape.constant(images_t);
            let bb_t = model.backbone_graph(&mut tape, &pvars, img_t);
            let occ_t = model.occurrence_graph(&mut tape, &pvars, bb_t);
            let occ_mapped = tape.lin_map_spatial(occ, aff.grid_matrix.clone());
            // trans and L1 are means over batch, slots, and cells so their
            // magnitude is independent of the grid and prototype count
            let norm = 1.0 / (b * m * gh * gw) as f64;
            let trans_sum = transformation_loss(&mut tape, occ_mapped, occ_t);
            let trans = tape.scale(trans_sum, norm);

            // occurrence L1, outside-box for annotated samples in prior mode
            let l1_mask = if prior {
                let mut outside = Array4::<f64>::from_elem((b, m, gh, gw), 1.0);
                for (row, &si) in batch.iter().enumerate() {
                    let smp = &lp.data.train[si];
                    if !smp.annotated {
                        continue;
                    }
                    for ci in 0..c {
                        if let Some(gm) = &smp.grid_masks[ci] {
                            for ki in 0..k {
                                let mut cell = outside.slice_mut(ndarray::s![row, ci * k + ki, .., ..]);
                                cell.assign(&gm.mapv(|v| 1.0 - v));
                            }
                        }
                    }
                }
                Some(outside.into_dyn())
            } else {
                None
            };
            let zero2 = tape.constant(crate::autodiff::scalar(0.0));
            let l1_sum = occurrence_loss(&mut tape, occ, zero2, l1_mask);
            let l1 = tape.scale(l1_sum, norm);
            occur_v = tape.add(trans, l1);
            trans_v = trans;

            // per-class occurrence L1 (unmasked), for the metrics log
            let occ_vals: Array4<f64> =
                tape.value(occ).view().into_dimensionality().unwrap().to_owned();
            let mut pc = ndarray::Array1::<f64>::zeros(c);
            for ci in 0..c {
                pc[ci] = occ_vals
                    .slice(ndarray::s![.., ci * k..(ci + 1) * k, .., ..])
                    .sum()
                    * norm;
            }
            map_l1_pc = Some(pc);
        }
    }

    let total = if head_only {
        cls
    } else {
        total_loss(&mut tape, cls, clst_v, sep_v, occur_v, loss_cfg)
    };

    let probs: Array2<f64> = tape.value(g.probs).view().into_dimensionality().unwrap().to_owned();
    let breakdown = LossBreakdown {
        cls: tape.scalar_value(cls),
        clst: tape.scalar_value(clst_v),
        sep: tape.scalar_value(sep_v),
        occur: tape.scalar_value(occur_v),
        trans: tape.scalar_value(trans_v),
        total: tape.scalar_value(total),
        per_class: per_class_components(
            probs.view(),
            clst_max_vals.view(),
            sep_max_vals.view(),
            &labels,
            loss_cfg.gamma,
            map_l1_pc.as_ref(),
        ),
    };

    let grads = tape.backward(total);
    lp.adam.step(&mut lp.model, &grads, &pvars, &|grp| lr_for(cfg, stage, grp), cfg.weight_decay);
    Ok(breakdown)
}

fn safe_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn early_stopper_constant_stream_stops_after_patience_plus_one() {
        let mut es = EarlyStopper::new(3);
        let mut count = 0;
        loop {
            count += 1;
            if es.observe(0.5) {
                break;
            }
            assert!(count < 20);
        }
        assert_eq!(count, 4);
    }

    #[test]
    fn early_stopper_resets_on_improvement() {
        let mut es = EarlyStopper::new(2);
        assert!(!es.observe(0.5));
        assert!(!es.observe(0.4));
        assert!(!es.observe(0.6)); // improvement resets
        assert!(!es.observe(0.6));
        assert!(es.observe(0.6));
    }

    #[test]
    fn affine_ratios_are_balanced_and_never_identity() {
        let mut r = stream(9, "affine-test", &[]);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let a = sample_affine(&mut r, (4, 4));
            assert!(a.ratio == 0.75 || a.ratio == 0.875);
            counts[usize::from(a.ratio == 0.875)] += 1;
        }
        let f = counts[0] as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }

    #[test]
    fn adam_moves_only_groups_with_nonzero_lr() {
        use crate::model::{BackboneId, ModelConfig};
        let config = ModelConfig {
            num_classes: 2,
            prototypes_per_class: 2,
            feature_dim: 4,
            input_size: (32, 32),
            backbone: BackboneId::SmallCnn,
            backbone_channels: [2, 2, 3, 3],
            seed: 3,
        };
        let mut model =
            Model::new(config, Variant::Xprotonet, vec!["a".into(), "b".into()]).unwrap();
        let before_backbone = model.params.group_digest(ParamGroup::Backbone);
        let before_head = model.params.group_digest(ParamGroup::Head);
        let before_protos = model.params.group_digest(ParamGroup::Prototypes);

        let mut tape = Tape::new();
        let pvars = model.tape_params(&mut tape, &|g| trainable_for(Stage::Warmup, g));
        let images = ArrayD::from_shape_fn(IxDyn(&[2, 1, 32, 32]), |i| {
            ((i[0] + i[2] * 3 + i[3]) % 11) as f64 / 11.0
        });
        let img = tape.constant(images);
        let g = model.full_graph(&mut tape, pvars.clone(), img);
        let y = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = BatchLabels::new(y);
        let loss = classification_loss(&mut tape, g.probs, &labels, 2.0);
        let grads = tape.backward(loss);
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&model);
        adam.step(&mut model, &grads, &pvars, &|grp| lr_for(&cfg, Stage::Warmup, grp), 0.0);

        assert_eq!(model.params.group_digest(ParamGroup::Backbone), before_backbone);
        assert_eq!(model.params.group_digest(ParamGroup::Head), before_head);
        assert_ne!(model.params.group_digest(ParamGroup::Prototypes), before_protos);
    }

    fn tiny_setup(n: usize, seed: u64) -> (crate::config::RunConfig, TrainData) {
        let mut cfg = crate::config::RunConfig::desk();
        cfg.override_seed(seed);
        let samples = crate::data::synthetic::generate_synthetic(&cfg.data.synthetic, n, 0);
        let splits = crate::data::split::split(&samples, &cfg.data.split).unwrap();
        let data = TrainData::build(&samples, &splits, &cfg.data.preprocess, cfg.model.feature_grid().0, 3).unwrap();
        (cfg, data)
    }

    #[test]
    fn resume_matches_continuous_run_bit_exactly() {
        let (cfg, data) = tiny_setup(80, 11);
        let mut tc = cfg.train.clone();
        tc.warmup_epochs = 2;
        tc.joint_epoch_cap = 1;
        tc.head_epochs = 1;
        tc.max_cycles = 1;
        tc.checkpoint_every_epoch = true;
        let classes = cfg.data.synthetic.class_names();
        let a = tempfile::tempdir().unwrap();
        let model = Model::new(cfg.model.clone(), Variant::Xprotonet, classes.clone()).unwrap();
        let cont = run_training(model, &data, &tc, &cfg.loss, Some(a.path())).unwrap();

        let b = tempfile::tempdir().unwrap();
        let resumed =
            resume_training(&a.path().join("epochs/epoch_0000"), &data, &tc, &cfg.loss, Some(b.path()))
                .unwrap();
        let ser = |ms: &[MetricsRecord]| {
            ms.iter().map(|m| serde_json::to_string(m).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(ser(&cont.metrics[1..]), ser(&resumed.metrics));
        let (ma, _) = checkpoint::load(&a.path().join("checkpoint")).unwrap();
        let (mb, _) = checkpoint::load(&b.path().join("checkpoint")).unwrap();
        for (ea, eb) in ma.params.entries.iter().zip(mb.params.entries.iter()) {
            assert_eq!(ea.name, eb.name);
            assert!(ea.value.iter().zip(eb.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn prior_lambda_routing_matches_single_batch_recomputation() {
        let (cfg, data) = tiny_setup(80, 13);
        let mut tc = cfg.train.clone();
        tc.warmup_epochs = 1;
        tc.joint_epoch_cap = 1;
        tc.head_epochs = 1;
        tc.max_cycles = 1;
        tc.augment = false;
        tc.batch_size = data.train.len(); // a single batch holds the epoch
        let classes = cfg.data.synthetic.class_names();
        let model = Model::new(cfg.model.clone(), Variant::Xprotonet, classes.clone()).unwrap();
        let out =
            run_training_prior_condition(model, &data, &tc, &cfg.loss, None).unwrap();
        let got = &out.metrics[0];

        // recompute clst/sep with a freshly seeded (identical) model
        let model = Model::new(cfg.model.clone(), Variant::Xprotonet, classes).unwrap();
        let (b, c, k) = (data.train.len(), 3, cfg.model.prototypes_per_class);
        let s = cfg.model.input_size.0;
        let mut images = ArrayD::<f64>::zeros(IxDyn(&[b, 1, s, s]));
        for (row, smp) in data.train.iter().enumerate() {
            let img = preprocess(&smp.pixels, &data.pre, None).unwrap();
            images.slice_mut(ndarray::s![row, .., .., ..]).assign(&img);
        }
        let feats = model.extract_feature_maps(&images).unwrap();
        let occ = model.predict_occurrence_maps(&images).unwrap();
        let protos = model.prototypes();
        let fwd = model.forward(&images).unwrap();
        let mut npos = vec![0.0; c];
        let mut nneg = vec![0.0; c];
        for smp in &data.train {
            for ci in 0..c {
                if smp.labels[ci] == 1 {
                    npos[ci] += 1.0;
                } else {
                    nneg[ci] += 1.0;
                }
            }
        }
        let ratio = cfg.loss.lambda_clst_annotated / cfg.loss.lambda_clst;
        let sep_ratio = cfg.loss.lambda_sep_annotated / cfg.loss.lambda_sep;
        let (mut clst, mut sep) = (0.0, 0.0);
        for (row, smp) in data.train.iter().enumerate() {
            for ci in 0..c {
                if smp.labels[ci] == 1 {
                    let fb = feats.index_axis(ndarray::Axis(0), row);
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..k {
                        let mi = ci * k + ki;
                        let map = occ.slice(ndarray::s![row, mi, .., ..]);
                        let sim = match (smp.annotated, &smp.grid_masks[ci]) {
                            (true, Some(gm)) => {
                                let pooled = crate::objectives::bbox_pooled_feature(
                                    fb,
                                    map,
                                    gm.view(),
                                )
                                .unwrap();
                                crate::autodiff::cosine(
                                    pooled.as_slice().unwrap(),
                                    protos.row(mi).as_slice().unwrap(),
                                )
                            }
                            _ => fwd.similarities[[row, ci, ki]],
                        };
                        best = best.max(sim);
                    }
                    let scale = match (smp.annotated, &smp.grid_masks[ci]) {
                        (true, Some(_)) => ratio,
                        _ => 1.0,
                    };
                    clst -= scale / npos[ci] * best;
                } else {
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..k {
                        best = best.max(fwd.similarities[[row, ci, ki]]);
                    }
                    let scale = if smp.annotated { sep_ratio } else { 1.0 };
                    sep += scale / nneg[ci] * best;
                }
            }
        }
        assert!((got.loss.clst - clst).abs() < 1e-9, "clst {} vs {clst}", got.loss.clst);
        assert!((got.loss.sep - sep).abs() < 1e-9, "sep {} vs {sep}", got.loss.sep);
    }
}
