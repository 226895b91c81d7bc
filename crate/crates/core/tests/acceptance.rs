//! Acceptance gate: the seven primary criteria, one test each. Every test
//! prints a single `criterion N (...): PASS` / `FAIL` line.
//!
//! Criteria 4-7 share trained models through OnceLocks so the whole suite
//! stays inside the runtime budget.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use xprotonet::autodiff::{Tape, Var};
use xprotonet::baselines::{gap_pooled_feature, patch_similarity};
use xprotonet::config::RunConfig;
use xprotonet::data::split::{split, Splits};
use xprotonet::data::synthetic::generate_synthetic;
use xprotonet::data::Sample;
use xprotonet::explain::{auc, evaluate, localization_score, ExplainSample};
use xprotonet::model::ops::{cosine_similarity, pool_feature};
use xprotonet::model::{Candidate, Model, ParamGroup, Variant};
use xprotonet::objectives::{
    bbox_pooled_feature, classification_loss, cluster_separation_losses, occurrence_loss,
    total_loss, transformation_loss, BatchLabels, LossConfig,
};
use xprotonet::trainer::{explain_sample, run_training, run_training_prior_condition, TrainData, TrainOutcome};
use xprotonet::transform::grid_scale_matrix;

fn verdict(n: usize, name: &str, ok: bool) {
    println!("criterion {n} ({name}): {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}) failed");
}

// ---------------------------------------------------------------- criterion 1

/// Tiny-model loss graph: leaves for features, occurrence logits (two
/// branches), prototypes, and head weights; returns the five equation values
/// plus the total.
struct TinyGraph {
    tape: Tape,
    leaves: Vec<Var>,
    losses: [Var; 6],
}

const B: usize = 5;
const C: usize = 2;
const K: usize = 2;
const D: usize = 8;
const G: usize = 4;

fn tiny_graph(leaves: &[ArrayD<f64>], labels: &BatchLabels, mat: &Array2<f64>, cfg: &LossConfig) -> TinyGraph {
    let m = C * K;
    let mut tape = Tape::new();
    let f = tape.leaf(leaves[0].clone(), true);
    let o_logit = tape.leaf(leaves[1].clone(), true);
    let o2_logit = tape.leaf(leaves[2].clone(), true);
    let p = tape.leaf(leaves[3].clone(), true);
    let w = tape.leaf(leaves[4].clone(), true);
    let occ = tape.sigmoid(o_logit);
    let occ2 = tape.sigmoid(o2_logit);
    let pooled = tape.weighted_pool(f, occ);
    let sims = tape.cosine_sim(pooled, p);
    let logits = tape.group_dot(sims, w, K);
    let probs = tape.sigmoid(logits);
    let cls = classification_loss(&mut tape, probs, labels, cfg.gamma);
    let maxes = tape.group_max(sims, K, vec![true; m]);
    let (clst, sep) = cluster_separation_losses(&mut tape, maxes, maxes, labels, None, None);
    let occ_mapped = tape.lin_map_spatial(occ, mat.clone());
    let trans = transformation_loss(&mut tape, occ_mapped, occ2);
    let occur = occurrence_loss(&mut tape, occ, trans, None);
    let total = total_loss(&mut tape, cls, clst, sep, occur, cfg);
    TinyGraph { tape, leaves: vec![f, o_logit, o2_logit, p, w], losses: [cls, clst, sep, trans, occur, total] }
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let m = C * K;
    let shapes: Vec<Vec<usize>> = vec![
        vec![B, D, G, G],
        vec![B, m, G, G],
        vec![B, m, G, G],
        vec![m, D],
        vec![m],
    ];
    let leaves: Vec<ArrayD<f64>> = shapes
        .iter()
        .map(|s| ArrayD::from_shape_fn(IxDyn(s), |_| rng.random::<f64>() * 2.0 - 1.0))
        .collect();
    // both positives and negatives per class
    let y = Array2::from_shape_fn((B, C), |(i, j)| ((i + j) % 2) as f64);
    let labels = BatchLabels::new(y);
    let mat = grid_scale_matrix(G, G, 0.75);
    let cfg = LossConfig::default();

    let names = ["cls", "clst", "sep", "trans", "occur", "total"];
    let mut worst: f64 = 0.0;
    for li in 0..6 {
        let mut g = tiny_graph(&leaves, &labels, &mat, &cfg);
        let grads = g.tape.backward(g.losses[li]);
        for (wi, shape) in shapes.iter().enumerate() {
            let analytic = grads
                .get(g.leaves[wi])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)));
            let n: usize = shape.iter().product();
            for idx in 0..n {
                let x = leaves[wi].as_slice().unwrap()[idx];
                let h = 1e-5 * x.abs().max(1.0);
                let eval = |v: f64| {
                    let mut lv = leaves.clone();
                    lv[wi].as_slice_mut().unwrap()[idx] = v;
                    let gg = tiny_graph(&lv, &labels, &mat, &cfg);
                    gg.tape.scalar_value(gg.losses[li])
                };
                let fd = (eval(x + h) - eval(x - h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let scale = an.abs().max(fd.abs());
                if scale < 1e-5 {
                    continue; // both effectively zero; fd noise dominates
                }
                let rel = (an - fd).abs() / scale;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "{} grad mismatch leaf {wi} idx {idx}: analytic {an} fd {fd}",
                    names[li]
                );
            }
        }
    }
    let ok = worst < 1e-4 && t0.elapsed() < Duration::from_secs(60);
    println!("  worst relative error {worst:.2e} in {:?}", t0.elapsed());
    verdict(1, "gradient suite eqs 4-8", ok);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        // pool_feature: explicit double loop, 4x4 grid, D=8
        let feat = Array3::from_shape_fn((8, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0);
        let map = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let got = pool_feature(feat.view(), map.view()).unwrap();
        for d in 0..8 {
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    want += map[[i, j]] * feat[[d, i, j]];
                }
            }
            assert!((got[d] - want).abs() < 1e-10, "pool_feature");
        }

        // bbox_pooled_feature: masked double loop
        let mut mask = Array2::from_shape_fn((4, 4), |_| f64::from(rng.random_bool(0.4)));
        mask[[rng.random_range(0..4), rng.random_range(0..4)]] = 1.0;
        let got = bbox_pooled_feature(feat.view(), map.view(), mask.view()).unwrap();
        for d in 0..8 {
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    want += mask[[i, j]] * map[[i, j]] * feat[[d, i, j]];
                }
            }
            assert!((got[d] - want).abs() < 1e-10, "bbox_pooled_feature");
        }

        // patch_similarity: brute force over all 16 positions, 5x5x4, r=2
        let feat5 = Array3::from_shape_fn((4, 5, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
        let proto: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let got = patch_similarity(feat5.view(), &proto, 2).unwrap();
        let mut want = f64::NEG_INFINITY;
        for i in 0..4 {
            for j in 0..4 {
                let mut patch = Vec::with_capacity(16);
                for d in 0..4 {
                    for di in 0..2 {
                        for dj in 0..2 {
                            patch.push(feat5[[d, i + di, j + dj]]);
                        }
                    }
                }
                let (s, _) = cosine_similarity(&patch, &proto);
                want = want.max(s);
            }
        }
        assert!((got - want).abs() < 1e-10, "patch_similarity {got} vs {want}");

        // gap_pooled_feature: loop mean, 3x3x4
        let feat3 = Array3::from_shape_fn((4, 3, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let got = gap_pooled_feature(feat3.view());
        for d in 0..4 {
            let mut want = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    want += feat3[[d, i, j]];
                }
            }
            want /= 9.0;
            assert!((got[d] - want).abs() < 1e-12, "gap_pooled_feature");
        }

        // auc: all-pairs, <=50 points, quantized scores to exercise ties
        let n = rng.random_range(4..=50);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 10.0).round() / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = auc(&scores, &labels).unwrap();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        assert!((got - wins / pairs).abs() < 1e-12, "auc {got} vs {}", wins / pairs);
    }
    let ok = t0.elapsed() < Duration::from_secs(60);
    verdict(2, "oracle equivalence", ok);
}

// ---------------------------------------------------------------- criterion 3

fn tiny_corpus(n: usize, seed: u64) -> (RunConfig, Vec<Sample>, Splits) {
    let mut cfg = RunConfig::desk();
    cfg.override_seed(seed);
    let samples = generate_synthetic(&cfg.data.synthetic, n, 0);
    let splits = split(&samples, &cfg.data.split).unwrap();
    (cfg, samples, splits)
}

#[test]
fn criterion_3_codomain_invariants() {
    let cfg = RunConfig::desk();
    let classes = cfg.data.synthetic.class_names();
    let model = Model::new(cfg.model.clone(), Variant::Xprotonet, classes.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let images = ArrayD::from_shape_fn(IxDyn(&[4, 1, 64, 64]), |_| rng.random::<f64>() * 2.0 - 1.0);
    let out = model.forward(&images).unwrap();
    let occ = out.occurrence_maps.as_ref().unwrap();
    assert!(occ.iter().all(|&v| (0.0..=1.0).contains(&v)), "occurrence outside [0,1]");
    assert!(out.similarities.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));

    // cosine scale invariance
    let f: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
    let p: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
    let f2: Vec<f64> = f.iter().map(|v| v * 3.7).collect();
    let (a, _) = cosine_similarity(&f, &p);
    let (b, _) = cosine_similarity(&f2, &p);
    assert!((a - b).abs() < 1e-12, "cosine not scale invariant");

    // transformation loss is exactly zero under the identity map
    let mut tape = Tape::new();
    let maps = tape.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| rng.random::<f64>()));
    let mapped = tape.lin_map_spatial(maps, grid_scale_matrix(4, 4, 1.0));
    let trans = transformation_loss(&mut tape, mapped, maps);
    assert!(tape.scalar_value(trans).abs() < 1e-12, "identity trans loss nonzero");

    // projection: every projected prototype has similarity 1 to its source
    let (cfg, samples, splits) = tiny_corpus(160, 5);
    let mut model = Model::new(cfg.model.clone(), Variant::Xprotonet, classes.clone()).unwrap();
    let candidates: Vec<Candidate> = splits
        .train
        .iter()
        .filter(|&&i| samples[i].labels.iter().any(|&l| l == 1))
        .map(|&i| Candidate {
            id: samples[i].image_id.clone(),
            image: xprotonet::data::preprocess::preprocess(&samples[i].pixels, &cfg.data.preprocess, None)
                .unwrap(),
            labels: samples[i].labels.clone(),
            class_grid_masks: vec![None; 3],
        })
        .collect();
    model.project_prototypes(&candidates, false).unwrap();
    let protos = model.prototypes();
    for (slot, prov) in model.provenance.iter().enumerate() {
        let Some(prov) = prov else { continue };
        let (s, zero) = cosine_similarity(protos.row(slot).as_slice().unwrap(), &prov.pooled);
        assert!(!zero && (s - 1.0).abs() < 1e-6, "projection similarity {s}");
    }

    // pruning: negative head weights deactivate their prototypes
    {
        let w = model.params.get_mut("head.weight");
        w[[0]] = -0.4;
        w[[4]] = -0.1;
    }
    model.prune_prototypes().unwrap();
    let w = model.params.get("head.weight");
    for (slot, &active) in model.active.iter().enumerate() {
        if active {
            assert!(w[[slot]] >= 0.0, "active slot {slot} has negative weight");
        }
    }
    assert!(!model.active[0] && !model.active[4]);

    // stage freeze contracts, observed through per-epoch checkpoints
    let (cfg2, samples2, splits2) = tiny_corpus(200, 6);
    let data = TrainData::build(&samples2, &splits2, &cfg2.data.preprocess, cfg2.model.feature_grid().0, 3).unwrap();
    let mut tc = cfg2.train.clone();
    tc.warmup_epochs = 1;
    tc.joint_epoch_cap = 1;
    tc.head_epochs = 1;
    tc.max_cycles = 1;
    tc.checkpoint_every_epoch = true;
    // seeded init: constructing twice yields identical parameters
    let mut fresh = Model::new(cfg2.model.clone(), Variant::Xprotonet, classes.clone()).unwrap();
    xprotonet::checkpoint::snap_to_f32(&mut fresh);
    let trainee = Model::new(cfg2.model.clone(), Variant::Xprotonet, classes.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_training(trainee, &data, &tc, &cfg2.loss, Some(dir.path())).unwrap();
    let ep = |n: usize| {
        let (m, _) = xprotonet::checkpoint::load(&dir.path().join(format!("epochs/epoch_{n:04}"))).unwrap();
        m
    };
    let (e0, e1, e2, e3) = (ep(0), ep(1), ep(2), ep(3));
    // warmup + joint never touch the head
    assert_eq!(e0.params.group_digest(ParamGroup::Head), fresh.params.group_digest(ParamGroup::Head));
    assert_eq!(e1.params.group_digest(ParamGroup::Head), e0.params.group_digest(ParamGroup::Head));
    // warmup trains the feature module but not the backbone
    assert_ne!(e0.params.group_digest(ParamGroup::FeatureModule), fresh.params.group_digest(ParamGroup::FeatureModule));
    assert_eq!(e0.params.group_digest(ParamGroup::Backbone), fresh.params.group_digest(ParamGroup::Backbone));
    // joint trains the backbone
    assert_ne!(e1.params.group_digest(ParamGroup::Backbone), e0.params.group_digest(ParamGroup::Backbone));
    // head stage trains only the head
    for grp in [ParamGroup::Backbone, ParamGroup::FeatureModule, ParamGroup::OccurrenceModule, ParamGroup::Prototypes] {
        assert_eq!(e3.params.group_digest(grp), e2.params.group_digest(grp), "{grp:?} moved in head stage");
    }
    assert_ne!(e3.params.group_digest(ParamGroup::Head), e2.params.group_digest(ParamGroup::Head));

    // checkpoint round trip is bit exact
    let ck = tempfile::tempdir().unwrap();
    let mut m = e1;
    xprotonet::checkpoint::save(ck.path(), &mut m, None).unwrap();
    let (back, _) = xprotonet::checkpoint::load(ck.path()).unwrap();
    for (a, b) in m.params.entries.iter().zip(back.params.entries.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    verdict(3, "codomain and invariants", true);
}

// ------------------------------------------------------- shared training runs

struct Trained {
    outcome: TrainOutcome,
    report_mean: f64,
    secs: f64,
}

struct Bench {
    cfg: RunConfig,
    data: TrainData,
    test: Vec<ExplainSample>,
}

fn bench() -> &'static Bench {
    static CELL: OnceLock<Bench> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::desk();
        cfg.override_seed(7);
        cfg.train.min_cycle_improvement = 0.0; // always complete max_cycles cycles
        let n = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
        let samples = generate_synthetic(&cfg.data.synthetic, n, 0);
        let splits = split(&samples, &cfg.data.split).unwrap();
        let data = TrainData::build(&samples, &splits, &cfg.data.preprocess, cfg.model.feature_grid().0, 3).unwrap();
        let test = splits
            .test
            .iter()
            .map(|&i| explain_sample(&samples[i], &cfg.data.preprocess).unwrap())
            .collect();
        Bench { cfg, data, test }
    })
}

fn train_variant(variant: Variant, prior: bool) -> Trained {
    let b = bench();
    let classes = b.cfg.data.synthetic.class_names();
    let model = Model::new(b.cfg.model.clone(), variant, classes).unwrap();
    let t0 = Instant::now();
    let outcome = if prior {
        run_training_prior_condition(model, &b.data, &b.cfg.train, &b.cfg.loss, None).unwrap()
    } else {
        run_training(model, &b.data, &b.cfg.train, &b.cfg.loss, None).unwrap()
    };
    let secs = t0.elapsed().as_secs_f64();
    let report = evaluate(&outcome.model, &b.test).unwrap();
    Trained { outcome, report_mean: report.mean_auc.unwrap(), secs }
}

fn xproto_run() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_variant(Variant::Xprotonet, false))
}

fn gap_run() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_variant(Variant::Gap, false))
}

fn prior_run() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_variant(Variant::Xprotonet, true))
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_synthetic_end_to_end() {
    let xp = xproto_run();
    let gap = gap_run();
    println!(
        "  xprotonet mean AUC {:.4} ({:.0}s), gap mean AUC {:.4} ({:.0}s)",
        xp.report_mean, xp.secs, gap.report_mean, gap.secs
    );
    let ok = xp.report_mean >= 0.90
        && xp.report_mean >= gap.report_mean
        && xp.secs + gap.secs < 1200.0;
    verdict(4, "synthetic end-to-end", ok);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_localization() {
    let xp = xproto_run();
    let b = bench();
    let (hits, pairs) = localization_score(&xp.outcome.model, &b.test).unwrap();
    let frac = hits as f64 / pairs as f64;
    println!("  localization {hits}/{pairs} = {frac:.3}");
    verdict(5, "localization peak-in-box", pairs > 0 && frac >= 0.70);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_prior_condition() {
    let pr = prior_run();
    let xp = xproto_run();
    let b = bench();
    // provenance occurrence mass lies inside the source box rasterization
    let model = &pr.outcome.model;
    let k = model.config.prototypes_per_class;
    let mut checked = 0;
    for (slot, prov) in model.provenance.iter().enumerate() {
        let (Some(prov), true) = (prov, model.active[slot]) else { continue };
        let src = b.data.train.iter().find(|s| s.id == prov.image_id).expect("provenance source");
        let mask = src.grid_masks[slot / k].as_ref().expect("annotated source has a mask");
        let occ = prov.occurrence_array();
        for ((i, j), &v) in occ.indexed_iter() {
            if mask[[i, j]] == 0.0 {
                assert!(v.abs() < 1e-12, "slot {slot}: occurrence {v} outside box at ({i},{j})");
            }
        }
        checked += 1;
    }
    let diff = (pr.report_mean - xp.report_mean).abs();
    println!(
        "  prior mean AUC {:.4} vs unconstrained {:.4} (diff {:.4}), {checked} prototypes checked",
        pr.report_mean, xp.report_mean, diff
    );
    verdict(6, "prior condition", checked > 0 && diff <= 0.05);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_determinism() {
    let first = xproto_run();
    let second = train_variant(Variant::Xprotonet, false);
    let log = |o: &TrainOutcome| {
        o.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect::<Vec<_>>().join("\n")
    };
    let ok = log(&first.outcome) == log(&second.outcome);
    println!("  {} metric records compared", first.outcome.metrics.len());
    verdict(7, "determinism", ok);
}
