//! Command-line entry point covering the full lifecycle: synthetic data
//! generation, training (plain and prior-condition), evaluation, projection,
//! pruning, explanation rendering, and the baseline comparison table.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure. Failed
//! runs leave a FAILED marker in their output directory.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use xprotonet::config::RunConfig;
use xprotonet::data::split::{split, write_manifests, Splits};
use xprotonet::data::synthetic::generate_synthetic;
use xprotonet::data::{read_dataset, write_dataset, Sample};
use xprotonet::explain::{evaluate, render_global, render_local, EvalReport, ExplainSample};
use xprotonet::model::{Model, Variant};
use xprotonet::trainer::{
    explain_sample, resume_training, run_training, run_training_prior_condition, TrainData,
    TrainOutcome,
};
use xprotonet::{Error, Result};

#[derive(Parser)]
#[command(name = "xprotonet", version, about = "Prototype-based interpretable diagnosis models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed override (applies to model, training, splitting, data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VariantArgs {
    /// Model variant: xprotonet, patch, or gap.
    #[arg(long, default_value = "xprotonet")]
    variant: String,
    /// Patch side length for the patch variant.
    #[arg(long, default_value_t = 2)]
    patch_r: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic planted-signal dataset directory.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Full training run (warmup, joint/project/head cycles, pruning).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArgs,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Training with the bounding-box prior condition.
    TrainPrior {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Project prototypes onto training features and save.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Prune negative-weight prototypes and save.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render local/global explanations for test images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of test images to explain.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train xprotonet, patch, and gap under one seed and compare AUCs.
    CompareBaselines {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArgs,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let out = out_dir(&cli.cmd).to_path_buf();
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::fs::create_dir_all(&out);
            let _ = std::fs::write(out.join("FAILED"), format!("{e}\n"));
            std::process::exit(match e {
                Error::Config(_) => 1,
                _ => 2,
            });
        }
    }
}

fn out_dir(cmd: &Cmd) -> &Path {
    match cmd {
        Cmd::SynthData { common }
        | Cmd::Train { common, .. }
        | Cmd::TrainPrior { common }
        | Cmd::Evaluate { common, .. }
        | Cmd::Project { common, .. }
        | Cmd::Prune { common, .. }
        | Cmd::Explain { common, .. }
        | Cmd::CompareBaselines { common, .. } => &common.out,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    cfg.echo(&common.out)?;
    Ok(cfg)
}

fn parse_variant(v: &VariantArgs) -> Result<Variant> {
    match v.variant.as_str() {
        "xprotonet" => Ok(Variant::Xprotonet),
        "patch" => Ok(Variant::Patch { r: v.patch_r }),
        "gap" => Ok(Variant::Gap),
        other => Err(Error::Config(format!(
            "unknown variant '{other}' (expected xprotonet, patch, or gap)"
        ))),
    }
}

struct Prepared {
    samples: Vec<Sample>,
    classes: Vec<String>,
    splits: Splits,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dir = cfg.require_dataset()?;
    let (samples, classes) = read_dataset(dir)?;
    if classes.len() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes = {} but the dataset defines {} classes",
            cfg.model.num_classes,
            classes.len()
        )));
    }
    let splits = split(&samples, &cfg.data.split)?;
    Ok(Prepared { samples, classes, splits })
}

fn explain_samples(cfg: &RunConfig, p: &Prepared, idxs: &[usize]) -> Result<Vec<ExplainSample>> {
    idxs.iter()
        .map(|&i| explain_sample(&p.samples[i], &cfg.data.preprocess))
        .collect()
}

fn write_eval(out: &Path, name: &str, classes: &[String], report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let doc = serde_json::json!({
        "per_class": classes.iter().zip(&report.per_class).map(|(c, a)| (c.clone(), a)).collect::<std::collections::BTreeMap<_, _>>(),
        "mean_auc": report.mean_auc,
    });
    std::fs::write(out.join(name), serde_json::to_string_pretty(&doc).unwrap() + "\n")?;
    Ok(())
}

fn print_report(label: &str, classes: &[String], report: &EvalReport) {
    println!("{label}");
    for (c, a) in classes.iter().zip(&report.per_class) {
        match a {
            Some(a) => println!("  {c:<24} {a:.4}"),
            None => println!("  {c:<24} (undefined)"),
        }
    }
    match report.mean_auc {
        Some(m) => println!("  {:<24} {m:.4}", "mean"),
        None => println!("  {:<24} (undefined)", "mean"),
    }
}

fn train_common(cfg: &RunConfig, variant: Variant, out: &Path, prior: bool, resume: Option<&Path>) -> Result<()> {
    let p = prepare(cfg)?;
    write_manifests(out, &p.samples, &p.splits)?;
    let grid = cfg.model.feature_grid().0;
    let data = TrainData::build(&p.samples, &p.splits, &cfg.data.preprocess, grid, cfg.model.num_classes)?;
    let outcome: TrainOutcome = if let Some(ckpt) = resume {
        resume_training(ckpt, &data, &cfg.train, &cfg.loss, Some(out))?
    } else {
        let model = Model::new(cfg.model.clone(), variant, p.classes.clone())?;
        if prior {
            run_training_prior_condition(model, &data, &cfg.train, &cfg.loss, Some(out))?
        } else {
            run_training(model, &data, &cfg.train, &cfg.loss, Some(out))?
        }
    };
    let test = explain_samples(cfg, &p, &p.splits.test)?;
    let report = evaluate(&outcome.model, &test)?;
    write_eval(out, "eval.json", &p.classes, &report)?;
    print_report("test AUC", &p.classes, &report);
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthData { common } => {
            let cfg = load_config(&common)?;
            let n = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
            let samples = generate_synthetic(&cfg.data.synthetic, n, 0);
            let classes = cfg.data.synthetic.class_names();
            write_dataset(&common.out, &samples, &classes)?;
            println!("wrote {n} samples to {}", common.out.display());
            Ok(())
        }
        Cmd::Train { common, variant, checkpoint } => {
            let cfg = load_config(&common)?;
            let v = parse_variant(&variant)?;
            train_common(&cfg, v, &common.out, false, checkpoint.as_deref())
        }
        Cmd::TrainPrior { common } => {
            let cfg = load_config(&common)?;
            train_common(&cfg, Variant::Xprotonet, &common.out, true, None)
        }
        Cmd::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (model, _) = xprotonet::checkpoint::load(&checkpoint)?;
            let p = prepare(&cfg)?;
            let test = explain_samples(&cfg, &p, &p.splits.test)?;
            let report = evaluate(&model, &test)?;
            write_eval(&common.out, "eval.json", &p.classes, &report)?;
            print_report("test AUC", &p.classes, &report);
            Ok(())
        }
        Cmd::Project { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (mut model, trainer) = xprotonet::checkpoint::load(&checkpoint)?;
            let p = prepare(&cfg)?;
            let grid = cfg.model.feature_grid().0;
            let data =
                TrainData::build(&p.samples, &p.splits, &cfg.data.preprocess, grid, cfg.model.num_classes)?;
            let prior = cfg.train.prior_condition && data.train.iter().any(|s| s.annotated);
            let mut candidates = Vec::new();
            for s in &data.train {
                if s.labels.iter().any(|&l| l == 1) && (!prior || s.annotated) {
                    candidates.push(xprotonet::model::Candidate {
                        id: s.id.clone(),
                        image: xprotonet::data::preprocess::preprocess(&s.pixels, &cfg.data.preprocess, None)?,
                        labels: s.labels.clone(),
                        class_grid_masks: s.grid_masks.clone(),
                    });
                }
            }
            model.project_prototypes(&candidates, prior)?;
            xprotonet::checkpoint::save(&common.out.join("checkpoint"), &mut model, trainer)?;
            println!("projected prototypes saved to {}", common.out.join("checkpoint").display());
            Ok(())
        }
        Cmd::Prune { common, checkpoint } => {
            load_config(&common)?;
            let (mut model, trainer) = xprotonet::checkpoint::load(&checkpoint)?;
            model.prune_prototypes()?;
            xprotonet::checkpoint::save(&common.out.join("checkpoint"), &mut model, trainer)?;
            let kept = model.active.iter().filter(|&&a| a).count();
            println!("pruned to {kept}/{} prototypes", model.active.len());
            Ok(())
        }
        Cmd::Explain { common, checkpoint, count } => {
            let cfg = load_config(&common)?;
            let (model, _) = xprotonet::checkpoint::load(&checkpoint)?;
            let p = prepare(&cfg)?;
            let test = explain_samples(&cfg, &p, &p.splits.test)?;
            let exp_dir = common.out.join("explanations");
            let ovl_dir = common.out.join("overlays");
            std::fs::create_dir_all(&exp_dir)?;
            std::fs::create_dir_all(&ovl_dir)?;
            for s in test.iter().take(count) {
                let (doc, overlays) = render_local(&model, s, &cfg.explain)?;
                std::fs::write(
                    exp_dir.join(format!("{}.json", s.id)),
                    serde_json::to_string_pretty(&doc).unwrap() + "\n",
                )?;
                for (key, img) in overlays {
                    img.save(ovl_dir.join(format!("{}.{key}.png", s.id)))?;
                }
            }
            // global records use annotated training images
            let annotated_idx: Vec<usize> = p
                .splits
                .train
                .iter()
                .copied()
                .filter(|&i| p.samples[i].annotated)
                .collect();
            let annotated = explain_samples(&cfg, &p, &annotated_idx)?;
            let global = render_global(&model, &annotated, &cfg.explain)?;
            std::fs::write(
                common.out.join("global.json"),
                serde_json::to_string_pretty(&global).unwrap() + "\n",
            )?;
            println!(
                "wrote {} local explanations and {} prototype records",
                count.min(test.len()),
                global.prototypes.len()
            );
            Ok(())
        }
        Cmd::CompareBaselines { common, variant } => {
            let cfg = load_config(&common)?;
            let p = prepare(&cfg)?;
            write_manifests(&common.out, &p.samples, &p.splits)?;
            let grid = cfg.model.feature_grid().0;
            let data =
                TrainData::build(&p.samples, &p.splits, &cfg.data.preprocess, grid, cfg.model.num_classes)?;
            let test = explain_samples(&cfg, &p, &p.splits.test)?;
            let variants = [
                Variant::Xprotonet,
                Variant::Patch { r: variant.patch_r },
                Variant::Gap,
            ];
            let mut table = Vec::new();
            for v in variants {
                let sub = common.out.join(v.name());
                let model = Model::new(cfg.model.clone(), v, p.classes.clone())?;
                let outcome = run_training(model, &data, &cfg.train, &cfg.loss, Some(&sub))?;
                let report = evaluate(&outcome.model, &test)?;
                write_eval(&sub, "eval.json", &p.classes, &report)?;
                table.push((v.name().to_string(), report));
            }
            let doc = serde_json::json!({
                "classes": p.classes,
                "variants": table
                    .iter()
                    .map(|(name, r)| {
                        serde_json::json!({
                            "variant": name,
                            "per_class": r.per_class,
                            "mean_auc": r.mean_auc,
                        })
                    })
                    .collect::<Vec<_>>(),
            });
            std::fs::write(
                common.out.join("comparison.json"),
                serde_json::to_string_pretty(&doc).unwrap() + "\n",
            )?;
            println!("{:<12} {}", "variant", p.classes.join("  "));
            for (name, r) in &table {
                let cells: Vec<String> = r
                    .per_class
                    .iter()
                    .map(|a| a.map_or("   -  ".to_string(), |a| format!("{a:.4}")))
                    .collect();
                println!(
                    "{name:<12} {}  mean {}",
                    cells.join("  "),
                    r.mean_auc.map_or("-".into(), |m| format!("{m:.4}"))
                );
            }
            Ok(())
        }
    }
}
