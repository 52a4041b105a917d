use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use dissim::checkpoint::Checkpoint;
use dissim::config::{RunConfig, TrainMode};
use dissim::evaluator::{
    ablate_datasize, evaluate, scorer_for, write_ablation_csv, write_result_csv, ProjectionExport, Scorer,
};
use dissim::manifest::{RunManifest, MANIFEST_FILE};
use dissim::pairspace::{count_pairs, sample_balanced_pairs};
use dissim::tensor::SeededRng;
use dissim::trainer::{train, train_from, write_loss_log, Model, INIT_STREAM};
use dissim::{gradcheck, Error, Result};

#[derive(Parser)]
#[command(name = "dissim", version, about = "Metric learning in a dissimilarity space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config with flat keys; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for every file the command writes.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for retrieval scoring.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss log and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from this checkpoint's parameters instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Open-set Recall@K of a checkpoint on the held-out classes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// euclid, dissim_svm or mahalanobis; defaults to the one matching the training mode.
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
        k: Vec<usize>,
    },
    /// Dissimilarity pipeline vs Euclidean baseline at reduced training-set sizes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.5, 0.25])]
        fractions: Vec<f64>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Within/between-class pair counts for K classes of R references each.
    Pairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: u64,
        #[arg(long)]
        refs: u64,
    },
    /// Central-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// 2-D PCA exports of embeddings and dissimilarity vectors.
    Project {
        #[command(flatten)]
        common: Common,
        /// End-to-end trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint not trained in dissimilarity space; the untrained
        /// initialisation of the same config when omitted.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        pairs: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        run.train.seed = s;
    }
    Ok(run)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            mode,
            epochs,
            init,
        } => {
            let mut run = resolve(&common)?;
            if let Some(m) = mode {
                run.train.mode = m;
            }
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            run.train.validate()?;
            let dir = out_dir(&common)?;
            let (train_set, test) = run.data.load_split()?;
            info!(
                "{} training samples in {} classes, {} held-out samples in {} classes",
                train_set.len(),
                train_set.n_classes(),
                test.len(),
                test.n_classes()
            );
            let mut manifest = RunManifest::new("train", &run);
            let outcome = match &init {
                Some(p) => {
                    manifest.input("init", p);
                    let model = Checkpoint::load(p)?.to_model()?;
                    train_from(model, &train_set, &run)
                }
                None => train(&train_set, &run),
            };
            let outcome = match outcome {
                Ok(o) => o,
                Err(Error::Diverged {
                    epoch,
                    step,
                    what,
                    last_good,
                }) => {
                    let p = dir.join("last_good.dsmm");
                    last_good.save(&p)?;
                    warn!("last good checkpoint written to {}", p.display());
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        what,
                        last_good,
                    });
                }
                Err(e) => return Err(e),
            };
            let ckpt = dir.join("checkpoint.dsmm");
            let log = dir.join("loss_log.csv");
            outcome.checkpoint.save(&ckpt)?;
            write_loss_log(&outcome.log, &log)?;
            manifest.artifact("checkpoint", &ckpt).artifact("loss_log", &log);
            manifest.write(&dir.join(MANIFEST_FILE))?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "trained {} epochs ({}): l_total {:.6}",
                    run.train.epochs,
                    run.train.mode.as_str(),
                    last.losses.l_total
                );
            } else {
                println!("trained 0 epochs ({})", run.train.mode.as_str());
            }
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Eval {
            common,
            checkpoint,
            scorer,
            k,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut run = ck.config.clone();
            if let Some(p) = &common.config {
                run.data = RunConfig::from_json_file(p)?.data;
            }
            if let Some(s) = common.seed {
                run.train.seed = s;
            }
            let scorer = match scorer {
                Some(s) => Scorer::parse(&s)?,
                None => scorer_for(run.train.mode),
            };
            let model = ck.to_model()?;
            let (_, test) = run.data.load_split()?;
            let result = evaluate(&model, &test, &k, scorer, common.threads)?;
            let dir = out_dir(&common)?;
            let (json, csv, mpath) = (dir.join("eval.json"), dir.join("eval.csv"), dir.join(MANIFEST_FILE));
            write_json(
                &json,
                &serde_json::json!({
                    "manifest": mpath,
                    "seed": run.train.seed,
                    "scorer": result.scorer,
                    "recall_at": result.recall_at,
                    "skipped": result.skipped,
                    "first_correct_rank": result.first_correct_rank,
                }),
            )?;
            write_result_csv(std::slice::from_ref(&result), &mpath, &csv)?;
            let mut manifest = RunManifest::new("eval", &run);
            manifest
                .input("checkpoint", &checkpoint)
                .artifact("result_json", &json)
                .artifact("result_csv", &csv);
            manifest.write(&mpath)?;
            for (kk, v) in &result.recall_at {
                println!("{} R@{kk} = {v:.4}", scorer.as_str());
            }
        }
        Command::Ablate {
            common,
            fractions,
            seeds,
        } => {
            let base = resolve(&common)?;
            let (train_set, test) = base.data.load_split()?;
            let mut dissim_cfg = base.clone();
            dissim_cfg.train.mode = TrainMode::End2end;
            let mut euclid_cfg = base.clone();
            euclid_cfg.train.mode = TrainMode::EuclidBaseline;
            let seed_list: Vec<u64> = (base.train.seed..base.train.seed + seeds).collect();
            let rows = ablate_datasize(&train_set, &test, &fractions, &dissim_cfg, &euclid_cfg, &seed_list)?;
            let dir = out_dir(&common)?;
            let (csv, mpath) = (dir.join("ablation.csv"), dir.join(MANIFEST_FILE));
            write_ablation_csv(&rows, &mpath, &csv)?;
            let mut manifest = RunManifest::new("ablate", &base);
            manifest.artifact("ablation_csv", &csv);
            manifest.write(&mpath)?;
            for r in rows.iter().filter(|r| r.scorer == Scorer::DissimSvm) {
                println!("fraction {}: median R@1 {:.4}, delta {:+.4}", r.fraction, r.median_r1, r.delta);
            }
        }
        Command::Pairs { common, classes, refs } => {
            let count = count_pairs(classes, refs)?;
            let text = serde_json::to_string(&count)?;
            println!("{text}");
            if common.out_dir.is_some() {
                std::fs::write(out_dir(&common)?.join("pairs.json"), text + "\n")?;
            }
        }
        Command::Gradcheck { common, trials } => {
            let seed = common.seed.unwrap_or(0);
            let reports = gradcheck::run_suite(seed, trials)?;
            for r in &reports {
                println!(
                    "{:<24} {} max_rel_err {:.3e} (tol {:.0e}, {} trials)",
                    r.op,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.tolerance,
                    r.trials
                );
            }
            if common.out_dir.is_some() {
                write_json(&out_dir(&common)?.join("gradcheck.json"), &reports)?;
            }
            if let Some(bad) = reports.iter().find(|r| !r.passed) {
                return Err(Error::NonFinite(format!(
                    "gradient check failed for {} (max relative error {:.3e})",
                    bad.op, bad.max_rel_err
                )));
            }
        }
        Command::Project {
            common,
            checkpoint,
            baseline,
            pairs,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut run = ck.config.clone();
            if let Some(s) = common.seed {
                run.train.seed = s;
            }
            let e2e = ck.to_model()?;
            let (_, test) = run.data.load_split()?;
            let base = match &baseline {
                Some(p) => Checkpoint::load(p)?.to_model()?,
                None => Model::new(
                    &run.train,
                    test.dim(),
                    e2e.head.n_classes(),
                    &mut SeededRng::with_stream(run.train.seed, INIT_STREAM),
                )?,
            };
            let mut rng = SeededRng::with_stream(run.train.seed, INIT_STREAM + 2);
            let pair_batch = sample_balanced_pairs(&test.labels, pairs, &mut rng)?;
            let base_phi = base.adapted(&test.features)?;
            let exports = [
                ("projection_embeddings.csv", ProjectionExport::embeddings(&base.metric_features(&test.features)?, &test.labels)?),
                ("projection_dissimilarity.csv", ProjectionExport::dissimilarities(&base_phi, &test.labels, &pair_batch)?),
                (
                    "projection_dissimilarity_e2e.csv",
                    ProjectionExport::dissimilarities(&e2e.adapted(&test.features)?, &test.labels, &pair_batch)?,
                ),
            ];
            let dir = out_dir(&common)?;
            let mut manifest = RunManifest::new("project", &run);
            manifest.input("checkpoint", &checkpoint);
            if let Some(b) = &baseline {
                manifest.input("baseline", b);
            }
            for (name, export) in &exports {
                let p = dir.join(name);
                export.write_csv(&p)?;
                if export.projection.degenerate {
                    warn!("{name}: fewer than two directions of variance");
                }
                manifest.artifact(name.trim_end_matches(".csv"), &p);
                println!("{}", p.display());
            }
            manifest.write(&dir.join(MANIFEST_FILE))?;
        }
    }
    Ok(())
}
