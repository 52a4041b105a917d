//! Trains every pipeline on the calibrated synthetic split and prints R@1 per seed.
//!
//! `cargo run --release --example directional -- [seeds] [seed_base=N] [key=value ...]`
//!
//! Overrides are applied on top of `configs/calibrated.json`.

use dissim::config::{RunConfig, TrainMode};
use dissim::evaluator::{evaluate, median, recall_at_k, scorer_for, RankKey, Scorer};
use dissim::trainer::{train, train_from};

fn main() -> dissim::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut json: serde_json::Value = serde_json::from_str(include_str!("../configs/calibrated.json"))?;
    let mut seed_base = 0;
    for kv in args.iter().skip(1) {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(dissim::Error::InvalidArgument(format!("expected key=value, got '{kv}'")));
        };
        if k == "seed_base" {
            seed_base = v.parse().map_err(|_| dissim::Error::InvalidArgument("seed_base must be an integer".into()))?;
            continue;
        }
        json[k] = serde_json::from_str(v).unwrap_or(serde_json::Value::String(v.into()));
    }
    let base = RunConfig::from_json(&json.to_string())?;
    let (train_set, test) = base.data.load_split()?;
    let raw = recall_at_k(&test.features, &test.labels, &[1], Scorer::Euclid, &RankKey::Euclid, 1)?;
    println!("raw features      R@1 {:.4}", raw.r1());

    let names = ["euclid", "frozen", "end2end", "mahalanobis"];
    let mut table: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for seed in seed_base..seed_base + seeds {
        let mut run = base.clone();
        run.train.seed = seed;
        run.train.mode = TrainMode::EuclidBaseline;
        let baseline = train(&train_set, &run)?;
        table[0].push(evaluate(&baseline.model, &test, &[1], Scorer::Euclid, 1)?.r1());
        run.train.mode = TrainMode::FrozenBackbone;
        let frozen = train_from(baseline.model, &train_set, &run)?;
        table[1].push(evaluate(&frozen.model, &test, &[1], Scorer::DissimSvm, 1)?.r1());
        for (slot, mode) in [(2, TrainMode::End2end), (3, TrainMode::MahalanobisBaseline)] {
            run.train.mode = mode;
            let r = match train(&train_set, &run) {
                Ok(out) => evaluate(&out.model, &test, &[1], scorer_for(mode), 1)?.r1(),
                Err(e) => {
                    eprintln!("{} seed {seed}: {e}", names[slot]);
                    0.0
                }
            };
            table[slot].push(r);
        }
    }
    for (name, r) in names.iter().zip(&table) {
        let per_seed: Vec<String> = r.iter().map(|v| format!("{v:.3}")).collect();
        println!("{name:<17} R@1 {:.4}  [{}]", median(r), per_seed.join(" "));
    }
    Ok(())
}
