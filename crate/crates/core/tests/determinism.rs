mod common;

use common::tiny_config;
use dissim::checkpoint::Checkpoint;
use dissim::evaluator::{evaluate, scorer_for};
use dissim::trainer::{train, write_loss_log, Model, INIT_STREAM};
use dissim::{Scorer, SeededRng, TrainMode};

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_config();
    run.train.classifier_dropout = 0.25;
    let (train_set, _) = run.data.load_split().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let out = train(&train_set, &run).unwrap();
        let (c, l) = (dir.path().join(format!("c{i}.dsmm")), dir.path().join(format!("l{i}.csv")));
        out.checkpoint.save(&c).unwrap();
        write_loss_log(&out.log, &l).unwrap();
        files.push((std::fs::read(c).unwrap(), std::fs::read(l).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn different_seeds_give_different_models() {
    let mut run = tiny_config();
    let (train_set, _) = run.data.load_split().unwrap();
    let a = train(&train_set, &run).unwrap().checkpoint.to_bytes();
    run.train.seed = 1;
    let b = train(&train_set, &run).unwrap().checkpoint.to_bytes();
    assert_ne!(a, b);
}

#[test]
fn checkpoint_round_trip_preserves_every_retrieval_result() {
    for mode in [TrainMode::End2end, TrainMode::MahalanobisBaseline, TrainMode::FrozenBackbone] {
        let mut run = tiny_config();
        run.train.mode = mode;
        run.train.classifier_batchnorm = true;
        let (train_set, test) = run.data.load_split().unwrap();
        let out = train(&train_set, &run).unwrap();
        let restored = Checkpoint::from_bytes(&out.checkpoint.to_bytes()).unwrap();
        assert_eq!(restored.config, run);
        assert_eq!(restored.epoch, run.train.epochs as u64);
        let model = restored.to_model().unwrap();
        assert_eq!(model.named_tensors(), out.model.named_tensors());
        for scorer in [Scorer::Euclid, scorer_for(mode)] {
            assert_eq!(
                evaluate(&model, &test, &[1, 2, 4], scorer, 1).unwrap(),
                evaluate(&out.model, &test, &[1, 2, 4], scorer, 1).unwrap()
            );
        }
    }
}

#[test]
fn zero_epochs_checkpoint_is_the_initialisation() {
    let mut run = tiny_config();
    run.train.epochs = 0;
    let (train_set, _) = run.data.load_split().unwrap();
    let out = train(&train_set, &run).unwrap();
    let init = Model::new(
        &run.train,
        train_set.dim(),
        train_set.n_classes(),
        &mut SeededRng::with_stream(run.train.seed, INIT_STREAM),
    )
    .unwrap();
    assert_eq!(out.checkpoint.to_model().unwrap(), init);
    assert!(out.log.is_empty());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let run = tiny_config();
    let (train_set, _) = run.data.load_split().unwrap();
    let bytes = train(&train_set, &run).unwrap().checkpoint.to_bytes();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(b"nope").is_err());
}
