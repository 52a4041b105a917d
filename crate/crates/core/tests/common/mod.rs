#![allow(dead_code)]

use dissim::dichotomizer::{Dichotomizer, MahalanobisParams, NormRegime};
use dissim::{RunConfig, SeededRng, Tensor};

pub const CALIBRATED: &str = include_str!("../../configs/calibrated.json");

pub fn calibrated_config() -> RunConfig {
    RunConfig::from_json(CALIBRATED).expect("calibrated config parses")
}

/// A small fast config for tests that only need a model to exist.
pub fn tiny_config() -> RunConfig {
    let mut run = RunConfig::default();
    run.data.synth_classes = 9;
    run.data.synth_per_class = 6;
    run.data.synth_dim = 8;
    run.train.epochs = 3;
    run.train.batch_classes = 4;
    run.train.batch_per_class = 3;
    run.train.pairs_per_batch = 16;
    run.train.hidden_dims = vec![12];
    run.train.d_embed = 6;
    run.train.d_adapt = 5;
    run
}

/// Twelve points, four classes of three, on an integer grid. Several
/// queries see gallery items at equal distance, so tie-breaking matters.
pub fn twelve_points() -> (Tensor, Vec<usize>) {
    let rows = vec![
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 2.0, 0.0],
        vec![-1.0, 0.0, 0.0],
        vec![2.0, 1.0, 0.0],
        vec![0.0, -1.0, 1.0],
        vec![0.0, 1.0, 0.0],
        vec![3.0, 0.0, -1.0],
        vec![1.0, 1.0, 1.0],
        vec![0.0, 0.0, 2.0],
        vec![-2.0, 1.0, 0.0],
        vec![1.0, -1.0, 0.0],
    ];
    let labels = vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3];
    (Tensor::from_rows(&rows).unwrap(), labels)
}

/// Weights and bias are powers of two, so every score on the grid is exact.
pub fn fixture_dichotomizer() -> Dichotomizer {
    let mut d = Dichotomizer::new(3, 1.0, NormRegime::SoftL2, &mut SeededRng::new(0)).unwrap();
    d.weight.value = Tensor::vector(vec![-1.0, -0.5, -2.0]);
    d.bias.value = Tensor::scalar(0.5);
    d
}

pub fn fixture_metric() -> MahalanobisParams {
    let mut m = MahalanobisParams::new(3, 1.0);
    m.l.value = Tensor::new(vec![3, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 0.0, -1.0, 0.0, 1.0]).unwrap();
    m
}

/// Ranking key of gallery point `b` for query `a`; lower ranks first.
pub enum OracleKey<'a> {
    Euclid,
    Dissim(&'a [f64], f64),
    Mahalanobis(&'a [f64]),
}

impl OracleKey<'_> {
    pub fn key(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            OracleKey::Euclid => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
            OracleKey::Dissim(w, bias) => {
                -(w.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - y).abs()).sum::<f64>() + bias)
            }
            OracleKey::Mahalanobis(l) => {
                let n = a.len();
                (0..n)
                    .map(|i| (0..n).map(|j| l[i * n + j] * (a[j] - b[j])).sum::<f64>().powi(2))
                    .sum()
            }
        }
    }
}

/// Brute force over all pairs: the first same-class item's rank is one plus
/// the number of gallery items strictly ahead of it (lower key, or equal key
/// and lower index). `None` when the query has no partner.
pub fn oracle_ranks(points: &Tensor, labels: &[usize], key: &OracleKey<'_>) -> Vec<Option<usize>> {
    let n = labels.len();
    (0..n)
        .map(|q| {
            let kq: Vec<f64> = (0..n).map(|j| key.key(points.row(q), points.row(j))).collect();
            (0..n)
                .filter(|&j| j != q && labels[j] == labels[q])
                .map(|j| 1 + (0..n).filter(|&g| g != q && (kq[g] < kq[j] || (kq[g] == kq[j] && g < j))).count())
                .min()
        })
        .collect()
}

pub fn oracle_recall(ranks: &[Option<usize>], k: usize) -> f64 {
    let evaluated = ranks.iter().flatten().count();
    ranks.iter().flatten().filter(|&&r| r <= k).count() as f64 / evaluated as f64
}
