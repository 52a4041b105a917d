//! Open-set retrieval evaluation, the data-size ablation and 2-D PCA export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, TrainMode};
use crate::data::Dataset;
use crate::dichotomizer::{Dichotomizer, MahalanobisParams};
use crate::error::{Error, Result};
use crate::pairspace::{pair_dissimilarities, PairBatch};
use crate::tensor::{SeededRng, Tensor};
use crate::trainer::{train, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Ascending `‖φ_q − φ_g‖`.
    Euclid,
    /// Descending dichotomizer score of `|φ_q − φ_g|`.
    DissimSvm,
    /// Ascending `‖L(φ_q − φ_g)‖²`.
    Mahalanobis,
}

impl Scorer {
    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Euclid => "euclid",
            Scorer::DissimSvm => "dissim_svm",
            Scorer::Mahalanobis => "mahalanobis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclid" => Ok(Scorer::Euclid),
            "dissim_svm" => Ok(Scorer::DissimSvm),
            "mahalanobis" => Ok(Scorer::Mahalanobis),
            _ => Err(Error::invalid(format!(
                "unknown scorer '{s}' (expected euclid, dissim_svm or mahalanobis)"
            ))),
        }
    }
}

/// Ranks a gallery for a query; lower keys rank first.
pub enum RankKey<'a> {
    Euclid,
    Dissim(&'a Dichotomizer),
    Mahalanobis(&'a MahalanobisParams),
}

impl RankKey<'_> {
    fn keys(&self, query: &[f64], gallery: &Tensor, idx: &[usize]) -> Result<Vec<f64>> {
        match self {
            RankKey::Euclid => Ok(idx
                .iter()
                .map(|&g| {
                    query
                        .iter()
                        .zip(gallery.row(g))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect()),
            RankKey::Dissim(d) => {
                let n = query.len();
                let mut u = Vec::with_capacity(idx.len() * n);
                for &g in idx {
                    u.extend(query.iter().zip(gallery.row(g)).map(|(a, b)| (a - b).abs()));
                }
                let s = d.scores(&Tensor::new(vec![idx.len(), n], u)?)?;
                Ok(s.into_iter().map(|v| -v).collect())
            }
            RankKey::Mahalanobis(m) => idx.iter().map(|&g| m.distance(query, gallery.row(g))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub scorer: Scorer,
    /// K → fraction of evaluated queries with a same-class item in the top K.
    pub recall_at: BTreeMap<usize, f64>,
    /// 1-based rank of the first same-class gallery item; `None` for skipped queries.
    pub first_correct_rank: Vec<Option<usize>>,
    /// Queries whose class has no other sample in the gallery.
    pub skipped: usize,
}

impl RetrievalResult {
    pub fn r1(&self) -> f64 {
        self.recall_at.get(&1).copied().unwrap_or(f64::NAN)
    }
}

/// Each point queries all other points; ties go to the lower gallery index.
pub fn recall_at_k(
    emb: &Tensor,
    labels: &[usize],
    ks: &[usize],
    scorer: Scorer,
    key: &RankKey<'_>,
    threads: usize,
) -> Result<RetrievalResult> {
    let (n, _) = emb.expect_matrix("recall_at_k")?;
    if n == 0 {
        return Err(Error::invalid("empty test set"));
    }
    if labels.len() != n {
        return Err(Error::shape("recall_at_k", format!("{} labels for {n} points", labels.len())));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("K values must be positive"));
    }
    let rank_one = |q: usize| -> Result<Option<usize>> {
        if !labels.iter().enumerate().any(|(j, &l)| j != q && l == labels[q]) {
            return Ok(None);
        }
        let gallery: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        let keys = key.keys(emb.row(q), emb, &gallery)?;
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(gallery[a].cmp(&gallery[b])));
        Ok(order
            .iter()
            .position(|&o| labels[gallery[o]] == labels[q])
            .map(|p| p + 1))
    };
    let ranks: Vec<Option<usize>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(rank_one).collect::<Result<_>>())?
    } else {
        (0..n).map(rank_one).collect::<Result<_>>()?
    };
    let evaluated = ranks.iter().filter(|r| r.is_some()).count();
    let skipped = n - evaluated;
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|r| matches!(r, Some(p) if *p <= k)).count();
        let frac = if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 };
        recall_at.insert(k, frac);
    }
    Ok(RetrievalResult {
        scorer,
        recall_at,
        first_correct_rank: ranks,
        skipped,
    })
}

/// Embeds `test` with `model` and evaluates it under `scorer`.
pub fn evaluate(model: &Model, test: &Dataset, ks: &[usize], scorer: Scorer, threads: usize) -> Result<RetrievalResult> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    match scorer {
        Scorer::Euclid => {
            let f = model.metric_features(&test.features)?;
            recall_at_k(&f, &test.labels, ks, scorer, &RankKey::Euclid, threads)
        }
        Scorer::DissimSvm => {
            let phi = model.adapted(&test.features)?;
            recall_at_k(&phi, &test.labels, ks, scorer, &RankKey::Dissim(&model.dichotomizer), threads)
        }
        Scorer::Mahalanobis => {
            let m = model
                .mahalanobis
                .as_ref()
                .ok_or_else(|| Error::invalid("model has no Mahalanobis metric"))?;
            let phi = model.adapted(&test.features)?;
            recall_at_k(&phi, &test.labels, ks, scorer, &RankKey::Mahalanobis(m), threads)
        }
    }
}

/// Scorer matching a training mode.
pub fn scorer_for(mode: TrainMode) -> Scorer {
    match mode {
        TrainMode::End2end | TrainMode::FrozenBackbone => Scorer::DissimSvm,
        TrainMode::EuclidBaseline => Scorer::Euclid,
        TrainMode::MahalanobisBaseline => Scorer::Mahalanobis,
    }
}

/// One `scorer,k,recall,manifest` row per recall value.
pub fn write_result_csv(results: &[RetrievalResult], manifest: &Path, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "scorer,k,recall,manifest")?;
    for r in results {
        for (k, v) in &r.recall_at {
            writeln!(f, "{},{k},{v:?},{}", r.scorer.as_str(), manifest.display())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub scorer: Scorer,
    pub median_r1: f64,
    /// `median R@1(dissim) − median R@1(euclid)` at this fraction.
    pub delta: f64,
    pub per_seed_r1: Vec<f64>,
}

/// RNG stream for per-class training-set subsampling.
pub const SUBSAMPLE_STREAM: u64 = 7;

/// Trains the dissimilarity pipeline and the Euclidean baseline on identical
/// per-class subsamples of `train` for each fraction and seed and reports
/// median R@1 on `test`.
pub fn ablate_datasize(
    train_set: &Dataset,
    test: &Dataset,
    fractions: &[f64],
    dissim: &RunConfig,
    euclid: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        let (mut rd, mut re) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let mut rng = SeededRng::with_stream(seed, SUBSAMPLE_STREAM);
            let subset = train_set.subsample_per_class(fraction, &mut rng)?;
            for (cfg, out) in [(dissim, &mut rd), (euclid, &mut re)] {
                let mut run = cfg.clone();
                run.train.seed = seed;
                let trained = train(&subset, &run)?;
                let r = evaluate(&trained.model, test, &[1], scorer_for(run.train.mode), 1)?;
                out.push(r.r1());
            }
        }
        let (md, me) = (median(&rd), median(&re));
        rows.push(AblationRow {
            fraction,
            scorer: scorer_for(dissim.train.mode),
            median_r1: md,
            delta: md - me,
            per_seed_r1: rd,
        });
        rows.push(AblationRow {
            fraction,
            scorer: scorer_for(euclid.train.mode),
            median_r1: me,
            delta: md - me,
            per_seed_r1: re,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], manifest: &Path, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "fraction,scorer,median_r1,delta,per_seed_r1,manifest")?;
    for r in rows {
        let per_seed: Vec<String> = r.per_seed_r1.iter().map(|v| format!("{v:?}")).collect();
        writeln!(
            f,
            "{},{},{:?},{:?},{},{}",
            r.fraction,
            r.scorer.as_str(),
            r.median_r1,
            r.delta,
            per_seed.join(";"),
            manifest.display()
        )?;
    }
    f.flush()?;
    Ok(())
}

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 10_000;

/// Top-two principal axes of a point cloud and the projected coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub coords: Vec<[f64; 2]>,
    pub axes: [Vec<f64>; 2],
    /// Variance captured along each axis.
    pub variances: [f64; 2],
    pub total_variance: f64,
    /// Set when the covariance has rank < 2 and an axis was picked arbitrarily.
    pub degenerate: bool,
}

/// Mean-centres `points`, finds the top two covariance eigenvectors by power
/// iteration with deflation, and projects onto them.
pub fn pca_project_2d(points: &Tensor) -> Result<PcaProjection> {
    let (n, d) = points.expect_matrix("pca_project_2d")?;
    if n < 3 || d < 2 {
        return Err(Error::invalid(format!("PCA needs N >= 3 points of dimension >= 2 (got {n}x{d})")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|i| points.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centred {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    let mut degenerate = false;
    let mut deflated = cov.clone();
    for k in 0..2 {
        let (v, lambda) = match power_iteration(&deflated, d, &axes) {
            Some((v, l)) if l > 1e-12 * scale.max(f64::MIN_POSITIVE) && scale > 0.0 => (v, l),
            _ => {
                degenerate = true;
                (arbitrary_orthogonal(d, &axes), 0.0)
            }
        };
        for a in 0..d {
            for b in 0..d {
                deflated[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        variances[k] = lambda;
        axes.push(v);
    }
    let coords = centred
        .iter()
        .map(|r| [dot(r, &axes[0]), dot(r, &axes[1])])
        .collect();
    let [a0, a1]: [Vec<f64>; 2] = axes.try_into().expect("two axes");
    Ok(PcaProjection {
        coords,
        axes: [a0, a1],
        variances,
        total_variance,
        degenerate,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormalise(v: &mut [f64], against: &[Vec<f64>]) -> f64 {
    for a in against {
        let p = dot(v, a);
        v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
    }
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Dominant eigenpair of the symmetric PSD matrix `m`, restricted to the
/// complement of `against`. Sign fixed so the largest-magnitude entry is positive.
fn power_iteration(m: &[f64], d: usize, against: &[Vec<f64>]) -> Option<(Vec<f64>, f64)> {
    // deterministic start with distinct entries
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 0.1).collect();
    if orthonormalise(&mut v, against) == 0.0 {
        return None;
    }
    for _ in 0..PCA_MAX_ITER {
        let mut w: Vec<f64> = (0..d).map(|a| dot(&m[a * d..(a + 1) * d], &v)).collect();
        let norm = orthonormalise(&mut w, against);
        if norm == 0.0 {
            return None;
        }
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if diff < PCA_TOL {
            break;
        }
    }
    let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let mv: Vec<f64> = (0..d).map(|a| dot(&m[a * d..(a + 1) * d], &v)).collect();
    let lambda = dot(&v, &mv).max(0.0);
    Some((v, lambda))
}

fn arbitrary_orthogonal(d: usize, against: &[Vec<f64>]) -> Vec<f64> {
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        if orthonormalise(&mut e, against) > 1e-6 {
            return e;
        }
    }
    unreachable!("d >= 2 leaves room for another axis")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Embedding,
    WithinClass,
    BetweenClass,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Embedding => "embedding",
            PointKind::WithinClass => "within_class",
            PointKind::BetweenClass => "between_class",
        }
    }
}

/// 2-D coordinates with point kind and class label, ready for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionExport {
    pub projection: PcaProjection,
    pub kinds: Vec<PointKind>,
    pub labels: Vec<usize>,
}

impl ProjectionExport {
    /// Embeddings, one point per sample.
    pub fn embeddings(emb: &Tensor, labels: &[usize]) -> Result<Self> {
        Self::new(emb, vec![PointKind::Embedding; emb.rows()], labels.to_vec())
    }

    /// Dissimilarity vectors `|φ_q − φ_g|` of `pairs`, labelled with the query's class.
    pub fn dissimilarities(phi: &Tensor, labels: &[usize], pairs: &PairBatch) -> Result<Self> {
        let u = pair_dissimilarities(phi, pairs)?;
        let kinds = pairs
            .y
            .iter()
            .map(|&y| if y > 0 { PointKind::WithinClass } else { PointKind::BetweenClass })
            .collect();
        let labels = pairs.q.iter().map(|&q| labels[q]).collect();
        Self::new(&u, kinds, labels)
    }

    pub fn new(points: &Tensor, kinds: Vec<PointKind>, labels: Vec<usize>) -> Result<Self> {
        if kinds.len() != points.rows() || labels.len() != points.rows() {
            return Err(Error::shape("ProjectionExport", "one kind and label per point required"));
        }
        Ok(Self {
            projection: pca_project_2d(points)?,
            kinds,
            labels,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x,y,kind,label")?;
        for ((c, k), l) in self.projection.coords.iter().zip(&self.kinds).zip(&self.labels) {
            writeln!(f, "{:?},{:?},{},{l}", c[0], c[1], k.as_str())?;
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbour_same_class_gives_full_recall() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![10.0], vec![10.2]]).unwrap();
        let r = recall_at_k(&emb, &[0, 0, 1, 1], &[1, 3], Scorer::Euclid, &RankKey::Euclid, 1).unwrap();
        assert_eq!(r.recall_at[&1], 1.0);
        assert_eq!(r.recall_at[&3], 1.0);
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn singleton_class_is_skipped_and_empty_rejected() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![5.0]]).unwrap();
        let r = recall_at_k(&emb, &[0, 0, 1], &[1], Scorer::Euclid, &RankKey::Euclid, 1).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.first_correct_rank[2], None);
        assert!(recall_at_k(&Tensor::zeros(&[0, 2]), &[], &[1], Scorer::Euclid, &RankKey::Euclid, 1).is_err());
    }

    #[test]
    fn ties_broken_by_index() {
        // gallery items 1 and 2 are equidistant from query 0; item 1 (wrong class) wins
        let emb = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        let r = recall_at_k(&emb, &[0, 1, 0], &[1, 2], Scorer::Euclid, &RankKey::Euclid, 1).unwrap();
        assert_eq!(r.first_correct_rank[0], Some(2));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn pca_diagonal_cov_aligns_with_axes() {
        // variance 4 along x, 1 along y
        let pts = Tensor::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let p = pca_project_2d(&pts).unwrap();
        assert!((p.axes[0][0].abs() - 1.0).abs() < 1e-10 && p.axes[0][1].abs() < 1e-10);
        assert!((p.axes[1][1].abs() - 1.0).abs() < 1e-10 && p.axes[1][0].abs() < 1e-10);
        assert!(!p.degenerate);
    }

    #[test]
    fn pca_identical_points() {
        let pts = Tensor::filled(&[5, 3], 2.5);
        let p = pca_project_2d(&pts).unwrap();
        assert!(p.degenerate);
        assert!(p.coords.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));
        assert!(dot(&p.axes[0], &p.axes[1]).abs() < 1e-10);
        assert!(pca_project_2d(&Tensor::zeros(&[2, 3])).is_err());
    }
}
