//! Labelled feature-vector datasets: CSV ingestion, the synthetic generator,
//! class-disjoint splitting and per-class subsampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Features (`N×d`) with dense 0-based class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Original label string for each class index.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let (n, _) = features.expect_matrix("Dataset::new")?;
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label index {bad} but only {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Sample indices grouped by class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// Keeps the given samples, re-indexing classes densely in order of first
    /// appearance among `idx`.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut names = Vec::new();
        let labels = idx
            .iter()
            .map(|&i| {
                let old = self.labels[i];
                *remap.entry(old).or_insert_with(|| {
                    names.push(self.class_names[old].clone());
                    names.len() - 1
                })
            })
            .collect();
        Dataset {
            features: self.features.select_rows(idx),
            labels,
            class_names: names,
        }
    }

    /// Open-set split: the last `round(K·holdout)` classes (at least one,
    /// leaving at least two for training) form the test set.
    pub fn split_by_class(&self, holdout: f64) -> Result<(Dataset, Dataset)> {
        let k = self.n_classes();
        if k < 3 {
            return Err(Error::Data(format!(
                "need at least 3 classes for a class-disjoint split, got {k}"
            )));
        }
        if !(0.0..1.0).contains(&holdout) || holdout == 0.0 {
            return Err(Error::invalid(format!("holdout fraction must be in (0, 1), got {holdout}")));
        }
        let n_test = ((k as f64 * holdout).round() as usize).clamp(1, k - 2);
        let first_test = k - n_test;
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if l < first_test {
                tr.push(i);
            } else {
                te.push(i);
            }
        }
        let train = self.subset(&tr);
        let test = self.subset(&te);
        let overlap = train
            .class_names
            .iter()
            .any(|c| test.class_names.contains(c));
        if overlap {
            return Err(Error::Data("train and test class sets overlap".into()));
        }
        Ok((train, test))
    }

    /// Keeps `round(fraction·n_c)` randomly chosen samples of every class.
    /// Classes left with fewer than two samples are dropped with a warning.
    pub fn subsample_per_class(&self, fraction: f64, rng: &mut SeededRng) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
        }
        let mut keep = Vec::new();
        for (c, members) in self.by_class().iter().enumerate() {
            let n = ((members.len() as f64) * fraction).round() as usize;
            if n < 2 {
                log::warn!(
                    "class {} keeps {n} sample(s) at fraction {fraction}; dropping it",
                    self.class_names[c]
                );
                continue;
            }
            let mut pick: Vec<usize> = rng
                .sample_distinct(members.len(), n)
                .into_iter()
                .map(|i| members[i])
                .collect();
            pick.sort_unstable();
            keep.extend(pick);
        }
        keep.sort_unstable();
        if keep.is_empty() {
            return Err(Error::Data(format!("no class survives subsampling at fraction {fraction}")));
        }
        Ok(self.subset(&keep))
    }
}

/// Reads a header-carrying CSV. Every column except `label_column` must be
/// numeric; labels are indexed in order of first appearance.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(csv_err(1, "empty file".into())),
        Some(r) => r.map_err(|e| csv_err(1, e.to_string()))?,
    };
    let label_idx = header
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| csv_err(1, format!("missing label column '{label_column}'")))?;
    let width = header.len();
    if width < 2 {
        return Err(csv_err(1, "need at least one feature column besides the label".into()));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (row, rec) in records.enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        if rec.len() != width {
            return Err(csv_err(
                line,
                format!("ragged row: {} fields, header has {width}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                let name = cell.trim().to_string();
                let next = names.len();
                let id = *index.entry(name.clone()).or_insert_with(|| {
                    names.push(name);
                    next
                });
                labels.push(id);
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                csv_err(line, format!("non-numeric value '{cell}' in column '{}'", &header[j]))
            })?;
            if !v.is_finite() {
                return Err(csv_err(
                    line,
                    format!("non-finite value '{cell}' in column '{}'", &header[j]),
                ));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(csv_err(2, "no data rows".into()));
    }
    let features = Tensor::new(vec![labels.len(), width - 1], data)?;
    Dataset::new(features, labels, names)
}

/// Writes `f0..f{d-1},label` with shortest round-trip float formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    writeln!(f, "{},label", header.join(","))?;
    for i in 0..ds.len() {
        let row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{},{}", row.join(","), ds.class_names[ds.labels[i]])?;
    }
    f.flush()?;
    Ok(())
}

/// Gaussian class clusters with means on a sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub within_std: f64,
    pub between_sep: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 30,
            per_class: 20,
            dim: 32,
            within_std: 1.0,
            between_sep: 4.0,
            seed: 0,
        }
    }
}

/// Class means are uniform on the sphere of radius `between_sep`; samples add
/// isotropic Gaussian noise with standard deviation `within_std`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class < 2 || spec.dim == 0 {
        return Err(Error::invalid(format!(
            "synthetic data needs >= 2 classes, >= 2 samples per class and dim >= 1 (got {}, {}, {})",
            spec.classes, spec.per_class, spec.dim
        )));
    }
    if !(spec.within_std > 0.0) || !(spec.between_sep >= 0.0) {
        return Err(Error::invalid("within_std must be > 0 and between_sep >= 0"));
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let mean = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x * spec.between_sep / n).collect::<Vec<_>>();
            }
        };
        for _ in 0..spec.per_class {
            data.extend(mean.iter().map(|m| m + spec.within_std * rng.normal()));
            labels.push(c);
        }
    }
    let features = Tensor::new(vec![labels.len(), spec.dim], data)?;
    let names = (0..spec.classes).map(|c| format!("c{c}")).collect();
    Dataset::new(features, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn small_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y,cls\n1.5,2,cat\n3,4e-1,dog\n");
        let ds = load_csv(&p, "cls").unwrap();
        assert_eq!(ds.features.shape(), &[2, 2]);
        assert_eq!(ds.features.data(), &[1.5, 2.0, 3.0, 0.4]);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
    }

    #[test]
    fn label_column_may_be_anywhere() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "lab,x\nb,1\na,2\nb,3\n");
        let ds = load_csv(&p, "lab").unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.features.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn malformed_files_have_distinct_messages() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("empty.csv", "", "empty file"),
            ("nolabel.csv", "x,y\n1,2\n", "missing label column 'label'"),
            ("ragged.csv", "x,y,label\n1,2,a\n1,a\n", "ragged row"),
            ("text.csv", "x,y,label\n1,abc,a\n", "non-numeric value 'abc'"),
            ("nan.csv", "x,y,label\n1,NaN,a\n", "non-finite value 'NaN'"),
            ("header.csv", "x,y,label\n", "no data rows"),
        ];
        let mut msgs = Vec::new();
        for (name, body, want) in cases {
            let p = write(dir.path(), name, body);
            let err = load_csv(&p, "label").unwrap_err().to_string();
            assert!(err.contains(want), "{name}: {err}");
            msgs.push(err);
        }
        assert!(msgs[2].contains(":3:"), "ragged error names line 3: {}", msgs[2]);
        let distinct: std::collections::HashSet<_> = msgs.iter().collect();
        assert_eq!(distinct.len(), msgs.len());
    }

    #[test]
    fn synthetic_is_deterministic_and_validated() {
        let spec = SyntheticSpec {
            classes: 4,
            per_class: 3,
            dim: 5,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        assert!(generate_synthetic(&SyntheticSpec { classes: 1, ..spec }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { within_std: 0.0, ..spec }).is_err());
    }

    #[test]
    fn tiny_noise_collapses_classes() {
        let spec = SyntheticSpec {
            classes: 3,
            per_class: 4,
            dim: 6,
            within_std: 1e-300,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for members in ds.by_class() {
            for &i in &members[1..] {
                assert_eq!(ds.features.row(i), ds.features.row(members[0]));
            }
        }
    }

    #[test]
    fn synthetic_csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SyntheticSpec {
            classes: 5,
            per_class: 4,
            dim: 7,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let p = dir.path().join("s.csv");
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p, "label").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn split_is_class_disjoint() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let (tr, te) = ds.split_by_class(1.0 / 3.0).unwrap();
        assert_eq!((tr.n_classes(), te.n_classes()), (20, 10));
        assert_eq!((tr.len(), te.len()), (400, 200));
        assert!(tr.class_names.iter().all(|c| !te.class_names.contains(c)));
    }

    #[test]
    fn subsample_keeps_fraction_and_drops_tiny_classes() {
        let ds = generate_synthetic(&SyntheticSpec {
            classes: 3,
            per_class: 8,
            dim: 2,
            ..Default::default()
        })
        .unwrap();
        let mut rng = SeededRng::new(1);
        let half = ds.subsample_per_class(0.5, &mut rng).unwrap();
        assert_eq!(half.len(), 12);
        assert!(half.by_class().iter().all(|m| m.len() == 4));
        let tiny = ds.subsample_per_class(0.1, &mut rng);
        assert!(tiny.is_err());
    }
}
