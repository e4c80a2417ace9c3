//! Synthetic datasets, Dirichlet non-IID partitioning and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Batch;
use crate::{Error, Result};

const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset must have at least one row".into(),
            ));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range"
            )));
        }
        Dataset::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    pub fn to_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone()).expect("dataset rows are valid")
    }

    /// Concatenate datasets with a common width and class count.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut views = Vec::with_capacity(parts.len());
        let mut labels = Vec::new();
        let mut classes = first.class_count;
        for p in parts {
            if p.dim() != first.dim() {
                return Err(Error::Dimension("datasets differ in width".into()));
            }
            classes = classes.max(p.class_count);
            views.push(p.features.view());
            labels.extend_from_slice(&p.labels);
        }
        let features =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
        Dataset::new(features, labels, classes)
    }
}

/// Unit class centres: `+e_0, -e_0, +e_1, -e_1, ...`, then random directions
/// once the signed axes are exhausted.
fn class_directions<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let mut dirs = Array2::zeros((classes, dim));
    for c in 0..classes {
        let mut row = dirs.row_mut(c);
        if c < 2 * dim {
            row[c / 2] = if c % 2 == 0 { 1.0 } else { -1.0 };
        } else {
            loop {
                row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                    break;
                }
            }
        }
    }
    dirs
}

/// Gaussian mixture with class `c` centred at `separation * u_c` and unit
/// isotropic noise. Rows are grouped by class.
pub fn synth_gaussian_mixture<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if dim == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "dim and n_per_class must be positive".into(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument("separation must be positive".into()));
    }
    let dirs = class_directions(classes, dim, rng);
    let n = classes * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for i in 0..n_per_class {
            let mut row = features.row_mut(c * n_per_class + i);
            for (x, &u) in row.iter_mut().zip(dirs.row(c)) {
                *x = separation * u + rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

/// Disjoint client shards over the rows of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionManifest {
    rows: usize,
    shards: BTreeMap<String, Vec<usize>>,
}

impl Partition {
    /// Validates that `shards` is a set partition of `0..rows` with no empty
    /// shard.
    pub fn new(shards: Vec<Vec<usize>>, rows: usize) -> Result<Self> {
        let mut seen = vec![false; rows];
        for (k, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::InvalidArgument(format!("shard {k} is empty")));
            }
            for &i in shard {
                if i >= rows {
                    return Err(Error::InvalidArgument(format!("index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("index {i} not assigned")));
        }
        Ok(Self { shards })
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn rows(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    pub fn to_manifest_json(&self) -> Result<String> {
        let manifest = PartitionManifest {
            rows: self.rows(),
            shards: self
                .shards
                .iter()
                .enumerate()
                .map(|(k, s)| (format!("{k:03}"), s.clone()))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&manifest)?)
    }

    pub fn from_manifest_json(text: &str) -> Result<Self> {
        let manifest: PartitionManifest = serde_json::from_str(text)?;
        Partition::new(manifest.shards.into_values().collect(), manifest.rows)
    }
}

fn dirichlet_draw<R: Rng + ?Sized>(k: usize, gamma: &Gamma<f64>, rng: &mut R) -> Vec<f64> {
    let mut p: Vec<f64> = (0..k).map(|_| rng.sample(gamma)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|x| *x /= total);
    } else {
        // Every gamma draw underflowed: the limit puts all mass on one shard.
        p.iter_mut().for_each(|x| *x = 0.0);
        p[rng.random_range(0..k)] = 1.0;
    }
    p
}

/// Split `n` items by proportions `p`: floors first, remainder to the largest
/// proportion (lowest index on ties).
fn proportional_counts(n: usize, p: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = p.iter().map(|&x| (x * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let largest = p
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > p[best] { i } else { best });
    counts[largest] += n - assigned.min(n);
    counts
}

/// Class-wise Dirichlet partition: each class's rows are shuffled and dealt
/// to the `k` shards by proportions drawn from `Dir(alpha)`. Draws that leave
/// a shard empty are retried.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    ds: &Dataset,
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    if k < 2 {
        return Err(Error::InvalidArgument("need at least two clients".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    if ds.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot fill {k} shards",
            ds.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut by_class = vec![Vec::new(); ds.class_count()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut shards = vec![Vec::new(); k];
        for rows in &by_class {
            if rows.is_empty() {
                continue;
            }
            let mut rows = rows.clone();
            rows.shuffle(rng);
            let p = dirichlet_draw(k, &gamma, rng);
            let mut start = 0;
            for (shard, count) in shards.iter_mut().zip(proportional_counts(rows.len(), &p)) {
                shard.extend_from_slice(&rows[start..start + count]);
                start += count;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            shards.iter_mut().for_each(|s| s.sort_unstable());
            return Partition::new(shards, ds.len());
        }
    }
    Err(Error::EmptyShard(MAX_PARTITION_ATTEMPTS))
}

/// Shuffled equal-size partition; the first `rows % k` shards get one extra
/// row.
pub fn iid_partition<R: Rng + ?Sized>(rows: usize, k: usize, rng: &mut R) -> Result<Partition> {
    if k < 2 || rows < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {rows} rows into {k} shards"
        )));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    let (base, extra) = (rows / k, rows % k);
    let mut start = 0;
    let shards = (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let mut s = order[start..start + len].to_vec();
            start += len;
            s.sort_unstable();
            s
        })
        .collect();
    Partition::new(shards, rows)
}

/// Random disjoint split; returns `(train, test)`.
pub fn train_test_split<R: Rng + ?Sized>(
    ds: &Dataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "test_fraction must lie in (0, 1)".into(),
        ));
    }
    let n = ds.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} leaves an empty side for {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (test, train) = order.split_at(n_test);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Read `label,x_1,...,x_dim` rows. A first line whose label field is not an
/// integer is treated as a header. With `classes` unset the class count is
/// `max label + 1`.
pub fn load_csv_with_classes(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    for (index, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(index + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let label_field = &record[0];
        let label = match label_field.parse::<i64>() {
            Ok(l) => l,
            Err(_) if index == 0 => continue,
            Err(_) => {
                return Err(parse_error(
                    path,
                    line,
                    format!("label {label_field:?} is not an integer"),
                ))
            }
        };
        if label < 0 || classes.is_some_and(|c| label as usize >= c) {
            return Err(parse_error(
                path,
                line,
                format!("label {label} out of range"),
            ));
        }
        let width = record.len() - 1;
        match dim {
            None if width == 0 => return Err(parse_error(path, line, "row has no features")),
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(parse_error(
                    path,
                    line,
                    format!("expected {d} features, found {width}"),
                ))
            }
            Some(_) => {}
        }
        for (col, field) in record.iter().enumerate().skip(1) {
            let x: f64 = field.parse().map_err(|_| {
                parse_error(
                    path,
                    line,
                    format!("column {}: {field:?} is not a number", col + 1),
                )
            })?;
            if !x.is_finite() {
                return Err(parse_error(
                    path,
                    line,
                    format!("column {}: non-finite value", col + 1),
                ));
            }
            values.push(x);
        }
        labels.push(label as usize);
    }
    let dim = dim.ok_or_else(|| parse_error(path, 1, "no data rows"))?;
    let class_count = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Dataset::new(features, labels, class_count)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_with_classes(path, None)
}

/// Write with a `label,x1,...` header; values use shortest round-trip
/// formatting so a reload is exact.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..ds.dim() {
        out.push_str(&format!(",x{}", j + 1));
    }
    out.push('\n');
    for (row, label) in ds.features().rows().into_iter().zip(ds.labels()) {
        out.push_str(&label.to_string());
        for x in row {
            out.push(',');
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn mixture(seed: u64, classes: usize, n: usize) -> Dataset {
        synth_gaussian_mixture(classes, 4, n, 3.0, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn mixture_counts_and_determinism() {
        let ds = synth_gaussian_mixture(3, 2, 1, 1.0, &mut rng::seeded(1)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        assert_eq!(mixture(5, 4, 20), mixture(5, 4, 20));
        assert_ne!(mixture(5, 4, 20), mixture(6, 4, 20));
        assert!(synth_gaussian_mixture(1, 2, 5, 1.0, &mut rng::seeded(1)).is_err());
        assert!(synth_gaussian_mixture(2, 2, 5, 0.0, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn separated_mixture_is_linearly_separable() {
        // Least-squares linear classifier with a bias column.
        let ds = synth_gaussian_mixture(2, 2, 500, 10.0, &mut rng::seeded(3)).unwrap();
        let n = ds.len();
        let mut x = Array2::ones((n, 3));
        x.slice_mut(ndarray::s![.., 1..]).assign(ds.features());
        let y: ndarray::Array1<f64> = ds
            .labels()
            .iter()
            .map(|&l| if l == 1 { 1.0 } else { -1.0 })
            .collect();
        let xtx = x.t().dot(&x);
        let xty = x.t().dot(&y);
        let m = nalgebra::DMatrix::from_fn(3, 3, |i, j| xtx[[i, j]]);
        let b = nalgebra::DVector::from_fn(3, |i, _| xty[i]);
        let w = m.lu().solve(&b).unwrap();
        let correct = (0..n)
            .filter(|&i| {
                let s = w[0] + w[1] * x[[i, 1]] + w[2] * x[[i, 2]];
                (s > 0.0) == (ds.labels()[i] == 1)
            })
            .count();
        assert!(correct as f64 / n as f64 >= 0.99);
    }

    #[test]
    fn class_directions_are_unit() {
        let dirs = class_directions(7, 2, &mut rng::seeded(2));
        for row in dirs.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(dirs.row(1).to_vec(), vec![-1.0, 0.0]);
    }

    #[test]
    fn proportional_counts_give_remainder_to_largest() {
        assert_eq!(proportional_counts(10, &[0.25, 0.5, 0.25]), vec![2, 6, 2]);
        assert_eq!(proportional_counts(3, &[1.0, 0.0]), vec![3, 0]);
    }

    #[test]
    fn large_alpha_is_balanced() {
        let mut ok = 0;
        for seed in 0..5 {
            let ds = mixture(seed, 4, 1000);
            let p = dirichlet_partition(&ds, 5, 1e6, &mut rng::seeded(seed + 100)).unwrap();
            let balanced = p.shards().iter().all(|shard| {
                (0..4).all(|c| {
                    let share =
                        shard.iter().filter(|&&i| ds.labels()[i] == c).count() as f64 / 1000.0;
                    (share - 0.2).abs() <= 0.05
                })
            });
            ok += usize::from(balanced);
        }
        assert!(ok >= 4, "{ok}/5");
    }

    #[test]
    fn small_alpha_concentrates() {
        let mut ok = 0;
        for seed in 0..5 {
            let ds = mixture(seed, 10, 100);
            let p = dirichlet_partition(&ds, 10, 0.1, &mut rng::seeded(seed + 7)).unwrap();
            let concentrated = (0..10).any(|c| {
                p.shards()
                    .iter()
                    .any(|s| s.iter().filter(|&&i| ds.labels()[i] == c).count() > 50)
            });
            ok += usize::from(concentrated);
        }
        assert!(ok >= 4, "{ok}/5");
    }

    #[test]
    fn impossible_partition_errors() {
        // A single populated class and a vanishing alpha: one shard takes all.
        let features = Array2::zeros((3, 2));
        let ds = Dataset::new(features, vec![0, 0, 0], 2).unwrap();
        assert!(matches!(
            dirichlet_partition(&ds, 2, 1e-3, &mut rng::seeded(0)),
            Err(Error::EmptyShard(100))
        ));
        assert!(dirichlet_partition(&ds, 1, 1.0, &mut rng::seeded(0)).is_err());
        assert!(dirichlet_partition(&ds, 2, 0.0, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn iid_partition_is_equal() {
        let p = iid_partition(40, 4, &mut rng::seeded(1)).unwrap();
        assert_eq!(p.sizes(), vec![10; 4]);
        let p = iid_partition(10, 3, &mut rng::seeded(1)).unwrap();
        assert_eq!(p.sizes(), vec![4, 3, 3]);
    }

    #[test]
    fn manifest_round_trip() {
        let ds = mixture(1, 3, 30);
        let p = dirichlet_partition(&ds, 4, 0.5, &mut rng::seeded(2)).unwrap();
        let json = p.to_manifest_json().unwrap();
        assert_eq!(Partition::from_manifest_json(&json).unwrap(), p);
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![vec![0], vec![1]], 2).is_ok());
        assert!(Partition::new(vec![vec![0], vec![0, 1]], 2).is_err());
        assert!(Partition::new(vec![vec![0], vec![]], 1).is_err());
        assert!(Partition::new(vec![vec![0]], 2).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = mixture(4, 2, 50);
        let (train, test) = train_test_split(&ds, 0.3, &mut rng::seeded(9)).unwrap();
        assert_eq!((train.len(), test.len()), (70, 30));
        let again = train_test_split(&ds, 0.3, &mut rng::seeded(9)).unwrap();
        assert_eq!((train, test), again);
        let tiny = mixture(4, 2, 2);
        assert!(train_test_split(&tiny, 0.01, &mut rng::seeded(1)).is_err());
        assert!(train_test_split(&tiny, 0.0, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = mixture(8, 3, 7);
        write_csv(&ds, &path).unwrap();
        let back = load_csv_with_classes(&path, Some(3)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "label,a,b\n1,0.5,-2\n0,3,4.25\n2, 1e-3 ,0\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(
            ds.features(),
            &array![[0.5, -2.0], [3.0, 4.25], [1e-3, 0.0]]
        );
        assert_eq!(ds.labels(), &[1, 0, 2]);
        assert_eq!(ds.class_count(), 3);
    }

    #[test]
    fn csv_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut text = String::from("label,x\n");
        for i in 0..5 {
            text.push_str(&format!("0,{i}\n"));
        }
        text.push_str("1,oops\n");
        std::fs::write(&path, text).unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "0,1\n5,2\n").unwrap();
        assert!(matches!(
            load_csv_with_classes(&path, Some(3)),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&path, "0,1\n1,2,3\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn dirichlet_shards_are_a_disjoint_cover(seed in 0u64..1000, k in 2usize..8, alpha in 0.05f64..10.0) {
            let ds = mixture(seed, 5, 20);
            match dirichlet_partition(&ds, k, alpha, &mut rng::seeded(seed)) {
                Ok(p) => {
                    let mut all: Vec<usize> = p.shards().concat();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
                    prop_assert!(p.shards().iter().all(|s| !s.is_empty()));
                }
                Err(e) => prop_assert!(matches!(e, Error::EmptyShard(_))),
            }
        }
    }
}
