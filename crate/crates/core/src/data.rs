//! Node features, labels, and dataset splits, plus loaders for the plain
//! text formats consumed by the CLI.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Dense node feature matrix, one row per node.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<T> {
    values: Array2<T>,
    normalized: bool,
}

impl<T: Scalar> FeatureMatrix<T> {
    /// Wrap raw features without normalization.
    pub fn raw(values: Array2<T>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension("empty feature matrix".into()));
        }
        Ok(FeatureMatrix {
            values,
            normalized: false,
        })
    }

    /// Scale every row to unit Euclidean norm. Zero rows are rejected: a
    /// normalized all-zero feature vector does not exist.
    pub fn unit_normalized(mut values: Array2<T>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension("empty feature matrix".into()));
        }
        for (i, mut row) in values.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::InvalidParameter(format!(
                    "cannot normalize zero feature row for node {i}"
                )));
            }
            row.mapv_inplace(|x| x / norm);
        }
        Ok(FeatureMatrix {
            values,
            normalized: true,
        })
    }

    /// One-hot indicator features: the identity matrix, trivially unit-norm.
    pub fn identity(n: usize) -> Self {
        FeatureMatrix {
            values: Array2::eye(n),
            normalized: true,
        }
    }

    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn node_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Gram matrix of the rows, the kernel recursion's base case.
    pub fn gram(&self) -> Array2<T> {
        self.values.dot(&self.values.t())
    }
}

/// Per-node class ids; `None` marks a missing label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    classes: Vec<Option<usize>>,
    num_classes: usize,
}

impl LabelVector {
    pub fn from_classes<I>(classes: I, num_classes: usize) -> Result<Self>
    where
        I: IntoIterator<Item = usize>,
    {
        Self::from_options(classes.into_iter().map(Some), num_classes)
    }

    pub fn from_options<I>(classes: I, num_classes: usize) -> Result<Self>
    where
        I: IntoIterator<Item = Option<usize>>,
    {
        let classes: Vec<_> = classes.into_iter().collect();
        if num_classes == 0 {
            return Err(Error::InvalidParameter("num_classes must be positive".into()));
        }
        for (node, class) in classes.iter().enumerate() {
            if let Some(c) = class {
                if *c >= num_classes {
                    return Err(Error::InvalidParameter(format!(
                        "label {c} for node {node} out of range [0, {num_classes})"
                    )));
                }
            }
        }
        Ok(LabelVector {
            classes,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class(&self, node: usize) -> Option<usize> {
        self.classes[node]
    }

    pub fn classes(&self) -> Vec<Option<usize>> {
        self.classes.clone()
    }

    /// One-hot rows for the given nodes; every node must carry a label.
    pub fn one_hot<T: Scalar>(&self, nodes: &[usize]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((nodes.len(), self.num_classes));
        for (row, &node) in nodes.iter().enumerate() {
            let class = self.classes[node].ok_or_else(|| {
                Error::InvalidParameter(format!("node {node} has no label"))
            })?;
            out[(row, class)] = T::one();
        }
        Ok(out)
    }

    /// Fraction of `nodes` whose label matches `predicted`.
    pub fn accuracy(&self, nodes: &[usize], predicted: &[usize]) -> f64 {
        assert_eq!(nodes.len(), predicted.len());
        if nodes.is_empty() {
            return 0.0;
        }
        let hits = nodes
            .iter()
            .zip(predicted)
            .filter(|(&node, &p)| self.classes[node] == Some(p))
            .count();
        hits as f64 / nodes.len() as f64
    }
}

/// Disjoint train/validation/test node index sets. The union may be a strict
/// subset of all nodes (semi-supervised setting).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(
        mut train: Vec<usize>,
        mut validation: Vec<usize>,
        mut test: Vec<usize>,
        node_count: usize,
    ) -> Result<Self> {
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        let mut seen = vec![0u8; node_count];
        for (name, set) in [("train", &train), ("validation", &validation), ("test", &test)] {
            for &node in set.iter() {
                if node >= node_count {
                    return Err(Error::Dimension(format!(
                        "{name} index {node} exceeds node count {node_count}"
                    )));
                }
                if seen[node] != 0 {
                    return Err(Error::InvalidParameter(format!(
                        "node {node} appears in more than one split"
                    )));
                }
                seen[node] = 1;
            }
            let deduped = {
                let mut s = set.clone();
                s.dedup();
                s.len()
            };
            if deduped != set.len() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate index inside {name} split"
                )));
            }
        }
        Ok(DatasetSplit {
            train,
            validation,
            test,
        })
    }

    /// Deterministic stratified split: `train_per_class` and `val_per_class`
    /// nodes drawn per class (seeded shuffle), everything else labeled goes
    /// to test.
    pub fn stratified(
        labels: &LabelVector,
        train_per_class: usize,
        val_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        for class in 0..labels.num_classes() {
            let mut members: Vec<usize> = (0..labels.len())
                .filter(|&u| labels.class(u) == Some(class))
                .collect();
            if members.len() < train_per_class + val_per_class {
                return Err(Error::InvalidParameter(format!(
                    "class {class} has only {} labeled nodes, need {}",
                    members.len(),
                    train_per_class + val_per_class
                )));
            }
            members.shuffle(&mut rng);
            train.extend(&members[..train_per_class]);
            validation.extend(&members[train_per_class..train_per_class + val_per_class]);
            test.extend(&members[train_per_class + val_per_class..]);
        }
        DatasetSplit::new(train, validation, test, labels.len())
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect())
}

fn parse_err(path: &Path, line: usize, msg: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    }
}

/// Load delimiter-separated numeric feature rows (whitespace or commas).
pub fn load_features<T: Scalar>(path: impl AsRef<Path>, normalize: bool) -> Result<FeatureMatrix<T>> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut rows: Vec<Vec<T>> = Vec::with_capacity(lines.len());
    for (lineno, line) in &lines {
        let row: Vec<T> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|tok| !tok.is_empty())
            .map(|tok| {
                tok.parse::<f64>()
                    .map(T::lit)
                    .map_err(|_| parse_err(path, *lineno, format!("bad number {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    *lineno,
                    format!("row has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no feature rows".into()));
    }
    let dim = rows[0].len();
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    let n = flat.len() / dim;
    let values = Array2::from_shape_vec((n, dim), flat)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    if normalize {
        FeatureMatrix::unit_normalized(values)
    } else {
        FeatureMatrix::raw(values)
    }
}

/// Load `node_id label` lines. Nodes absent from the file stay unlabeled.
pub fn load_labels(path: impl AsRef<Path>, node_count: usize) -> Result<LabelVector> {
    let path = path.as_ref();
    let mut classes = vec![None; node_count];
    let mut max_class = 0usize;
    for (lineno, line) in read_lines(path)? {
        let mut parts = line.split_whitespace();
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected 'node_id label', got {line:?}"),
                ))
            }
        };
        let node: usize = a
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad node id {a:?}")))?;
        let class: usize = b
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad label {b:?}")))?;
        if node >= node_count {
            return Err(parse_err(
                path,
                lineno,
                format!("node id {node} exceeds node count {node_count}"),
            ));
        }
        classes[node] = Some(class);
        max_class = max_class.max(class);
    }
    LabelVector::from_options(classes, max_class + 1)
}

/// Load a split file with three sections introduced by `TRAIN`, `VAL`, and
/// `TEST` header lines; each section lists node ids separated by whitespace
/// or newlines.
pub fn load_split(path: impl AsRef<Path>, node_count: usize) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let mut sections: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut current: Option<usize> = None;
    for (lineno, line) in read_lines(path)? {
        match line.to_ascii_uppercase().as_str() {
            "TRAIN" => current = Some(0),
            "VAL" | "VALIDATION" => current = Some(1),
            "TEST" => current = Some(2),
            _ => {
                let section = current.ok_or_else(|| {
                    parse_err(path, lineno, "ids before any TRAIN/VAL/TEST header".into())
                })?;
                for tok in line.split_whitespace() {
                    let id: usize = tok
                        .parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad node id {tok:?}")))?;
                    sections[section].push(id);
                }
            }
        }
    }
    let [train, validation, test] = sections;
    DatasetSplit::new(train, validation, test, node_count)
}

/// Load features, labels, and split together, validating row counts against
/// the graph and that every split node carries a label.
pub fn load_dataset<T: Scalar>(
    feature_file: impl AsRef<Path>,
    label_file: impl AsRef<Path>,
    split_file: impl AsRef<Path>,
    graph: &Graph,
    normalize: bool,
) -> Result<(FeatureMatrix<T>, LabelVector, DatasetSplit)> {
    let features = load_features::<T>(feature_file, normalize)?;
    if features.node_count() != graph.node_count() {
        return Err(Error::Dimension(format!(
            "feature rows ({}) do not match graph nodes ({})",
            features.node_count(),
            graph.node_count()
        )));
    }
    let labels = load_labels(label_file, graph.node_count())?;
    let split = load_split(split_file, graph.node_count())?;
    for set in [&split.train, &split.validation, &split.test] {
        for &node in set {
            if labels.class(node).is_none() {
                return Err(Error::InvalidParameter(format!(
                    "split node {node} has no label"
                )));
            }
        }
    }
    Ok((features, labels, split))
}

/// Row-wise argmax with deterministic first-max tie-breaking.
pub fn argmax_rows<T: Scalar>(scores: &Array2<T>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_val = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_val {
                    best = j;
                    best_val = v;
                }
            }
            best
        })
        .collect()
}

/// Column vector of ones, handy for bias broadcasting.
pub fn ones<T: Scalar>(n: usize) -> Array1<T> {
    Array1::from_elem(n, T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn normalization_produces_unit_rows() {
        let m = array![[3.0, 4.0], [0.0, 1.0], [1.0, 0.0]];
        let f = FeatureMatrix::unit_normalized(m).unwrap();
        assert_abs_diff_eq!(f.values()[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(f.values()[(0, 1)], 0.8, epsilon = 1e-15);
        for row in f.values().rows() {
            let norm: f64 = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_rejected() {
        let m = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(FeatureMatrix::<f64>::unit_normalized(m).is_err());
    }

    #[test]
    fn overlapping_split_rejected() {
        let err = DatasetSplit::new(vec![0], vec![], vec![0], 3).unwrap_err();
        assert!(err.to_string().contains("more than one split"), "{err}");
    }

    #[test]
    fn split_union_may_be_partial() {
        let s = DatasetSplit::new(vec![0], vec![1], vec![2], 10).unwrap();
        assert_eq!(s.train, vec![0]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(LabelVector::from_classes([0, 3], 2).is_err());
    }

    #[test]
    fn one_hot_requires_labels() {
        let labels = LabelVector::from_options([Some(0), None], 2).unwrap();
        assert!(labels.one_hot::<f64>(&[0]).is_ok());
        assert!(labels.one_hot::<f64>(&[1]).is_err());
    }

    #[test]
    fn stratified_split_is_deterministic() {
        let labels = LabelVector::from_classes((0..20).map(|u| u % 2), 2).unwrap();
        let a = DatasetSplit::stratified(&labels, 3, 2, 11).unwrap();
        let b = DatasetSplit::stratified(&labels, 3, 2, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 6);
        assert_eq!(a.validation.len(), 4);
        assert_eq!(a.test.len(), 10);
    }
}
