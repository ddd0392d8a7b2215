//! Clustering-comparison and classification metrics: purity, NMI, top-k
//! accuracy, and per-class mean score matrices.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::types::LabelVector;

/// Joint label counts between two labelings of the same items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<usize>>,
    n_items: usize,
}

impl ContingencyTable {
    /// Build the table, pairing items by id. Requires the two vectors to
    /// describe the same item set (order may differ).
    pub fn build(a: &LabelVector, b: &LabelVector) -> Result<Self> {
        let pairs = paired_labels(a, b)?;
        let mut counts = vec![vec![0usize; b.k()]; a.k()];
        for (la, lb) in &pairs {
            counts[*la][*lb] += 1;
        }
        Ok(Self {
            counts,
            n_items: pairs.len(),
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, |r| r.len());
        let mut t = vec![0usize; cols];
        for row in &self.counts {
            for (j, &c) in row.iter().enumerate() {
                t[j] += c;
            }
        }
        t
    }
}

fn paired_labels(a: &LabelVector, b: &LabelVector) -> Result<Vec<(usize, usize)>> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.item_ids() == b.item_ids() {
        return Ok(a.labels().iter().copied().zip(b.labels().iter().copied()).collect());
    }
    let index: std::collections::HashMap<&str, usize> = b
        .item_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    a.item_ids()
        .iter()
        .zip(a.labels())
        .map(|(id, &la)| {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("item {id:?} missing from second labeling")))?;
            Ok((la, b.labels()[i]))
        })
        .collect()
}

/// Fraction of items sitting in the majority-overlap cell of their cluster:
/// `(1/N) * sum over clusters of a of max overlap with any cluster of b`.
pub fn purity(a: &LabelVector, b: &LabelVector) -> Result<f64> {
    let table = ContingencyTable::build(a, b)?;
    if table.n_items() == 0 {
        return Err(Error::invalid("purity of empty labelings"));
    }
    let hits: usize = table
        .counts()
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / table.n_items() as f64)
}

fn entropy_from_totals(totals: &[usize], n: f64) -> f64 {
    totals
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization:
/// `I(a;b) / ((H(a) + H(b)) / 2)` in natural log. Two trivial single-cluster
/// labelings are defined to agree perfectly (1.0).
pub fn nmi(a: &LabelVector, b: &LabelVector) -> Result<f64> {
    let table = ContingencyTable::build(a, b)?;
    let n = table.n_items() as f64;
    if table.n_items() == 0 {
        return Err(Error::invalid("nmi of empty labelings"));
    }
    let rows = table.row_totals();
    let cols = table.col_totals();
    let ha = entropy_from_totals(&rows, n);
    let hb = entropy_from_totals(&cols, n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    // I(a;b) = H(a) + H(b) - H(a,b); sharing one entropy routine makes
    // identical labelings score exactly 1
    let joint: Vec<usize> = table.counts().iter().flatten().copied().collect();
    let h_joint = entropy_from_totals(&joint, n);
    let mi = (ha + hb - h_joint).max(0.0);
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Fraction of rows whose true label is among the `k` highest scores.
/// Score ties are broken in favor of the lower column index.
pub fn topk_accuracy<F: Float>(
    scores: ArrayView2<'_, F>,
    truth: &LabelVector,
    k: usize,
) -> Result<f64> {
    let (n, classes) = scores.dim();
    if k > classes {
        return Err(Error::invalid(format!(
            "top-{k} requested with only {classes} classes"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("top-0 accuracy is undefined"));
    }
    if n != truth.len() {
        return Err(Error::DimMismatch {
            expected: n,
            actual: truth.len(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("top-k accuracy of empty score matrix"));
    }
    let mut hits = 0usize;
    for (row, &label) in scores.outer_iter().zip(truth.labels()) {
        if label >= classes {
            return Err(Error::invalid(format!(
                "truth label {label} exceeds score width {classes}"
            )));
        }
        let target = row[label];
        // rank = strictly greater entries, plus equal entries at lower index
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > target || (v == target && j < label) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean probability matrix by true class: entry `(i, j)` is the average
/// probability assigned to class `j` over items whose true class is `i`.
pub fn mean_class_scores<F: Float>(
    proba: ArrayView2<'_, F>,
    truth: &LabelVector,
) -> Result<Array2<F>> {
    let (n, classes) = proba.dim();
    if n != truth.len() {
        return Err(Error::DimMismatch {
            expected: n,
            actual: truth.len(),
        });
    }
    if classes != truth.k() {
        return Err(Error::DimMismatch {
            expected: truth.k(),
            actual: classes,
        });
    }
    let tol = F::cast(1e-6);
    for (i, row) in proba.outer_iter().enumerate() {
        let sum: F = row.iter().copied().sum();
        if (sum - F::one()).abs() > tol || row.iter().any(|&v| v < F::zero()) {
            return Err(Error::invalid(format!(
                "row {i} of the probability matrix is not a simplex vector (sum {sum})"
            )));
        }
    }
    let mut sums: Array2<F> = Array2::zeros((classes, classes));
    let mut counts = vec![0usize; classes];
    for (row, &label) in proba.outer_iter().zip(truth.labels()) {
        counts[label] += 1;
        let mut acc = sums.row_mut(label);
        acc += &row;
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::invalid(format!("class {class} has no items")));
        }
        let inv = F::cast(count).recip();
        sums.row_mut(class).mapv_inplace(|v| v * inv);
    }
    Ok(sums)
}
