//! Shared domain types: feature matrices, label vectors, patch activation
//! sets, split assignments, and the per-iteration loop trace.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;

/// Dense row-major feature matrix with one opaque string id per row.
///
/// Every value is finite and ids are unique; both are checked at
/// construction, so a `FeatureMatrix` in hand is always valid. Instances are
/// immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<F: Float> {
    data: Array2<F>,
    item_ids: Vec<String>,
}

impl<F: Float> FeatureMatrix<F> {
    pub fn new(data: Array2<F>, item_ids: Vec<String>) -> Result<Self> {
        if data.nrows() != item_ids.len() {
            return Err(Error::invalid(format!(
                "feature matrix has {} rows but {} item ids",
                data.nrows(),
                item_ids.len()
            )));
        }
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value {v} at row {r}, column {c}"
            )));
        }
        check_unique_ids(&item_ids)?;
        Ok(Self { data, item_ids })
    }

    pub fn n_items(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<F> {
        &self.data
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, F> {
        self.data.row(i)
    }

    /// Rows selected by `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let data = self.data.select(Axis(0), indices);
        let ids = indices.iter().map(|&i| self.item_ids[i].clone()).collect();
        Self::new(data, ids)
    }

    /// Per-dimension standardization to zero mean and unit variance.
    /// Zero-variance dimensions are centered and left at zero.
    pub fn standardized(&self) -> Self {
        let n = self.n_items();
        if n == 0 {
            return self.clone();
        }
        let nf = F::cast(n);
        let mean = self.data.sum_axis(Axis(0)) / nf;
        let mut out = self.data.clone();
        for mut row in out.rows_mut() {
            row -= &mean;
        }
        let var = out.map_axis(Axis(0), |col| {
            col.iter().map(|&v| v * v).sum::<F>() / nf
        });
        for (j, &v) in var.iter().enumerate() {
            if v > F::zero() {
                let inv = v.sqrt().recip();
                out.column_mut(j).mapv_inplace(|x| x * inv);
            }
        }
        Self {
            data: out,
            item_ids: self.item_ids.clone(),
        }
    }

    /// L2 normalization of each row; zero rows are left untouched.
    pub fn l2_normalized(&self) -> Self {
        let mut out = self.data.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm > F::zero() {
                row.mapv_inplace(|x| x / norm);
            }
        }
        Self {
            data: out,
            item_ids: self.item_ids.clone(),
        }
    }
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate item id {id:?}")));
        }
    }
    Ok(())
}

/// Integer labels in `[0, k)` aligned with a list of item ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    k: usize,
    item_ids: Vec<String>,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, k: usize, item_ids: Vec<String>) -> Result<Self> {
        if labels.len() != item_ids.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} item ids",
                labels.len(),
                item_ids.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::invalid(format!
                ("label {l} at item {i} exceeds k = {k}")));
        }
        check_unique_ids(&item_ids)?;
        Ok(Self {
            labels,
            k,
            item_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Number of distinct labels actually present.
    pub fn distinct(&self) -> usize {
        let mut seen = vec![false; self.k];
        let mut n = 0;
        for &l in &self.labels {
            if !seen[l] {
                seen[l] = true;
                n += 1;
            }
        }
        n
    }

    /// Relabel to a dense range `[0, distinct)` preserving first-appearance
    /// order of the original labels.
    pub fn densified(&self) -> LabelVector {
        let mut remap = vec![usize::MAX; self.k];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if remap[l] == usize::MAX {
                    remap[l] = next;
                    next += 1;
                }
                remap[l]
            })
            .collect();
        LabelVector {
            labels,
            k: next.max(1),
            item_ids: self.item_ids.clone(),
        }
    }

    /// Check that this vector describes exactly the given item ids, in order.
    pub fn validate_alignment(&self, ids: &[String]) -> Result<()> {
        if self.item_ids.len() != ids.len() {
            return Err(Error::DimMismatch {
                expected: ids.len(),
                actual: self.item_ids.len(),
            });
        }
        for (a, b) in self.item_ids.iter().zip(ids) {
            if a != b {
                return Err(Error::invalid(format!(
                    "item id mismatch: {a:?} vs {b:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabelVector> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let ids = indices.iter().map(|&i| self.item_ids[i].clone()).collect();
        LabelVector::new(labels, self.k, ids)
    }
}

/// One local patch: spatial position, scale, and its activation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<F: Float> {
    pub scale: F,
    pub x: u32,
    pub y: u32,
    pub activation: Array1<F>,
}

/// All patches extracted from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatches<F: Float> {
    pub image_id: String,
    pub patches: Vec<Patch<F>>,
}

impl<F: Float> ImagePatches<F> {
    /// Patch activations stacked as rows.
    pub fn activation_matrix(&self) -> Array2<F> {
        let dim = self.patches.first().map_or(0, |p| p.activation.len());
        let mut m = Array2::zeros((self.patches.len(), dim));
        for (i, p) in self.patches.iter().enumerate() {
            m.row_mut(i).assign(&p.activation);
        }
        m
    }
}

/// Per-image patch activations sharing one common dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchActivationSet<F: Float> {
    dim: usize,
    images: Vec<ImagePatches<F>>,
}

impl<F: Float> PatchActivationSet<F> {
    pub fn new(dim: usize, images: Vec<ImagePatches<F>>) -> Result<Self> {
        let ids: Vec<String> = images.iter().map(|im| im.image_id.clone()).collect();
        check_unique_ids(&ids)?;
        for im in &images {
            for (pi, p) in im.patches.iter().enumerate() {
                if p.activation.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        actual: p.activation.len(),
                    });
                }
                if !(p.scale > F::zero()) {
                    return Err(Error::invalid(format!(
                        "patch {pi} of image {:?} has non-positive scale",
                        im.image_id
                    )));
                }
                if p.activation.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!(
                        "non-finite activation in patch {pi} of image {:?}",
                        im.image_id
                    )));
                }
            }
        }
        Ok(Self { dim, images })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn images(&self) -> &[ImagePatches<F>] {
        &self.images
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|im| im.image_id.clone()).collect()
    }

    pub fn total_patches(&self) -> usize {
        self.images.iter().map(|im| im.patches.len()).sum()
    }

    /// All patches of all images stacked as rows, in file order.
    pub fn pooled_matrix(&self) -> Array2<F> {
        let mut m = Array2::zeros((self.total_patches(), self.dim));
        let mut r = 0;
        for im in &self.images {
            for p in &im.patches {
                m.row_mut(r).assign(&p.activation);
                r += 1;
            }
        }
        m
    }
}

/// Which of the three subsets an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Deterministic train/validation/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub tags: Vec<SplitTag>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for t in &self.tags {
            match t {
                SplitTag::Train => c[0] += 1,
                SplitTag::Validation => c[1] += 1,
                SplitTag::Test => c[2] += 1,
            }
        }
        c
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One row of the loop trace.
///
/// `purity_adjacent` and `nmi_adjacent` compare this iteration's clustering
/// with the previous one and are 0 for iteration 0. `top1`/`top5` are the
/// held-out accuracies of the encoder trained in this iteration and are 0 on
/// iterations where no encoder was trained. `objective` is the clustering
/// objective of the iteration (information-maximization value when that
/// method is used, otherwise the k-means cost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub k_clusters: usize,
    pub purity_adjacent: f64,
    pub nmi_adjacent: f64,
    pub top1: f64,
    pub top5: f64,
    pub rim_objective: f64,
    pub wall_seconds: f64,
}

/// Append-only record of every loop iteration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopTrace {
    pub iterations: Vec<IterationRecord>,
}

impl LoopTrace {
    pub fn push(&mut self, rec: IterationRecord) -> Result<()> {
        if rec.iteration != self.iterations.len() {
            return Err(Error::invalid(format!(
                "iteration {} out of order (expected {})",
                rec.iteration,
                self.iterations.len()
            )));
        }
        for (name, v) in [
            ("purity_adjacent", rec.purity_adjacent),
            ("nmi_adjacent", rec.nmi_adjacent),
            ("top1", rec.top1),
            ("top5", rec.top5),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        self.iterations.push(rec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}
