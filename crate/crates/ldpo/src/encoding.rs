//! Dimensionality reduction and dense-pooling encoders that turn patch
//! activations into fixed-length image vectors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::path::Path;

use crate::clustering::kmeans_on_matrix;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::io::{
    open_reader, open_writer, read_container_header, write_container_header, ContainerTag,
};
use crate::linalg::{column_mean, symmetric_eigen};
use crate::types::{FeatureMatrix, ImagePatches, PatchActivationSet};

const CODEBOOK_RESTARTS: usize = 3;
const GMM_MAX_ITER: usize = 300;
const GMM_REL_TOL: f64 = 1e-6;
const VARIANCE_FLOOR: f64 = 1e-6;

/// Principal-component projection with the training mean and per-component
/// variances. `basis` is `d_in x d_out` with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel<F: Float> {
    pub mean: Array1<F>,
    pub basis: Array2<F>,
    pub explained_variance: Array1<F>,
}

impl<F: Float> PcaModel<F> {
    pub fn new(mean: Array1<F>, basis: Array2<F>, explained_variance: Array1<F>) -> Result<Self> {
        if basis.nrows() != mean.len() || basis.ncols() != explained_variance.len() {
            return Err(Error::invalid("inconsistent projection shapes"));
        }
        let tol = F::cast(1e-6);
        let gram = basis.t().dot(&basis);
        for ((i, j), &v) in gram.indexed_iter() {
            let expected = if i == j { F::one() } else { F::zero() };
            if (v - expected).abs() > tol {
                return Err(Error::invalid(format!(
                    "basis columns not orthonormal (gram[{i},{j}] = {v})"
                )));
            }
        }
        for pair in explained_variance.as_slice().unwrap().windows(2) {
            if pair[1] > pair[0] {
                return Err(Error::invalid("explained variance must be non-increasing"));
            }
        }
        if explained_variance.iter().any(|&v| v < F::zero()) {
            return Err(Error::invalid("explained variance must be non-negative"));
        }
        Ok(Self {
            mean,
            basis,
            explained_variance,
        })
    }

    pub fn d_in(&self) -> usize {
        self.basis.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.basis.ncols()
    }

    /// Map projected rows back into the input space.
    pub fn reconstruct(&self, y: &FeatureMatrix<F>) -> Result<FeatureMatrix<F>> {
        if y.dim() != self.d_out() {
            return Err(Error::DimMismatch {
                expected: self.d_out(),
                actual: y.dim(),
            });
        }
        let mut data = y.data().dot(&self.basis.t());
        for mut row in data.rows_mut() {
            row += &self.mean;
        }
        FeatureMatrix::new(data, y.item_ids().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = open_writer(path)?;
        write_container_header(&mut w, ContainerTag::Pca)?;
        w.write_u64(self.d_in() as u64)?;
        w.write_u64(self.d_out() as u64)?;
        for v in self.mean.iter() {
            w.write_f64(v.as_f64())?;
        }
        for v in self.basis.iter() {
            w.write_f64(v.as_f64())?;
        }
        for v in self.explained_variance.iter() {
            w.write_f64(v.as_f64())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path)?;
        read_container_header(&mut r, ContainerTag::Pca)?;
        let d_in = r.read_u64()? as usize;
        let d_out = r.read_u64()? as usize;
        let mean =
            Array1::from_vec((0..d_in).map(|_| r.read_f64()).collect::<Result<Vec<_>>>()?)
                .mapv(F::cast);
        let mut basis = Array2::zeros((d_in, d_out));
        for i in 0..d_in {
            for j in 0..d_out {
                basis[[i, j]] = F::cast(r.read_f64()?);
            }
        }
        let ev =
            Array1::from_vec((0..d_out).map(|_| r.read_f64()).collect::<Result<Vec<_>>>()?)
                .mapv(F::cast);
        r.expect_end()?;
        Self::new(mean, basis, ev)
    }
}

/// Fit a principal-component model to the rows of `x`.
///
/// The covariance eigendecomposition keeps the top `d_out` directions;
/// `explained_variance` holds the matching eigenvalues of the sample
/// covariance (denominator `n - 1`).
pub fn fit_pca<F: Float>(x: &FeatureMatrix<F>, d_out: usize) -> Result<PcaModel<F>> {
    let (n, d) = (x.n_items(), x.dim());
    if d_out == 0 || d_out > n.min(d) {
        return Err(Error::invalid(format!(
            "d_out = {d_out} outside [1, min(n_items, dim) = {}]",
            n.min(d)
        )));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two rows to fit a projection"));
    }
    let mean = column_mean(&x.data().view());
    let mut centered = x.data().clone();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let denom = F::cast(n - 1);
    let cov = centered.t().dot(&centered) / denom;
    let total: F = (0..d).map(|j| cov[[j, j]]).sum();
    if total <= F::cast(1e-24) {
        return Err(Error::invalid("zero variance: all rows identical"));
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let mut basis = Array2::zeros((d, d_out));
    let mut ev = Array1::zeros(d_out);
    for j in 0..d_out {
        let mut col = vectors.column(j).to_owned();
        // canonical sign: largest-magnitude coordinate is positive
        let lead = col
            .iter()
            .copied()
            .fold(F::zero(), |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < F::zero() {
            col.mapv_inplace(|v| -v);
        }
        basis.column_mut(j).assign(&col);
        ev[j] = values[j].max(F::zero());
    }
    PcaModel::new(mean, basis, ev)
}

/// Project rows of `x` onto the principal components, centering with the
/// stored training mean.
pub fn apply_pca<F: Float>(model: &PcaModel<F>, x: &FeatureMatrix<F>) -> Result<FeatureMatrix<F>> {
    if x.dim() != model.d_in() {
        return Err(Error::DimMismatch {
            expected: model.d_in(),
            actual: x.dim(),
        });
    }
    let mut centered = x.data().clone();
    for mut row in centered.rows_mut() {
        row -= &model.mean;
    }
    FeatureMatrix::new(centered.dot(&model.basis), x.item_ids().to_vec())
}

/// k-means codebook for residual aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F: Float> {
    centers: Array2<F>,
}

impl<F: Float> Codebook<F> {
    pub fn new(centers: Array2<F>) -> Result<Self> {
        if centers.nrows() == 0 {
            return Err(Error::invalid("codebook needs at least one center"));
        }
        for a in 0..centers.nrows() {
            for b in (a + 1)..centers.nrows() {
                if centers.row(a) == centers.row(b) {
                    return Err(Error::invalid(format!("centers {a} and {b} are identical")));
                }
            }
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn centers(&self) -> &Array2<F> {
        &self.centers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = open_writer(path)?;
        write_container_header(&mut w, ContainerTag::Codebook)?;
        w.write_u64(self.k() as u64)?;
        w.write_u64(self.dim() as u64)?;
        for v in self.centers.iter() {
            w.write_f64(v.as_f64())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path)?;
        read_container_header(&mut r, ContainerTag::Codebook)?;
        let k = r.read_u64()? as usize;
        let d = r.read_u64()? as usize;
        let mut centers = Array2::zeros((k, d));
        for i in 0..k {
            for j in 0..d {
                centers[[i, j]] = F::cast(r.read_f64()?);
            }
        }
        r.expect_end()?;
        Self::new(centers)
    }
}

/// Cluster all pooled patch activations into `k` codebook centers.
pub fn fit_codebook<F: Float>(
    patches: &PatchActivationSet<F>,
    k: usize,
    seed: u64,
) -> Result<Codebook<F>> {
    let total = patches.total_patches();
    if total < k {
        return Err(Error::invalid(format!(
            "{total} patches cannot seed {k} centers"
        )));
    }
    let pooled = patches.pooled_matrix();
    let sol = kmeans_on_matrix(pooled.view(), k, seed, CODEBOOK_RESTARTS);
    Codebook::new(sol.centers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VladConfig {
    /// L2-normalize each center block before the global normalization.
    pub intra_normalize: bool,
}

/// Aggregate the residuals of each patch to its nearest codebook center,
/// concatenated per center (length `k * dim`), then L2-normalized.
pub fn encode_vlad<F: Float>(
    image: &ImagePatches<F>,
    codebook: &Codebook<F>,
    config: &VladConfig,
) -> Result<Array1<F>> {
    if image.patches.is_empty() {
        return Err(Error::invalid(format!(
            "image {:?} has no patches",
            image.image_id
        )));
    }
    let d = codebook.dim();
    let k = codebook.k();
    let mut out = Array1::zeros(k * d);
    for patch in &image.patches {
        if patch.activation.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: patch.activation.len(),
            });
        }
        let nearest = nearest_center(patch.activation.view(), codebook.centers());
        let base = nearest * d;
        for j in 0..d {
            out[base + j] += patch.activation[j] - codebook.centers()[[nearest, j]];
        }
    }
    if config.intra_normalize {
        for c in 0..k {
            let norm = out
                .slice(ndarray::s![c * d..(c + 1) * d])
                .iter()
                .map(|&v| v * v)
                .sum::<F>()
                .sqrt();
            if norm > F::zero() {
                out.slice_mut(ndarray::s![c * d..(c + 1) * d])
                    .mapv_inplace(|v| v / norm);
            }
        }
    }
    l2_normalize(&mut out);
    Ok(out)
}

fn nearest_center<F: Float>(v: ArrayView1<'_, F>, centers: &Array2<F>) -> usize {
    let mut best = 0;
    let mut best_d = F::infinity();
    for (c, center) in centers.outer_iter().enumerate() {
        let d: F = v
            .iter()
            .zip(center.iter())
            .map(|(&a, &b)| {
                let diff = a - b;
                diff * diff
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn l2_normalize<F: Float>(v: &mut Array1<F>) {
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    if norm > F::zero() {
        v.mapv_inplace(|x| x / norm);
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel<F: Float> {
    pub weights: Array1<F>,
    pub means: Array2<F>,
    pub variances: Array2<F>,
}

impl<F: Float> GmmModel<F> {
    pub fn new(weights: Array1<F>, means: Array2<F>, variances: Array2<F>) -> Result<Self> {
        let g = weights.len();
        if g == 0 || means.nrows() != g || variances.nrows() != g {
            return Err(Error::invalid("inconsistent component counts"));
        }
        if means.ncols() != variances.ncols() {
            return Err(Error::invalid("mean/variance dimensionality differs"));
        }
        let sum: F = weights.iter().copied().sum();
        if (sum - F::one()).abs() > F::cast(1e-9) || weights.iter().any(|&w| w < F::zero()) {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        let floor = F::cast(VARIANCE_FLOOR);
        if variances.iter().any(|&v| v < floor) {
            return Err(Error::invalid("variance below floor"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Posterior responsibility of each component for each row.
    pub fn responsibilities(&self, data: ArrayView2<'_, F>) -> Array2<F> {
        let (resp, _) = self.responsibilities_and_ll(data);
        resp
    }

    fn responsibilities_and_ll(&self, data: ArrayView2<'_, F>) -> (Array2<F>, F) {
        let n = data.nrows();
        let g = self.n_components();
        let d = self.dim();
        let half = F::cast(0.5);
        let log_2pi = F::cast((2.0 * std::f64::consts::PI).ln());

        // per-component log normalizers
        let mut log_norm = Array1::zeros(g);
        let mut log_w = Array1::zeros(g);
        for c in 0..g {
            let mut s = F::zero();
            for j in 0..d {
                s += self.variances[[c, j]].ln() + log_2pi;
            }
            log_norm[c] = -half * s;
            log_w[c] = if self.weights[c] > F::zero() {
                self.weights[c].ln()
            } else {
                F::neg_infinity()
            };
        }

        let mut resp = Array2::zeros((n, g));
        let mut total_ll = F::zero();
        for (i, row) in data.outer_iter().enumerate() {
            let mut log_p = Array1::zeros(g);
            for c in 0..g {
                let mut quad = F::zero();
                for j in 0..d {
                    let diff = row[j] - self.means[[c, j]];
                    quad += diff * diff / self.variances[[c, j]];
                }
                log_p[c] = log_w[c] + log_norm[c] - half * quad;
            }
            let max = log_p.iter().copied().fold(F::neg_infinity(), F::max);
            let sum_exp: F = log_p.iter().map(|&v| (v - max).exp()).sum();
            let ll = max + sum_exp.ln();
            total_ll += ll;
            for c in 0..g {
                resp[[i, c]] = (log_p[c] - ll).exp();
            }
        }
        (resp, total_ll)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = open_writer(path)?;
        write_container_header(&mut w, ContainerTag::Gmm)?;
        w.write_u64(self.n_components() as u64)?;
        w.write_u64(self.dim() as u64)?;
        for v in self.weights.iter() {
            w.write_f64(v.as_f64())?;
        }
        for v in self.means.iter() {
            w.write_f64(v.as_f64())?;
        }
        for v in self.variances.iter() {
            w.write_f64(v.as_f64())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path)?;
        read_container_header(&mut r, ContainerTag::Gmm)?;
        let g = r.read_u64()? as usize;
        let d = r.read_u64()? as usize;
        let weights =
            Array1::from_vec((0..g).map(|_| r.read_f64()).collect::<Result<Vec<_>>>()?)
                .mapv(F::cast);
        let mut means = Array2::zeros((g, d));
        for i in 0..g {
            for j in 0..d {
                means[[i, j]] = F::cast(r.read_f64()?);
            }
        }
        let mut variances = Array2::zeros((g, d));
        for i in 0..g {
            for j in 0..d {
                variances[[i, j]] = F::cast(r.read_f64()?);
            }
        }
        r.expect_end()?;
        Self::new(weights, means, variances)
    }
}

/// Mixture fit plus the log-likelihood trace, which is non-decreasing
/// across EM iterations.
#[derive(Debug, Clone)]
pub struct GmmFit<F: Float> {
    pub model: GmmModel<F>,
    pub log_likelihood: Vec<F>,
}

/// Fit a diagonal-covariance mixture to the pooled patch activations by EM
/// from a k-means initialization. Stops when the relative log-likelihood
/// change falls below 1e-6 or after 300 iterations. Variances are clamped
/// to the 1e-6 floor with a warning.
pub fn fit_gmm<F: Float>(
    patches: &PatchActivationSet<F>,
    g: usize,
    seed: u64,
) -> Result<GmmFit<F>> {
    let total = patches.total_patches();
    if total < g || g == 0 {
        return Err(Error::invalid(format!(
            "{total} patches cannot support {g} components"
        )));
    }
    let pooled = patches.pooled_matrix();
    fit_gmm_on_matrix(pooled.view(), g, seed)
}

pub(crate) fn fit_gmm_on_matrix<F: Float>(
    data: ArrayView2<'_, F>,
    g: usize,
    seed: u64,
) -> Result<GmmFit<F>> {
    let (n, d) = data.dim();
    let floor = F::cast(VARIANCE_FLOOR);

    // k-means initialization: means from centers, weights and variances
    // from the induced hard assignment
    let sol = kmeans_on_matrix(data, g, seed, CODEBOOK_RESTARTS);
    let mut counts = vec![0usize; g];
    for &a in &sol.assignment {
        counts[a] += 1;
    }
    let mut weights = Array1::zeros(g);
    let mut variances = Array2::from_elem((g, d), F::one());
    let global_var = {
        let mean = column_mean(&data);
        let mut v = Array1::<F>::zeros(d);
        for row in data.outer_iter() {
            for j in 0..d {
                let diff = row[j] - mean[j];
                v[j] += diff * diff;
            }
        }
        v.mapv(|x| (x / F::cast(n)).max(floor))
    };
    for c in 0..g {
        weights[c] = F::cast(counts[c]) / F::cast(n);
        if counts[c] >= 2 {
            let mut v = Array1::<F>::zeros(d);
            for (row, &a) in data.outer_iter().zip(&sol.assignment) {
                if a == c {
                    for j in 0..d {
                        let diff = row[j] - sol.centers[[c, j]];
                        v[j] += diff * diff;
                    }
                }
            }
            for j in 0..d {
                variances[[c, j]] = (v[j] / F::cast(counts[c])).max(floor);
            }
        } else {
            variances.row_mut(c).assign(&global_var);
        }
    }
    let mut model = GmmModel {
        weights,
        means: sol.centers,
        variances,
    };

    let mut trace: Vec<F> = Vec::new();
    let mut clamped = false;
    for _iter in 0..GMM_MAX_ITER {
        let (resp, ll) = model.responsibilities_and_ll(data);
        let done = trace.last().is_some_and(|&prev| {
            (ll - prev).abs().as_f64() <= GMM_REL_TOL * (1.0 + prev.abs().as_f64())
        });
        trace.push(ll);
        if done {
            break;
        }

        // M step
        let totals = resp.sum_axis(Axis(0));
        let tiny = F::cast(1e-12);
        for c in 0..g {
            model.weights[c] = totals[c] / F::cast(n);
            if totals[c] <= tiny {
                continue; // dead component keeps its parameters
            }
            let mut mean = Array1::<F>::zeros(d);
            for (row, r) in data.outer_iter().zip(resp.column(c)) {
                for j in 0..d {
                    mean[j] += *r * row[j];
                }
            }
            mean.mapv_inplace(|v| v / totals[c]);
            let mut var = Array1::<F>::zeros(d);
            for (row, r) in data.outer_iter().zip(resp.column(c)) {
                for j in 0..d {
                    let diff = row[j] - mean[j];
                    var[j] += *r * diff * diff;
                }
            }
            for j in 0..d {
                let v = var[j] / totals[c];
                if v < floor {
                    clamped = true;
                }
                model.variances[[c, j]] = v.max(floor);
                model.means[[c, j]] = mean[j];
            }
        }
    }
    if clamped {
        log::warn!("mixture variances clamped to the {VARIANCE_FLOOR} floor");
    }
    Ok(GmmFit {
        model: GmmModel::new(model.weights, model.means, model.variances)?,
        log_likelihood: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FisherConfig {
    /// Apply the signed square root before normalizing.
    pub signed_sqrt: bool,
    pub l2_normalize: bool,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            signed_sqrt: true,
            l2_normalize: true,
        }
    }
}

/// Gradient statistics of the patches under the mixture: per component a
/// mean block and a variance block, laid out as all mean blocks then all
/// variance blocks (length `2 * g * dim`).
pub fn encode_fisher<F: Float>(
    image: &ImagePatches<F>,
    gmm: &GmmModel<F>,
    config: &FisherConfig,
) -> Result<Array1<F>> {
    if image.patches.is_empty() {
        return Err(Error::invalid(format!(
            "image {:?} has no patches",
            image.image_id
        )));
    }
    let d = gmm.dim();
    let g = gmm.n_components();
    for patch in &image.patches {
        if patch.activation.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: patch.activation.len(),
            });
        }
    }
    let data = image.activation_matrix();
    let resp = gmm.responsibilities(data.view());
    let t = F::cast(image.patches.len());
    let two = F::cast(2.0);

    let mut out = Array1::zeros(2 * g * d);
    for c in 0..g {
        if gmm.weights[c] <= F::zero() {
            continue;
        }
        let mean_scale = (t * gmm.weights[c].sqrt()).recip();
        let var_scale = (t * (two * gmm.weights[c]).sqrt()).recip();
        for (row, r) in data.outer_iter().zip(resp.column(c)) {
            for j in 0..d {
                let sigma = gmm.variances[[c, j]].sqrt();
                let z = (row[j] - gmm.means[[c, j]]) / sigma;
                out[c * d + j] += *r * z * mean_scale;
                out[(g + c) * d + j] += *r * (z * z - F::one()) * var_scale;
            }
        }
    }
    if config.signed_sqrt {
        out.mapv_inplace(|v: F| v.signum() * v.abs().sqrt());
    }
    if config.l2_normalize {
        l2_normalize(&mut out);
    }
    Ok(out)
}
