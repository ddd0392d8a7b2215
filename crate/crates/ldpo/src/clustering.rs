//! k-means clustering and regularized information-maximization clustering
//! with automatic model selection.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::types::{FeatureMatrix, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    Rim,
}

/// Final labeling produced by a clustering run. Labels are always densified
/// to `[0, k_effective)`.
#[derive(Debug, Clone)]
pub struct ClusteringResult<F: Float> {
    pub labels: LabelVector,
    pub k_effective: usize,
    pub objective: F,
    pub method: ClusterMethod,
    pub seed: u64,
}

impl<F: Float> ClusteringResult<F> {
    /// JSON metadata written next to the labels CSV.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "k_effective": self.k_effective,
            "objective": self.objective.as_f64(),
            "method": self.method,
            "seed": self.seed,
        })
    }
}

/// k-means solution: densified labels plus the centers for the occupied
/// clusters, row `c` being the center of label `c`.
#[derive(Debug, Clone)]
pub struct KmeansFit<F: Float> {
    pub result: ClusteringResult<F>,
    pub centers: Array2<F>,
    /// Objective after every Lloyd iteration of the winning restart.
    pub objective_trace: Vec<F>,
}

/// Best-of-restarts Lloyd's algorithm from k-means++ seeding.
///
/// Empty clusters are reseeded to the point farthest from its assigned
/// center; the objective is non-increasing across iterations.
pub fn kmeans<F: Float>(
    x: &FeatureMatrix<F>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KmeansFit<F>> {
    if k == 0 || k > x.n_items() {
        return Err(Error::invalid(format!(
            "k = {k} outside [1, {}]",
            x.n_items()
        )));
    }
    let restarts = restarts.max(1);
    let sol = kmeans_on_matrix(x.data().view(), k, seed, restarts);
    let raw = LabelVector::new(sol.assignment.clone(), k, x.item_ids().to_vec())?;
    let labels = raw.densified();
    let k_effective = labels.k();

    // centers for occupied clusters only, in dense label order
    let mut centers = Array2::zeros((k_effective, x.dim()));
    let mut seen = vec![false; k];
    for (&orig, &dense) in sol.assignment.iter().zip(labels.labels()) {
        if !seen[orig] {
            seen[orig] = true;
            centers.row_mut(dense).assign(&sol.centers.row(orig));
        }
    }

    Ok(KmeansFit {
        result: ClusteringResult {
            labels,
            k_effective,
            objective: sol.objective,
            method: ClusterMethod::Kmeans,
            seed,
        },
        centers,
        objective_trace: sol.objective_trace,
    })
}

pub(crate) struct KmeansSolution<F: Float> {
    pub centers: Array2<F>,
    pub assignment: Vec<usize>,
    pub objective: F,
    pub objective_trace: Vec<F>,
}

/// Lloyd's algorithm on a bare matrix; used by the feature encoders as well.
pub(crate) fn kmeans_on_matrix<F: Float>(
    data: ArrayView2<'_, F>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> KmeansSolution<F> {
    let mut best: Option<KmeansSolution<F>> = None;
    for r in 0..restarts {
        let sol = lloyd(data, k, seed.wrapping_add(r as u64));
        let better = best
            .as_ref()
            .is_none_or(|b| sol.objective < b.objective);
        if better {
            best = Some(sol);
        }
    }
    best.expect("restarts >= 1")
}

const LLOYD_MAX_ITER: usize = 300;

fn lloyd<F: Float>(data: ArrayView2<'_, F>, k: usize, seed: u64) -> KmeansSolution<F> {
    let n = data.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(data, k, &mut rng);

    let (mut assignment, mut objective) = assign_all(data, &centers.view());
    fix_empty_clusters(data, &mut centers, &mut assignment, &mut objective, k);
    let mut trace = vec![objective];

    for _ in 0..LLOYD_MAX_ITER {
        update_centers(data, &assignment, &mut centers, k);
        let (next, mut obj) = assign_all(data, &centers.view());
        let mut next = next;
        fix_empty_clusters(data, &mut centers, &mut next, &mut obj, k);
        trace.push(obj);
        let stable = next == assignment;
        assignment = next;
        objective = obj;
        if stable {
            break;
        }
    }
    let _ = n;
    KmeansSolution {
        centers,
        assignment,
        objective,
        objective_trace: trace,
    }
}

/// k-means++ seeding: first center uniform, then D^2-weighted picks.
fn plus_plus_init<F: Float>(data: ArrayView2<'_, F>, k: usize, rng: &mut impl Rng) -> Array2<F> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centers = Array2::zeros((k, d));
    let mut chosen = vec![false; n];

    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    chosen[first] = true;

    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), centers.row(0)).as_f64())
        .collect();

    for c in 1..k {
        let total: f64 = dists.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&dists)
                .map(|w| w.sample(rng))
                .unwrap_or_else(|_| first_unchosen(&chosen))
        } else {
            first_unchosen(&chosen)
        };
        centers.row_mut(c).assign(&data.row(pick));
        chosen[pick] = true;
        for i in 0..n {
            let d2 = sq_dist(data.row(i), centers.row(c)).as_f64();
            if d2 < dists[i] {
                dists[i] = d2;
            }
        }
    }
    centers
}

fn first_unchosen(chosen: &[bool]) -> usize {
    chosen.iter().position(|&c| !c).unwrap_or(0)
}

fn sq_dist<F: Float>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> F {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Nearest-center assignment; ties go to the lower center index.
fn assign_all<F: Float>(
    data: ArrayView2<'_, F>,
    centers: &ArrayView2<'_, F>,
) -> (Vec<usize>, F) {
    let mut objective = F::zero();
    let assignment = data
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_d = sq_dist(row.view(), centers.row(0));
            for (c, center) in centers.outer_iter().enumerate().skip(1) {
                let d = sq_dist(row.view(), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            objective += best_d;
            best
        })
        .collect();
    (assignment, objective)
}

fn update_centers<F: Float>(
    data: ArrayView2<'_, F>,
    assignment: &[usize],
    centers: &mut Array2<F>,
    k: usize,
) {
    let mut counts = vec![0usize; k];
    let mut sums: Array2<F> = Array2::zeros(centers.raw_dim());
    for (row, &c) in data.outer_iter().zip(assignment) {
        counts[c] += 1;
        let mut acc = sums.row_mut(c);
        acc += &row;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = F::cast(count).recip();
            centers
                .row_mut(c)
                .assign(&sums.row(c).mapv(|v| v * inv));
        }
        // empty clusters keep their center; the reseed pass handles them
    }
}

/// Move each empty cluster's center onto the point farthest from its
/// assigned center. Skipped when every point already has zero distance.
fn fix_empty_clusters<F: Float>(
    data: ArrayView2<'_, F>,
    centers: &mut Array2<F>,
    assignment: &mut [usize],
    objective: &mut F,
    k: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far_point = None;
        let mut far_d = F::zero();
        for (i, row) in data.outer_iter().enumerate() {
            let d = sq_dist(row.view(), centers.row(assignment[i]));
            if d > far_d && counts[assignment[i]] > 1 {
                far_d = d;
                far_point = Some(i);
            }
        }
        let Some(p) = far_point else {
            return; // all points coincide with their centers
        };
        centers.row_mut(empty).assign(&data.row(p));
        assignment[p] = empty;
        *objective -= far_d;
    }
}

/// Default over-segmentation size for model-selecting cluster counts.
pub fn default_oversegment_k(n_items: usize) -> usize {
    (n_items / 10).clamp(2, 1000)
}

/// Multilogit conditional model for information-maximization clustering:
/// class scores are affine in the features, posteriors their softmax, and
/// an L2 penalty on the weights (not the biases) controls model complexity.
#[derive(Debug, Clone)]
pub struct RimModel<F: Float> {
    /// One weight vector per class, rows are classes.
    pub weights: Array2<F>,
    pub biases: Array1<F>,
    /// L2 penalty strength; non-negative.
    pub lambda: F,
}

impl<F: Float> RimModel<F> {
    pub fn new(weights: Array2<F>, biases: Array1<F>, lambda: F) -> Result<Self> {
        if weights.nrows() != biases.len() || weights.nrows() == 0 {
            return Err(Error::invalid(format!(
                "{} weight rows vs {} biases",
                weights.nrows(),
                biases.len()
            )));
        }
        if lambda < F::zero() {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if weights.iter().any(|v| !v.is_finite()) || biases.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite model parameter"));
        }
        Ok(Self {
            weights,
            biases,
            lambda,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Class posterior for one feature vector: softmax of the affine scores,
/// computed with max subtraction so saturation never overflows.
pub fn rim_posterior<F: Float>(model: &RimModel<F>, f: ArrayView1<'_, F>) -> Array1<F> {
    let scores = model.weights.dot(&f) + &model.biases;
    softmax(scores)
}

fn softmax<F: Float>(mut scores: Array1<F>) -> Array1<F> {
    let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
    scores.mapv_inplace(|s| (s - max).exp());
    let total: F = scores.iter().copied().sum();
    scores.mapv_inplace(|s| s / total);
    scores
}

/// Row-wise posteriors for a whole matrix.
pub fn rim_posteriors<F: Float>(model: &RimModel<F>, x: ArrayView2<'_, F>) -> Array2<F> {
    let mut scores = x.dot(&model.weights.t());
    for mut row in scores.rows_mut() {
        row += &model.biases;
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|s| (s - max).exp());
        let total: F = row.iter().copied().sum();
        row.mapv_inplace(|s| s / total);
    }
    scores
}

/// Information-maximization objective: the empirical mutual-information
/// estimate `H(mean posterior) - mean posterior entropy`, minus the L2
/// weight penalty.
pub fn rim_objective<F: Float>(model: &RimModel<F>, x: &FeatureMatrix<F>) -> F {
    objective_on(model, x.data().view())
}

fn objective_on<F: Float>(model: &RimModel<F>, data: ArrayView2<'_, F>) -> F {
    let posteriors = rim_posteriors(model, data);
    let n = F::cast(data.nrows());
    let marginal = posteriors.sum_axis(Axis(0)) / n;
    let h_marginal = entropy(marginal.view());
    let mean_h: F = posteriors
        .outer_iter()
        .map(|row| entropy(row))
        .sum::<F>()
        / n;
    h_marginal - mean_h - penalty(model)
}

fn entropy<F: Float>(p: ArrayView1<'_, F>) -> F {
    p.iter()
        .filter(|&&v| v > F::zero())
        .map(|&v| -v * v.ln())
        .sum()
}

fn penalty<F: Float>(model: &RimModel<F>) -> F {
    model.lambda * model.weights.iter().map(|&w| w * w).sum::<F>()
}

/// Gradient of [`rim_objective`] with respect to all weights and biases.
#[derive(Debug, Clone)]
pub struct RimGradient<F: Float> {
    pub weights: Array2<F>,
    pub biases: Array1<F>,
}

pub fn rim_gradient<F: Float>(model: &RimModel<F>, x: &FeatureMatrix<F>) -> RimGradient<F> {
    gradient_on(model, x.data().view())
}

fn gradient_on<F: Float>(model: &RimModel<F>, data: ArrayView2<'_, F>) -> RimGradient<F> {
    let n_items = data.nrows();
    let k = model.k();
    let posteriors = rim_posteriors(model, data);
    let n = F::cast(n_items);
    let marginal = posteriors.sum_axis(Axis(0)) / n;
    let log_marginal: Array1<F> = marginal.mapv(|p| if p > F::zero() { p.ln() } else { F::zero() });

    // d objective / d score[i,k]; see the entropy chain rule, the constant
    // terms cancel against the softmax Jacobian row sums.
    let mut score_grad: Array2<F> = Array2::zeros((n_items, k));
    for (i, row) in posteriors.outer_iter().enumerate() {
        let mean_log_self: F = row
            .iter()
            .filter(|&&p| p > F::zero())
            .map(|&p| p * p.ln())
            .sum();
        let mean_log_marginal: F = row
            .iter()
            .zip(log_marginal.iter())
            .map(|(&p, &lm)| p * lm)
            .sum();
        for (c, &p) in row.iter().enumerate() {
            if p > F::zero() {
                let self_term = p.ln() - mean_log_self;
                let marginal_term = log_marginal[c] - mean_log_marginal;
                score_grad[[i, c]] = p * (self_term - marginal_term) / n;
            }
        }
    }

    let two = F::cast(2.0);
    let weights = score_grad.t().dot(&data) - &model.weights.mapv(|w| two * model.lambda * w);
    let biases = score_grad.sum_axis(Axis(0));
    RimGradient { weights, biases }
}

/// Outcome of [`rim_fit`]: the compacted model (one row per surviving
/// cluster), the final labeling, and the accepted-step objective trace.
#[derive(Debug, Clone)]
pub struct RimFit<F: Float> {
    pub model: RimModel<F>,
    pub result: ClusteringResult<F>,
    pub objective_trace: Vec<F>,
}

const RIM_MAX_ITER: usize = 500;
const WARM_START_ITERS: usize = 10;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Fit the information-maximization clustering from an initial labeling
/// (typically an over-segmented k-means): a supervised multilogit warm
/// start transfers the initial partition into parameters, then gradient
/// ascent with backtracking line search maximizes the objective. Clusters
/// empty under the final argmax assignment are removed.
pub fn rim_fit<F: Float>(
    x: &FeatureMatrix<F>,
    init_labels: &LabelVector,
    lambda: F,
    seed: u64,
) -> Result<RimFit<F>> {
    init_labels.validate_alignment(x.item_ids())?;
    let init = init_labels.densified();
    let k = init.k();
    let dim = x.dim();
    let data = x.data().view();

    let mut weights: Array2<F> = Array2::zeros((k, dim));
    let mut biases: Array1<F> = Array1::zeros(k);

    // supervised warm start on the initial labels
    let targets = init.labels().to_vec();
    ascend(
        &mut weights,
        &mut biases,
        WARM_START_ITERS,
        None,
        |w, b| supervised_objective(w, b, data, &targets, lambda),
        |w, b| supervised_gradient(w, b, data, &targets, lambda),
    )?;

    let trace = {
        let obj = |w: &Array2<F>, b: &Array1<F>| {
            let m = RimModel {
                weights: w.clone(),
                biases: b.clone(),
                lambda,
            };
            objective_on(&m, data)
        };
        let grad = |w: &Array2<F>, b: &Array1<F>| {
            let m = RimModel {
                weights: w.clone(),
                biases: b.clone(),
                lambda,
            };
            let g = gradient_on(&m, data);
            (g.weights, g.biases)
        };
        ascend_traced(&mut weights, &mut biases, RIM_MAX_ITER, Some(1e-6), obj, grad)?
    };

    let full = RimModel::new(weights, biases, lambda)?;
    let posteriors = rim_posteriors(&full, data);
    let assignment: Vec<usize> = posteriors
        .outer_iter()
        .map(|row| argmax(row))
        .collect();
    let raw = LabelVector::new(assignment.clone(), k, x.item_ids().to_vec())?;
    let labels = raw.densified();
    let k_effective = labels.k();

    // compact the model to the surviving clusters, dense label order
    let mut weights = Array2::zeros((k_effective, dim));
    let mut biases = Array1::zeros(k_effective);
    let mut seen = vec![false; k];
    for (&orig, &dense) in assignment.iter().zip(labels.labels()) {
        if !seen[orig] {
            seen[orig] = true;
            weights.row_mut(dense).assign(&full.weights.row(orig));
            biases[dense] = full.biases[orig];
        }
    }
    let model = RimModel::new(weights, biases, lambda)?;
    let objective = objective_on(&model, data);

    Ok(RimFit {
        model,
        result: ClusteringResult {
            labels,
            k_effective,
            objective,
            method: ClusterMethod::Rim,
            seed,
        },
        objective_trace: trace,
    })
}

fn argmax<F: Float>(row: ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn supervised_objective<F: Float>(
    weights: &Array2<F>,
    biases: &Array1<F>,
    data: ArrayView2<'_, F>,
    targets: &[usize],
    lambda: F,
) -> F {
    let model = RimModel {
        weights: weights.clone(),
        biases: biases.clone(),
        lambda,
    };
    let posteriors = rim_posteriors(&model, data);
    let n = F::cast(data.nrows());
    let tiny = F::cast(1e-300);
    let ll: F = posteriors
        .outer_iter()
        .zip(targets)
        .map(|(row, &t)| row[t].max(tiny).ln())
        .sum();
    ll / n - penalty(&model)
}

fn supervised_gradient<F: Float>(
    weights: &Array2<F>,
    biases: &Array1<F>,
    data: ArrayView2<'_, F>,
    targets: &[usize],
    lambda: F,
) -> (Array2<F>, Array1<F>) {
    let model = RimModel {
        weights: weights.clone(),
        biases: biases.clone(),
        lambda,
    };
    let mut score_grad = rim_posteriors(&model, data);
    let n = F::cast(data.nrows());
    for (mut row, &t) in score_grad.rows_mut().into_iter().zip(targets) {
        row.mapv_inplace(|p| -p);
        row[t] += F::one();
    }
    score_grad.mapv_inplace(|v| v / n);
    let two = F::cast(2.0);
    let w_grad = score_grad.t().dot(&data) - &weights.mapv(|w| two * lambda * w);
    let b_grad = score_grad.sum_axis(Axis(0));
    (w_grad, b_grad)
}

fn ascend<F: Float>(
    weights: &mut Array2<F>,
    biases: &mut Array1<F>,
    max_iters: usize,
    rel_tol: Option<f64>,
    obj: impl Fn(&Array2<F>, &Array1<F>) -> F,
    grad: impl Fn(&Array2<F>, &Array1<F>) -> (Array2<F>, Array1<F>),
) -> Result<()> {
    ascend_traced(weights, biases, max_iters, rel_tol, obj, grad).map(|_| ())
}

/// Steepest ascent with a halving (Armijo) line search. Returns the
/// objective after every accepted step; the sequence is non-decreasing.
fn ascend_traced<F: Float>(
    weights: &mut Array2<F>,
    biases: &mut Array1<F>,
    max_iters: usize,
    rel_tol: Option<f64>,
    obj: impl Fn(&Array2<F>, &Array1<F>) -> F,
    grad: impl Fn(&Array2<F>, &Array1<F>) -> (Array2<F>, Array1<F>),
) -> Result<Vec<F>> {
    let mut trace = Vec::new();
    let mut current = obj(weights, biases);
    if !current.is_finite() {
        return Err(Error::Numerical {
            iteration: 0,
            message: format!("objective is {current} at initialization"),
        });
    }
    let mut step = 1.0f64;
    for iter in 0..max_iters {
        let (gw, gb) = grad(weights, biases);
        let g_norm2 = gw.iter().map(|&v| v * v).sum::<F>() + gb.iter().map(|&v| v * v).sum::<F>();
        if g_norm2 == F::zero() {
            break;
        }

        let mut accepted = false;
        let mut alpha = (step * 2.0).min(1e6);
        for _ in 0..MAX_HALVINGS {
            let a = F::cast(alpha);
            let cand_w = &*weights + &gw.mapv(|v| v * a);
            let cand_b = &*biases + &gb.mapv(|v| v * a);
            let cand = obj(&cand_w, &cand_b);
            if cand.is_nan() {
                return Err(Error::Numerical {
                    iteration: iter,
                    message: "objective became NaN during line search".into(),
                });
            }
            if cand >= current + F::cast(ARMIJO_C * alpha) * g_norm2 {
                *weights = cand_w;
                *biases = cand_b;
                let previous = current;
                current = cand;
                trace.push(current);
                step = alpha;
                accepted = true;
                if let Some(tol) = rel_tol {
                    let change = (current - previous).abs().as_f64();
                    if change <= tol * (1.0 + previous.abs().as_f64()) {
                        return Ok(trace);
                    }
                }
                break;
            }
            alpha /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(trace)
}
