//! Hierarchical category relationships: symmetric confusion affinities
//! between classes, exemplar clustering of the affinity matrix by message
//! passing, and the recursive merge into a category tree whose every level
//! is reconstructible from the level-0 classifier scores.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::metrics::mean_class_scores;
use crate::types::LabelVector;

/// Symmetric class-affinity matrix with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<F: Float> {
    values: Array2<F>,
}

impl<F: Float> AffinityMatrix<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::DimMismatch {
                expected: r,
                actual: c,
            });
        }
        let tol = F::cast(1e-12);
        for i in 0..r {
            for j in 0..r {
                let v = values[[i, j]];
                if (v - values[[j, i]]).abs() > tol {
                    return Err(Error::invalid(format!(
                        "affinity not symmetric at ({i}, {j})"
                    )));
                }
                if v < -tol || v > F::one() + tol {
                    return Err(Error::invalid(format!(
                        "affinity {v} at ({i}, {j}) outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }
}

/// Symmetrized confusion affinity from a mean class-score matrix whose
/// entry `(i, j)` is the mean probability of class `j` over items of true
/// class `i`: the affinity is the average of the two conditional scores.
pub fn class_affinity<F: Float>(class_scores: ArrayView2<'_, F>) -> Result<AffinityMatrix<F>> {
    let (r, c) = class_scores.dim();
    if r != c {
        return Err(Error::DimMismatch {
            expected: r,
            actual: c,
        });
    }
    let half = F::cast(0.5);
    let mut a = Array2::zeros((r, r));
    for i in 0..r {
        for j in 0..r {
            a[[i, j]] = half * (class_scores[[j, i]] + class_scores[[i, j]]);
        }
    }
    AffinityMatrix::new(a)
}

/// How exemplar preferences are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Preference<F: Float> {
    /// Median of the off-diagonal similarities (the parameter-free choice).
    Median,
    Value(F),
    PerPoint(Vec<F>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApOptions<F: Float> {
    pub preference: Preference<F>,
    pub damping: F,
    pub max_iter: usize,
}

impl<F: Float> Default for ApOptions<F> {
    fn default() -> Self {
        Self {
            preference: Preference::Median,
            damping: F::cast(0.5),
            max_iter: 500,
        }
    }
}

/// Exemplar assignment returned by the message passing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApOutcome {
    /// Indices of the exemplar points, ascending.
    pub exemplars: Vec<usize>,
    /// Exemplar index each point is assigned to; exemplars map to themselves.
    pub assignment: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

const AP_CONVERGENCE_ITER: usize = 15;

/// Exemplar clustering of a similarity matrix by damped responsibility and
/// availability updates. Converges when the exemplar set is unchanged for
/// 15 consecutive iterations; hitting `max_iter` first returns the current
/// assignment with `converged = false`.
pub fn affinity_propagation<F: Float>(
    similarity: ArrayView2<'_, F>,
    options: &ApOptions<F>,
) -> Result<ApOutcome> {
    let k = similarity.nrows();
    if similarity.ncols() != k {
        return Err(Error::DimMismatch {
            expected: k,
            actual: similarity.ncols(),
        });
    }
    if k < 2 {
        return Err(Error::invalid("need at least two points to cluster"));
    }
    let half = F::cast(0.5);
    if options.damping < half || options.damping >= F::one() {
        return Err(Error::invalid(format!(
            "damping {} outside [0.5, 1)",
            options.damping
        )));
    }

    let preferences: Vec<F> = match &options.preference {
        Preference::Value(v) => vec![*v; k],
        Preference::PerPoint(p) => {
            if p.len() != k {
                return Err(Error::DimMismatch {
                    expected: k,
                    actual: p.len(),
                });
            }
            p.clone()
        }
        Preference::Median => {
            let mut off: Vec<F> = (0..k)
                .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| similarity[[i, j]])
                .collect();
            off.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let mid = off.len() / 2;
            let median = if off.len() % 2 == 1 {
                off[mid]
            } else {
                (off[mid - 1] + off[mid]) * half
            };
            vec![median; k]
        }
    };

    // fully degenerate input: every off-diagonal similarity equals every
    // preference, so no configuration beats any other and no merge signal
    // exists; every point stays its own exemplar
    let off: Vec<F> = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| similarity[[i, j]]))
        .collect();
    let degenerate = off.windows(2).all(|w| w[0] == w[1])
        && preferences.iter().all(|&p| p == off[0]);
    if degenerate {
        return Ok(ApOutcome {
            exemplars: (0..k).collect(),
            assignment: (0..k).collect(),
            converged: true,
            iterations: 0,
        });
    }

    // working similarity with preferences on the diagonal, plus a fixed
    // deterministic perturbation that breaks exchangeable-point symmetry
    // (otherwise symmetric pairs settle exactly on the exemplar boundary)
    let mut s = similarity.to_owned();
    for (i, &p) in preferences.iter().enumerate() {
        s[[i, i]] = p;
    }
    let mut tie_rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let eps = F::epsilon();
    let tiny = F::cast(1e-300);
    for v in s.iter_mut() {
        let noise: f64 = rand::Rng::sample(&mut tie_rng, rand_distr::StandardNormal);
        *v += (eps * v.abs() + tiny) * F::cast(noise);
    }

    let damp = options.damping;
    let keep = F::one() - damp;
    let mut resp: Array2<F> = Array2::zeros((k, k));
    let mut avail: Array2<F> = Array2::zeros((k, k));
    let mut stable_for = 0usize;
    let mut last_exemplars: Vec<usize> = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;

    let exemplar_set = |resp: &Array2<F>, avail: &Array2<F>| -> Vec<usize> {
        (0..k)
            .filter(|&i| resp[[i, i]] + avail[[i, i]] > F::zero())
            .collect()
    };

    for iter in 0..options.max_iter {
        iterations = iter + 1;

        // responsibilities: subtract the best competing availability+similarity
        for i in 0..k {
            let mut best = F::neg_infinity();
            let mut second = F::neg_infinity();
            let mut best_at = 0;
            for j in 0..k {
                let v = avail[[i, j]] + s[[i, j]];
                if v > best {
                    second = best;
                    best = v;
                    best_at = j;
                } else if v > second {
                    second = v;
                }
            }
            for j in 0..k {
                let competitor = if j == best_at { second } else { best };
                let new = s[[i, j]] - competitor;
                resp[[i, j]] = damp * resp[[i, j]] + keep * new;
            }
        }

        // availabilities from the positive responsibility mass per column
        for j in 0..k {
            let mut positive_total = F::zero();
            for i in 0..k {
                if i != j {
                    positive_total += resp[[i, j]].max(F::zero());
                }
            }
            for i in 0..k {
                let new = if i == j {
                    positive_total
                } else {
                    let without_i = positive_total - resp[[i, j]].max(F::zero());
                    (resp[[j, j]] + without_i).min(F::zero())
                };
                avail[[i, j]] = damp * avail[[i, j]] + keep * new;
            }
        }

        let exemplars = exemplar_set(&resp, &avail);
        if exemplars == last_exemplars {
            stable_for += 1;
            if stable_for >= AP_CONVERGENCE_ITER {
                converged = true;
                break;
            }
        } else {
            stable_for = 0;
            last_exemplars = exemplars;
        }
    }
    if !converged {
        log::warn!("affinity propagation hit max_iter without a stable exemplar set");
    }

    let mut exemplars = exemplar_set(&resp, &avail);
    if exemplars.is_empty() {
        // degenerate boundary case: fall back to the strongest candidate
        let best = (0..k)
            .max_by(|&a, &b| {
                let va = resp[[a, a]] + avail[[a, a]];
                let vb = resp[[b, b]] + avail[[b, b]];
                va.partial_cmp(&vb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .expect("k >= 2");
        exemplars = vec![best];
    }

    let assignment: Vec<usize> = (0..k)
        .map(|i| {
            if exemplars.contains(&i) {
                return i;
            }
            let mut best = exemplars[0];
            let mut best_sim = similarity[[i, exemplars[0]]];
            for &e in &exemplars[1..] {
                if similarity[[i, e]] > best_sim {
                    best_sim = similarity[[i, e]];
                    best = e;
                }
            }
            best
        })
        .collect();

    Ok(ApOutcome {
        exemplars,
        assignment,
        converged,
        iterations,
    })
}

/// One node of a tree level: which previous-level nodes merged into it,
/// which of them acts as the exemplar, and the original level-0 classes
/// underneath it.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TreeNode {
    pub node_id: usize,
    /// Previous-level node ids merged into this node.
    pub members: Vec<usize>,
    /// Previous-level node id of the exemplar.
    pub exemplar: usize,
    pub original_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeLevel<F: Float> {
    pub nodes: Vec<TreeNode>,
    pub affinity: AffinityMatrix<F>,
}

/// Multi-level merge of discovered classes. Level 0 holds the original
/// classes; every further level partitions the previous one and strictly
/// shrinks until nothing merges, a single node remains, or `max_levels` is
/// reached.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTree<F: Float> {
    pub levels: Vec<TreeLevel<F>>,
}

impl<F: Float> CategoryTree<F> {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "levels": self
                .levels
                .iter()
                .map(|level| {
                    let affinity: Vec<Vec<f64>> = level
                        .affinity
                        .values()
                        .outer_iter()
                        .map(|row| row.iter().map(|v| v.as_f64()).collect())
                        .collect();
                    serde_json::json!({
                        "nodes": level.nodes,
                        "affinity": affinity,
                    })
                })
                .collect::<Vec<_>>(),
        })
    }
}

/// Mean summed base score of one node's classes over another node's items:
/// the conditional confusion mass between merged nodes, evaluated directly
/// on the level-0 scores.
fn merged_conditional<F: Float>(
    proba: ArrayView2<'_, F>,
    truth: &LabelVector,
    of_classes: &[usize],
    given_classes: &[usize],
) -> F {
    let mut in_given = vec![false; truth.k()];
    for &c in given_classes {
        in_given[c] = true;
    }
    let mut total = F::zero();
    let mut count = 0usize;
    for (row, &label) in proba.outer_iter().zip(truth.labels()) {
        if in_given[label] {
            count += 1;
            for &c in of_classes {
                total += row[c];
            }
        }
    }
    if count == 0 {
        F::zero()
    } else {
        total / F::cast(count)
    }
}

fn merged_affinity<F: Float>(
    proba: ArrayView2<'_, F>,
    truth: &LabelVector,
    class_sets: &[Vec<usize>],
) -> Result<AffinityMatrix<F>> {
    let n = class_sets.len();
    let half = F::cast(0.5);
    let mut a = Array2::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            let p_uv = merged_conditional(proba, truth, &class_sets[u], &class_sets[v]);
            let p_vu = merged_conditional(proba, truth, &class_sets[v], &class_sets[u]);
            a[[u, v]] = half * (p_uv + p_vu);
        }
    }
    AffinityMatrix::new(a)
}

/// Build the category tree from classifier probabilities and true class
/// labels: level-0 affinities come from the mean class scores, every next
/// level runs the exemplar clustering on the current affinity matrix, and
/// merged affinities are recomputed from the level-0 scores so any level
/// can be reproduced from them.
pub fn build_category_tree<F: Float>(
    proba: ArrayView2<'_, F>,
    truth: &LabelVector,
    max_levels: usize,
    options: &ApOptions<F>,
) -> Result<CategoryTree<F>> {
    let scores = mean_class_scores(proba, truth)?;
    let k = truth.k();
    let level0 = TreeLevel {
        nodes: (0..k)
            .map(|c| TreeNode {
                node_id: c,
                members: vec![c],
                exemplar: c,
                original_classes: vec![c],
            })
            .collect(),
        affinity: class_affinity(scores.view())?,
    };
    let mut levels = vec![level0];

    while levels.len() < max_levels.max(1) {
        let current = levels.last().expect("at least level 0");
        let size = current.nodes.len();
        if size < 2 {
            break;
        }
        let outcome = affinity_propagation(current.affinity.values().view(), options)?;
        // group previous-level nodes by exemplar, ascending
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> =
            std::collections::BTreeMap::new();
        for (node, &exemplar) in outcome.assignment.iter().enumerate() {
            groups.entry(exemplar).or_default().push(node);
        }
        if groups.len() == size {
            break; // nothing merged
        }
        let nodes: Vec<TreeNode> = groups
            .iter()
            .enumerate()
            .map(|(node_id, (&exemplar, members))| {
                let mut original: Vec<usize> = members
                    .iter()
                    .flat_map(|&m| current.nodes[m].original_classes.iter().copied())
                    .collect();
                original.sort_unstable();
                TreeNode {
                    node_id,
                    members: members.clone(),
                    exemplar,
                    original_classes: original,
                }
            })
            .collect();
        let class_sets: Vec<Vec<usize>> =
            nodes.iter().map(|n| n.original_classes.clone()).collect();
        let affinity = merged_affinity(proba, truth, &class_sets)?;
        let done = nodes.len() == 1;
        levels.push(TreeLevel { nodes, affinity });
        if done {
            break;
        }
    }
    Ok(CategoryTree { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn lv(labels: Vec<usize>, k: usize) -> LabelVector {
        let ids = (0..labels.len()).map(|i| format!("i{i}")).collect();
        LabelVector::new(labels, k, ids).unwrap()
    }

    #[test]
    fn class_affinity_identity_scores() {
        let scores: Array2<f64> = Array2::eye(3);
        let a = class_affinity(scores.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(a.values()[[i, j]], expected);
            }
        }
    }

    #[test]
    fn class_affinity_uniform_scores() {
        let scores = Array2::from_elem((4, 4), 0.25f64);
        let a = class_affinity(scores.view()).unwrap();
        assert!(a.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn class_affinity_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        // random mean-score matrix with simplex rows
        let mut scores = Array2::<f64>::zeros((k, k));
        for mut row in scores.rows_mut() {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for (j, v) in raw.iter().enumerate() {
                row[j] = v / z;
            }
        }
        let a = class_affinity(scores.view()).unwrap();
        for i in 0..k {
            for j in 0..k {
                let expected = 0.5 * (scores[[j, i]] + scores[[i, j]]);
                assert!((a.values()[[i, j]] - expected).abs() < 1e-12);
                assert!((a.values()[[i, j]] - a.values()[[j, i]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ap_separates_two_similarity_blocks() {
        let s = array![
            [0.0, 0.9, 0.1, 0.1],
            [0.9, 0.0, 0.1, 0.1],
            [0.1, 0.1, 0.0, 0.9],
            [0.1, 0.1, 0.9, 0.0],
        ];
        let outcome = affinity_propagation(s.view(), &ApOptions::default()).unwrap();
        assert!(outcome.converged);
        assert_eq!(outcome.exemplars.len(), 2);
        assert_eq!(outcome.assignment[0], outcome.assignment[1]);
        assert_eq!(outcome.assignment[2], outcome.assignment[3]);
        assert_ne!(outcome.assignment[0], outcome.assignment[2]);
    }

    #[test]
    fn ap_two_points_with_low_preference_share_one_exemplar() {
        let s = array![[0.0, 0.9], [0.9, 0.0]];
        let outcome = affinity_propagation(
            s.view(),
            &ApOptions {
                preference: Preference::Value(-5.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(outcome.exemplars.len(), 1);
        assert!(outcome.assignment.iter().all(|&a| a == outcome.exemplars[0]));
    }

    #[test]
    fn ap_identity_affinity_keeps_singletons() {
        let a: Array2<f64> = Array2::eye(4);
        let outcome = affinity_propagation(a.view(), &ApOptions::default()).unwrap();
        assert_eq!(outcome.exemplars, vec![0, 1, 2, 3]);
    }

    fn net_similarity(s: &Array2<f64>, prefs: &[f64], exemplars: &[usize], assignment: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &e) in assignment.iter().enumerate() {
            if exemplars.contains(&i) {
                total += prefs[i];
            } else {
                total += s[[i, e]];
            }
        }
        total
    }

    /// Exhaustive search over all non-empty exemplar subsets.
    fn best_configuration(s: &Array2<f64>, prefs: &[f64]) -> f64 {
        let k = s.nrows();
        let mut best = f64::NEG_INFINITY;
        for mask in 1u32..(1 << k) {
            let exemplars: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
            let mut total: f64 = exemplars.iter().map(|&e| prefs[e]).sum();
            for i in 0..k {
                if !exemplars.contains(&i) {
                    total += exemplars
                        .iter()
                        .map(|&e| s[[i, e]])
                        .fold(f64::NEG_INFINITY, f64::max);
                }
            }
            best = best.max(total);
        }
        best
    }

    #[test]
    fn ap_matches_exhaustive_search_on_small_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut matches = 0;
        let trials = 50;
        for _ in 0..trials {
            let k = rng.random_range(3..=7);
            let mut s = Array2::<f64>::zeros((k, k));
            for i in 0..k {
                for j in (i + 1)..k {
                    let v: f64 = rng.random_range(0.0..1.0);
                    s[[i, j]] = v;
                    s[[j, i]] = v;
                }
            }
            let outcome = affinity_propagation(s.view(), &ApOptions::default()).unwrap();
            // reconstruct the median preference used
            let mut off: Vec<f64> = (0..k)
                .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| s[[i, j]])
                .collect();
            off.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = off.len() / 2;
            let median = if off.len() % 2 == 1 {
                off[mid]
            } else {
                0.5 * (off[mid - 1] + off[mid])
            };
            let prefs = vec![median; k];
            let got = net_similarity(&s, &prefs, &outcome.exemplars, &outcome.assignment);
            let best = best_configuration(&s, &prefs);
            if (got - best).abs() < 1e-9 {
                matches += 1;
            }
        }
        assert!(
            matches * 10 >= trials * 9,
            "only {matches}/{trials} optimal configurations"
        );
    }

    #[test]
    fn ap_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 6;
        let mut s = Array2::<f64>::zeros((k, k));
        for i in 0..k {
            for j in (i + 1)..k {
                let v: f64 = rng.random_range(0.0..1.0);
                s[[i, j]] = v;
                s[[j, i]] = v;
            }
        }
        let a = affinity_propagation(s.view(), &ApOptions::default()).unwrap();
        let b = affinity_propagation(s.view(), &ApOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    /// Probability rows for the two-pair block-confusion fixture.
    fn block_confusion_fixture(per_class: usize) -> (Array2<f64>, LabelVector) {
        let k = 4;
        let n = per_class * k;
        let mut proba = Array2::<f64>::zeros((n, k));
        let mut labels = Vec::with_capacity(n);
        for c in 0..k {
            let partner = c ^ 1; // 0<->1, 2<->3
            for i in 0..per_class {
                let row = c * per_class + i;
                labels.push(c);
                for j in 0..k {
                    proba[[row, j]] = if j == c || j == partner { 0.45 } else { 0.05 };
                }
            }
        }
        (proba, lv(labels, k))
    }

    #[test]
    fn tree_perfect_classifier_does_not_merge() {
        let k = 4;
        let per = 5;
        let mut proba = Array2::<f64>::zeros((per * k, k));
        let mut labels = Vec::new();
        for c in 0..k {
            for i in 0..per {
                proba[[c * per + i, c]] = 1.0;
                labels.push(c);
            }
        }
        let truth = lv(labels, k);
        let tree =
            build_category_tree(proba.view(), &truth, 5, &ApOptions::default()).unwrap();
        assert_eq!(tree.levels.len(), 1, "nothing merges under zero confusion");
        assert_eq!(tree.levels[0].nodes.len(), k);
    }

    #[test]
    fn tree_block_confusion_merges_the_planted_pairs() {
        let (proba, truth) = block_confusion_fixture(6);
        let tree =
            build_category_tree(proba.view(), &truth, 5, &ApOptions::default()).unwrap();
        assert!(tree.levels.len() >= 2, "expected at least one merge level");
        let level1 = &tree.levels[1];
        assert_eq!(level1.nodes.len(), 2);
        let sets: Vec<Vec<usize>> = level1
            .nodes
            .iter()
            .map(|n| n.original_classes.clone())
            .collect();
        assert!(sets.contains(&vec![0, 1]));
        assert!(sets.contains(&vec![2, 3]));

        // scalar recomputation of the level-1 affinity from level-0 scores
        let a = level1.affinity.values();
        // P(pair01 | pair23) = mean over items of classes {2,3} of p(0)+p(1)
        let expected_cross = 0.05 + 0.05;
        let expected_self = 0.45 + 0.45;
        assert!((a[[0, 1]] - expected_cross).abs() < 1e-12);
        assert!((a[[0, 0]] - expected_self).abs() < 1e-12);
    }

    #[test]
    fn tree_levels_partition_original_classes() {
        let (proba, truth) = block_confusion_fixture(4);
        let tree =
            build_category_tree(proba.view(), &truth, 6, &ApOptions::default()).unwrap();
        for level in &tree.levels {
            let mut seen: Vec<usize> = level
                .nodes
                .iter()
                .flat_map(|n| n.original_classes.iter().copied())
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3]);
        }
        // sizes strictly decrease after level 0
        for pair in tree.levels.windows(2) {
            assert!(pair[1].nodes.len() < pair[0].nodes.len());
        }
    }

    /// Scalar oracle: recompute a level's affinity straight from the
    /// level-0 scores.
    fn merged_affinity_oracle(
        proba: &Array2<f64>,
        truth: &LabelVector,
        sets: &[Vec<usize>],
    ) -> Array2<f64> {
        let n = sets.len();
        let mut a = Array2::<f64>::zeros((n, n));
        let conditional = |of: &[usize], given: &[usize]| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            for (row, &label) in proba.outer_iter().zip(truth.labels()) {
                if given.contains(&label) {
                    count += 1;
                    for &c in of {
                        total += row[c];
                    }
                }
            }
            total / count as f64
        };
        for u in 0..n {
            for v in 0..n {
                a[[u, v]] = 0.5 * (conditional(&sets[u], &sets[v]) + conditional(&sets[v], &sets[u]));
            }
        }
        a
    }

    #[test]
    fn tree_affinities_reproducible_from_level_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 6;
        let per = 8;
        let n = k * per;
        let mut proba = Array2::<f64>::zeros((n, k));
        let mut labels = Vec::new();
        for c in 0..k {
            for i in 0..per {
                let row = c * per + i;
                labels.push(c);
                // confused within pairs, with noise
                let partner = c ^ 1;
                let mut raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.1)).collect();
                raw[c] += 0.5;
                raw[partner] += 0.3;
                let z: f64 = raw.iter().sum();
                for j in 0..k {
                    proba[[row, j]] = raw[j] / z;
                }
            }
        }
        let truth = lv(labels, k);
        let tree =
            build_category_tree(proba.view(), &truth, 6, &ApOptions::default()).unwrap();
        for level in &tree.levels[1..] {
            let sets: Vec<Vec<usize>> = level
                .nodes
                .iter()
                .map(|n| n.original_classes.clone())
                .collect();
            let expected = merged_affinity_oracle(&proba, &truth, &sets);
            for (got, want) in level.affinity.values().iter().zip(expected.iter()) {
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn tree_serializes_to_json() {
        let (proba, truth) = block_confusion_fixture(3);
        let tree =
            build_category_tree(proba.view(), &truth, 4, &ApOptions::default()).unwrap();
        let json = tree.to_json();
        let levels = json["levels"].as_array().unwrap();
        assert_eq!(levels.len(), tree.levels.len());
        assert!(levels[0]["nodes"][0]["members"].is_array());
        assert!(levels[0]["affinity"][0][0].is_number());
    }
}
