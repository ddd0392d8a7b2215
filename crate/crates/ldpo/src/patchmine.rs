//! Mid-level element discovery: top-activation transactions, frequent
//! pattern mining per image cluster, whitened linear patch detectors,
//! global merging of equivalent patterns, and bag-of-elements encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::io::{
    open_reader, open_writer, read_container_header, write_container_header, ContainerTag,
};
use crate::linalg::solve_spd;
use crate::types::{FeatureMatrix, ImagePatches, LabelVector, PatchActivationSet};

/// One patch of one image, identified stably across the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatchRef {
    pub image_id: String,
    pub patch_index: usize,
}

/// The indices of the `k_top` strongest activation components of one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub image_id: String,
    pub patch_index: usize,
    /// Strictly increasing activation indices, exactly `k_top` of them.
    pub items: Vec<usize>,
}

/// A frequent itemset together with the patches whose transactions contain
/// it. `support_count` always equals the covered-set size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub itemset: Vec<usize>,
    pub support_count: usize,
    pub covered: BTreeSet<PatchRef>,
}

/// Linear detector from whitened mean differences.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaDetector<F: Float> {
    pub weight: Array1<F>,
    pub bias: F,
}

impl<F: Float> LdaDetector<F> {
    pub fn response(&self, x: ArrayView1<'_, F>) -> F {
        self.weight.dot(&x) + self.bias
    }
}

/// One transaction per patch: the indices of the `k_top` largest activation
/// components, ties broken toward the lower index.
pub fn build_transactions<F: Float>(
    patches: &PatchActivationSet<F>,
    k_top: usize,
) -> Result<Vec<Transaction>> {
    if k_top == 0 || k_top > patches.dim() {
        return Err(Error::invalid(format!(
            "k_top = {k_top} outside [1, dim = {}]",
            patches.dim()
        )));
    }
    let mut out = Vec::with_capacity(patches.total_patches());
    for image in patches.images() {
        for (patch_index, patch) in image.patches.iter().enumerate() {
            let mut idx: Vec<usize> = (0..patch.activation.len()).collect();
            idx.sort_by(|&a, &b| {
                patch.activation[b]
                    .partial_cmp(&patch.activation[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut items: Vec<usize> = idx[..k_top].to_vec();
            items.sort_unstable();
            out.push(Transaction {
                image_id: image.image_id.clone(),
                patch_index,
                items,
            });
        }
    }
    Ok(out)
}

fn is_subset(needle: &[usize], haystack: &[usize]) -> bool {
    let mut it = haystack.iter();
    'outer: for want in needle {
        for have in it.by_ref() {
            match have.cmp(want) {
                std::cmp::Ordering::Equal => continue 'outer,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Less => {}
            }
        }
        return false;
    }
    true
}

fn frequent(count: usize, n_transactions: usize, min_support: f64) -> bool {
    count as f64 / n_transactions as f64 >= min_support
}

/// Exact frequent itemsets of length in `[min_len, max_len]` with support
/// fraction at least `min_support`, by levelwise candidate generation.
/// Output is ordered by descending support, then lexicographic itemset.
pub fn mine_frequent_patterns(
    transactions: &[Transaction],
    min_support: f64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Pattern>> {
    if transactions.is_empty() {
        return Err(Error::invalid("cannot mine an empty transaction list"));
    }
    if !(min_support > 0.0 && min_support <= 1.0) {
        return Err(Error::invalid(format!(
            "min_support = {min_support} outside (0, 1]"
        )));
    }
    if min_len == 0 || max_len < min_len {
        return Err(Error::invalid(format!(
            "bad itemset length range [{min_len}, {max_len}]"
        )));
    }
    let n = transactions.len();

    // level 1
    let mut singleton_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in transactions {
        for &item in &t.items {
            *singleton_counts.entry(item).or_insert(0) += 1;
        }
    }
    let mut level: Vec<Vec<usize>> = singleton_counts
        .iter()
        .filter(|(_, &c)| frequent(c, n, min_support))
        .map(|(&item, _)| vec![item])
        .collect();

    let mut patterns: Vec<Pattern> = Vec::new();
    let mut collect = |patterns: &mut Vec<Pattern>, itemsets: &[Vec<usize>], counts: &[usize], len: usize| {
        if len < min_len || len > max_len {
            return;
        }
        for (itemset, &count) in itemsets.iter().zip(counts) {
            let covered: BTreeSet<PatchRef> = transactions
                .iter()
                .filter(|t| is_subset(itemset, &t.items))
                .map(|t| PatchRef {
                    image_id: t.image_id.clone(),
                    patch_index: t.patch_index,
                })
                .collect();
            debug_assert_eq!(covered.len(), count);
            patterns.push(Pattern {
                itemset: itemset.clone(),
                support_count: count,
                covered,
            });
        }
    };

    let counts: Vec<usize> = level.iter().map(|s| singleton_counts[&s[0]]).collect();
    collect(&mut patterns, &level, &counts, 1);

    let mut length = 1;
    while length < max_len && !level.is_empty() {
        length += 1;
        let frequent_prev: BTreeSet<&[usize]> = level.iter().map(|s| s.as_slice()).collect();
        // prefix join, then prune candidates with an infrequent subset
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        for i in 0..level.len() {
            for j in (i + 1)..level.len() {
                let (a, b) = (&level[i], &level[j]);
                if a[..length - 2] != b[..length - 2] {
                    break;
                }
                let mut cand = a.clone();
                cand.push(b[length - 2]);
                let all_subsets_frequent = (0..cand.len().saturating_sub(2)).all(|drop| {
                    let mut sub = cand.clone();
                    sub.remove(drop);
                    frequent_prev.contains(sub.as_slice())
                });
                if all_subsets_frequent {
                    candidates.push(cand);
                }
            }
        }
        let mut counts = vec![0usize; candidates.len()];
        for t in transactions {
            for (ci, cand) in candidates.iter().enumerate() {
                if is_subset(cand, &t.items) {
                    counts[ci] += 1;
                }
            }
        }
        let kept: Vec<(Vec<usize>, usize)> = candidates
            .into_iter()
            .zip(counts)
            .filter(|&(_, c)| frequent(c, n, min_support))
            .collect();
        level = kept.iter().map(|(s, _)| s.clone()).collect();
        let kept_counts: Vec<usize> = kept.iter().map(|&(_, c)| c).collect();
        collect(&mut patterns, &level, &kept_counts, length);
    }

    patterns.sort_by(|a, b| {
        b.support_count
            .cmp(&a.support_count)
            .then_with(|| a.itemset.cmp(&b.itemset))
    });
    Ok(patterns)
}

/// Greedy maximum-coverage selection: repeatedly pick the pattern covering
/// the most not-yet-covered patches, up to `per_cluster` picks. Ties prefer
/// higher support, then longer (more specific) itemsets, then lexicographic
/// order.
pub fn select_top_patterns(patterns: &[Pattern], per_cluster: usize) -> Vec<Pattern> {
    let mut remaining: Vec<&Pattern> = patterns.iter().collect();
    let mut covered: BTreeSet<&PatchRef> = BTreeSet::new();
    let mut picked = Vec::new();
    while picked.len() < per_cluster && !remaining.is_empty() {
        let (best_idx, _) = remaining
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                let gain_a = a.covered.iter().filter(|p| !covered.contains(p)).count();
                let gain_b = b.covered.iter().filter(|p| !covered.contains(p)).count();
                gain_a
                    .cmp(&gain_b)
                    .then(a.support_count.cmp(&b.support_count))
                    .then(a.itemset.len().cmp(&b.itemset.len()))
                    .then_with(|| b.itemset.cmp(&a.itemset))
            })
            .map(|(i, p)| (i, *p))
            .expect("remaining non-empty");
        let chosen = remaining.remove(best_idx);
        covered.extend(chosen.covered.iter());
        picked.push(chosen.clone());
    }
    picked
}

/// Mean and covariance of all patch activations in the dataset; the
/// whitening statistics shared by every detector of one iteration.
#[derive(Debug, Clone)]
pub struct BackgroundStats<F: Float> {
    pub mean: Array1<F>,
    pub covariance: Array2<F>,
}

pub fn compute_background<F: Float>(
    patches: &PatchActivationSet<F>,
) -> Result<BackgroundStats<F>> {
    let n = patches.total_patches();
    if n < 2 {
        return Err(Error::invalid("need at least two patches for statistics"));
    }
    let data = patches.pooled_matrix();
    let mean = data.sum_axis(ndarray::Axis(0)) / F::cast(n);
    let mut centered = data;
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let covariance = centered.t().dot(&centered) / F::cast(n);
    Ok(BackgroundStats { mean, covariance })
}

/// Whitened mean-difference detector: the ridged background covariance is
/// inverted against the positive-minus-background mean, and the bias is set
/// so the mean response on the positives is +1.
pub fn train_lda_detector<F: Float>(
    positive: ArrayView2<'_, F>,
    background_mean: ArrayView1<'_, F>,
    background_cov: ArrayView2<'_, F>,
) -> Result<LdaDetector<F>> {
    let n = positive.nrows();
    let d = positive.ncols();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least two positive patches, got {n}"
        )));
    }
    if background_mean.len() != d || background_cov.nrows() != d || background_cov.ncols() != d {
        return Err(Error::DimMismatch {
            expected: d,
            actual: background_mean.len(),
        });
    }
    let trace: F = (0..d).map(|j| background_cov[[j, j]]).sum();
    let ridge = F::cast(1e-3) * trace / F::cast(d);
    let mut a = background_cov.to_owned();
    for j in 0..d {
        a[[j, j]] += ridge;
    }
    let pos_mean = positive.sum_axis(ndarray::Axis(0)) / F::cast(n);
    let rhs = &pos_mean - &background_mean;
    let weight = solve_spd(&a, &rhs)
        .map_err(|_| Error::invalid("background covariance singular even after ridge"))?;
    let bias = F::one() - weight.dot(&pos_mean);
    Ok(LdaDetector { weight, bias })
}

/// Mean raw detector response (bias excluded) over a set of patch vectors.
pub fn cross_score<F: Float>(
    detector: &LdaDetector<F>,
    patch_vectors: ArrayView2<'_, F>,
) -> Result<F> {
    let n = patch_vectors.nrows();
    if n == 0 {
        return Err(Error::invalid("cross score of an empty patch set"));
    }
    if patch_vectors.ncols() != detector.weight.len() {
        return Err(Error::DimMismatch {
            expected: detector.weight.len(),
            actual: patch_vectors.ncols(),
        });
    }
    let total: F = patch_vectors
        .outer_iter()
        .map(|row| detector.weight.dot(&row))
        .sum();
    Ok(total / F::cast(n))
}

/// One per-cluster pattern entering the global merge.
#[derive(Debug, Clone)]
pub struct CandidateElement<F: Float> {
    pub pattern: Pattern,
    pub detector: LdaDetector<F>,
    pub cluster: usize,
}

/// A merged pattern with its detector and the clusters that contributed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Element<F: Float> {
    pub pattern: Pattern,
    pub detector: LdaDetector<F>,
    pub provenance: Vec<usize>,
}

/// The merged vocabulary of mid-level elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementVocabulary<F: Float> {
    pub elements: Vec<Element<F>>,
}

/// Pairwise merge criterion for the cross-score matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MergeThreshold<F: Float> {
    /// Merge when both cross scores exceed `factor * min(S_ii, S_jj)`.
    RelativeToSelf(F),
    /// Merge when both cross scores exceed a fixed value.
    Absolute(F),
}

impl<F: Float> Default for MergeThreshold<F> {
    fn default() -> Self {
        MergeThreshold::RelativeToSelf(F::cast(0.5))
    }
}

struct PatchLookup<'a, F: Float> {
    set: &'a PatchActivationSet<F>,
    by_id: HashMap<&'a str, usize>,
}

impl<'a, F: Float> PatchLookup<'a, F> {
    fn new(set: &'a PatchActivationSet<F>) -> Self {
        let by_id = set
            .images()
            .iter()
            .enumerate()
            .map(|(i, im)| (im.image_id.as_str(), i))
            .collect();
        Self { set, by_id }
    }

    fn rows(&self, refs: &BTreeSet<PatchRef>) -> Result<Array2<F>> {
        let mut out = Array2::zeros((refs.len(), self.set.dim()));
        for (r, pref) in refs.iter().enumerate() {
            let &img = self
                .by_id
                .get(pref.image_id.as_str())
                .ok_or_else(|| Error::invalid(format!("unknown image id {:?}", pref.image_id)))?;
            let image = &self.set.images()[img];
            let patch = image.patches.get(pref.patch_index).ok_or_else(|| {
                Error::invalid(format!(
                    "patch {} out of range for image {:?}",
                    pref.patch_index, pref.image_id
                ))
            })?;
            out.row_mut(r).assign(&patch.activation);
        }
        Ok(out)
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let root = self.find(self.0[i]);
            self.0[i] = root;
        }
        self.0[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Merge the per-cluster pattern candidates across the whole dataset.
///
/// Every ordered pair gets a cross score; pairs whose scores both exceed
/// the threshold are merged, closed transitively, and each merged group
/// gets a detector retrained on the union of its patch sets. The pass
/// repeats until no pair qualifies, so the result is idempotent and no two
/// surviving elements are mutually mergeable.
pub fn merge_patterns_global<F: Float>(
    candidates: &[CandidateElement<F>],
    patches: &PatchActivationSet<F>,
    background: &BackgroundStats<F>,
    threshold: MergeThreshold<F>,
) -> Result<ElementVocabulary<F>> {
    let lookup = PatchLookup::new(patches);
    let mut elements: Vec<Element<F>> = candidates
        .iter()
        .map(|c| Element {
            pattern: c.pattern.clone(),
            detector: c.detector.clone(),
            provenance: vec![c.cluster],
        })
        .collect();

    loop {
        let n = elements.len();
        if n <= 1 {
            break;
        }
        let rows: Vec<Array2<F>> = elements
            .iter()
            .map(|e| lookup.rows(&e.pattern.covered))
            .collect::<Result<_>>()?;
        let mut scores = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                scores[[i, j]] = cross_score(&elements[i].detector, rows[j].view())?;
            }
        }
        let mut uf = UnionFind::new(n);
        let mut merged_any = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let tau = match threshold {
                    MergeThreshold::RelativeToSelf(factor) => {
                        factor * scores[[i, i]].min(scores[[j, j]])
                    }
                    MergeThreshold::Absolute(v) => v,
                };
                if scores[[i, j]] > tau && scores[[j, i]] > tau {
                    uf.union(i, j);
                    merged_any = true;
                }
            }
        }
        if !merged_any {
            break;
        }

        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            groups.entry(uf.find(i)).or_default().push(i);
        }
        let mut next = Vec::with_capacity(groups.len());
        for (_, members) in groups {
            if members.len() == 1 {
                next.push(elements[members[0]].clone());
                continue;
            }
            let mut covered = BTreeSet::new();
            let mut provenance = BTreeSet::new();
            for &m in &members {
                covered.extend(elements[m].pattern.covered.iter().cloned());
                provenance.extend(elements[m].provenance.iter().copied());
            }
            // keep the strongest member's itemset as the representative
            let rep = members
                .iter()
                .map(|&m| &elements[m].pattern)
                .max_by(|a, b| {
                    a.support_count
                        .cmp(&b.support_count)
                        .then_with(|| b.itemset.cmp(&a.itemset))
                })
                .expect("non-empty group");
            let union_rows = lookup.rows(&covered)?;
            let detector = train_lda_detector(
                union_rows.view(),
                background.mean.view(),
                background.covariance.view(),
            )?;
            next.push(Element {
                pattern: Pattern {
                    itemset: rep.itemset.clone(),
                    support_count: covered.len(),
                    covered,
                },
                detector,
                provenance: provenance.into_iter().collect(),
            });
        }
        elements = next;
    }

    Ok(ElementVocabulary { elements })
}

impl<F: Float> ElementVocabulary<F> {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Human-readable summary: itemsets, supports, and provenance.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_elements": self.len(),
            "elements": self
                .elements
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "itemset": e.pattern.itemset,
                        "support": e.pattern.support_count,
                        "provenance": e.provenance,
                    })
                })
                .collect::<Vec<_>>(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = open_writer(path)?;
        write_container_header(&mut w, ContainerTag::Vocabulary)?;
        let dim = self.elements.first().map_or(0, |e| e.detector.weight.len());
        w.write_u64(self.elements.len() as u64)?;
        w.write_u64(dim as u64)?;
        // image id table shared by all covered sets
        let mut ids = BTreeSet::new();
        for e in &self.elements {
            for p in &e.pattern.covered {
                ids.insert(p.image_id.clone());
            }
        }
        let ids: Vec<String> = ids.into_iter().collect();
        let index: HashMap<&str, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        w.write_u64(ids.len() as u64)?;
        for id in &ids {
            w.write_string(id)?;
        }
        for e in &self.elements {
            w.write_u16(e.pattern.itemset.len() as u16)?;
            for &item in &e.pattern.itemset {
                w.write_u32(item as u32)?;
            }
            w.write_u64(e.pattern.support_count as u64)?;
            w.write_u64(e.pattern.covered.len() as u64)?;
            for p in &e.pattern.covered {
                w.write_u32(index[p.image_id.as_str()])?;
                w.write_u32(p.patch_index as u32)?;
            }
            for v in e.detector.weight.iter() {
                w.write_f64(v.as_f64())?;
            }
            w.write_f64(e.detector.bias.as_f64())?;
            w.write_u16(e.provenance.len() as u16)?;
            for &c in &e.provenance {
                w.write_u32(c as u32)?;
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path)?;
        read_container_header(&mut r, ContainerTag::Vocabulary)?;
        let n = r.read_u64()? as usize;
        let dim = r.read_u64()? as usize;
        let n_ids = r.read_u64()? as usize;
        let mut ids = Vec::with_capacity(n_ids);
        for _ in 0..n_ids {
            ids.push(r.read_string()?);
        }
        let mut elements = Vec::with_capacity(n);
        for _ in 0..n {
            let itemset_len = r.read_u16()? as usize;
            let mut itemset = Vec::with_capacity(itemset_len);
            for _ in 0..itemset_len {
                itemset.push(r.read_u32()? as usize);
            }
            let support_count = r.read_u64()? as usize;
            let covered_len = r.read_u64()? as usize;
            let mut covered = BTreeSet::new();
            for _ in 0..covered_len {
                let img = r.read_u32()? as usize;
                let patch_index = r.read_u32()? as usize;
                let image_id = ids
                    .get(img)
                    .ok_or_else(|| r.bad(format!("image index {img} out of table")))?
                    .clone();
                covered.insert(PatchRef {
                    image_id,
                    patch_index,
                });
            }
            let mut weight = Array1::zeros(dim);
            for j in 0..dim {
                weight[j] = F::cast(r.read_f64()?);
            }
            let bias = F::cast(r.read_f64()?);
            let prov_len = r.read_u16()? as usize;
            let mut provenance = Vec::with_capacity(prov_len);
            for _ in 0..prov_len {
                provenance.push(r.read_u32()? as usize);
            }
            elements.push(Element {
                pattern: Pattern {
                    itemset,
                    support_count,
                    covered,
                },
                detector: LdaDetector { weight, bias },
                provenance,
            });
        }
        r.expect_end()?;
        Ok(Self { elements })
    }
}

/// Max-pooled detector responses over the image's patches, one component
/// per vocabulary element.
pub fn encode_bag_of_elements<F: Float>(
    image: &ImagePatches<F>,
    vocab: &ElementVocabulary<F>,
) -> Result<Array1<F>> {
    if vocab.is_empty() {
        return Err(Error::invalid("empty element vocabulary"));
    }
    if image.patches.is_empty() {
        return Err(Error::invalid(format!(
            "image {:?} has no patches",
            image.image_id
        )));
    }
    let mut out = Array1::zeros(vocab.len());
    for (n, element) in vocab.elements.iter().enumerate() {
        let mut best = F::neg_infinity();
        for patch in &image.patches {
            if patch.activation.len() != element.detector.weight.len() {
                return Err(Error::DimMismatch {
                    expected: element.detector.weight.len(),
                    actual: patch.activation.len(),
                });
            }
            best = best.max(element.detector.response(patch.activation.view()));
        }
        out[n] = best;
    }
    Ok(out)
}

/// Per-scale variant: responses max-pooled within each scale of `scales`
/// and concatenated (missing scales contribute zero blocks).
pub fn encode_bag_of_elements_per_scale<F: Float>(
    image: &ImagePatches<F>,
    vocab: &ElementVocabulary<F>,
    scales: &[F],
) -> Result<Array1<F>> {
    if vocab.is_empty() {
        return Err(Error::invalid("empty element vocabulary"));
    }
    if scales.is_empty() {
        return Err(Error::invalid("empty scale list"));
    }
    let mut out = Array1::zeros(vocab.len() * scales.len());
    for (s, &scale) in scales.iter().enumerate() {
        for (n, element) in vocab.elements.iter().enumerate() {
            let mut best = F::zero();
            let mut any = false;
            for patch in image.patches.iter().filter(|p| p.scale == scale) {
                let r = element.detector.response(patch.activation.view());
                if !any || r > best {
                    best = r;
                    any = true;
                }
            }
            out[s * vocab.len() + n] = best;
        }
    }
    Ok(out)
}

/// Evenly sized random image groups for the first iteration, before any
/// clustering exists.
pub fn random_groups(image_ids: &[String], k: usize, seed: u64) -> Result<LabelVector> {
    if k == 0 || k > image_ids.len() {
        return Err(Error::invalid(format!(
            "cannot split {} images into {k} groups",
            image_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..image_ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labels = vec![0usize; image_ids.len()];
    for (pos, &img) in order.iter().enumerate() {
        labels[img] = pos % k;
    }
    LabelVector::new(labels, k, image_ids.to_vec())
}

/// Mining parameters; defaults follow the module conventions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PatchMiningConfig {
    pub k_top: usize,
    pub min_support: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub per_cluster: usize,
    /// Factor for the relative merge threshold.
    pub merge_factor: f64,
    /// Pool detector responses per scale instead of jointly.
    pub per_scale_pool: bool,
}

impl Default for PatchMiningConfig {
    fn default() -> Self {
        Self {
            k_top: 8,
            min_support: 0.01,
            min_len: 2,
            max_len: 4,
            per_cluster: 50,
            merge_factor: 0.5,
            per_scale_pool: false,
        }
    }
}

/// Full vocabulary pipeline: transactions, per-group mining, top-pattern
/// selection, detector training, and the global merge.
pub fn mine_vocabulary<F: Float>(
    patches: &PatchActivationSet<F>,
    groups: &LabelVector,
    config: &PatchMiningConfig,
) -> Result<ElementVocabulary<F>> {
    groups.validate_alignment(&patches.image_ids())?;
    let transactions = build_transactions(patches, config.k_top)?;
    let background = compute_background(patches)?;
    let lookup = PatchLookup::new(patches);
    let group_of: HashMap<&str, usize> = groups
        .item_ids()
        .iter()
        .zip(groups.labels())
        .map(|(id, &l)| (id.as_str(), l))
        .collect();

    let mut candidates = Vec::new();
    for cluster in 0..groups.k() {
        let cluster_transactions: Vec<Transaction> = transactions
            .iter()
            .filter(|t| group_of.get(t.image_id.as_str()) == Some(&cluster))
            .cloned()
            .collect();
        if cluster_transactions.is_empty() {
            continue;
        }
        let mined = mine_frequent_patterns(
            &cluster_transactions,
            config.min_support,
            config.min_len,
            config.max_len,
        )?;
        let top = select_top_patterns(&mined, config.per_cluster);
        for pattern in top {
            if pattern.support_count < 2 {
                continue; // detectors need at least two positives
            }
            let rows = lookup.rows(&pattern.covered)?;
            let detector = train_lda_detector(
                rows.view(),
                background.mean.view(),
                background.covariance.view(),
            )?;
            candidates.push(CandidateElement {
                pattern,
                detector,
                cluster,
            });
        }
    }
    if candidates.is_empty() {
        return Err(Error::invalid(
            "no frequent patterns survived mining; lower min_support or k_top",
        ));
    }
    merge_patterns_global(
        &candidates,
        patches,
        &background,
        MergeThreshold::RelativeToSelf(F::cast(config.merge_factor)),
    )
}

/// Encode every image of the set against a vocabulary.
pub fn encode_bag_matrix<F: Float>(
    patches: &PatchActivationSet<F>,
    vocab: &ElementVocabulary<F>,
    config: &PatchMiningConfig,
) -> Result<FeatureMatrix<F>> {
    let scales: Vec<F> = if config.per_scale_pool {
        let mut s: Vec<F> = patches
            .images()
            .iter()
            .flat_map(|im| im.patches.iter().map(|p| p.scale))
            .collect();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        s.dedup();
        s
    } else {
        Vec::new()
    };
    let mut rows = Vec::with_capacity(patches.images().len());
    for image in patches.images() {
        let row = if config.per_scale_pool {
            encode_bag_of_elements_per_scale(image, vocab, &scales)?
        } else {
            encode_bag_of_elements(image, vocab)?
        };
        rows.push(row);
    }
    let dim = rows.first().map_or(0, |r| r.len());
    let mut data = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        data.row_mut(i).assign(row);
    }
    FeatureMatrix::new(data, patches.image_ids())
}
