//! Loop orchestration: encode features, cluster them, compare adjacent
//! clusterings, retrain the encoder on the fresh labels, and repeat until
//! the labelings agree; then emit labels, the trained classifier, the
//! category tree, and keyword reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{
    default_oversegment_k, kmeans, rim_fit, ClusterMethod, ClusteringResult,
};
use crate::encoding::{
    apply_pca, encode_fisher, encode_vlad, fit_codebook, fit_gmm, fit_pca, FisherConfig,
    VladConfig,
};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::hierarchy::{build_category_tree, ApOptions, CategoryTree};
use crate::io::{load_feature_matrix, load_patch_set, write_labels};
use crate::metrics::{nmi, purity};
use crate::patchmine::{
    encode_bag_matrix, mine_vocabulary, random_groups, ElementVocabulary, PatchMiningConfig,
};
use crate::pseudotask::{
    encode_refined, evaluate, predict_proba, train_encoder, EncoderConfig, EncoderModel,
    EvalReport,
};
use crate::split::make_split;
use crate::textmine::{extract_keywords, DocumentSet, KeywordReport};
use crate::types::{
    FeatureMatrix, IterationRecord, LabelVector, LoopTrace, PatchActivationSet, SplitTag,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Raw,
    Pca,
    Vlad,
    Fisher,
    PatchMining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringKind {
    Kmeans,
    KmeansRim,
}

/// Input files for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetManifest {
    pub features: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub documents: Option<PathBuf>,
}

/// Full pipeline configuration; every field has a default and the JSON
/// config file mirrors these names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdpoConfig {
    pub encoder: EncoderKind,
    pub clustering: ClusteringKind,
    /// Cluster count; required for plain k-means and for patch mining's
    /// first-iteration random grouping.
    pub k: Option<usize>,
    /// Over-segmentation size for model selection; defaults to
    /// `min(1000, n / 10)`.
    pub k_oversegment: Option<usize>,
    pub lambda: f64,
    pub purity_min: f64,
    pub nmi_min: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub kmeans_restarts: usize,
    pub split_ratios: [f64; 3],
    pub standardize: bool,
    pub l2_normalize: bool,
    pub pca_out: usize,
    /// Refit the projection on each iteration's refined features.
    pub pca_refit: bool,
    pub vlad_k: usize,
    pub vlad_intra_norm: bool,
    pub fisher_components: usize,
    pub fisher_signed_sqrt: bool,
    pub fisher_l2: bool,
    pub tree_max_levels: usize,
    /// Build the tree from the held-out test split (fall back to all items
    /// when a class is missing there).
    pub tree_from_test_split: bool,
    pub keyword_top_n: usize,
    pub keyword_commonality: f64,
    /// Retrain the encoder from scratch each iteration instead of warm
    /// starting the body.
    pub fresh_encoder: bool,
    pub pseudotask: EncoderConfig,
    pub patch_mining: PatchMiningConfig,
}

impl Default for LdpoConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Raw,
            clustering: ClusteringKind::Kmeans,
            k: None,
            k_oversegment: None,
            lambda: 1.0,
            purity_min: 0.85,
            nmi_min: 0.85,
            max_iterations: 12,
            seed: 0,
            kmeans_restarts: 3,
            split_ratios: [0.7, 0.1, 0.2],
            standardize: false,
            l2_normalize: false,
            pca_out: 4096,
            pca_refit: true,
            vlad_k: 64,
            vlad_intra_norm: false,
            fisher_components: 64,
            fisher_signed_sqrt: true,
            fisher_l2: true,
            tree_max_levels: 6,
            tree_from_test_split: true,
            keyword_top_n: 10,
            keyword_commonality: 0.8,
            fresh_encoder: false,
            pseudotask: EncoderConfig::default(),
            patch_mining: PatchMiningConfig::default(),
        }
    }
}

impl LdpoConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("purity_min", self.purity_min), ("nmi_min", self.nmi_min)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} = {v} outside (0, 1]")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if self.clustering == ClusteringKind::Kmeans && self.k.is_none() {
            return Err(Error::invalid("clustering \"kmeans\" requires k"));
        }
        if self.encoder == EncoderKind::PatchMining && self.k.is_none() {
            return Err(Error::invalid(
                "patch_mining encoding requires k for the first-iteration grouping",
            ));
        }
        Ok(())
    }
}

/// Verdict on two adjacent clusterings plus the quantities behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceDecision {
    pub converged: bool,
    pub purity: f64,
    pub nmi: f64,
    /// Absolute difference of the distinct-cluster counts.
    pub k_delta: usize,
}

/// Converged iff both the purity and the normalized mutual information of
/// the current labeling against the previous one reach their thresholds.
pub fn check_convergence(
    prev: &LabelVector,
    curr: &LabelVector,
    purity_min: f64,
    nmi_min: f64,
) -> Result<ConvergenceDecision> {
    let p = purity(curr, prev)?;
    let m = nmi(curr, prev)?;
    let k_delta = curr.distinct().abs_diff(prev.distinct());
    Ok(ConvergenceDecision {
        converged: p >= purity_min && m >= nmi_min,
        purity: p,
        nmi: m,
        k_delta,
    })
}

/// Everything a finished run produced; the same artifacts are also written
/// into the output directory.
#[derive(Debug, Clone)]
pub struct LdpoOutcome<F: Float> {
    pub trace: LoopTrace,
    pub converged: bool,
    pub final_labels: LabelVector,
    pub final_clustering: ClusteringMeta,
    pub final_eval: Option<EvalReport>,
    pub encoder: Option<EncoderModel<F>>,
    pub tree: Option<CategoryTree<F>>,
    pub keywords: Option<KeywordReport>,
}

/// Serializable summary of the last clustering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringMeta {
    pub k_effective: usize,
    pub objective: f64,
    pub method: ClusterMethod,
    pub seed: u64,
}

impl ClusteringMeta {
    fn of<F: Float>(result: &ClusteringResult<F>) -> Self {
        Self {
            k_effective: result.k_effective,
            objective: result.objective.as_f64(),
            method: result.method,
            seed: result.seed,
        }
    }
}

struct LoopState<F: Float> {
    features: FeatureMatrix<F>,
    vocabulary: Option<ElementVocabulary<F>>,
}

/// Run the full loop and write artifacts into `out_dir`:
/// `labels.csv` + `labels.meta.json`, `trace.json`, `report.json`, and when
/// available `encoder.bin`, `tree.json`, `keywords.json`, and
/// `vocabulary.bin`/`vocabulary.json`. For a fixed config the run is a
/// deterministic function of the input files; `report.json` carries no
/// timing, which lives only in `trace.json`.
pub fn run_ldpo<F: Float>(
    config: &LdpoConfig,
    dataset: &DatasetManifest,
    out_dir: &Path,
) -> Result<LdpoOutcome<F>> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let patches: Option<PatchActivationSet<F>> = match config.encoder {
        EncoderKind::Vlad | EncoderKind::Fisher | EncoderKind::PatchMining => {
            let path = dataset.patches.as_ref().ok_or_else(|| {
                Error::invalid("this encoder needs a patch activation file in the dataset")
            })?;
            Some(load_patch_set(path)?)
        }
        _ => None,
    };
    let raw_features: Option<FeatureMatrix<F>> = match config.encoder {
        EncoderKind::Raw | EncoderKind::Pca => {
            let path = dataset.features.as_ref().ok_or_else(|| {
                Error::invalid("this encoder needs a feature file in the dataset")
            })?;
            Some(load_feature_matrix(path)?)
        }
        _ => None,
    };

    // iteration-0 encoding
    let mut state = initial_encoding(config, raw_features.as_ref(), patches.as_ref())?;
    let n = state.features.n_items();
    if n < 3 {
        return Err(Error::invalid(format!("{n} items are too few to loop")));
    }

    let mut trace = LoopTrace::default();
    let mut converged = false;
    let mut prev_labels: Option<LabelVector> = None;
    let mut last_model: Option<EncoderModel<F>> = None;
    let mut models_trained = 0usize;
    let mut final_result: Option<ClusteringResult<F>> = None;

    for iteration in 0..config.max_iterations {
        let started = Instant::now();
        let features = normalized(config, &state.features);
        let seed = config.seed.wrapping_add(iteration as u64);

        let result = cluster_once(config, &features, seed)?;
        let mut record = IterationRecord {
            iteration,
            k_clusters: result.k_effective,
            purity_adjacent: 0.0,
            nmi_adjacent: 0.0,
            top1: 0.0,
            top5: 0.0,
            rim_objective: result.objective.as_f64(),
            wall_seconds: 0.0,
        };

        if let Some(prev) = &prev_labels {
            let decision =
                check_convergence(prev, &result.labels, config.purity_min, config.nmi_min)?;
            record.purity_adjacent = decision.purity;
            record.nmi_adjacent = decision.nmi;
            if decision.converged {
                converged = true;
            }
        }
        prev_labels = Some(result.labels.clone());
        let is_last = converged || iteration + 1 == config.max_iterations;

        if !is_last {
            // supervised refinement on the fresh labels
            let labels = &result.labels;
            if labels.k() >= 2 {
                let (trained, eval) =
                    fit_pseudotask(config, &features, labels, seed, last_model.as_ref())?;
                record.top1 = eval.top1;
                record.top5 = eval.top5;
                state = next_encoding(config, &features, &trained, labels, patches.as_ref())?;
                last_model = Some(trained);
                models_trained += 1;
            } else {
                log::warn!("iteration {iteration}: single cluster, skipping refinement");
            }
        }

        record.wall_seconds = started.elapsed().as_secs_f64();
        trace.push(record)?;
        final_result = Some(result);
        if is_last {
            break;
        }
    }

    let final_result = final_result.expect("at least one iteration ran");
    let final_labels = final_result.labels.clone();
    let final_meta = ClusteringMeta::of(&final_result);

    // the converged classifier: trained on the final labels, evaluated on
    // its held-out split, and feeding the category tree
    let mut final_eval = None;
    let mut encoder = None;
    let mut tree = None;
    if models_trained > 0 && final_labels.k() >= 2 {
        let features = normalized(config, &state.features);
        let seed = config
            .seed
            .wrapping_add(trace.len() as u64)
            .wrapping_add(1);
        let (trained, eval) =
            fit_pseudotask(config, &features, &final_labels, seed, last_model.as_ref())?;
        let split = make_split(features.n_items(), config.split_ratios, seed)?;
        let test_idx = split.indices(SplitTag::Test);
        let (tree_x, tree_y) = if config.tree_from_test_split
            && subset_covers_all_classes(&final_labels, &test_idx)
        {
            (features.subset(&test_idx)?, final_labels.subset(&test_idx)?)
        } else {
            if config.tree_from_test_split {
                log::warn!("test split misses a class; building the tree on all items");
            }
            (features.clone(), final_labels.clone())
        };
        let proba = predict_proba(&trained, &tree_x)?;
        tree = Some(build_category_tree(
            proba.view(),
            &tree_y,
            config.tree_max_levels,
            &ApOptions::default(),
        )?);
        final_eval = Some(eval);
        encoder = Some(trained);
    }

    let keywords = match &dataset.documents {
        Some(path) => {
            let docs = DocumentSet::load(path)?;
            Some(extract_keywords(
                &docs,
                &final_labels,
                config.keyword_top_n,
                config.keyword_commonality,
            )?)
        }
        None => None,
    };

    let outcome = LdpoOutcome {
        trace,
        converged,
        final_labels,
        final_clustering: final_meta,
        final_eval,
        encoder,
        tree,
        keywords,
    };
    write_artifacts(config, dataset, out_dir, &outcome, state.vocabulary.as_ref())?;
    Ok(outcome)
}

fn subset_covers_all_classes(labels: &LabelVector, indices: &[usize]) -> bool {
    let mut present = vec![false; labels.k()];
    for &i in indices {
        present[labels.labels()[i]] = true;
    }
    present.iter().all(|&p| p)
}

fn normalized<F: Float>(config: &LdpoConfig, features: &FeatureMatrix<F>) -> FeatureMatrix<F> {
    let mut out = features.clone();
    if config.standardize {
        out = out.standardized();
    }
    if config.l2_normalize {
        out = out.l2_normalized();
    }
    out
}

fn initial_encoding<F: Float>(
    config: &LdpoConfig,
    raw: Option<&FeatureMatrix<F>>,
    patches: Option<&PatchActivationSet<F>>,
) -> Result<LoopState<F>> {
    match config.encoder {
        EncoderKind::Raw => Ok(LoopState {
            features: raw.expect("validated").clone(),
            vocabulary: None,
        }),
        EncoderKind::Pca => {
            let x = raw.expect("validated");
            Ok(LoopState {
                features: reduce(config, x)?,
                vocabulary: None,
            })
        }
        EncoderKind::Vlad => {
            let set = patches.expect("validated");
            let codebook = fit_codebook(set, config.vlad_k, config.seed)?;
            let vlad_config = VladConfig {
                intra_normalize: config.vlad_intra_norm,
            };
            let rows: Vec<_> = set
                .images()
                .iter()
                .map(|im| encode_vlad(im, &codebook, &vlad_config))
                .collect::<Result<_>>()?;
            let features = rows_to_matrix(rows, set.image_ids())?;
            Ok(LoopState {
                features: reduce(config, &features)?,
                vocabulary: None,
            })
        }
        EncoderKind::Fisher => {
            let set = patches.expect("validated");
            let fit = fit_gmm(set, config.fisher_components, config.seed)?;
            let fisher_config = FisherConfig {
                signed_sqrt: config.fisher_signed_sqrt,
                l2_normalize: config.fisher_l2,
            };
            let rows: Vec<_> = set
                .images()
                .iter()
                .map(|im| encode_fisher(im, &fit.model, &fisher_config))
                .collect::<Result<_>>()?;
            let features = rows_to_matrix(rows, set.image_ids())?;
            Ok(LoopState {
                features: reduce(config, &features)?,
                vocabulary: None,
            })
        }
        EncoderKind::PatchMining => {
            let set = patches.expect("validated");
            let k = config.k.expect("validated");
            let groups = random_groups(&set.image_ids(), k, config.seed)?;
            let vocabulary = mine_vocabulary(set, &groups, &config.patch_mining)?;
            let features = encode_bag_matrix(set, &vocabulary, &config.patch_mining)?;
            Ok(LoopState {
                features: reduce(config, &features)?,
                vocabulary: Some(vocabulary),
            })
        }
    }
}

/// Reduce to the configured common dimension when the data exceed it.
fn reduce<F: Float>(config: &LdpoConfig, x: &FeatureMatrix<F>) -> Result<FeatureMatrix<F>> {
    let limit = config.pca_out.min(x.n_items().min(x.dim()));
    if limit == 0 || limit >= x.dim() {
        return Ok(x.clone());
    }
    let model = fit_pca(x, limit)?;
    apply_pca(&model, x)
}

fn rows_to_matrix<F: Float>(
    rows: Vec<ndarray::Array1<F>>,
    ids: Vec<String>,
) -> Result<FeatureMatrix<F>> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut data = ndarray::Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        data.row_mut(i).assign(row);
    }
    FeatureMatrix::new(data, ids)
}

fn cluster_once<F: Float>(
    config: &LdpoConfig,
    features: &FeatureMatrix<F>,
    seed: u64,
) -> Result<ClusteringResult<F>> {
    match config.clustering {
        ClusteringKind::Kmeans => {
            let k = config.k.expect("validated");
            Ok(kmeans(features, k, seed, config.kmeans_restarts)?.result)
        }
        ClusteringKind::KmeansRim => {
            let k0 = config
                .k_oversegment
                .unwrap_or_else(|| default_oversegment_k(features.n_items()))
                .min(features.n_items());
            let init = kmeans(features, k0, seed, config.kmeans_restarts)?;
            Ok(rim_fit(features, &init.result.labels, F::cast(config.lambda), seed)?.result)
        }
    }
}

fn fit_pseudotask<F: Float>(
    config: &LdpoConfig,
    features: &FeatureMatrix<F>,
    labels: &LabelVector,
    seed: u64,
    warm: Option<&EncoderModel<F>>,
) -> Result<(EncoderModel<F>, EvalReport)> {
    let split = make_split(features.n_items(), config.split_ratios, seed)?;
    let train_idx = split.indices(SplitTag::Train);
    let val_idx = split.indices(SplitTag::Validation);
    let test_idx = split.indices(SplitTag::Test);

    // retry with fresh seeds until the training split carries every class
    let (train_idx, val_idx, test_idx) = {
        let mut attempt = 0u64;
        let (mut tr, mut va, mut te) = (train_idx, val_idx, test_idx);
        while !subset_covers_all_classes(labels, &tr) && attempt < 20 {
            attempt += 1;
            let retry = make_split(
                features.n_items(),
                config.split_ratios,
                seed.wrapping_add(0x9e37_79b9 * attempt),
            )?;
            tr = retry.indices(SplitTag::Train);
            va = retry.indices(SplitTag::Validation);
            te = retry.indices(SplitTag::Test);
        }
        (tr, va, te)
    };

    let mut encoder_config = config.pseudotask.clone();
    encoder_config.seed = seed;
    let warm = if config.fresh_encoder { None } else { warm };
    let trained = train_encoder(
        &features.subset(&train_idx)?,
        &labels.subset(&train_idx)?,
        &features.subset(&val_idx)?,
        &labels.subset(&val_idx)?,
        &encoder_config,
        warm,
    )?;
    let eval = evaluate(
        &trained.model,
        &features.subset(&test_idx)?,
        &labels.subset(&test_idx)?,
    )?;
    Ok((trained.model, eval))
}

fn next_encoding<F: Float>(
    config: &LdpoConfig,
    features: &FeatureMatrix<F>,
    model: &EncoderModel<F>,
    labels: &LabelVector,
    patches: Option<&PatchActivationSet<F>>,
) -> Result<LoopState<F>> {
    match config.encoder {
        EncoderKind::PatchMining => {
            // re-mine with the fresh cluster labels as groups
            let set = patches.expect("validated");
            let vocabulary = mine_vocabulary(set, labels, &config.patch_mining)?;
            let features = encode_bag_matrix(set, &vocabulary, &config.patch_mining)?;
            Ok(LoopState {
                features: reduce(config, &features)?,
                vocabulary: Some(vocabulary),
            })
        }
        _ => {
            let refined = encode_refined(model, features)?;
            let reduced = if config.encoder == EncoderKind::Pca && config.pca_refit {
                reduce(config, &refined)?
            } else {
                refined
            };
            Ok(LoopState {
                features: reduced,
                vocabulary: None,
            })
        }
    }
}

fn write_artifacts<F: Float>(
    config: &LdpoConfig,
    dataset: &DatasetManifest,
    out_dir: &Path,
    outcome: &LdpoOutcome<F>,
    vocabulary: Option<&ElementVocabulary<F>>,
) -> Result<()> {
    write_labels(&outcome.final_labels, &out_dir.join("labels.csv"))?;
    write_json(
        &out_dir.join("labels.meta.json"),
        &serde_json::to_value(&outcome.final_clustering).expect("meta serializes"),
    )?;
    write_json(
        &out_dir.join("trace.json"),
        &serde_json::to_value(&outcome.trace).expect("trace serializes"),
    )?;

    let report = serde_json::json!({
        "converged": outcome.converged,
        "iterations": outcome.trace.len(),
        "k_final": outcome.final_clustering.k_effective,
        "clustering": outcome.final_clustering,
        "final_eval": outcome.final_eval,
        "config": config,
        "dataset": dataset,
    });
    write_json(&out_dir.join("report.json"), &report)?;

    if let Some(encoder) = &outcome.encoder {
        encoder.save(&out_dir.join("encoder.bin"))?;
    }
    if let Some(tree) = &outcome.tree {
        write_json(&out_dir.join("tree.json"), &tree.to_json())?;
    }
    if let Some(keywords) = &outcome.keywords {
        write_json(&out_dir.join("keywords.json"), &keywords.to_json())?;
    }
    if let Some(vocab) = vocabulary {
        vocab.save(&out_dir.join("vocabulary.bin"))?;
        write_json(&out_dir.join("vocabulary.json"), &vocab.summary_json())?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_json_value(path, value)
}

/// Pretty-print a JSON value to a file with a trailing newline.
pub fn write_json_value(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
