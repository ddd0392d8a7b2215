//! Command-line entry points for the mining pipeline.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad arguments or
//! malformed inputs), 2 on runtime errors (IO failures, numerical
//! breakdowns).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ldpo::clustering::{default_oversegment_k, kmeans, rim_fit};
use ldpo::driver::{run_ldpo, DatasetManifest, LdpoConfig};
use ldpo::encoding::{
    apply_pca, encode_fisher, encode_vlad, fit_codebook, fit_gmm, fit_pca, FisherConfig,
    VladConfig,
};
use ldpo::hierarchy::{build_category_tree, ApOptions};
use ldpo::io::{load_feature_matrix, load_labels, load_patch_set, write_feature_matrix, write_labels};
use ldpo::metrics::{nmi, purity};
use ldpo::patchmine::{encode_bag_matrix, mine_vocabulary, random_groups, PatchMiningConfig};
use ldpo::textmine::{extract_keywords, DocumentSet};
use ldpo::types::FeatureMatrix;
use ldpo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ldpo",
    version,
    about = "Iterative joint mining of features and cluster labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClusterArg {
    Kmeans,
    Rim,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncodeArg {
    Pca,
    Vlad,
    Fisher,
    Patch,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full loop from a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for all artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a feature matrix and write the labels CSV (plus a
    /// `.meta.json` sidecar with the objective and cluster count).
    Cluster {
        #[arg(long, value_enum)]
        method: ClusterArg,
        #[arg(long)]
        features: PathBuf,
        /// Cluster count; for `rim` this is the over-segmentation size
        /// (defaults to min(1000, n/10)).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print purity and normalized mutual information of two labelings.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Build the category tree from class probabilities and labels.
    Tree {
        /// N x K probability matrix in the feature binary format.
        #[arg(long)]
        proba: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        max_levels: usize,
    },
    /// Per-cluster keyword report from documents and labels.
    Keywords {
        /// Directory of per-item text files or a TSV of id<TAB>text.
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        #[arg(long, default_value_t = 0.8)]
        commonality: f64,
    },
    /// Encode features or patch activations into a feature matrix file.
    Encode {
        #[arg(long, value_enum)]
        method: EncodeArg,
        /// Input features (pca).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Input patch activations (vlad, fisher, patch).
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Output dimensionality (pca).
        #[arg(long)]
        dim: Option<usize>,
        /// Codebook size (vlad).
        #[arg(long, default_value_t = 64)]
        k: usize,
        /// Mixture components (fisher).
        #[arg(long, default_value_t = 64)]
        components: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image grouping labels for mining (patch).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Number of random image groups when no labels are given (patch).
        #[arg(long)]
        groups: Option<usize>,
        /// Transaction size: strongest activation indices per patch (patch).
        #[arg(long, default_value_t = 8)]
        k_top: usize,
        /// Minimum within-cluster support fraction for mined itemsets (patch).
        #[arg(long, default_value_t = 0.01)]
        min_support: f64,
        /// Where to store the fitted model (pca, vlad, fisher).
        #[arg(long)]
        model_out: Option<PathBuf>,
        /// Where to store the mined vocabulary (patch); a JSON summary is
        /// written next to it.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
}

/// The run config file: every pipeline field at the top level plus a
/// `dataset` block pointing at the input files.
#[derive(Deserialize)]
struct RunSpec {
    #[serde(default)]
    dataset: DatasetManifest,
    #[serde(flatten)]
    config: LdpoConfig,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Cluster {
            method,
            features,
            k,
            seed,
            restarts,
            lambda,
            out,
        } => cmd_cluster(method, &features, k, seed, restarts, lambda, &out),
        Command::Metrics { a, b } => cmd_metrics(&a, &b),
        Command::Tree {
            proba,
            labels,
            out,
            max_levels,
        } => cmd_tree(&proba, &labels, &out, max_levels),
        Command::Keywords {
            docs,
            labels,
            out,
            top_n,
            commonality,
        } => cmd_keywords(&docs, &labels, &out, top_n, commonality),
        Command::Encode {
            method,
            features,
            patches,
            out,
            dim,
            k,
            components,
            seed,
            labels,
            groups,
            k_top,
            min_support,
            model_out,
            vocab_out,
        } => cmd_encode(
            method, features, patches, &out, dim, k, components, seed, labels, groups, k_top,
            min_support, model_out, vocab_out,
        ),
    }
}

fn cmd_run(config_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let spec: RunSpec = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("bad config {config_path:?}: {e}")))?;
    let outcome = run_ldpo::<f64>(&spec.config, &spec.dataset, out)?;
    println!(
        "{}",
        serde_json::json!({
            "converged": outcome.converged,
            "iterations": outcome.trace.len(),
            "k_final": outcome.final_clustering.k_effective,
            "out": out,
        })
    );
    Ok(())
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "labels".to_string());
    name.push_str(".meta.json");
    out.with_file_name(name)
}

fn cmd_cluster(
    method: ClusterArg,
    features: &Path,
    k: Option<usize>,
    seed: u64,
    restarts: usize,
    lambda: f64,
    out: &Path,
) -> Result<()> {
    let x: FeatureMatrix<f64> = load_feature_matrix(features)?;
    let result = match method {
        ClusterArg::Kmeans => {
            let k = k.ok_or_else(|| Error::invalid("--k is required for kmeans"))?;
            kmeans(&x, k, seed, restarts)?.result
        }
        ClusterArg::Rim => {
            let k0 = k
                .unwrap_or_else(|| default_oversegment_k(x.n_items()))
                .min(x.n_items());
            let init = kmeans(&x, k0, seed, restarts)?;
            rim_fit(&x, &init.result.labels, lambda, seed)?.result
        }
    };
    write_labels(&result.labels, out)?;
    ldpo::driver::write_json_value(&meta_path(out), &result.metadata_json())?;
    println!("{}", result.metadata_json());
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path) -> Result<()> {
    let la = load_labels(a, None)?;
    let lb = load_labels(b, None)?;
    let report = serde_json::json!({
        "purity": purity(&la, &lb)?,
        "nmi": nmi(&la, &lb)?,
    });
    println!("{report}");
    Ok(())
}

fn cmd_tree(proba: &Path, labels: &Path, out: &Path, max_levels: usize) -> Result<()> {
    let scores: FeatureMatrix<f64> = load_feature_matrix(proba)?;
    let truth = load_labels(labels, Some(scores.dim()))?;
    truth.validate_alignment(scores.item_ids())?;
    let tree = build_category_tree(
        scores.data().view(),
        &truth,
        max_levels,
        &ApOptions::default(),
    )?;
    ldpo::driver::write_json_value(out, &tree.to_json())?;
    println!("{}", serde_json::json!({ "levels": tree.levels.len(), "out": out }));
    Ok(())
}

fn cmd_keywords(
    docs: &Path,
    labels: &Path,
    out: &Path,
    top_n: usize,
    commonality: f64,
) -> Result<()> {
    let documents = DocumentSet::load(docs)?;
    let lv = load_labels(labels, None)?;
    let report = extract_keywords(&documents, &lv, top_n, commonality)?;
    ldpo::driver::write_json_value(out, &report.to_json())?;
    println!(
        "{}",
        serde_json::json!({
            "clusters": report.clusters.len(),
            "missing_documents": report.missing_documents,
            "out": out,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_encode(
    method: EncodeArg,
    features: Option<PathBuf>,
    patches: Option<PathBuf>,
    out: &Path,
    dim: Option<usize>,
    k: usize,
    components: usize,
    seed: u64,
    labels: Option<PathBuf>,
    groups: Option<usize>,
    k_top: usize,
    min_support: f64,
    model_out: Option<PathBuf>,
    vocab_out: Option<PathBuf>,
) -> Result<()> {
    let need_patches = || -> Result<PathBuf> {
        patches
            .clone()
            .ok_or_else(|| Error::invalid("--patches is required for this encoder"))
    };
    let encoded: FeatureMatrix<f64> = match method {
        EncodeArg::Pca => {
            let path = features
                .ok_or_else(|| Error::invalid("--features is required for pca"))?;
            let x: FeatureMatrix<f64> = load_feature_matrix(&path)?;
            let d = dim.ok_or_else(|| Error::invalid("--dim is required for pca"))?;
            let model = fit_pca(&x, d)?;
            if let Some(p) = &model_out {
                model.save(p)?;
            }
            apply_pca(&model, &x)?
        }
        EncodeArg::Vlad => {
            let set = load_patch_set::<f64>(&need_patches()?)?;
            let codebook = fit_codebook(&set, k, seed)?;
            if let Some(p) = &model_out {
                codebook.save(p)?;
            }
            let config = VladConfig::default();
            let rows = set
                .images()
                .iter()
                .map(|im| encode_vlad(im, &codebook, &config))
                .collect::<Result<Vec<_>>>()?;
            matrix_from_rows(rows, set.image_ids())?
        }
        EncodeArg::Fisher => {
            let set = load_patch_set::<f64>(&need_patches()?)?;
            let fit = fit_gmm(&set, components, seed)?;
            if let Some(p) = &model_out {
                fit.model.save(p)?;
            }
            let config = FisherConfig::default();
            let rows = set
                .images()
                .iter()
                .map(|im| encode_fisher(im, &fit.model, &config))
                .collect::<Result<Vec<_>>>()?;
            matrix_from_rows(rows, set.image_ids())?
        }
        EncodeArg::Patch => {
            let set = load_patch_set::<f64>(&need_patches()?)?;
            let grouping = match (&labels, groups) {
                (Some(path), _) => {
                    let lv = load_labels(path, None)?;
                    lv.validate_alignment(&set.image_ids())?;
                    lv
                }
                (None, Some(g)) => random_groups(&set.image_ids(), g, seed)?,
                (None, None) => {
                    return Err(Error::invalid(
                        "patch encoding needs --labels or --groups",
                    ))
                }
            };
            let config = PatchMiningConfig {
                k_top,
                min_support,
                ..Default::default()
            };
            let vocabulary = mine_vocabulary(&set, &grouping, &config)?;
            if let Some(p) = &vocab_out {
                vocabulary.save(p)?;
                ldpo::driver::write_json_value(
                    &p.with_extension("json"),
                    &vocabulary.summary_json(),
                )?;
            }
            encode_bag_matrix(&set, &vocabulary, &config)?
        }
    };
    write_feature_matrix(&encoded, out)?;
    println!(
        "{}",
        serde_json::json!({
            "n_items": encoded.n_items(),
            "dim": encoded.dim(),
            "out": out,
        })
    );
    Ok(())
}

fn matrix_from_rows(
    rows: Vec<ndarray::Array1<f64>>,
    ids: Vec<String>,
) -> Result<FeatureMatrix<f64>> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut data = ndarray::Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        data.row_mut(i).assign(row);
    }
    FeatureMatrix::new(data, ids)
}
