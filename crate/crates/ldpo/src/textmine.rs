//! Per-cluster keyword extraction from documents attached to items:
//! frequency counting, stopword removal, and suppression of terms common
//! to most clusters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::LabelVector;

/// 100 high-frequency English words dropped before counting.
const STOPWORDS: [&str; 100] = [
    "a", "about", "after", "again", "all", "also", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "between", "both", "but", "by", "can", "could", "did",
    "do", "does", "down", "during", "each", "few", "for", "from", "further", "had", "has",
    "have", "having", "he", "her", "here", "him", "his", "how", "i", "if", "in", "into", "is",
    "it", "its", "just", "may", "more", "most", "my", "no", "nor", "not", "now", "of", "off",
    "on", "once", "only", "or", "other", "our", "out", "over", "own", "same", "she", "should",
    "so", "some", "such", "than", "that", "the", "their", "them", "then", "there", "these",
    "they", "this", "those", "through", "to", "too", "under", "up", "very", "was", "we",
    "were", "what", "when", "which", "with",
];

/// Lowercased token lists keyed by item id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DocumentSet {
    docs: BTreeMap<String, Vec<String>>,
}

/// Whitespace tokenization with punctuation stripped and lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

impl DocumentSet {
    pub fn from_texts<I: IntoIterator<Item = (String, String)>>(texts: I) -> Result<Self> {
        let mut docs = BTreeMap::new();
        for (id, text) in texts {
            if docs.insert(id.clone(), tokenize(&text)).is_some() {
                return Err(Error::invalid(format!("duplicate document id {id:?}")));
            }
        }
        Ok(Self { docs })
    }

    /// Load documents from either a directory of per-item text files (the
    /// file stem is the item id) or a single TSV of `item_id<TAB>text`.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let mut texts = Vec::new();
            let mut entries: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?;
            entries.sort_by_key(|e| e.path());
            for entry in entries {
                let p = entry.path();
                if p.is_file() {
                    let id = p
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .ok_or_else(|| Error::invalid(format!("unreadable file name {p:?}")))?
                        .to_string();
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    texts.push((id, text));
                }
            }
            Self::from_texts(texts)
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut texts = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (id, body) = line.split_once('\t').ok_or_else(|| {
                    Error::format(
                        path,
                        0,
                        format!("line {}: expected item_id<TAB>text", lineno + 1),
                    )
                })?;
                texts.push((id.trim().to_string(), body.to_string()));
            }
            Self::from_texts(texts)
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn tokens(&self, item_id: &str) -> Option<&[String]> {
        self.docs.get(item_id).map(|v| v.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterKeywords {
    pub cluster: usize,
    /// Ranked `(term, frequency)` pairs, highest frequency first, ties
    /// alphabetical.
    pub keywords: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeywordReport {
    pub clusters: Vec<ClusterKeywords>,
    /// Labeled items without an attached document.
    pub missing_documents: usize,
}

impl KeywordReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

const COMMON_LIST_LEN: usize = 100;

fn ranked(counts: &HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut pairs: Vec<(String, usize)> = counts
        .iter()
        .map(|(term, &count)| (term.clone(), count))
        .collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    pairs
}

/// Per-cluster keyword frequencies with stopwords removed and terms common
/// to at least `commonality` of the clusters suppressed globally. Items
/// without a document are skipped and counted in the report.
pub fn extract_keywords(
    docs: &DocumentSet,
    labels: &LabelVector,
    top_n: usize,
    commonality: f64,
) -> Result<KeywordReport> {
    if docs.is_empty() {
        return Err(Error::invalid("empty document set"));
    }
    if !(commonality > 0.0 && commonality <= 1.0) {
        return Err(Error::invalid(format!(
            "commonality {commonality} outside (0, 1]"
        )));
    }
    let stopwords: BTreeSet<&str> = STOPWORDS.iter().copied().collect();

    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); labels.k()];
    let mut missing_documents = 0usize;
    for (id, &label) in labels.item_ids().iter().zip(labels.labels()) {
        match docs.tokens(id) {
            Some(tokens) => {
                for token in tokens {
                    if !stopwords.contains(token.as_str()) {
                        *counts[label].entry(token.clone()).or_insert(0) += 1;
                    }
                }
            }
            None => missing_documents += 1,
        }
    }

    // terms sitting in the leading list of most non-empty clusters are
    // treated as common vocabulary and removed everywhere
    let populated = counts.iter().filter(|c| !c.is_empty()).count().max(1);
    let mut appearances: BTreeMap<&str, usize> = BTreeMap::new();
    let leading: Vec<Vec<(String, usize)>> = counts
        .iter()
        .map(|c| {
            let mut r = ranked(c);
            r.truncate(COMMON_LIST_LEN);
            r
        })
        .collect();
    for cluster_list in &leading {
        for (term, _) in cluster_list {
            *appearances.entry(term.as_str()).or_insert(0) += 1;
        }
    }
    let common: BTreeSet<String> = appearances
        .iter()
        .filter(|(_, &n)| n as f64 / populated as f64 >= commonality)
        .map(|(term, _)| term.to_string())
        .collect();

    let clusters = counts
        .iter()
        .enumerate()
        .map(|(cluster, c)| {
            let mut keywords: Vec<(String, usize)> = ranked(c)
                .into_iter()
                .filter(|(term, _)| !common.contains(term))
                .collect();
            keywords.truncate(top_n);
            ClusterKeywords { cluster, keywords }
        })
        .collect();

    Ok(KeywordReport {
        clusters,
        missing_documents,
    })
}
