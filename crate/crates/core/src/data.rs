//! Dataset manifests and evaluation protocols.
//!
//! Datasets are never shipped; they are indexed by a thin CSV manifest with
//! the header `path,label,category,split`. Protocol builders relabel a
//! manifest for one-vs-all or group-as-normal (multi-class) semantic
//! anomaly detection without touching paths or entry counts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{io_err, Error, Result};
use crate::sampling::{sample_without_replacement, shuffle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One indexed image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// `true` marks an anomaly.
    pub anomalous: bool,
    pub category: String,
    pub split: Split,
}

/// A named list of manifest entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("manifest has no entries".into()));
        }
        Ok(Self {
            name: name.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn normal_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.anomalous).count()
    }

    pub fn anomaly_count(&self) -> usize {
        self.entries.iter().filter(|e| e.anomalous).count()
    }

    /// Entries of one split.
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct categories in manifest order of first appearance.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.category) {
                seen.push(e.category.clone());
            }
        }
        seen
    }
}

const HEADER: &str = "path,label,category,split";

/// Load a manifest CSV. The dataset name is the file stem.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_manifest(&text, &name, path)
}

fn parse_manifest(text: &str, name: &str, origin: &Path) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                reason: format!("expected header {HEADER:?}, got {:?}", header.trim()),
            })
        }
        None => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                reason: "empty manifest file".into(),
            })
        }
    }
    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                reason: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let path_field = fields[0].trim();
        if path_field.is_empty() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                reason: "empty image path".into(),
            });
        }
        let anomalous = match fields[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: line_no,
                    reason: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let category = fields[2].trim().to_string();
        let split = match fields[3].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: line_no,
                    reason: format!("split must be train or test, got {other:?}"),
                })
            }
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(path_field),
            anomalous,
            category,
            split,
        });
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            reason: "manifest has a header but no rows".into(),
        });
    }
    DatasetManifest::new(name, entries)
}

/// Write a manifest CSV (temp file + atomic rename).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for e in &manifest.entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.path.display(),
            if e.anomalous { 1 } else { 0 },
            e.category,
            e.split
        ));
    }
    crate::persist::write_atomic(path, out.as_bytes())
}

/// Which categories count as normal under a protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalSelector {
    /// One literal category label.
    Category(String),
    /// An explicit set of category labels.
    Categories(Vec<String>),
    /// Categories whose label parses as an even integer.
    EvenNumber,
    /// The CIFAR-10 animal classes.
    Animal,
}

const ANIMAL_CLASSES: [&str; 6] = ["bird", "cat", "deer", "dog", "frog", "horse"];

impl NormalSelector {
    pub fn matches(&self, category: &str) -> bool {
        match self {
            NormalSelector::Category(c) => c == category,
            NormalSelector::Categories(cs) => cs.iter().any(|c| c == category),
            NormalSelector::EvenNumber => category
                .parse::<i64>()
                .map(|n| n % 2 == 0)
                .unwrap_or(false),
            NormalSelector::Animal => ANIMAL_CLASSES.contains(&category),
        }
    }
}

impl FromStr for NormalSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::InvalidInput("empty normal selector".into()));
        }
        Ok(match s {
            "even_number" => NormalSelector::EvenNumber,
            "animal" => NormalSelector::Animal,
            other if other.contains(',') => NormalSelector::Categories(
                other.split(',').map(|c| c.trim().to_string()).collect(),
            ),
            other => NormalSelector::Category(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Keep the manifest labels as they are.
    Plain,
    /// One category is normal, everything else anomalous.
    OneVsAll,
    /// A named category group is normal, everything else anomalous.
    MultiClass,
}

impl FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ProtocolMode::Plain),
            "one_vs_all" => Ok(ProtocolMode::OneVsAll),
            "multi_class" => Ok(ProtocolMode::MultiClass),
            other => Err(Error::InvalidInput(format!(
                "unknown protocol mode {other:?} (expected plain, one_vs_all, or multi_class)"
            ))),
        }
    }
}

/// Protocol description: mode plus the normal-category predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    pub normal_selector: Option<NormalSelector>,
}

impl ProtocolSpec {
    pub fn plain() -> Self {
        Self {
            mode: ProtocolMode::Plain,
            normal_selector: None,
        }
    }

    pub fn one_vs_all(category: impl Into<String>) -> Self {
        Self {
            mode: ProtocolMode::OneVsAll,
            normal_selector: Some(NormalSelector::Category(category.into())),
        }
    }

    pub fn multi_class(selector: NormalSelector) -> Self {
        Self {
            mode: ProtocolMode::MultiClass,
            normal_selector: Some(selector),
        }
    }
}

/// Relabel a manifest under a protocol. Entry count, paths, categories, and
/// splits are preserved; only labels change. Plain mode is the identity.
pub fn build_protocol(manifest: &DatasetManifest, spec: &ProtocolSpec) -> Result<DatasetManifest> {
    if spec.mode == ProtocolMode::Plain {
        return Ok(manifest.clone());
    }
    let selector = spec.normal_selector.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!("{:?} protocol requires a normal selector", spec.mode))
    })?;
    let matched: Vec<String> = manifest
        .categories()
        .into_iter()
        .filter(|c| selector.matches(c))
        .collect();
    if matched.is_empty() {
        return Err(Error::InvalidInput(format!(
            "selector {selector:?} matches no category in manifest {:?}",
            manifest.name
        )));
    }
    if spec.mode == ProtocolMode::OneVsAll && matched.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "one_vs_all selector must match exactly one category, matched {}",
            matched.len()
        )));
    }
    let entries: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            path: e.path.clone(),
            anomalous: !selector.matches(&e.category),
            category: e.category.clone(),
            split: e.split,
        })
        .collect();
    let normals = entries.iter().filter(|e| !e.anomalous).count();
    if normals == 0 || normals == entries.len() {
        return Err(Error::DegenerateProtocol(format!(
            "protocol left {normals} normal of {} entries",
            entries.len()
        )));
    }
    DatasetManifest::new(manifest.name.clone(), entries)
}

/// Prompt-pool options for [`select_prompt_set`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PromptPool {
    /// Draw prompts from the test split instead of train (for datasets that
    /// ship no train split).
    pub from_test: bool,
}

/// Select `k` normal prompt images, deterministically per rng stream.
///
/// With `class_count`, prompts are drawn from exactly that many distinct
/// normal categories, split as evenly as possible (per-category counts
/// differ by at most one).
pub fn select_prompt_set(
    manifest: &DatasetManifest,
    k: usize,
    rng: &mut ChaCha8Rng,
    class_count: Option<usize>,
    pool: PromptPool,
) -> Result<Vec<ManifestEntry>> {
    if k == 0 {
        return Err(Error::InvalidInput("prompt set size must be at least 1".into()));
    }
    let split = if pool.from_test { Split::Test } else { Split::Train };
    let candidates: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| !e.anomalous && e.split == split)
        .collect();
    if candidates.len() < k {
        return Err(Error::InsufficientData(format!(
            "need {k} normal {split}-split images, found {}",
            candidates.len()
        )));
    }
    match class_count {
        None => {
            let picked = sample_without_replacement(rng, candidates.len(), k);
            Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
        }
        Some(c) => {
            if c == 0 {
                return Err(Error::InvalidInput("class_count must be at least 1".into()));
            }
            let mut by_category: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
            for e in &candidates {
                by_category.entry(e.category.as_str()).or_default().push(e);
            }
            if by_category.len() < c {
                return Err(Error::InsufficientData(format!(
                    "requested prompts from {c} categories, manifest has {} normal {split}-split categories",
                    by_category.len()
                )));
            }
            let mut categories: Vec<&str> = by_category.keys().copied().collect();
            shuffle(rng, &mut categories);
            categories.truncate(c);
            let base = k / c;
            let remainder = k % c;
            let mut prompts = Vec::with_capacity(k);
            for (i, cat) in categories.iter().enumerate() {
                let quota = base + usize::from(i < remainder);
                if quota == 0 {
                    continue;
                }
                let pool = &by_category[cat];
                if pool.len() < quota {
                    return Err(Error::InsufficientData(format!(
                        "category {cat:?} has {} normal {split}-split images, need {quota}",
                        pool.len()
                    )));
                }
                let picked = sample_without_replacement(rng, pool.len(), quota);
                prompts.extend(picked.into_iter().map(|i| pool[i].clone()));
            }
            Ok(prompts)
        }
    }
}
