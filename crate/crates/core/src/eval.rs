//! Threshold-free evaluation: AUROC and AUPRC, multi-seed aggregation, and
//! the prompt-class-diversity sweep.
//!
//! AUROC uses the rank-sum construction with average ranks, which equals
//! the exhaustive pairwise comparison with ties counted one half. AUPRC is
//! step-wise average precision with tied scores processed as one group.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::Path;

use crate::data::{select_prompt_set, DatasetManifest, PromptPool, Split};
use crate::encoder::PatchTokenMaps;
use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::pipeline::Pipeline;

/// AUROC and AUPRC for one score/label set.
pub fn rank_metrics(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput(format!(
            "scores ({}) and labels ({}) must be nonempty and equal-length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "both classes required, got {positives} positive / {negatives} negative"
        )));
    }
    Ok((auroc(scores, labels, positives, negatives), auprc(scores, labels, positives)))
}

fn auroc(scores: &[f64], labels: &[bool], positives: usize, negatives: usize) -> f64 {
    // Rank sum with average ranks on ties (Mann-Whitney identity).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied block [i, j] shares the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)
}

fn auprc(scores: &[f64], labels: &[bool], positives: usize) -> f64 {
    // Step-wise average precision over descending distinct-score groups.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let total_pos = positives as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / total_pos;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    ap
}

/// Per-seed metric pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
}

/// Mean metrics of one category subset (across seeds).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryResult {
    pub category: String,
    pub auroc: f64,
    pub auprc: f64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k: usize,
    pub seeds: Vec<SeedResult>,
    pub auroc_mean: f64,
    /// Population standard deviation across seeds.
    pub auroc_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    /// Per-category breakdown where a category's scored subset contains both
    /// classes; empty otherwise.
    pub categories: Vec<CategoryResult>,
}

impl EvalReport {
    fn from_seed_results(
        dataset: String,
        k: usize,
        seeds: Vec<SeedResult>,
        categories: Vec<CategoryResult>,
    ) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::InvalidInput("evaluation needs at least one seed".into()));
        }
        for s in &seeds {
            for (name, v) in [("auroc", s.auroc), ("auprc", s.auprc)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Numeric(format!("{name} {v} outside [0, 1]")));
                }
            }
        }
        let (auroc_mean, auroc_std) = mean_std(seeds.iter().map(|s| s.auroc));
        let (auprc_mean, auprc_std) = mean_std(seeds.iter().map(|s| s.auprc));
        Ok(Self {
            dataset,
            k,
            seeds,
            auroc_mean,
            auroc_std,
            auprc_mean,
            auprc_std,
            categories,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Persistence(format!("report serialization failed: {e}")))
    }

    /// Flat CSV: `dataset,K,seed,auroc,auprc`, one row per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,K,seed,auroc,auprc\n");
        for s in &self.seeds {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                self.dataset, self.k, s.seed, s.auroc, s.auprc
            ));
        }
        out
    }

    /// Write `report.json` and `report.csv` into a directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        write_atomic(&dir.join("report.csv"), self.to_csv().as_bytes())
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// How prompts are drawn for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSelection {
    pub k: usize,
    /// Constrain prompts to exactly this many distinct normal categories.
    pub class_count: Option<usize>,
}

/// Evaluate a pipeline on a (protocol-applied) target manifest.
///
/// Per seed: prompts are re-selected from the target's prompt pool, every
/// test-split image is scored against them, and rank metrics are computed.
/// Prompt images drawn from the test split are excluded from the scored set.
pub fn evaluate(
    pipeline: &Pipeline,
    target: &DatasetManifest,
    selection: PromptSelection,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one seed".into()));
    }
    let pool = PromptPool {
        from_test: pipeline.config.data.prompts_from_test,
    };
    let mut seed_results = Vec::with_capacity(seeds.len());
    let mut per_category: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = select_prompt_set(target, selection.k, &mut rng, selection.class_count, pool)?;
        let prompt_paths: HashSet<_> = prompts.iter().map(|p| p.path.clone()).collect();
        let prompt_maps: Vec<_> = prompts
            .iter()
            .map(|p| pipeline.encode_path(&p.path))
            .collect::<Result<Vec<_>>>()?;
        let prompt_refs: Vec<&PatchTokenMaps> = prompt_maps.iter().map(|a| a.as_ref()).collect();
        let protos = pipeline.prototypes_for(&target.name)?;

        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut categories = Vec::new();
        for entry in target.split_entries(Split::Test) {
            if pool.from_test && prompt_paths.contains(&entry.path) {
                continue;
            }
            let query = pipeline.encode_path(&entry.path)?;
            let breakdown = pipeline.score_features(&query, &prompt_refs, &protos)?;
            scores.push(breakdown.score);
            labels.push(entry.anomalous);
            categories.push(entry.category.clone());
        }
        let (auroc, auprc) = rank_metrics(&scores, &labels)?;
        seed_results.push(SeedResult { seed, auroc, auprc });

        // Category subsets where both classes are present.
        let distinct: HashSet<&String> = categories.iter().collect();
        if distinct.len() > 1 {
            for cat in distinct {
                let (cat_scores, cat_labels): (Vec<f64>, Vec<bool>) = scores
                    .iter()
                    .zip(&labels)
                    .zip(&categories)
                    .filter(|(_, c)| *c == cat)
                    .map(|((s, l), _)| (*s, *l))
                    .unzip();
                if let Ok(metrics) = rank_metrics(&cat_scores, &cat_labels) {
                    per_category.entry(cat.clone()).or_default().push(metrics);
                }
            }
        }
    }

    let categories = per_category
        .into_iter()
        .filter(|(_, v)| v.len() == seeds.len())
        .map(|(category, v)| {
            let n = v.len() as f64;
            CategoryResult {
                category,
                auroc: v.iter().map(|m| m.0).sum::<f64>() / n,
                auprc: v.iter().map(|m| m.1).sum::<f64>() / n,
            }
        })
        .collect();
    EvalReport::from_seed_results(target.name.clone(), selection.k, seed_results, categories)
}

/// Evaluate once per prompt-class count; returns `(class_count, mean AUROC)`.
pub fn prompt_diversity_sweep(
    pipeline: &Pipeline,
    target: &DatasetManifest,
    k: usize,
    class_counts: &[usize],
    seeds: &[u64],
) -> Result<Vec<(usize, f64)>> {
    if class_counts.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one class count".into()));
    }
    let mut results = Vec::with_capacity(class_counts.len());
    for &count in class_counts {
        let report = evaluate(
            pipeline,
            target,
            PromptSelection {
                k,
                class_count: Some(count),
            },
            seeds,
        )?;
        results.push((count, report.auroc_mean));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive pairwise oracle: P(random positive outranks random
    /// negative), ties counted one half.
    pub(crate) fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfectly_separated_scores_hit_one() {
        let (auroc, auprc) =
            rank_metrics(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auroc, 1.0);
        assert_eq!(auprc, 1.0);
    }

    #[test]
    fn all_ties_give_half_auroc() {
        let (auroc, _) = rank_metrics(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(auroc, 0.5);
    }

    #[test]
    fn spec_example_is_three_quarters() {
        let (auroc, _) =
            rank_metrics(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auroc, 0.75);
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let n = 3 + rand::Rng::random_range(&mut rng, 0..40);
            // Coarse grid of score values to force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rand::Rng::random_range(&mut rng, 0..7)) / 7.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rand::Rng::random::<bool>(&mut rng)).collect();
            labels[0] = true;
            labels[1] = false;
            let (auroc, _) = rank_metrics(&scores, &labels).unwrap();
            let oracle = pairwise_auroc(&scores, &labels);
            assert_eq!(auroc, oracle, "scores {scores:?} labels {labels:?}");
        }
    }

    #[test]
    fn label_flip_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = 4 + rand::Rng::random_range(&mut rng, 0..30);
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rand::Rng::random_range(&mut rng, 0..5)))
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            labels[0] = true;
            labels[1] = false;
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let (a, _) = rank_metrics(&scores, &labels).unwrap();
            let (b, _) = rank_metrics(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let scores = vec![0.11, 0.52, 0.37, 0.91, 0.08, 0.66];
        let labels = vec![false, true, false, true, false, true];
        let (base, base_pr) = rank_metrics(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        assert_eq!(rank_metrics(&affine, &labels).unwrap(), (base, base_pr));
        assert_eq!(rank_metrics(&exp, &labels).unwrap(), (base, base_pr));
    }

    #[test]
    fn auprc_against_hand_computed_case() {
        // Descending order: 0.9(+), 0.7(-), 0.5(+), 0.2(-)
        // group1: R=0.5, P=1 -> 0.5; group3: R=1, P=2/3 -> 0.5*2/3
        let (_, auprc) = rank_metrics(&[0.9, 0.7, 0.5, 0.2], &[true, false, true, false]).unwrap();
        let expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((auprc - expected).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            rank_metrics(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std([0.8, 0.8, 0.8].into_iter());
        assert!((m - 0.8).abs() < 1e-15);
        assert!(s.abs() < 1e-12);
        let (m, s) = mean_std([0.0, 1.0].into_iter());
        assert!((m - 0.5).abs() < 1e-15);
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_serializes_both_formats() {
        let report = EvalReport::from_seed_results(
            "demo".into(),
            2,
            vec![
                SeedResult { seed: 1, auroc: 0.9, auprc: 0.8 },
                SeedResult { seed: 2, auroc: 1.0, auprc: 0.9 },
            ],
            vec![],
        )
        .unwrap();
        let json = report.to_json().unwrap();
        assert!(json.contains("\"auroc_mean\""));
        let csv = report.to_csv();
        assert!(csv.starts_with("dataset,K,seed,auroc,auprc\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!((report.auroc_mean - 0.95).abs() < 1e-12);
        assert!(report.auroc_std > 0.0);
    }

    #[test]
    fn out_of_range_metrics_are_rejected() {
        let bad = EvalReport::from_seed_results(
            "demo".into(),
            2,
            vec![SeedResult { seed: 1, auroc: 1.2, auprc: 0.8 }],
            vec![],
        );
        assert!(bad.is_err());
    }
}
