//! Threshold-free evaluation: image-level AUROC, pixel-level AUROC and
//! pixel-level average precision, pooled per category with an unweighted
//! mean row. Ties receive half credit (average-rank convention).

use std::collections::HashMap;

use ndarray::Array2;

use crate::datasets::{DatasetIndex, Label};
use crate::error::{Error, Result};

/// Area under the ROC curve via average ranks (equivalent to the normalized
/// pairwise-comparison statistic, ties counted half).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length");
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks across tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // 1-based ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision with step interpolation over descending score
/// thresholds; tied scores share one threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length");
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                tp += 1;
            }
            seen += 1;
            j += 1;
        }
        let precision = tp as f64 / seen as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Scores produced for one test record.
#[derive(Clone, Debug)]
pub struct RecordOutput {
    pub image_score: f64,
    /// Full-resolution pixel score map.
    pub pixel_scores: Array2<f64>,
    /// Ground-truth pixel labels (all zeros for normal images).
    pub pixel_labels: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_category: Vec<CategoryMetrics>,
    pub mean: CategoryMetrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,i_auc,p_auc,p_map\n");
        for row in self.per_category.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                row.category, row.image_auroc, row.pixel_auroc, row.pixel_ap
            ));
        }
        out
    }

    /// Aligned text table in the `P-AUC / P-mAP` style plus I-AUC.
    pub fn to_table(&self) -> String {
        let width = self
            .per_category
            .iter()
            .map(|c| c.category.len())
            .chain(std::iter::once(8))
            .max()
            .unwrap_or(8);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>15}\n",
            "Category", "I-AUC", "P-AUC / P-mAP"
        );
        for row in self.per_category.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{:<width$}  {:>7.3}  {:>7.3} / {:>5.3}\n",
                row.category,
                100.0 * row.image_auroc,
                100.0 * row.pixel_auroc,
                100.0 * row.pixel_ap,
            ));
        }
        out
    }
}

/// Pool scores per category and compute the three metrics plus the
/// unweighted category mean. `outputs` is keyed by the record's position in
/// `index.records`; every test record must be scored.
pub fn evaluate(
    index: &DatasetIndex,
    outputs: &HashMap<usize, RecordOutput>,
) -> Result<EvalReport> {
    let mut per_category = Vec::new();
    for category in &index.categories {
        let mut image_scores = Vec::new();
        let mut image_labels = Vec::new();
        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        for (i, record) in index.records.iter().enumerate() {
            if record.split != crate::datasets::Split::Test || &record.category != category {
                continue;
            }
            let out = outputs
                .get(&i)
                .ok_or_else(|| Error::MissingScore(record.path.clone()))?;
            image_scores.push(out.image_score);
            image_labels.push(u8::from(record.label == Label::Anomalous));
            pixel_scores.extend(out.pixel_scores.iter().copied());
            pixel_labels.extend(out.pixel_labels.iter().map(|&v| v.min(1)));
        }
        per_category.push(CategoryMetrics {
            category: category.clone(),
            image_auroc: auroc(&image_scores, &image_labels)?,
            pixel_auroc: auroc(&pixel_scores, &pixel_labels)?,
            pixel_ap: average_precision(&pixel_scores, &pixel_labels)?,
        });
    }
    if per_category.is_empty() {
        return Err(Error::Layout("no categories to evaluate".into()));
    }
    let n = per_category.len() as f64;
    let mean = CategoryMetrics {
        category: "Mean".into(),
        image_auroc: per_category.iter().map(|c| c.image_auroc).sum::<f64>() / n,
        pixel_auroc: per_category.iter().map(|c| c.pixel_auroc).sum::<f64>() / n,
        pixel_ap: per_category.iter().map(|c| c.pixel_ap).sum::<f64>() / n,
    };
    Ok(EvalReport { per_category, mean })
}

#[cfg(test)]
pub(crate) mod oracles {
    /// O(n^2) pairwise-comparison AUROC with half credit on ties.
    pub fn auroc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yi == 0 || yj != 0 {
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

    /// Exhaustive threshold-sweep average precision.
    pub fn ap_threshold_sweep(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&y| y != 0).count() as f64;

        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &y) in scores.iter().zip(labels) {
                if s >= t {
                    if y != 0 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let precision = tp / (tp + fp);
            let recall = tp / n_pos;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }
}

#[cfg(test)]
mod tests {
    use super::oracles::*;
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfectly_separated_scores() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let scores = [0.5; 6];
        let labels = [1, 0, 1, 0, 0, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn single_positive_ranked_last() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [0, 0, 0, 1];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn random_instances_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let n = rng.random_range(5..100);
            // Quantized scores force tie groups.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..20) as f64) / 20.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;

            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairwise(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-10,
                "trial {trial}: auroc {fast} vs oracle {slow}"
            );

            let fast = average_precision(&scores, &labels).unwrap();
            let slow = ap_threshold_sweep(&scores, &labels);
            assert!(
                (fast - slow).abs() < 1e-10,
                "trial {trial}: ap {fast} vs oracle {slow}"
            );
        }
    }

    #[test]
    fn rank_invariance_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..40).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let squashed: Vec<f64> = scores.iter().map(|&s| (5.0 * s).exp()).collect();
        assert!(
            (auroc(&scores, &labels).unwrap() - auroc(&squashed, &labels).unwrap()).abs() < 1e-12
        );
        assert!(
            (average_precision(&scores, &labels).unwrap()
                - average_precision(&squashed, &labels).unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn auroc_symmetry_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut scores: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        scores.dedup();
        let mut labels: Vec<u8> = (0..scores.len()).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    fn fixture_eval() -> (DatasetIndex, HashMap<usize, RecordOutput>) {
        let dir = tempfile::tempdir().unwrap();
        crate::datasets::fixtures::mvtec_tree(dir.path());
        let index = crate::datasets::index_mvtec(dir.path()).unwrap();

        let mut outputs = HashMap::new();
        for (i, r) in index.records.iter().enumerate() {
            if r.split != crate::datasets::Split::Test {
                continue;
            }
            let anomalous = r.label == Label::Anomalous;
            // Ground-truth maps used as score maps.
            let mut labels = Array2::<u8>::zeros((8, 8));
            if anomalous {
                labels.slice_mut(ndarray::s![0..4, 0..4]).fill(1);
            }
            let scores = labels.mapv(|v| f64::from(v));
            outputs.insert(
                i,
                RecordOutput {
                    image_score: if anomalous { 1.0 } else { 0.0 },
                    pixel_scores: scores,
                    pixel_labels: labels,
                },
            );
        }
        (index, outputs)
    }

    #[test]
    fn oracle_scoring_gives_perfect_metrics() {
        let (index, outputs) = fixture_eval();
        let report = evaluate(&index, &outputs).unwrap();
        assert_eq!(report.per_category.len(), 2);
        for row in &report.per_category {
            assert_eq!(row.image_auroc, 1.0);
            assert_eq!(row.pixel_auroc, 1.0);
            assert_eq!(row.pixel_ap, 1.0);
        }
        assert_eq!(report.mean.pixel_auroc, 1.0);
    }

    #[test]
    fn constant_maps_give_half_pixel_auroc() {
        let (index, mut outputs) = fixture_eval();
        for out in outputs.values_mut() {
            out.pixel_scores.fill(0.5);
        }
        let report = evaluate(&index, &outputs).unwrap();
        for row in &report.per_category {
            assert_eq!(row.pixel_auroc, 0.5);
        }
    }

    #[test]
    fn missing_score_is_an_error() {
        let (index, mut outputs) = fixture_eval();
        let key = *outputs.keys().next().unwrap();
        outputs.remove(&key);
        assert!(matches!(
            evaluate(&index, &outputs),
            Err(Error::MissingScore(_))
        ));
    }

    #[test]
    fn two_category_fixture_matches_hand_table() {
        // Degrade one category's scores and verify against per-metric
        // hand computation.
        let (index, mut outputs) = fixture_eval();
        for (i, r) in index.records.iter().enumerate() {
            if r.category == "casing" {
                if let Some(out) = outputs.get_mut(&i) {
                    // Push half the anomalous pixels below the normal level.
                    let mut flipped = 0;
                    for v in out.pixel_scores.iter_mut() {
                        if *v == 1.0 && flipped < 8 {
                            *v = 0.0;
                            flipped += 1;
                        }
                    }
                }
            }
        }
        let report = evaluate(&index, &outputs).unwrap();

        // Recompute the casing pixel pool by hand with the oracles.
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, r) in index.records.iter().enumerate() {
            if r.category == "casing" && r.split == crate::datasets::Split::Test {
                let o = &outputs[&i];
                scores.extend(o.pixel_scores.iter().copied());
                labels.extend(o.pixel_labels.iter().copied());
            }
        }
        let expect_auc = auroc_pairwise(&scores, &labels);
        let expect_ap = ap_threshold_sweep(&scores, &labels);
        let casing = report.per_category.iter().find(|c| c.category == "casing").unwrap();
        assert!((casing.pixel_auroc - expect_auc).abs() < 1e-10);
        assert!((casing.pixel_ap - expect_ap).abs() < 1e-10);
        // The untouched category stays perfect.
        let bolt = report.per_category.iter().find(|c| c.category == "bolt").unwrap();
        assert_eq!(bolt.pixel_auroc, 1.0);
        // Mean row is the unweighted average.
        let mean = (casing.pixel_auroc + bolt.pixel_auroc) / 2.0;
        assert!((report.mean.pixel_auroc - mean).abs() < 1e-12);
    }

    #[test]
    fn report_rendering_includes_mean_row() {
        let (index, outputs) = fixture_eval();
        let report = evaluate(&index, &outputs).unwrap();
        let csv = report.to_csv();
        assert!(csv.lines().count() == 4); // header + 2 categories + mean
        assert!(csv.contains("Mean"));
        let table = report.to_table();
        assert!(table.contains("P-AUC / P-mAP"));
        assert!(table.contains("Mean"));
    }
}
