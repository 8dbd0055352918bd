//! Ranking metrics for imbalanced binary prediction: AUROC and AUPRC.
//!
//! Production paths are rank-based (`O(n log n)`); [`oracle`] keeps the
//! quadratic pair-counting and explicit curve constructions that the fast
//! paths are checked against.

use crate::error::{Error, Result};

/// Scores with binary labels, validated to contain both classes.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.len() < 2 {
            return Err(Error::Metric("need at least 2 scored items".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        let pos = labels.iter().filter(|l| **l).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::Metric(
                "labels are single-class; both classes required".into(),
            ));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    /// Indices sorted by descending score; ties keep input order.
    fn desc_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap());
        idx
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties scoring half.
pub fn auroc(sl: &ScoredLabels) -> f64 {
    let n = sl.len();
    let order = {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| sl.scores[a].partial_cmp(&sl.scores[b]).unwrap());
        idx
    };
    let p = sl.positives();
    let q = n - p;
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sl.scores[order[j]] == sl.scores[order[i]] {
            j += 1;
        }
        // items i..j share the mid-rank of 1-based positions i+1..=j
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if sl.labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    u / (p * q) as f64
}

/// Area under the precision-recall curve as average precision. Tied scores
/// enter as one block: every positive in the block is credited with the
/// precision after the whole block is in.
pub fn auprc(sl: &ScoredLabels) -> f64 {
    let order = sl.desc_order();
    let n = sl.len();
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sl.scores[order[j]] == sl.scores[order[i]] {
            j += 1;
        }
        let block_pos = order[i..j].iter().filter(|&&k| sl.labels[k]).count();
        tp += block_pos;
        seen += j - i;
        if block_pos > 0 {
            ap += block_pos as f64 * (tp as f64 / seen as f64);
        }
        i = j;
    }
    ap / sl.positives() as f64
}

/// Mean and sample standard deviation (n−1) across per-seed values.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Metric("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Format a fractional metric as percent with one decimal: `36.4±0.2`.
pub fn format_percent(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std)
}

/// Parse the `36.4±0.2` form back to fractions.
pub fn parse_percent(s: &str) -> Result<(f64, f64)> {
    let (m, d) = s
        .split_once('±')
        .ok_or_else(|| Error::Metric(format!("'{s}' is not mean±std")))?;
    let mean: f64 = m
        .trim()
        .parse()
        .map_err(|_| Error::Metric(format!("bad mean in '{s}'")))?;
    let std: f64 = d
        .trim()
        .parse()
        .map_err(|_| Error::Metric(format!("bad std in '{s}'")))?;
    Ok((mean / 100.0, std / 100.0))
}

/// Reference implementations with independent computational paths, kept in
/// the library so integration checks can replay them.
pub mod oracle {
    use super::ScoredLabels;

    /// AUROC by counting all (positive, negative) pairs.
    pub fn auroc_pairs(sl: &ScoredLabels) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in sl.labels().iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in sl.labels().iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if sl.scores()[i] > sl.scores()[j] {
                    wins += 1.0;
                } else if sl.scores()[i] == sl.scores()[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// AUPRC from the explicit precision-recall curve: one point per
    /// distinct threshold, AP = Σ (R_k − R_{k−1}) · P_k.
    pub fn auprc_curve(sl: &ScoredLabels) -> f64 {
        let mut thresholds: Vec<f64> = sl.scores().to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let total_pos = sl.positives() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let mut tp = 0usize;
            let mut fp = 0usize;
            for (s, l) in sl.scores().iter().zip(sl.labels()) {
                if *s >= t {
                    if *l {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / total_pos;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sl(scores: &[f64], labels: &[u8]) -> ScoredLabels {
        ScoredLabels::new(scores.to_vec(), labels.iter().map(|l| *l == 1).collect()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = sl(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(auroc(&s), 1.0);
        assert_eq!(auprc(&s), 1.0);
    }

    #[test]
    fn worked_example() {
        let s = sl(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]);
        assert_eq!(auroc(&s), 0.75);
        assert!((auprc(&s) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn all_tied_scores_give_half_auroc() {
        let s = sl(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]);
        assert_eq!(auroc(&s), 0.5);
        // single block: both positives credited with prevalence
        assert_eq!(auprc(&s), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(
            ScoredLabels::new(vec![0.1, 0.2], vec![true, true]),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            ScoredLabels::new(vec![0.1, 0.2], vec![false, false]),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            ScoredLabels::new(vec![f64::NAN, 0.2], vec![true, false]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn exhaustive_small_inputs_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=12usize {
            for pattern in 0u32..(1 << n) {
                let ones = pattern.count_ones();
                if ones == 0 || ones == n as u32 {
                    continue;
                }
                let labels: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
                // draw from a coarse grid so ties are common
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
                let s = ScoredLabels::new(scores, labels).unwrap();
                let fast = auroc(&s);
                let slow = oracle::auroc_pairs(&s);
                assert_eq!(fast, slow, "auroc n={n} pattern={pattern:b}");
                let fast = auprc(&s);
                let slow = oracle::auprc_curve(&s);
                assert!(
                    (fast - slow).abs() < 1e-12,
                    "auprc n={n} pattern={pattern:b}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn random_scores_ap_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4000;
        let p = 0.3;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let s = ScoredLabels::new(scores, labels).unwrap();
        assert!((auprc(&s) - p).abs() < 0.05);
    }

    #[test]
    fn aggregate_and_format() {
        assert_eq!(aggregate_runs(&[36.3, 36.3, 36.3]).unwrap(), (36.3, 0.0));
        let (m, s) = aggregate_runs(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert!(aggregate_runs(&[]).is_err());

        let text = format_percent(0.364, 0.002);
        assert_eq!(text, "36.4±0.2");
        let (m, s) = parse_percent(&text).unwrap();
        assert_eq!(format_percent(m, s), text);
        assert!(parse_percent("36.4").is_err());
    }

    proptest! {
        // scores on a dyadic grid so monotone maps below are float-exact
        #[test]
        fn monotone_transform_invariance(
            raw in proptest::collection::vec((0u16..1024, any::<bool>()), 2..40)
        ) {
            let pos = raw.iter().filter(|(_, l)| *l).count();
            prop_assume!(pos > 0 && pos < raw.len());
            let scores: Vec<f64> = raw.iter().map(|(v, _)| *v as f64 / 1024.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            let base = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| 4.0 * s + 3.0).collect();
            let trans = ScoredLabels::new(mapped, labels).unwrap();
            prop_assert_eq!(auroc(&base), auroc(&trans));
            prop_assert_eq!(auprc(&base), auprc(&trans));
        }

        #[test]
        fn negated_scores_complement_auroc(
            raw in proptest::collection::vec((0u16..4096, any::<bool>()), 2..40)
        ) {
            let mut seen = std::collections::HashSet::new();
            let distinct: Vec<(u16, bool)> = raw.into_iter()
                .filter(|(v, _)| seen.insert(*v))
                .collect();
            let pos = distinct.iter().filter(|(_, l)| *l).count();
            prop_assume!(distinct.len() >= 2 && pos > 0 && pos < distinct.len());
            let scores: Vec<f64> = distinct.iter().map(|(v, _)| *v as f64).collect();
            let labels: Vec<bool> = distinct.iter().map(|(_, l)| *l).collect();
            let fwd = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
            let neg = ScoredLabels::new(scores.iter().map(|s| -s).collect(), labels).unwrap();
            prop_assert!((auroc(&fwd) + auroc(&neg) - 1.0).abs() < 1e-12);
        }
    }
}
