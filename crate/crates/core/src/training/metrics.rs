use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts with class 1 as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn specificity(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

fn check_binary(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("binary metrics need labels in {{0, 1}}, found {l}")));
    }
    Ok(())
}

/// Predicts positive when the positive-class probability is at least `threshold`.
pub fn confusion(scores: &[f64], labels: &[usize], threshold: f64) -> Result<Confusion> {
    check_binary(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve by the trapezoid rule over every distinct score threshold.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// ACC/SEN/SPE at threshold 0.5 and AUC. Fails with [`Error::AucUndefined`] on a single-class set.
pub fn binary_metrics(scores: &[f64], labels: &[usize]) -> Result<Metrics> {
    let m = binary_metrics_lenient(scores, labels)?;
    if m.auc.is_none() {
        return Err(Error::AucUndefined);
    }
    Ok(m)
}

/// As [`binary_metrics`], leaving AUC empty instead of failing on a single-class set.
pub fn binary_metrics_lenient(scores: &[f64], labels: &[usize]) -> Result<Metrics> {
    let confusion = confusion(scores, labels, 0.5)?;
    let auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::AucUndefined) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        acc: confusion.accuracy(),
        sen: confusion.sensitivity(),
        spe: confusion.specificity(),
        auc,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / pairs
    }

    #[test]
    fn confusion_fixture() {
        let c = Confusion { tp: 2, fp: 0, tn: 3, fn_: 1 };
        assert!((c.sensitivity() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.specificity(), 1.0);
        assert!((c.accuracy() - 5.0 / 6.0).abs() < 1e-15);
        let scores = [0.9, 0.7, 0.2, 0.1, 0.3, 0.4];
        let labels = [1, 1, 1, 0, 0, 0];
        assert_eq!(confusion(&scores, &labels, 0.5).unwrap(), c);
    }

    #[test]
    fn auc_examples() {
        assert!((roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0]).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(matches!(roc_auc(&[0.2, 0.4], &[1, 1]), Err(Error::AucUndefined)));
        assert!(matches!(binary_metrics(&[0.2, 0.4], &[0, 0]), Err(Error::AucUndefined)));
        assert!(binary_metrics_lenient(&[0.2, 0.4], &[0, 0]).unwrap().auc.is_none());
    }

    proptest! {
        #[test]
        fn trapezoid_matches_pairwise(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<usize> = data.iter().map(|(_, l)| *l as usize).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert!((roc_auc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs() < 1e-9);
        }
    }
}
