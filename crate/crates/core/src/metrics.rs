//! Ranking metrics: ROC AUC and average precision.

use crate::error::{Error, Result};

/// Scores paired with binary labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let s = Self { scores, labels };
        s.check()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    fn check(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::Contract(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Contract(format!("label {l} is not 0 or 1")));
        }
        if self.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN score".into()));
        }
        Ok(())
    }

    /// Indices sorted by descending score; equal scores keep input order.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(data: &ScoredLabels) -> Result<f64> {
    data.check()?;
    let p = data.positives();
    let n = data.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {p} positive and {n} negative"
        )));
    }
    // Mann-Whitney U from average ranks (ascending, 1-based). Every term is
    // a multiple of 0.5, so the sums are exact.
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && data.scores[idx[j + 1]] == data.scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = idx[i..=j].iter().filter(|&&k| data.labels[k] == 1).count();
        rank_sum += avg * pos_in_tie as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p * n) as f64)
}

/// Area under the precision-recall curve by rank walk: the mean of the
/// precision at each positive, in descending score order.
pub fn average_precision(data: &ScoredLabels) -> Result<f64> {
    data.check()?;
    let p = data.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut tp = 0usize;
    let mut total = 0.0;
    for (rank, &k) in data.descending().iter().enumerate() {
        if data.labels[k] == 1 {
            tp += 1;
            total += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / p as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sl(s: &[f64], l: &[u8]) -> ScoredLabels {
        ScoredLabels::new(s.to_vec(), l.to_vec()).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&sl(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&sl(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])).unwrap(), 0.75);
        assert_eq!(auc(&sl(&[0.3; 5], &[1, 0, 0, 1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&sl(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        let ap = average_precision(&sl(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap = average_precision(&sl(&[5.0, 4.0, 3.0, 2.0, 1.0], &[0, 0, 0, 0, 1])).unwrap();
        assert!((ap - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&sl(&[0.1, 0.2], &[1, 1])), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&sl(&[0.1, 0.2], &[0, 0])), Err(Error::UndefinedMetric(_))));
        assert!(matches!(average_precision(&sl(&[0.1], &[0])), Err(Error::UndefinedMetric(_))));
        assert!(ScoredLabels::new(vec![0.1], vec![]).is_err());
        assert!(ScoredLabels::new(vec![f64::NAN], vec![1]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..6).prop_map(|v| v as f64 * 0.5 - 1.0), n),
                proptest::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform((s, l) in instance()) {
            prop_assume!(l.contains(&1) && l.contains(&0));
            let a = sl(&s, &l);
            let b = sl(&s.iter().map(|x| (3.0 * x).exp() + 7.0).collect::<Vec<_>>(), &l);
            prop_assert_eq!(auc(&a).unwrap(), auc(&b).unwrap());
            prop_assert_eq!(average_precision(&a).unwrap(), average_precision(&b).unwrap());
        }

        #[test]
        fn bounded((s, l) in instance()) {
            prop_assume!(l.contains(&1) && l.contains(&0));
            let a = sl(&s, &l);
            let u = auc(&a).unwrap();
            let ap = average_precision(&a).unwrap();
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }
}
