use crate::error::{Error, Result};

/// `(1/N) Σ 1/r_i` over 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("MRR of an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::UndefinedMetric("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// 1-based rank of candidate `target` when sorting by descending score;
/// equal scores are ordered by candidate index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// `H(n) = Σ_{k=1..n} 1/k`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Expected MRR when the positive lands at a uniformly random rank among `n`.
pub fn random_mrr(n: usize) -> f64 {
    harmonic(n) / n as f64
}

/// Probability that a random positive outscores a random negative, with
/// ties counted as one half. Computed from sorted tie groups in integer
/// arithmetic, so it equals the all-pairs count exactly.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC over NaN scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U statistic
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Mean AUC over label columns that contain both classes; also returns the
/// columns used. `scores[i][c]` and `labels[i][c]` index sample `i`, column `c`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<(f64, Vec<usize>)> {
    let cols = labels.first().map_or(0, |r| r.len());
    let mut used = Vec::new();
    let mut total = 0.0;
    for c in 0..cols {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match auc(&s, &l) {
            Ok(a) => {
                total += a;
                used.push(c);
            }
            Err(Error::UndefinedMetric(_)) => log::debug!("column {c}: single class, excluded from macro AUC"),
            Err(e) => return Err(e),
        }
    }
    if used.is_empty() {
        return Err(Error::UndefinedMetric("no label column has both classes".into()));
    }
    Ok((total / used.len() as f64, used))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mrr_examples() {
        assert!((mrr(&[1, 2, 4]).unwrap() - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
    }

    #[test]
    fn random_baseline_for_twenty() {
        assert!((random_mrr(20) - 0.1799).abs() < 1e-4);
    }

    #[test]
    fn ties_break_by_index() {
        let s = [0.5, 0.9, 0.5, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 0), 2);
        assert_eq!(rank_of(&s, 2), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn auc_examples() {
        let l = [true, false, true, false];
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn macro_auc_skips_single_class_columns() {
        let scores = vec![vec![0.9, 0.1], vec![0.1, 0.2]];
        let labels = vec![vec![true, true], vec![false, true]];
        let (m, used) = macro_auc(&scores, &labels).unwrap();
        assert_eq!(used, vec![0]);
        assert_eq!(m, 1.0);
    }
}
