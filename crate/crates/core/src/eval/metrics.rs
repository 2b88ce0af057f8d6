//! Clustering quality against ground-truth labels.

use crate::error::{Error, Result};

fn check(assignments: &[usize], labels: &[usize]) -> Result<()> {
    if assignments.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: assignments.len(),
            right: labels.len(),
        });
    }
    if assignments.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// `table[a][l]` counts of items in cluster `a` with label `l`.
fn contingency(assignments: &[usize], labels: &[usize]) -> Vec<Vec<usize>> {
    let na = assignments.iter().max().map_or(0, |m| m + 1);
    let nl = labels.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0usize; nl]; na];
    for (&a, &l) in assignments.iter().zip(labels) {
        t[a][l] += 1;
    }
    t
}

/// Index of the largest count; ties go to the smallest index.
fn argmax_first(v: impl Iterator<Item = usize>) -> (usize, usize) {
    let mut best = (0, 0);
    for (i, c) in v.enumerate() {
        if c > best.1 {
            best = (i, c);
        }
    }
    best
}

/// Accuracy after mapping every cluster to its majority label.
pub fn cluster_top1(assignments: &[usize], labels: &[usize], num_clusters: usize) -> Result<f64> {
    check(assignments, labels)?;
    if let Some(&bad) = assignments.iter().find(|&&a| a >= num_clusters) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: num_clusters,
        });
    }
    let t = contingency(assignments, labels);
    let hits: usize = t.iter().map(|row| argmax_first(row.iter().copied()).1).sum();
    Ok(hits as f64 / labels.len() as f64)
}

/// Plug-in mutual information of the empirical joint distribution, in nats.
pub fn cluster_mi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check(assignments, labels)?;
    let t = contingency(assignments, labels);
    let n = labels.len() as f64;
    let row: Vec<f64> = t.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let nl = t.first().map_or(0, Vec::len);
    let col: Vec<f64> = (0..nl).map(|l| t.iter().map(|r| r[l]).sum::<usize>() as f64).collect();
    let mut mi = 0.0;
    for (a, r) in t.iter().enumerate() {
        for (l, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row[a] * col[l])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Item-weighted mean over classes of the share of the class that sits in
/// its most common cluster.
pub fn class_coherence(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check(assignments, labels)?;
    let t = contingency(assignments, labels);
    let nl = t.first().map_or(0, Vec::len);
    let hits: usize = (0..nl).map(|l| argmax_first(t.iter().map(|r| r[l])).1).sum();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert_eq!(cluster_top1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        assert_eq!(cluster_top1(&[2, 0, 1], &[2, 0, 1], 3).unwrap(), 1.0);
        let mi = cluster_mi(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap();
        assert!((mi - 4f64.ln()).abs() < 1e-12);
        assert_eq!(cluster_mi(&[0; 5], &[0, 1, 2, 0, 1]).unwrap(), 0.0);
        // Class 0 split 3-vs-1, class 1 whole.
        let c = class_coherence(&[0, 0, 0, 1, 1, 1], &[0, 0, 0, 0, 1, 1]).unwrap();
        assert!((c - (3.0 + 2.0) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(cluster_mi(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(
            cluster_top1(&[3], &[0], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
