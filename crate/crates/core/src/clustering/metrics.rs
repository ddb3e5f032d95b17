use std::collections::BTreeMap;

use super::SimilarityMatrix;

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions trivial (all singletons or one block)
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// `Σ_c cut(C, V∖C) / vol(C)` over the clusters of `labels`.
pub fn normalized_cut(s: &SimilarityMatrix, labels: &[usize]) -> f64 {
    let n = s.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut cut = vec![0.0; k];
    let mut vol = vec![0.0; k];
    for a in 0..n {
        for b in 0..n {
            let w = s.get(a, b);
            vol[labels[a]] += w;
            if labels[a] != labels[b] {
                cut[labels[a]] += w;
            }
        }
    }
    cut.iter()
        .zip(&vol)
        .filter(|(_, &v)| v > 0.0)
        .map(|(c, v)| c / v)
        .sum()
}
