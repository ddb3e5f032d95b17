use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClusterError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Lloyd iterations stop once no center moves farther than this.
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 20,
            max_iterations: 300,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub wcss: f64,
    /// Index of the restart that won.
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on a zero-weight tail
            while d2[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// One Lloyd run; `None` when a cluster empties.
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, config: &KMeansConfig) -> Option<KMeansResult> {
    let dim = points[0].len();
    let k = centers.len();
    let mut labels = vec![0; points.len()];
    for _ in 0..config.max_iterations {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        let mut shift: f64 = 0.0;
        for ((center, sum), &count) in centers.iter_mut().zip(sums).zip(&counts) {
            let updated: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            shift = shift.max(sq_dist(center, &updated).sqrt());
            *center = updated;
        }
        if shift <= config.tolerance {
            break;
        }
    }
    let mut wcss = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (c, d) = nearest(p, &centers);
        *l = c;
        wcss += d;
    }
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if counts.contains(&0) {
        return None;
    }
    Some(KMeansResult {
        labels,
        centers,
        wcss,
        restart: 0,
    })
}

/// k-means with k-means++ seeding; restart `r` draws from seed `seed + r`.
/// The lowest within-cluster sum of squares wins, earlier restarts on ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, config: &KMeansConfig) -> Result<KMeansResult, ClusterError> {
    if k == 0 || k > points.len() {
        return Err(ClusterError::InvalidArgument(format!(
            "k = {k} with {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(ClusterError::InvalidArgument("points differ in dimension".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..config.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let centers = plus_plus_seed(points, k, &mut rng);
        if let Some(mut run) = lloyd(points, centers, config) {
            run.restart = r;
            if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
                best = Some(run);
            }
        }
    }
    best.ok_or(ClusterError::EmptyCluster)
}
