use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::eigen::{symmetric_eigen, EigenDecomposition};
use super::kmeans::{kmeans, KMeansConfig};
use super::{ClusterError, SimilarityMatrix};
use crate::numfmt::f17;

/// Laplacian spectrum and gap choice behind a cluster count.
#[derive(Debug, Clone, PartialEq)]
pub struct EigengapDiagnostics {
    /// All Laplacian eigenvalues, ascending; `eigenvalues[k - 1]` is `λ_k`.
    pub eigenvalues: Vec<f64>,
    /// `gaps[k - 1] = λ_{k+1} − λ_k` for `k = 1..n−1`.
    pub gaps: Vec<f64>,
    pub n_min: usize,
    pub n_max: usize,
    pub chosen: usize,
    /// Largest gap over every `k`, ignoring the allowed range.
    pub global_argmax: usize,
}

impl EigengapDiagnostics {
    /// `k,eigenvalue,gap` with the gap left empty on the last row.
    pub fn to_csv(&self, stamp: &str) -> String {
        let mut out = format!("# {stamp}\n# chosen={} global_argmax={} range={}..{}\nk,eigenvalue,gap\n",
            self.chosen, self.global_argmax, self.n_min, self.n_max);
        for (i, l) in self.eigenvalues.iter().enumerate() {
            let gap = self.gaps.get(i).map(|g| f17(*g)).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", i + 1, f17(*l), gap);
        }
        out
    }
}

/// Per-student cluster labels in `0..n_clusters`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub student_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub n_clusters: usize,
    pub diagnostics: Option<EigengapDiagnostics>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        self.labels.iter().for_each(|&l| sizes[l] += 1);
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    pub fn to_csv(&self, stamp: &str) -> String {
        let mut out = format!("# {stamp}\nstudent_id,cluster\n");
        for (id, l) in self.student_ids.iter().zip(&self.labels) {
            let _ = writeln!(out, "{id},{l}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<(Self, String), ClusterError> {
        let stamp = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .unwrap_or_default()
            .to_string();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut student_ids = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| ClusterError::Format(e.to_string()))?;
            if record.len() != 2 {
                return Err(ClusterError::Format("assignment rows need student_id,cluster".into()));
            }
            student_ids.push(record[0].to_string());
            labels.push(
                record[1]
                    .parse()
                    .map_err(|_| ClusterError::Format(format!("bad cluster label {:?}", &record[1])))?,
            );
        }
        let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
        let assignment = ClusterAssignment {
            student_ids,
            labels,
            n_clusters,
            diagnostics: None,
        };
        if assignment.sizes().contains(&0) {
            return Err(ClusterError::Format("assignment has an empty cluster".into()));
        }
        Ok((assignment, stamp))
    }
}

/// `L = I − Dg^(−1/2) S Dg^(−1/2)`, row-major.
pub fn normalized_laplacian(s: &SimilarityMatrix) -> Result<Vec<f64>, ClusterError> {
    let n = s.len();
    let mut inv_sqrt = Vec::with_capacity(n);
    for a in 0..n {
        let degree: f64 = s.row(a).iter().sum();
        if degree <= 0.0 || !degree.is_finite() {
            return Err(ClusterError::InvalidArgument(format!("student {a} has degree {degree}")));
        }
        inv_sqrt.push(1.0 / degree.sqrt());
    }
    let mut l = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let id = if a == b { 1.0 } else { 0.0 };
            l[a * n + b] = id - inv_sqrt[a] * s.get(a, b) * inv_sqrt[b];
        }
    }
    Ok(l)
}

pub fn laplacian_spectrum(s: &SimilarityMatrix) -> Result<EigenDecomposition, ClusterError> {
    let l = normalized_laplacian(&canonical(s).0)?;
    symmetric_eigen(&l, s.len(), s.len())
}

/// Reorders a similarity matrix by ascending student id, so everything
/// downstream is independent of the input order. Returns the permutation
/// (`order[new] = old`).
fn canonical(s: &SimilarityMatrix) -> (SimilarityMatrix, Vec<usize>) {
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.ids[a].cmp(&s.ids[b]));
    let mut values = Vec::with_capacity(n * n);
    for &a in &order {
        for &b in &order {
            values.push(s.get(a, b));
        }
    }
    let ids = order.iter().map(|&i| s.ids[i].clone()).collect();
    let sorted = SimilarityMatrix::from_values(ids, values, s.sigma).expect("square by construction");
    (sorted, order)
}

fn check_range(n_min: usize, n_max: usize, n: usize) -> Result<(), ClusterError> {
    if n_min <= 2 {
        return Err(ClusterError::InvalidArgument(format!(
            "n_min = {n_min}: the cluster count must be greater than two"
        )));
    }
    if n_min > n_max || n_max >= n {
        return Err(ClusterError::InvalidArgument(format!(
            "need n_min <= n_max < number of students, got {n_min}..{n_max} with {n} students"
        )));
    }
    Ok(())
}

/// Picks `argmax_{k ∈ [n_min, n_max]} λ_{k+1} − λ_k`, ties to the smaller `k`.
pub fn eigengap_select_from(
    eig: &EigenDecomposition,
    n_min: usize,
    n_max: usize,
) -> Result<EigengapDiagnostics, ClusterError> {
    check_range(n_min, n_max, eig.n)?;
    let eigenvalues = eig.eigenvalues.clone();
    let gaps: Vec<f64> = eigenvalues.windows(2).map(|w| w[1] - w[0]).collect();
    let argmax = |lo: usize, hi: usize| {
        let mut best = lo;
        for k in lo + 1..=hi {
            if gaps[k - 1] > gaps[best - 1] + 1e-12 {
                best = k;
            }
        }
        best
    };
    Ok(EigengapDiagnostics {
        chosen: argmax(n_min, n_max),
        global_argmax: argmax(1, gaps.len()),
        eigenvalues,
        gaps,
        n_min,
        n_max,
    })
}

pub fn eigengap_select(s: &SimilarityMatrix, n_min: usize, n_max: usize) -> Result<EigengapDiagnostics, ClusterError> {
    check_range(n_min, n_max, s.len())?;
    eigengap_select_from(&laplacian_spectrum(s)?, n_min, n_max)
}

/// Spectral clustering into `n` groups on the normalized symmetric Laplacian.
pub fn spectral_cluster(s: &SimilarityMatrix, n: usize, seed: u64) -> Result<ClusterAssignment, ClusterError> {
    let eig = laplacian_spectrum(s)?;
    spectral_cluster_from(s, &eig, n, seed)
}

/// As `spectral_cluster`, reusing a spectrum from `laplacian_spectrum(s)`.
pub fn spectral_cluster_from(
    s: &SimilarityMatrix,
    eig: &EigenDecomposition,
    n: usize,
    seed: u64,
) -> Result<ClusterAssignment, ClusterError> {
    let size = s.len();
    if n < 2 || n >= size {
        return Err(ClusterError::InvalidArgument(format!(
            "need 2 <= n < number of students, got n = {n} with {size} students"
        )));
    }
    if eig.n != size {
        return Err(ClusterError::AlignmentError("spectrum size differs from similarity".into()));
    }
    let (_, order) = canonical(s);
    // rows of the embedding follow the canonical (id-sorted) order
    let embedding: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            let row: Vec<f64> = (0..n).map(|j| eig.component(i, j)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();
    let result = kmeans(&embedding, n, seed, &KMeansConfig::default())?;
    let mut labels = vec![0; size];
    for (new, &old) in order.iter().enumerate() {
        labels[old] = result.labels[new];
    }
    Ok(relabel(s.ids.clone(), labels, n))
}

/// Renumbers clusters by ascending size, then by smallest member id.
pub(crate) fn relabel(ids: Vec<String>, labels: Vec<usize>, n: usize) -> ClusterAssignment {
    let mut info: BTreeMap<usize, (usize, &str)> = BTreeMap::new();
    for (id, &l) in ids.iter().zip(&labels) {
        let entry = info.entry(l).or_insert((0, id.as_str()));
        entry.0 += 1;
        if id.as_str() < entry.1 {
            entry.1 = id.as_str();
        }
    }
    let mut ranked: Vec<(usize, (usize, &str))> = info.into_iter().collect();
    ranked.sort_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.cmp(b.1 .1)));
    let mapping: BTreeMap<usize, usize> = ranked.iter().enumerate().map(|(new, (old, _))| (*old, new)).collect();
    let labels = labels.iter().map(|l| mapping[l]).collect();
    ClusterAssignment {
        student_ids: ids,
        labels,
        n_clusters: n,
        diagnostics: None,
    }
}
