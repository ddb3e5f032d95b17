//! Per-cluster characterization: feature importance, feature value
//! distributions and outcome rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterAssignment;
use crate::features::FeatureCube;
use crate::gating::MaskMatrix;
use crate::numfmt::f17;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// How a student's week series is reduced to one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    #[default]
    Mean,
    Sum,
    Last,
}

impl Collapse {
    pub fn apply(&self, series: &[f64]) -> f64 {
        match self {
            Collapse::Mean => series.iter().sum::<f64>() / series.len() as f64,
            Collapse::Sum => series.iter().sum(),
            Collapse::Last => *series.last().expect("at least one week"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantile (`h = (n − 1)·p`) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Quartiles {
    /// Panics on empty input; clusters are never empty.
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Quartiles {
            min: sorted[0],
            q25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature: String,
    /// Fraction of members whose mask selects the feature.
    pub importance: f64,
    pub values: Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    /// Cluster index as a string, or `Overall`.
    pub cluster: String,
    pub size: usize,
    pub size_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<f64>,
    pub features: Vec<FeatureSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub stamp: String,
    pub n_students: usize,
    pub n_clusters: usize,
    pub feature_names: Vec<String>,
    pub collapse: Collapse,
    /// Values come from the unscaled cube.
    pub raw: bool,
    pub clusters: Vec<ClusterSummary>,
    pub overall: ClusterSummary,
}

pub const OVERALL: &str = "Overall";

fn check_ids(ids: &[String], assignment: &ClusterAssignment, what: &str) -> Result<(), AnalysisError> {
    if ids != assignment.student_ids.as_slice() {
        return Err(AnalysisError::AlignmentError(format!("{what} and assignment list different students")));
    }
    Ok(())
}

/// `[cluster][feature]` fraction of members with mask 1.
pub fn importance_by_cluster(masks: &MaskMatrix, assignment: &ClusterAssignment) -> Result<Vec<Vec<f64>>, AnalysisError> {
    check_ids(&masks.student_ids, assignment, "masks")?;
    let sizes = assignment.sizes();
    let mut counts = vec![vec![0usize; masks.num_features()]; assignment.n_clusters];
    for (s, &c) in assignment.labels.iter().enumerate() {
        for (f, &m) in masks.row(s).iter().enumerate() {
            counts[c][f] += m as usize;
        }
    }
    Ok(counts
        .iter()
        .zip(&sizes)
        .map(|(row, &size)| row.iter().map(|&k| k as f64 / size as f64).collect())
        .collect())
}

/// Per-cluster quartiles of collapsed feature values, plus the pooled row.
pub fn value_distributions_by_cluster(
    cube: &FeatureCube,
    assignment: &ClusterAssignment,
    collapse: Collapse,
) -> Result<(Vec<Vec<Quartiles>>, Vec<Quartiles>), AnalysisError> {
    check_ids(&cube.student_ids, assignment, "cube")?;
    let nf = cube.num_features();
    let collapsed: Vec<Vec<f64>> = (0..cube.num_students())
        .map(|s| (0..nf).map(|f| collapse.apply(cube.series(s, f))).collect())
        .collect();
    let per_cluster = (0..assignment.n_clusters)
        .map(|c| {
            let members = assignment.members(c);
            (0..nf)
                .map(|f| Quartiles::of(&members.iter().map(|&s| collapsed[s][f]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let overall = (0..nf)
        .map(|f| Quartiles::of(&collapsed.iter().map(|row| row[f]).collect::<Vec<_>>()))
        .collect();
    Ok((per_cluster, overall))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeRate {
    pub size: usize,
    pub size_fraction: f64,
    pub pass_rate: f64,
}

pub fn outcome_rates(
    assignment: &ClusterAssignment,
    labels: &BTreeMap<String, bool>,
) -> Result<Vec<OutcomeRate>, AnalysisError> {
    let mut passes = vec![0usize; assignment.n_clusters];
    for (id, &c) in assignment.student_ids.iter().zip(&assignment.labels) {
        let label = labels
            .get(id)
            .ok_or_else(|| AnalysisError::LabelMismatch(format!("no label for student {id}")))?;
        passes[c] += *label as usize;
    }
    let n = assignment.labels.len() as f64;
    Ok(assignment
        .sizes()
        .iter()
        .zip(&passes)
        .map(|(&size, &p)| OutcomeRate {
            size,
            size_fraction: size as f64 / n,
            pass_rate: p as f64 / size as f64,
        })
        .collect())
}

/// Assembles the full report. `cube` may be scaled or raw; `raw` only records which.
pub fn build_report(
    cube: &FeatureCube,
    masks: &MaskMatrix,
    assignment: &ClusterAssignment,
    labels: Option<&BTreeMap<String, bool>>,
    collapse: Collapse,
    raw: bool,
    stamp: &str,
) -> Result<ClusterReport, AnalysisError> {
    if cube.feature_names != masks.feature_names {
        return Err(AnalysisError::AlignmentError("cube and masks list different features".into()));
    }
    let importance = importance_by_cluster(masks, assignment)?;
    let (values, overall_values) = value_distributions_by_cluster(cube, assignment, collapse)?;
    let rates = labels.map(|l| outcome_rates(assignment, l)).transpose()?;
    let n = assignment.labels.len();

    let summaries = |imp: &[f64], vals: &[Quartiles]| -> Vec<FeatureSummary> {
        cube.feature_names
            .iter()
            .zip(imp.iter().zip(vals))
            .map(|(name, (&importance, &values))| FeatureSummary {
                feature: name.clone(),
                importance,
                values,
            })
            .collect()
    };
    let sizes = assignment.sizes();
    let clusters = (0..assignment.n_clusters)
        .map(|c| ClusterSummary {
            cluster: c.to_string(),
            size: sizes[c],
            size_fraction: sizes[c] as f64 / n as f64,
            pass_rate: rates.as_ref().map(|r| r[c].pass_rate),
            features: summaries(&importance[c], &values[c]),
        })
        .collect();
    let overall_importance: Vec<f64> = (0..masks.num_features())
        .map(|f| (0..n).filter(|&s| masks.get(s, f)).count() as f64 / n as f64)
        .collect();
    let overall_pass = labels.map(|l| {
        assignment.student_ids.iter().filter(|id| l[*id]).count() as f64 / n as f64
    });
    Ok(ClusterReport {
        stamp: stamp.to_string(),
        n_students: n,
        n_clusters: assignment.n_clusters,
        feature_names: cube.feature_names.clone(),
        collapse,
        raw,
        clusters,
        overall: ClusterSummary {
            cluster: OVERALL.into(),
            size: n,
            size_fraction: 1.0,
            pass_rate: overall_pass,
            features: summaries(&overall_importance, &overall_values),
        },
    })
}

impl ClusterReport {
    fn blocks(&self) -> impl Iterator<Item = &ClusterSummary> {
        self.clusters.iter().chain(std::iter::once(&self.overall))
    }

    pub fn importance_csv(&self) -> String {
        let mut out = format!("# {}\ncluster,feature,importance,size,size_fraction,pass_rate\n", self.stamp);
        for block in self.blocks() {
            let pass = block.pass_rate.map(f17).unwrap_or_default();
            for feat in &block.features {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    block.cluster,
                    feat.feature,
                    f17(feat.importance),
                    block.size,
                    f17(block.size_fraction),
                    pass
                );
            }
        }
        out
    }

    pub fn values_csv(&self) -> String {
        let mut out = format!("# {}\ncluster,feature,min,q25,median,q75,max\n", self.stamp);
        for block in self.blocks() {
            for feat in &block.features {
                let q = feat.values;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    block.cluster,
                    feat.feature,
                    f17(q.min),
                    f17(q.q25),
                    f17(q.median),
                    f17(q.q75),
                    f17(q.max)
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_IMPORTANCE: &str = "report_importance.csv";
pub const REPORT_VALUES: &str = "report_values.csv";

/// Writes `report.json`, `report_importance.csv` and `report_values.csv` into `dir`.
pub fn export_report(report: &ClusterReport, dir: &Path) -> Result<(), AnalysisError> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| AnalysisError::Io { path, source })
    };
    write(REPORT_JSON, report.to_json())?;
    write(REPORT_IMPORTANCE, report.importance_csv())?;
    write(REPORT_VALUES, report.values_csv())
}

pub fn import_report(dir: &Path) -> Result<ClusterReport, AnalysisError> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|source| AnalysisError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| AnalysisError::Json { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment(labels: Vec<usize>) -> ClusterAssignment {
        let n_clusters = labels.iter().max().unwrap() + 1;
        ClusterAssignment {
            student_ids: (0..labels.len()).map(|i| format!("s{i}")).collect(),
            labels,
            n_clusters,
            diagnostics: None,
        }
    }

    fn cube(weekly: &[f64], weeks: usize) -> FeatureCube {
        let n = weekly.len() / weeks;
        FeatureCube::new(
            weekly.to_vec(),
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["f".into()],
            weeks,
            true,
        )
        .unwrap()
    }

    fn masks(values: Vec<bool>, nf: usize) -> MaskMatrix {
        let n = values.len() / nf;
        MaskMatrix::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..nf).map(|f| format!("f{f}")).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn importance_counts() {
        let m = masks(vec![true, false, true, false, false, false, false, false], 2);
        let imp = importance_by_cluster(&m, &assignment(vec![0, 0, 0, 0])).unwrap();
        assert_eq!(imp[0], vec![0.5, 0.0]);
    }

    #[test]
    fn quartiles_linear_interpolation() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((q.min, q.q25, q.median, q.q75, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        let single = Quartiles::of(&[0.7]);
        assert_eq!((single.min, single.q25, single.median, single.q75), (0.7, 0.7, 0.7, 0.7));
    }

    #[test]
    fn value_distributions_collapse_weeks() {
        // week means 1, 2, 3, 4 for cluster 0 and 0 for cluster 1
        let c = cube(&[0.0, 2.0, 2.0, 2.0, 3.0, 3.0, 5.0, 3.0, 0.0, 0.0], 2);
        let a = assignment(vec![0, 0, 0, 0, 1]);
        let (per, overall) = value_distributions_by_cluster(&c, &a, Collapse::Mean).unwrap();
        assert_eq!(per[0][0].median, 2.5);
        assert_eq!(per[1][0], Quartiles::of(&[0.0]));
        assert_eq!(overall[0].min, 0.0);
        assert_eq!(overall[0].max, 4.0);
        let (last, _) = value_distributions_by_cluster(&c, &a, Collapse::Last).unwrap();
        assert_eq!(last[0][0].max, 3.0);
    }

    #[test]
    fn outcome_rates_and_mismatch() {
        let a = assignment(vec![0, 0, 0, 1]);
        let labels: BTreeMap<String, bool> = [("s0", true), ("s1", true), ("s2", false), ("s3", false)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let rates = outcome_rates(&a, &labels).unwrap();
        assert!((rates[0].pass_rate - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rates.iter().map(|r| r.size_fraction).sum::<f64>(), 1.0);
        let mut partial = labels.clone();
        partial.remove("s3");
        assert!(matches!(outcome_rates(&a, &partial), Err(AnalysisError::LabelMismatch(_))));
    }

    fn report(with_labels: bool) -> ClusterReport {
        let nf = 3;
        let n = 6;
        let names: Vec<String> = (0..nf).map(|f| format!("f{f}")).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let values: Vec<f64> = (0..n * nf * 2).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let c = FeatureCube::new(values, ids.clone(), names.clone(), 2, true).unwrap();
        let m = MaskMatrix::new(ids, names, (0..n * nf).map(|i| i % 3 != 2).collect()).unwrap();
        let a = assignment(vec![0, 1, 1, 2, 2, 2]);
        let labels: BTreeMap<String, bool> = (0..n).map(|i| (format!("s{i}"), i % 2 == 0)).collect();
        build_report(&c, &m, &a, with_labels.then_some(&labels), Collapse::Mean, false, "stamp").unwrap()
    }

    #[test]
    fn report_shape_and_csv_rows() {
        let r = report(true);
        assert_eq!(r.clusters.iter().map(|c| c.size).sum::<usize>(), 6);
        assert_eq!(r.overall.pass_rate, Some(0.5));
        // nobody selects f2
        assert!(r.blocks().all(|b| b.features[2].importance == 0.0));
        let rows = |s: String| s.lines().filter(|l| !l.starts_with('#')).count() - 1;
        assert_eq!(rows(r.importance_csv()), (3 + 1) * 3);
        assert_eq!(rows(r.values_csv()), (3 + 1) * 3);
    }

    #[test]
    fn export_round_trip_and_optional_labels() {
        let dir = tempfile::tempdir().unwrap();
        for with_labels in [true, false] {
            let r = report(with_labels);
            export_report(&r, dir.path()).unwrap();
            assert_eq!(import_report(dir.path()).unwrap(), r);
            let json = fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap();
            assert_eq!(json.contains("pass_rate"), with_labels);
        }
        let csv = fs::read_to_string(dir.path().join(REPORT_IMPORTANCE)).unwrap();
        assert!(csv.lines().nth(2).unwrap().ends_with(','));
    }
}
