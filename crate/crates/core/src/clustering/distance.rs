use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::features::FeatureCube;
use crate::gating::MaskMatrix;
use crate::numfmt::f17;

/// Dense symmetric `n × n` matrix over a list of student ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub ids: Vec<String>,
    values: Vec<f64>,
    /// Kernel bandwidth used; for per-feature kernels, the mean bandwidth.
    pub sigma: f64,
}

macro_rules! square_matrix_impl {
    ($t:ty) => {
        impl $t {
            pub fn len(&self) -> usize {
                self.ids.len()
            }

            pub fn is_empty(&self) -> bool {
                self.ids.is_empty()
            }

            pub fn get(&self, a: usize, b: usize) -> f64 {
                self.values[a * self.ids.len() + b]
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn row(&self, a: usize) -> &[f64] {
                let n = self.ids.len();
                &self.values[a * n..(a + 1) * n]
            }

            /// Headered dense CSV: first column `student_id`, then one column per id.
            pub fn to_csv(&self, stamp: &str) -> String {
                let mut out = format!("# {stamp}\nstudent_id");
                for id in &self.ids {
                    out.push(',');
                    out.push_str(id);
                }
                out.push('\n');
                for (a, id) in self.ids.iter().enumerate() {
                    out.push_str(id);
                    for v in self.row(a) {
                        let _ = write!(out, ",{}", f17(*v));
                    }
                    out.push('\n');
                }
                out
            }
        }
    };
}

square_matrix_impl!(DistanceMatrix);
square_matrix_impl!(SimilarityMatrix);

impl DistanceMatrix {
    pub fn from_values(ids: Vec<String>, values: Vec<f64>) -> Result<Self, ClusterError> {
        check_square(&ids, &values)?;
        Ok(DistanceMatrix { ids, values })
    }
}

impl SimilarityMatrix {
    /// Wraps an explicit similarity matrix, symmetrizing it.
    pub fn from_values(ids: Vec<String>, values: Vec<f64>, sigma: f64) -> Result<Self, ClusterError> {
        check_square(&ids, &values)?;
        let n = ids.len();
        let mut values = values;
        for a in 0..n {
            for b in a + 1..n {
                let m = 0.5 * (values[a * n + b] + values[b * n + a]);
                values[a * n + b] = m;
                values[b * n + a] = m;
            }
        }
        Ok(SimilarityMatrix { ids, values, sigma })
    }

    /// Parses the CSV written by `to_csv`.
    pub fn from_csv(text: &str) -> Result<(Self, String), ClusterError> {
        let (ids, values, stamp) = parse_square_csv(text)?;
        Ok((
            SimilarityMatrix {
                ids,
                values,
                sigma: f64::NAN,
            },
            stamp,
        ))
    }
}

fn check_square(ids: &[String], values: &[f64]) -> Result<(), ClusterError> {
    if values.len() != ids.len() * ids.len() {
        return Err(ClusterError::AlignmentError(format!(
            "{} ids but {} matrix entries",
            ids.len(),
            values.len()
        )));
    }
    Ok(())
}

fn parse_square_csv(text: &str) -> Result<(Vec<String>, Vec<f64>, String), ClusterError> {
    let stamp = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .unwrap_or_default()
        .to_string();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |m: String| ClusterError::Format(m);
    let ids: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut values = Vec::with_capacity(ids.len() * ids.len());
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        for v in record.iter().skip(1) {
            values.push(v.parse().map_err(|_| bad(format!("bad matrix value {v:?}")))?);
        }
    }
    check_square(&ids, &values)?;
    Ok((ids, values, stamp))
}

fn check_aligned(cube: &FeatureCube, masks: &MaskMatrix) -> Result<(), ClusterError> {
    if cube.student_ids != masks.student_ids || cube.feature_names != masks.feature_names {
        return Err(ClusterError::AlignmentError(
            "cube and masks differ in students or features".into(),
        ));
    }
    Ok(())
}

/// Pairwise Euclidean distances between the week series of `feature`, with
/// the series of students whose mask drops the feature replaced by zeros.
pub fn masked_feature_distance(
    cube: &FeatureCube,
    masks: &MaskMatrix,
    feature: usize,
) -> Result<DistanceMatrix, ClusterError> {
    check_aligned(cube, masks)?;
    if feature >= cube.num_features() {
        return Err(ClusterError::AlignmentError(format!("feature index {feature} out of range")));
    }
    let n = cube.num_students();
    let zeros = vec![0.0; cube.weeks];
    let series: Vec<&[f64]> = (0..n)
        .map(|s| {
            if masks.get(s, feature) {
                cube.series(s, feature)
            } else {
                zeros.as_slice()
            }
        })
        .collect();
    // upper triangle per row in parallel, then mirrored so D[a,b] and D[b,a]
    // are the same float
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            (a + 1..n)
                .map(|b| {
                    series[a]
                        .iter()
                        .zip(series[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for (a, row) in upper.iter().enumerate() {
        for (k, &d) in row.iter().enumerate() {
            let b = a + 1 + k;
            values[a * n + b] = d;
            values[b * n + a] = d;
        }
    }
    Ok(DistanceMatrix {
        ids: cube.student_ids.clone(),
        values,
    })
}

/// Features selected by at least one student.
pub fn active_features(masks: &MaskMatrix) -> Vec<usize> {
    masks.selected_features()
}

/// Entrywise mean of per-feature distance matrices.
pub fn average_distance(matrices: &[DistanceMatrix]) -> Result<DistanceMatrix, ClusterError> {
    let first = matrices.first().ok_or(ClusterError::EmptyActiveSet)?;
    if matrices.iter().any(|m| m.ids != first.ids) {
        return Err(ClusterError::AlignmentError("distance matrices cover different students".into()));
    }
    let k = matrices.len() as f64;
    let values = (0..first.values.len())
        .map(|i| matrices.iter().map(|m| m.values[i]).sum::<f64>() / k)
        .collect();
    Ok(DistanceMatrix {
        ids: first.ids.clone(),
        values,
    })
}

/// Kernel bandwidth choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of the strictly positive off-diagonal distances.
    Median(MedianTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedianTag {
    Median,
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Median(MedianTag::Median);

    pub fn resolve(&self, d: &DistanceMatrix) -> Result<f64, ClusterError> {
        match *self {
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            Bandwidth::Fixed(s) => Err(ClusterError::InvalidArgument(format!("bandwidth {s} must be positive"))),
            Bandwidth::Median(_) => {
                let n = d.len();
                let mut positive: Vec<f64> = (0..n)
                    .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                    .map(|(a, b)| d.get(a, b))
                    .filter(|&v| v > 0.0)
                    .collect();
                if positive.is_empty() {
                    return Err(ClusterError::DegenerateBandwidth);
                }
                positive.sort_by(f64::total_cmp);
                let m = positive.len();
                Ok(if m % 2 == 1 {
                    positive[m / 2]
                } else {
                    0.5 * (positive[m / 2 - 1] + positive[m / 2])
                })
            }
        }
    }
}

/// `S[a,b] = exp(−D[a,b]² / (2σ²))` with an exact unit diagonal.
pub fn gaussian_similarity(d: &DistanceMatrix, bandwidth: Bandwidth) -> Result<SimilarityMatrix, ClusterError> {
    let sigma = bandwidth.resolve(d)?;
    let n = d.len();
    let scale = 1.0 / (2.0 * sigma * sigma);
    let mut values: Vec<f64> = d.values.iter().map(|&v| (-v * v * scale).exp()).collect();
    for a in 0..n {
        values[a * n + a] = 1.0;
    }
    Ok(SimilarityMatrix {
        ids: d.ids.clone(),
        values,
        sigma,
    })
}

/// Entrywise mean of similarity matrices (for per-feature kernels).
pub(crate) fn average_similarity(matrices: &[SimilarityMatrix]) -> Result<SimilarityMatrix, ClusterError> {
    let first = matrices.first().ok_or(ClusterError::EmptyActiveSet)?;
    let k = matrices.len() as f64;
    let values = (0..first.values.len())
        .map(|i| matrices.iter().map(|m| m.values[i]).sum::<f64>() / k)
        .collect();
    Ok(SimilarityMatrix {
        ids: first.ids.clone(),
        values,
        sigma: matrices.iter().map(|m| m.sigma).sum::<f64>() / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(series: &[[f64; 2]], mask: &[bool]) -> (FeatureCube, MaskMatrix) {
        let n = series.len();
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let cube = FeatureCube::new(series.concat(), ids.clone(), vec!["f".into()], 2, true).unwrap();
        let masks = MaskMatrix::new(ids, vec!["f".into()], mask.to_vec()).unwrap();
        (cube, masks)
    }

    #[test]
    fn masked_distance_examples() {
        let (cube, masks) = setup(&[[3.0, 4.0], [1.0, 1.0]], &[false, false]);
        assert_eq!(masked_feature_distance(&cube, &masks, 0).unwrap().get(0, 1), 0.0);

        let (cube, masks) = setup(&[[3.0, 4.0], [1.0, 1.0]], &[true, false]);
        assert_eq!(masked_feature_distance(&cube, &masks, 0).unwrap().get(0, 1), 5.0);

        let (cube, masks) = setup(&[[1.0, 0.0], [0.0, 1.0]], &[true, true]);
        let d = masked_feature_distance(&cube, &masks, 0).unwrap();
        assert_eq!(d.get(0, 1), 2f64.sqrt());
        assert_eq!(d.get(1, 0), d.get(0, 1));
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn misaligned_masks() {
        let (cube, _) = setup(&[[1.0, 0.0], [0.0, 1.0]], &[true, true]);
        let other = MaskMatrix::new(vec!["x".into(), "y".into()], vec!["f".into()], vec![true, true]).unwrap();
        assert!(matches!(masked_feature_distance(&cube, &other, 0), Err(ClusterError::AlignmentError(_))));
    }

    fn dm(vals: [f64; 4]) -> DistanceMatrix {
        DistanceMatrix::from_values(vec!["a".into(), "b".into()], vals.to_vec()).unwrap()
    }

    #[test]
    fn average_examples() {
        let avg = average_distance(&[dm([0.0, 2.0, 2.0, 0.0]), dm([0.0, 4.0, 4.0, 0.0])]).unwrap();
        assert_eq!(avg.get(0, 1), 3.0);
        let single = dm([0.0, 7.0, 7.0, 0.0]);
        assert_eq!(average_distance(std::slice::from_ref(&single)).unwrap(), single);
        let three = average_distance(&[
            dm([0.0, 0.0, 0.0, 0.0]),
            dm([0.0, 3.0, 3.0, 0.0]),
            dm([0.0, 6.0, 6.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(three.get(0, 1), 3.0);
        assert_eq!(average_distance(&[]), Err(ClusterError::EmptyActiveSet));
    }

    #[test]
    fn kernel_examples() {
        let sigma = 1.7;
        let s = gaussian_similarity(&dm([0.0, sigma, sigma, 0.0]), Bandwidth::Fixed(sigma)).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert!((s.get(0, 1) - 0.6065306597126334).abs() < 1e-15);
        let s = gaussian_similarity(&dm([0.0, 2.0 * sigma, 2.0 * sigma, 0.0]), Bandwidth::Fixed(sigma)).unwrap();
        assert!((s.get(0, 1) - 0.1353352832366127).abs() < 1e-15);
        let s = gaussian_similarity(&dm([0.0, 0.0, 0.0, 0.0]), Bandwidth::Fixed(1.0)).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
    }

    #[test]
    fn median_bandwidth() {
        let d = DistanceMatrix::from_values(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.0, 1.0, 3.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0],
        )
        .unwrap();
        // positive off-diagonal upper entries: {1, 3}
        assert_eq!(Bandwidth::MEDIAN.resolve(&d).unwrap(), 2.0);
        assert_eq!(
            gaussian_similarity(&dm([0.0; 4]), Bandwidth::MEDIAN),
            Err(ClusterError::DegenerateBandwidth)
        );
    }

    #[test]
    fn bandwidth_deserializes_from_number_or_sentinel() {
        #[derive(Deserialize)]
        struct W {
            b: Bandwidth,
        }
        let w: W = toml::from_str("b = \"median\"").unwrap();
        assert_eq!(w.b, Bandwidth::MEDIAN);
        let w: W = toml::from_str("b = 0.5").unwrap();
        assert_eq!(w.b, Bandwidth::Fixed(0.5));
    }

    #[test]
    fn similarity_csv_round_trip() {
        let s = gaussian_similarity(&dm([0.0, 0.3, 0.3, 0.0]), Bandwidth::Fixed(0.7)).unwrap();
        let (back, stamp) = SimilarityMatrix::from_csv(&s.to_csv("x")).unwrap();
        assert_eq!(stamp, "x");
        assert_eq!(back.values(), s.values());
        assert_eq!(back.ids, s.ids);
    }
}
