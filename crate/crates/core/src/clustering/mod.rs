//! Mask-aware distances, Gaussian similarity, spectral clustering and
//! eigengap selection of the cluster count.

mod distance;
mod eigen;
mod kmeans;
mod metrics;
mod spectral;

pub use distance::{
    active_features, average_distance, gaussian_similarity, masked_feature_distance, Bandwidth, DistanceMatrix,
    SimilarityMatrix,
};
pub use eigen::{symmetric_eigen, EigenDecomposition};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use metrics::{adjusted_rand_index, normalized_cut};
pub use spectral::{
    eigengap_select, eigengap_select_from, laplacian_spectrum, normalized_laplacian, spectral_cluster,
    spectral_cluster_from, ClusterAssignment, EigengapDiagnostics,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("no feature is selected by any student")]
    EmptyActiveSet,
    #[error("median bandwidth is undefined: every distance is zero")]
    DegenerateBandwidth,
    #[error("eigensolver did not converge within {0} iterations")]
    ConvergenceFailure(usize),
    #[error("every k-means restart produced an empty cluster")]
    EmptyCluster,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}")]
    Format(String),
}

/// Which features the averaged distance runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AverageOver {
    /// Features selected by at least one student.
    #[default]
    Selected,
    All,
}

/// Where the Gaussian kernel is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelInput {
    /// Kernel of the averaged distance matrix.
    #[default]
    Averaged,
    /// Average of per-feature kernels.
    PerFeatureThenAverage,
}

/// Settings for `cluster_students`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub bandwidth: Bandwidth,
    pub n_min: usize,
    pub n_max: usize,
    pub seed: u64,
    pub average_over: AverageOver,
    pub kernel_input: KernelInput,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            bandwidth: Bandwidth::MEDIAN,
            n_min: 3,
            n_max: 10,
            seed: 0,
            average_over: AverageOver::Selected,
            kernel_input: KernelInput::Averaged,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub distance: DistanceMatrix,
    pub similarity: SimilarityMatrix,
    pub assignment: ClusterAssignment,
    /// Feature indices the distance was averaged over.
    pub features: Vec<usize>,
}

/// Computes the masked, averaged distance over the configured feature set.
pub fn averaged_masked_distance(
    cube: &crate::features::FeatureCube,
    masks: &crate::gating::MaskMatrix,
    average_over: AverageOver,
) -> Result<(DistanceMatrix, Vec<usize>), ClusterError> {
    let features = match average_over {
        AverageOver::Selected => active_features(masks),
        AverageOver::All => (0..cube.num_features()).collect(),
    };
    if features.is_empty() {
        return Err(ClusterError::EmptyActiveSet);
    }
    // running sum keeps memory at one matrix regardless of feature count
    let n = cube.num_students();
    let mut sum = vec![0.0; n * n];
    for &f in &features {
        let d = masked_feature_distance(cube, masks, f)?;
        for (acc, v) in sum.iter_mut().zip(d.values()) {
            *acc += v;
        }
    }
    let k = features.len() as f64;
    let values = sum.into_iter().map(|v| v / k).collect();
    Ok((DistanceMatrix::from_values(cube.student_ids.clone(), values)?, features))
}

/// Masked distances → Gaussian similarity → eigengap count → spectral labels.
pub fn cluster_students(
    cube: &crate::features::FeatureCube,
    masks: &crate::gating::MaskMatrix,
    params: &ClusterParams,
) -> Result<ClusterOutcome, ClusterError> {
    let (distance, features) = averaged_masked_distance(cube, masks, params.average_over)?;
    let similarity = match params.kernel_input {
        KernelInput::Averaged => gaussian_similarity(&distance, params.bandwidth)?,
        KernelInput::PerFeatureThenAverage => {
            let mut kernels = Vec::with_capacity(features.len());
            for &f in &features {
                let d = masked_feature_distance(cube, masks, f)?;
                match gaussian_similarity(&d, params.bandwidth) {
                    Ok(s) => kernels.push(s),
                    // all-zero D_f: the kernel is 1 everywhere for any σ
                    Err(ClusterError::DegenerateBandwidth) => kernels.push(gaussian_similarity(&d, Bandwidth::Fixed(1.0))?),
                    Err(e) => return Err(e),
                }
            }
            distance::average_similarity(&kernels)?
        }
    };
    let spectrum = laplacian_spectrum(&similarity)?;
    let diagnostics = eigengap_select_from(&spectrum, params.n_min, params.n_max)?;
    let mut assignment = spectral_cluster_from(&similarity, &spectrum, diagnostics.chosen, params.seed)?;
    assignment.diagnostics = Some(diagnostics);
    Ok(ClusterOutcome {
        distance,
        similarity,
        assignment,
        features,
    })
}
