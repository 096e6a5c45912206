//! Translation, two-sample statistics, parameter counts and the evaluation
//! report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::error::{AubError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// `T_to^{-1}(T_from(x))`.
pub fn translate<T: Scalar>(model: &AlignmentModel<T>, x: &Matrix<T>, from: usize, to: usize) -> Result<Matrix<T>> {
    if to >= model.k() {
        return Err(AubError::InvalidArgument(format!(
            "domain index {to} out of range for k = {}",
            model.k()
        )));
    }
    let (z, _) = model.encode(from, x)?;
    model.flow(to).inverse(&z)
}

fn mean_pairwise_distance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    let rows: Vec<&[T]> = a.rows_iter().collect();
    let sums: Vec<f64> = rows
        .par_iter()
        .map(|ra| {
            b.rows_iter()
                .map(|rb| {
                    ra.iter()
                        .zip(rb)
                        .map(|(&x, &y)| {
                            let d = (x - y).to_f64_lossy();
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
        })
        .collect();
    sums.iter().sum::<f64>() / (a.nrows() as f64 * b.nrows() as f64)
}

/// Biased all-pairs energy statistic `2E|A-B| - E|A-A'| - E|B-B'|`,
/// accumulated in `f64` in a fixed order.
pub fn energy_distance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(AubError::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(AubError::InvalidArgument("energy distance needs at least 2 rows per sample".into()));
    }
    let ab = mean_pairwise_distance(a, b);
    let aa = mean_pairwise_distance(a, a);
    let bb = mean_pairwise_distance(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub per_flow: Vec<usize>,
    pub density: usize,
    pub total: usize,
}

pub fn parameter_count<T: Scalar>(model: &AlignmentModel<T>) -> ParameterCount {
    let (per_flow, density) = model.parameter_counts();
    let total = per_flow.iter().sum::<usize>() + density;
    ParameterCount { per_flow, density, total }
}

/// Symmetric cross-domain alignment score for `(j, j')`: the mean of the
/// energy distances of `x_j` translated to `j'` against `x_j'`, and vice versa.
pub fn cross_domain_energy<T: Scalar>(model: &AlignmentModel<T>, samples: &[Matrix<T>], j: usize, jp: usize) -> Result<f64> {
    let forward = energy_distance(&translate(model, &samples[j], j, jp)?, &samples[jp])?;
    let backward = energy_distance(&translate(model, &samples[jp], jp, j)?, &samples[j])?;
    Ok(0.5 * (forward + backward))
}

/// `k x k` symmetric matrix of [`cross_domain_energy`] with zero diagonal.
pub fn pairwise_energy<T: Scalar>(model: &AlignmentModel<T>, samples: &[Matrix<T>]) -> Result<Vec<Vec<f64>>> {
    let k = model.k();
    if samples.len() != k {
        return Err(AubError::DimensionMismatch { expected: k, got: samples.len() });
    }
    let mut out = vec![vec![0.0; k]; k];
    for j in 0..k {
        for jp in j + 1..k {
            let e = cross_domain_energy(model, samples, j, jp)?;
            out[j][jp] = e;
            out[jp][j] = e;
        }
    }
    Ok(out)
}

/// Largest absolute error of `x -> T^{-1}(T(x))` per domain and of the
/// cycle `j -> j+1 -> j` through the shared latent.
pub fn roundtrip_max_err<T: Scalar>(model: &AlignmentModel<T>, samples: &[Matrix<T>]) -> Result<f64> {
    let k = model.k();
    let mut worst = 0.0f64;
    for (j, x) in samples.iter().enumerate() {
        let back = translate(model, x, j, j)?;
        worst = worst.max(back.max_abs_diff(x)?.to_f64_lossy());
        let other = (j + 1) % k;
        let cycled = translate(model, &translate(model, x, j, other)?, other, j)?;
        worst = worst.max(cycled.max_abs_diff(x)?.to_f64_lossy());
    }
    Ok(worst)
}

/// Which diagnostics [`evaluate`] computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Leading rows of each test split used for energy distances.
    pub energy_max_rows: usize,
    pub pairwise_energy: bool,
    pub roundtrip: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            energy_max_rows: 1000,
            pairwise_energy: true,
            roundtrip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Held-out bound in nats.
    pub test_aub: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairwise_energy_distance: Option<Vec<Vec<f64>>>,
    pub parameter_counts: ParameterCount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roundtrip_max_err: Option<f64>,
    pub fingerprint: String,
}

/// Report on the test splits.
pub fn evaluate<T: Scalar>(
    model: &AlignmentModel<T>,
    test: &[Matrix<T>],
    options: &EvalOptions,
    fingerprint: impl Into<String>,
) -> Result<EvalReport> {
    if options.pairwise_energy && options.energy_max_rows < 2 {
        return Err(AubError::InvalidArgument("energy_max_rows must be at least 2".into()));
    }
    let test_aub = model.aub_metric(test)?.to_f64_lossy();
    let pairwise_energy_distance = if options.pairwise_energy {
        let capped: Vec<Matrix<T>> = test
            .iter()
            .map(|m| m.select_rows(&(0..m.nrows().min(options.energy_max_rows)).collect::<Vec<_>>()))
            .collect();
        Some(pairwise_energy(model, &capped)?)
    } else {
        None
    };
    let roundtrip_max_err = if options.roundtrip {
        Some(roundtrip_max_err(model, test)?)
    } else {
        None
    };
    Ok(EvalReport {
        test_aub,
        pairwise_energy_distance,
        parameter_counts: parameter_count(model),
        roundtrip_max_err,
        fingerprint: fingerprint.into(),
    })
}
