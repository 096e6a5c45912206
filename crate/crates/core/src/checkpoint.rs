//! Checkpoint files: one line of JSON header, a newline, then every model
//! parameter as a little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentModel, Mode};
use crate::density::DensityArch;
use crate::error::{AubError, Result};
use crate::flows::{Flow, FlowArch};
use crate::numeric::SeededRng;
use crate::scalar::Scalar;

pub const FORMAT: &str = "aub-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    /// Scalar type the model was trained in.
    pub scalar: String,
    pub dim: usize,
    pub flows: Vec<FlowArch>,
    pub density: DensityArch,
    pub weights: Vec<f64>,
    pub mode: Option<Mode>,
    pub seed: u64,
    pub fingerprint: String,
    pub n_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &AlignmentModel<T>,
        mode: Option<Mode>,
        seed: u64,
        fingerprint: impl Into<String>,
    ) -> Self {
        let params: Vec<f64> = model.parameter_vector().iter().map(|v| v.to_f64_lossy()).collect();
        Self {
            header: CheckpointHeader {
                format: FORMAT.to_string(),
                scalar: T::NAME.to_string(),
                dim: model.dim(),
                flows: model.flows().iter().map(|f| f.arch()).collect(),
                density: model.density().arch(),
                weights: model.weights().iter().map(|w| w.to_f64_lossy()).collect(),
                mode,
                seed,
                fingerprint: fingerprint.into(),
                n_params: params.len(),
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.params.len() * 8);
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| AubError::Checkpoint("missing header terminator".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != FORMAT {
            return Err(AubError::Checkpoint(format!("unsupported format '{}'", header.format)));
        }
        let body = &bytes[nl + 1..];
        if body.len() != header.n_params * 8 {
            return Err(AubError::Checkpoint(format!(
                "header declares {} parameters but the body holds {} bytes",
                header.n_params,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model from the stored architecture and parameters.
    pub fn build_model<T: Scalar>(&self) -> Result<AlignmentModel<T>> {
        let h = &self.header;
        let mut rng = SeededRng::new(h.seed);
        let flows = h
            .flows
            .iter()
            .map(|a| a.build::<T>(&mut rng).map(|f| Box::new(f) as Box<dyn Flow<T>>))
            .collect::<Result<Vec<_>>>()?;
        let density = h.density.build::<T>(&mut rng)?;
        let weights = h.weights.iter().map(|&w| T::lit(w)).collect();
        let mut model = AlignmentModel::new(flows, density, Some(weights))?;
        if model.dim() != h.dim {
            return Err(AubError::Checkpoint(format!(
                "header dim {} does not match the architecture dim {}",
                h.dim,
                model.dim()
            )));
        }
        let values: Vec<T> = self.params.iter().map(|&v| T::lit(v)).collect();
        model
            .load_parameter_vector(&values)
            .map_err(|e| AubError::Checkpoint(format!("parameters do not fit the architecture: {e}")))?;
        Ok(model)
    }
}
