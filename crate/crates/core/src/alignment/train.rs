//! Alternating min-min training: every epoch runs a full pass of density
//! updates with the flows frozen, then a full pass of flow updates with the
//! density frozen.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AlignmentModel;
use crate::data::DomainDataset;
use crate::density::DensityArch;
use crate::error::{AubError, Result};
use crate::flows::FlowArch;
use crate::matrix::Matrix;
use crate::numeric::{Optimizer, OptimizerConfig, SeededRng};
use crate::scalar::Scalar;

/// Which components learn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every flow and the shared density learn.
    Aub,
    /// Density fixed at `N(0, I)`; flows train as independent MLE flows.
    AlignflowMle,
    /// Two domains, `T_2` fixed at the identity, density learnable.
    Lrmf,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Aub => "aub",
            Mode::AlignflowMle => "alignflow_mle",
            Mode::Lrmf => "lrmf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub flow_optimizer: OptimizerConfig,
    pub density_optimizer: OptimizerConfig,
    pub seed: u64,
    pub mode: Mode,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 256,
            flow_optimizer: OptimizerConfig::default(),
            density_optimizer: OptimizerConfig::default(),
            seed: 0,
            mode: Mode::Aub,
            patience: None,
        }
    }
}

impl TrainConfig {
    /// Checks the mode rules against a model.
    pub fn validate<T: Scalar>(&self, model: &AlignmentModel<T>) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(AubError::InvalidConfig(
                "max_epochs and batch_size must be positive".into(),
            ));
        }
        self.flow_optimizer.validate()?;
        self.density_optimizer.validate()?;
        validate_mode(self.mode, model.k(), &model.density.arch(), &model.flows.iter().map(|f| f.arch()).collect::<Vec<_>>())
    }

    fn density_trainable<T: Scalar>(&self, model: &AlignmentModel<T>) -> bool {
        self.mode != Mode::AlignflowMle && !model.density.params().is_empty()
    }

    fn flow_trainable(&self, j: usize) -> bool {
        !(self.mode == Mode::Lrmf && j == 1)
    }
}

/// Mode rules shared by the trainer and configuration front-ends.
pub fn validate_mode(mode: Mode, k: usize, density: &DensityArch, flows: &[FlowArch]) -> Result<()> {
    match mode {
        Mode::Aub => Ok(()),
        Mode::AlignflowMle => match density {
            DensityArch::StandardNormal { .. } => Ok(()),
            other => Err(AubError::InvalidConfig(format!(
                "alignflow_mle mode requires a fixed standard normal density, got {other:?}"
            ))),
        },
        Mode::Lrmf => {
            if k != 2 {
                return Err(AubError::InvalidConfig(format!("lrmf mode requires k = 2 domains, got {k}")));
            }
            if !matches!(flows.get(1), Some(FlowArch::Identity { .. })) {
                return Err(AubError::InvalidConfig(
                    "lrmf mode requires the second flow to be the identity".into(),
                ));
            }
            Ok(())
        }
    }
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the flow-step minibatch losses.
    pub train_aub: f64,
    pub val_aub: f64,
    /// Mean weighted `ln Q(T_j(x))` seen by the density steps.
    pub q_log_likelihood: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_aub: f64,
}

impl TrainTrace {
    /// Newline-delimited JSON, one epoch per line.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(AubError::from))
            .collect()
    }
}

/// Optimizer state for one model under one configuration.
pub struct Trainer<T> {
    config: TrainConfig,
    flow_opts: Vec<Optimizer<T>>,
    density_opt: Optimizer<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &AlignmentModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate(model)?;
        let flow_opts = model
            .flows
            .iter()
            .map(|f| Optimizer::new(config.flow_optimizer, f.params().len()))
            .collect::<Result<Vec<_>>>()?;
        let density_opt = Optimizer::new(config.density_optimizer, model.density.params().len())?;
        Ok(Self {
            config,
            flow_opts,
            density_opt,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Accumulates the gradient of the loss with respect to the density
    /// parameters (flows frozen). Returns the mean weighted `ln Q`.
    pub fn density_gradient(model: &mut AlignmentModel<T>, batches: &[Matrix<T>]) -> Result<T> {
        check_batches(model, batches)?;
        let latents = batches
            .par_iter()
            .zip(model.flows.par_iter())
            .map(|(x, f)| f.forward(x).map(|(z, _)| z))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix<T>> = latents.iter().collect();
        let stacked = Matrix::vstack(&refs)?;
        let mut upstream = Vec::with_capacity(stacked.nrows());
        for (j, z) in latents.iter().enumerate() {
            let g = -model.weights[j] / T::from_usize(z.nrows()).unwrap();
            upstream.extend(std::iter::repeat_n(g, z.nrows()));
        }
        let lp = model.density.log_prob_train(&stacked)?;
        model.density.backward(&upstream, true)?;
        let ll: T = lp.iter().zip(&upstream).map(|(&l, &g)| -l * g).sum();
        Ok(ll)
    }

    /// Accumulates the gradient of the loss with respect to flow `j`'s
    /// parameters (density frozen). Returns `w_j` times the domain loss.
    pub fn flow_gradient(model: &mut AlignmentModel<T>, j: usize, batch: &Matrix<T>) -> Result<T> {
        model.check_domain(j)?;
        let w = model.weights[j];
        let density = model.density.as_ref();
        flow_gradient_inner(model.flows[j].as_mut(), density, w, batch, j)
    }

    /// One density update on a batch tuple; a no-op for frozen densities.
    pub fn q_step(&mut self, model: &mut AlignmentModel<T>, batches: &[Matrix<T>]) -> Result<Option<T>> {
        if !self.config.density_trainable(model) {
            return Ok(None);
        }
        model.density.params_mut().zero_grads();
        let ll = Self::density_gradient(model, batches)?;
        self.density_opt.step(model.density.params_mut())?;
        Ok(Some(ll))
    }

    /// One update of every trainable flow. Returns the batch loss and the
    /// mean weighted `ln Q` of the latents.
    pub fn t_step(&mut self, model: &mut AlignmentModel<T>, batches: &[Matrix<T>]) -> Result<(T, T)> {
        check_batches(model, batches)?;
        let config = &self.config;
        let density = model.density.as_ref();
        let weights = &model.weights;
        let results = model
            .flows
            .par_iter_mut()
            .zip(self.flow_opts.par_iter_mut())
            .zip(batches.par_iter())
            .enumerate()
            .map(|(j, ((flow, opt), x))| -> Result<(T, T)> {
                let flow = flow.as_mut();
                if !config.flow_trainable(j) {
                    let (z, ld) = flow.forward(x)?;
                    let lp = density.log_prob(&z)?;
                    return Ok(weighted_terms(weights[j], &ld, &lp));
                }
                flow.params_mut().zero_grads();
                let out = flow_gradient_with_ll(flow, density, weights[j], x, j)?;
                opt.step(flow.params_mut())?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|r| r.0).sum();
        let ll = results.iter().map(|r| r.1).sum();
        Ok((loss, ll))
    }
}

fn weighted_terms<T: Scalar>(w: T, ld: &[T], lp: &[T]) -> (T, T) {
    let n = T::from_usize(ld.len()).unwrap();
    let loss: T = ld.iter().zip(lp).map(|(&l, &p)| -l - p).sum::<T>() / n;
    let ll: T = lp.iter().copied().sum::<T>() / n;
    (w * loss, w * ll)
}

fn flow_gradient_with_ll<T: Scalar>(
    flow: &mut dyn crate::flows::Flow<T>,
    density: &dyn crate::density::Density<T>,
    w: T,
    x: &Matrix<T>,
    j: usize,
) -> Result<(T, T)> {
    let (z, ld) = flow.forward_train(x)?;
    let (lp, score) = density.log_prob_with_score(&z)?;
    let (loss, ll) = weighted_terms(w, &ld, &lp);
    if !loss.is_finite() {
        return Err(AubError::NonFinite(format!("loss for domain {j}")));
    }
    let scale = -w / T::from_usize(x.nrows()).unwrap();
    let grad_z = score.map(|s| s * scale);
    let grad_ld = vec![scale; x.nrows()];
    flow.backward(&grad_z, &grad_ld, true)?;
    Ok((loss, ll))
}

fn flow_gradient_inner<T: Scalar>(
    flow: &mut dyn crate::flows::Flow<T>,
    density: &dyn crate::density::Density<T>,
    w: T,
    x: &Matrix<T>,
    j: usize,
) -> Result<T> {
    flow_gradient_with_ll(flow, density, w, x, j).map(|r| r.0)
}

fn check_batches<T: Scalar>(model: &AlignmentModel<T>, batches: &[Matrix<T>]) -> Result<()> {
    if batches.len() != model.k() {
        return Err(AubError::DimensionMismatch {
            expected: model.k(),
            got: batches.len(),
        });
    }
    for (j, b) in batches.iter().enumerate() {
        if b.is_empty() {
            return Err(AubError::InvalidArgument(format!("batch for domain {j} is empty")));
        }
        b.check_width(model.dim())?;
    }
    Ok(())
}

/// Index lists for one epoch: `schedule[b][j]` are the rows of domain `j` in
/// batch `b`. Domains smaller than the batch size use all rows every batch;
/// larger ones wrap around their own permutation.
fn epoch_schedule(sizes: &[usize], batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<Vec<usize>>> {
    let perms: Vec<Vec<usize>> = sizes.iter().map(|&n| rng.permutation(n)).collect();
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let n_batches = largest.div_ceil(batch_size).max(1);
    (0..n_batches)
        .map(|b| {
            perms
                .iter()
                .map(|perm| {
                    let n = perm.len();
                    if n <= batch_size {
                        perm.clone()
                    } else {
                        (0..batch_size).map(|i| perm[(b * batch_size + i) % n]).collect()
                    }
                })
                .collect()
        })
        .collect()
}

/// Trains in place and leaves the model at its best-validation epoch.
pub fn train<T: Scalar>(
    model: &mut AlignmentModel<T>,
    datasets: &[DomainDataset<T>],
    config: &TrainConfig,
) -> Result<TrainTrace> {
    train_with_final(model, datasets, config).map(|(trace, _)| trace)
}

/// As [`train`], also returning the parameter vector after the last epoch.
pub fn train_with_final<T: Scalar>(
    model: &mut AlignmentModel<T>,
    datasets: &[DomainDataset<T>],
    config: &TrainConfig,
) -> Result<(TrainTrace, Vec<T>)> {
    if datasets.len() != model.k() {
        return Err(AubError::InvalidConfig(format!(
            "{} datasets for a model with k = {}",
            datasets.len(),
            model.k()
        )));
    }
    for d in datasets {
        if d.train.is_empty() || d.val.is_empty() {
            return Err(AubError::InvalidArgument(format!(
                "domain dataset '{}' has an empty train or validation split",
                d.name
            )));
        }
        d.train.check_width(model.dim())?;
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut rng = SeededRng::new(config.seed);
    let sizes: Vec<usize> = datasets.iter().map(|d| d.train.nrows()).collect();
    let val: Vec<Matrix<T>> = datasets.iter().map(|d| d.val.clone()).collect();

    let mut trace = TrainTrace {
        records: Vec::new(),
        best_epoch: 0,
        best_val_aub: f64::INFINITY,
    };
    let mut best_params = model.parameter_vector();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let schedule = epoch_schedule(&sizes, config.batch_size, &mut rng);
        let batches: Vec<Vec<Matrix<T>>> = schedule
            .iter()
            .map(|tuple| {
                tuple
                    .iter()
                    .zip(datasets)
                    .map(|(idx, d)| d.train.select_rows(idx))
                    .collect()
            })
            .collect();

        let diverged = |detail: String| AubError::Diverged { epoch, detail };
        let mut q_ll = T::zero();
        let mut q_count = 0usize;
        for tuple in &batches {
            if let Some(ll) = trainer.q_step(model, tuple).map_err(|e| diverged(e.to_string()))? {
                q_ll += ll;
                q_count += 1;
            }
        }
        let mut loss_acc = T::zero();
        let mut t_ll = T::zero();
        for tuple in &batches {
            let (l, ll) = trainer.t_step(model, tuple).map_err(|e| diverged(e.to_string()))?;
            loss_acc += l;
            t_ll += ll;
        }
        let n_batches = T::from_usize(batches.len()).unwrap();
        let train_aub = (loss_acc / n_batches).to_f64_lossy();
        if !train_aub.is_finite() {
            return Err(diverged(format!("train AUB is {train_aub}")));
        }
        let q_log_likelihood = if q_count > 0 {
            q_ll / T::from_usize(q_count).unwrap()
        } else {
            t_ll / n_batches
        }
        .to_f64_lossy();
        let val_aub = model
            .aub_metric(&val)
            .map_err(|e| diverged(e.to_string()))?
            .to_f64_lossy();
        if !val_aub.is_finite() {
            return Err(diverged(format!("validation AUB is {val_aub}")));
        }
        trace.records.push(EpochRecord {
            epoch,
            train_aub,
            val_aub,
            q_log_likelihood,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if val_aub < trace.best_val_aub {
            trace.best_val_aub = val_aub;
            trace.best_epoch = epoch;
            best_params = model.parameter_vector();
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let final_params = model.parameter_vector();
    model.load_parameter_vector(&best_params)?;
    Ok((trace, final_params))
}
