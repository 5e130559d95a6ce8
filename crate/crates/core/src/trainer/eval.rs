use std::time::Instant;

use nalgebra::DMatrix;

use super::loss::{group_by_length, stack_column, stack_x0};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::filters::StateFilter;
use crate::gainnet::Network;
use crate::metrics;
use crate::ssm::{Dataset, SSModel, Trajectory};

/// Column batch width used for forward-only evaluation.
const EVAL_BATCH: usize = 256;

/// Test-set summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mse_db: f64,
    /// Standard deviation of the per-trajectory dB losses.
    pub sigma_db: f64,
    /// Linear MSE per trajectory, averaged over time and state components.
    pub per_trajectory: Vec<f64>,
    pub runtime_s: f64,
}

impl Evaluation {
    pub fn from_losses(per_trajectory: Vec<f64>, runtime_s: f64) -> Self {
        let (mse_db, sigma_db) = metrics::aggregate_db(&per_trajectory);
        Self { mse_db, sigma_db, per_trajectory, runtime_s }
    }

    pub fn mse_linear(&self) -> f64 {
        self.per_trajectory.iter().sum::<f64>() / self.per_trajectory.len() as f64
    }
}

pub fn evaluate_filter(filter: &mut dyn StateFilter, data: &Dataset) -> Result<Evaluation> {
    let start = Instant::now();
    let losses = crate::filters::filter_dataset(filter, data)?;
    Ok(Evaluation::from_losses(losses, start.elapsed().as_secs_f64()))
}

/// Estimates of a network for every trajectory, computed in column batches on an
/// inference tape.
pub fn network_estimates(net: &Network, model: &SSModel, trajs: &[&Trajectory]) -> Result<Vec<DMatrix<f64>>> {
    let mut out: Vec<Option<DMatrix<f64>>> = vec![None; trajs.len()];
    for (len, group) in group_by_length(trajs) {
        for chunk in group.chunks(EVAL_BATCH) {
            let mut tape = Tape::inference();
            let p = net.params().bind(&mut tape);
            let mark = tape.len();
            let mut state = net.begin(&mut tape, model, &stack_x0(chunk))?;
            let mut est: Vec<DMatrix<f64>> = vec![DMatrix::zeros(net.m(), len); chunk.len()];
            for t in 0..len {
                let y = tape.leaf(stack_column(chunk, t, true));
                let step = net.step(&mut tape, &p, model, &mut state, y).map_err(|e| match e {
                    Error::FilterDiverged { reason, .. } => Error::FilterDiverged { step: t + 1, reason },
                    other => other,
                })?;
                let post = tape.value(step.posterior);
                for (c, e) in est.iter_mut().enumerate() {
                    e.set_column(t, &post.column(c));
                }
                state.carry(&mut tape, mark);
            }
            for ((i, _), e) in chunk.iter().zip(est) {
                out[*i] = Some(e);
            }
        }
    }
    Ok(out.into_iter().map(|e| e.expect("every trajectory is evaluated")).collect())
}

pub fn evaluate_network(net: &Network, model: &SSModel, data: &Dataset) -> Result<Evaluation> {
    let start = Instant::now();
    let trajs: Vec<&Trajectory> = data.trajectories.iter().collect();
    let est = network_estimates(net, model, &trajs)?;
    let losses = est.iter().zip(&trajs).map(|(e, t)| metrics::trajectory_mse(e, &t.states)).collect();
    Ok(Evaluation::from_losses(losses, start.elapsed().as_secs_f64()))
}
