use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gainnet::{Bound, Network};
use crate::ssm::{SSModel, Trajectory};

/// Value and parameter gradients of a mini-batch loss.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// `mean_i (1/T_i) sum_t ||x_hat_t - x_t||^2 + gamma ||theta||^2`
    pub loss: f64,
    /// The same without the regularizer.
    pub error_term: f64,
    pub gradients: Vec<DMatrix<f64>>,
}

/// Trajectories grouped by length so each group runs as one column batch.
pub(crate) fn group_by_length<'a>(batch: &[&'a Trajectory]) -> BTreeMap<usize, Vec<(usize, &'a Trajectory)>> {
    let mut groups: BTreeMap<usize, Vec<(usize, &Trajectory)>> = BTreeMap::new();
    for (i, t) in batch.iter().enumerate() {
        groups.entry(t.len()).or_default().push((i, t));
    }
    groups
}

pub(crate) fn stack_x0(group: &[(usize, &Trajectory)]) -> DMatrix<f64> {
    DMatrix::from_fn(group[0].1.m(), group.len(), |r, c| group[c].1.x0[r])
}

pub(crate) fn stack_column(group: &[(usize, &Trajectory)], t: usize, obs: bool) -> DMatrix<f64> {
    let rows = if obs { group[0].1.n() } else { group[0].1.m() };
    DMatrix::from_fn(rows, group.len(), |r, c| {
        let traj = group[c].1;
        if obs {
            traj.observations[(r, t)]
        } else {
            traj.states[(r, t)]
        }
    })
}

/// Records `sum_t ||x_hat_t - x_t||^2 * scale` for one equal-length group.
fn group_loss(
    tape: &mut Tape,
    p: &Bound,
    net: &Network,
    model: &SSModel,
    group: &[(usize, &Trajectory)],
    scale: f64,
) -> Result<Var> {
    let mut state = net.begin(tape, model, &stack_x0(group))?;
    let len = group[0].1.len();
    let mut total: Option<Var> = None;
    for t in 0..len {
        let y = tape.leaf(stack_column(group, t, true));
        let out = net.step(tape, p, model, &mut state, y).map_err(|e| at_step(e, t + 1))?;
        let x = tape.leaf(stack_column(group, t, false));
        let err = tape.sub(out.posterior, x)?;
        let sq = tape.l2_norm_sq(err)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    tape.scale(total.expect("trajectories are non-empty"), scale)
}

fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::FilterDiverged { reason, .. } => Error::FilterDiverged { step, reason },
        other => other,
    }
}

/// Mini-batch loss with gradients from one backward sweep per length group.
pub fn batch_loss(net: &Network, model: &SSModel, batch: &[&Trajectory], gamma: f64) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty mini-batch"));
    }
    let count = batch.len() as f64;
    let mut gradients: Vec<DMatrix<f64>> =
        net.params().values().iter().map(|v| DMatrix::zeros(v.nrows(), v.ncols())).collect();
    let mut error_term = 0.0;
    for (len, group) in group_by_length(batch) {
        let mut tape = Tape::new();
        let p = net.params().bind(&mut tape);
        let root = group_loss(&mut tape, &p, net, model, &group, 1.0 / (len as f64 * count))?;
        error_term += tape.scalar(root);
        let grads = tape.backward(root)?;
        for (acc, g) in gradients.iter_mut().zip(p.gradients(&grads)) {
            *acc += g;
        }
    }
    let mut reg = 0.0;
    if gamma != 0.0 {
        for (acc, v) in gradients.iter_mut().zip(net.params().values()) {
            *acc += v * (2.0 * gamma);
            reg += gamma * v.norm_squared();
        }
    }
    Ok(BatchLoss { loss: error_term + reg, error_term, gradients })
}

/// `(1/T) sum_t ||x_hat_t - x_t||^2 + gamma ||theta||^2` for one trajectory, forward only.
pub fn trajectory_loss(net: &Network, model: &SSModel, traj: &Trajectory, gamma: f64) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::invalid("trajectory has no steps"));
    }
    let mut tape = Tape::inference();
    let p = net.params().bind(&mut tape);
    let root = group_loss(&mut tape, &p, net, model, &[(0, traj)], 1.0 / traj.len() as f64)?;
    Ok(tape.scalar(root) + gamma * net.params().norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gainnet::{Architecture, FeatureMask, FeatureScaling, GainNetConfig, NetworkSpec};
    use crate::ssm::{canonical_f, exchange_h, generate_dataset, linear_model, InitialState, NoiseSpec, Split};

    fn tiny() -> (Network, SSModel, Vec<Trajectory>) {
        let model = linear_model(DMatrix::from_element(1, 1, 0.9), DMatrix::identity(1, 1)).unwrap();
        let spec = NetworkSpec::GainNet(GainNetConfig {
            architecture: Architecture::Arch1 { rho: 2, input_width: Some(3), layers: 1 },
            features: FeatureMask::ALL,
            scaling: FeatureScaling::Raw,
        });
        let net = Network::new(spec, 1, 1, 9).unwrap();
        let cov = NoiseSpec::new(0.1, 0.1).unwrap().covariances(1, 1);
        let data = generate_dataset(&model, &cov, &InitialState::default(), 3, 5, 1, Split::Train).unwrap();
        (net, model, data.trajectories)
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (net, model, trajs) = tiny();
        assert_eq!(net.hidden_sizes(), vec![4]);
        let batch: Vec<&Trajectory> = trajs.iter().collect();
        let gamma = 1e-3;
        let analytic = batch_loss(&net, &model, &batch, gamma).unwrap();
        let value = |n: &Network| batch_loss(n, &model, &batch, gamma).unwrap().loss;
        for k in 0..net.params().len() {
            for idx in 0..net.params().values()[k].len() {
                let h = 1e-6;
                let mut plus = net.clone();
                plus.params_mut().values_mut()[k][idx] += h;
                let mut minus = net.clone();
                minus.params_mut().values_mut()[k][idx] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let a = analytic.gradients[k][idx];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < 1e-4, "{a} vs {fd}");
            }
        }
    }

    #[test]
    fn batch_loss_is_the_mean_of_trajectory_losses() {
        let (net, model, trajs) = tiny();
        let batch: Vec<&Trajectory> = trajs.iter().collect();
        let sequential: f64 = trajs.iter().map(|t| trajectory_loss(&net, &model, t, 0.0).unwrap()).sum::<f64>() / 3.0;
        assert!((batch_loss(&net, &model, &batch, 0.0).unwrap().loss - sequential).abs() < 1e-12);
        let single = batch_loss(&net, &model, &batch[..1], 0.0).unwrap().loss;
        assert!((single - trajectory_loss(&net, &model, &trajs[0], 0.0).unwrap()).abs() < 1e-12);
        let twice = batch_loss(&net, &model, &[batch[0], batch[0]], 0.0).unwrap().loss;
        assert!((twice - single).abs() < 1e-12);
        assert!(batch_loss(&net, &model, &[], 0.0).is_err());
    }

    #[test]
    fn mixed_lengths_follow_the_definition() {
        let (net, model, trajs) = tiny();
        let short = trajs[1].segment(0, 2).unwrap();
        let batch = [&trajs[0], &short];
        let expected = (trajectory_loss(&net, &model, &trajs[0], 0.0).unwrap()
            + trajectory_loss(&net, &model, &short, 0.0).unwrap())
            / 2.0;
        assert!((batch_loss(&net, &model, &batch, 0.0).unwrap().loss - expected).abs() < 1e-12);
    }

    #[test]
    fn regularizer_only_with_perfect_estimates() {
        // noiseless data, x0 known, oracle gain zero => prediction is exact
        let model = linear_model(canonical_f(2), exchange_h(2, 2)).unwrap();
        let cov = NoiseSpec::new(0.0, 0.0).unwrap().covariances(2, 2);
        let data = generate_dataset(&model, &cov, &InitialState::default(), 2, 6, 3, Split::Train).unwrap();
        let spec = NetworkSpec::GainNet(GainNetConfig {
            architecture: Architecture::Arch1 { rho: 1, input_width: None, layers: 1 },
            features: FeatureMask::INNOVATION_UPDATE,
            scaling: FeatureScaling::Raw,
        });
        let mut net = Network::new(spec, 2, 2, 0).unwrap();
        net.params_mut().fill(0.0);
        assert_eq!(trajectory_loss(&net, &model, &data.trajectories[0], 0.0).unwrap(), 0.0);
        net.params_mut().fill(0.5);
        let reg = 0.01 * net.params().norm_squared();
        // nonzero weights still see zero innovations on noiseless data
        let loss = trajectory_loss(&net, &model, &data.trajectories[0], 0.01).unwrap();
        assert!((loss - reg).abs() < 1e-12 * reg.max(1.0), "{loss} vs {reg}");
    }
}
