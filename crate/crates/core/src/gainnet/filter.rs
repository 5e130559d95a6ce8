use nalgebra::{DMatrix, DVector};

use super::features::{FeatureVector, KNetState};
use super::nets::{unflatten_gain, Network, NetworkSpec, Rollout};
use super::params::Bound;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::filters::{FilterStepRecord, StateFilter};
use crate::ssm::SSModel;

/// A trained [`Network`] run one trajectory at a time, forward only.
#[derive(Debug)]
pub struct LearnedFilter {
    net: Network,
    model: SSModel,
    name: String,
    tape: Tape,
    bound: Option<Bound>,
    mark: usize,
    state: Option<Rollout>,
    last: Option<(FilterStepRecord, Option<FeatureVector>)>,
}

impl LearnedFilter {
    pub fn new(net: Network, model: &SSModel) -> Result<Self> {
        net.check_model(model)?;
        let name = net.spec().label().to_string();
        Ok(Self { net, model: model.clone(), name, tape: Tape::inference(), bound: None, mark: 0, state: None, last: None })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Carried quantities before the next step.
    pub fn knet_state(&self) -> Option<KNetState> {
        let s = self.state.as_ref()?;
        let col = |v| DVector::from_column_slice(self.tape.value(v).as_slice());
        Some(KNetState {
            posterior: col(s.posterior),
            previous_posterior: col(s.previous_posterior),
            previous_prior: col(s.previous_prior),
            previous_observation: col(s.previous_observation),
        })
    }

    /// Record and (for gain networks) active features of the latest step.
    pub fn last_step(&self) -> Option<&(FilterStepRecord, Option<FeatureVector>)> {
        self.last.as_ref()
    }

    /// One learned step on the current trajectory.
    pub fn knet_step(&mut self, y: &DVector<f64>) -> Result<&FilterStepRecord> {
        let state = self.state.as_mut().ok_or_else(|| Error::invalid("reset the filter before stepping"))?;
        let bound = self.bound.as_ref().expect("bound together with the state");
        let tape = &mut self.tape;
        let yv = tape.leaf(DMatrix::from_column_slice(y.len(), 1, y.as_slice()));
        let out = self.net.step(tape, bound, &self.model, state, yv)?;
        let col = |v| DVector::from_column_slice(tape.value(v).as_slice());
        let (m, n) = (self.net.m(), self.net.n());
        let record = FilterStepRecord {
            prior_mean: col(out.prior),
            prior_cov: None,
            predicted_obs: out.predicted_obs.map(col).unwrap_or_else(|| self.model.h(&col(out.prior))),
            innovation: out.innovation.map(col).unwrap_or_else(|| y - self.model.h(&col(out.prior))),
            gain: out.gain.map(|k| unflatten_gain(tape.value(k).as_slice(), m, n)).unwrap_or_else(|| DMatrix::zeros(m, n)),
            posterior_mean: col(out.posterior),
            posterior_cov: None,
        };
        let features = match (self.net.spec(), out.features) {
            (NetworkSpec::GainNet(cfg), Some(f)) => Some(FeatureVector {
                f1: cfg.features.f1.then(|| col(f.f1)),
                f2: cfg.features.f2.then(|| col(f.f2)),
                f3: cfg.features.f3.then(|| col(f.f3)),
                f4: cfg.features.f4.then(|| col(f.f4)),
            }),
            _ => None,
        };
        state.carry(tape, self.mark);
        Ok(&self.last.insert((record, features)).0)
    }
}

impl StateFilter for LearnedFilter {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, x0: &DVector<f64>) {
        self.tape.reset();
        let bound = self.net.params().bind(&mut self.tape);
        self.mark = self.tape.len();
        let x0 = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());
        self.state = Some(self.net.begin(&mut self.tape, &self.model, &x0).expect("dimensions checked at construction"));
        self.bound = Some(bound);
        self.last = None;
    }

    fn step(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.knet_step(y)?.posterior_mean.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gainnet::{compute_features, Architecture, FeatureMask, FeatureScaling, GainNetConfig};
    use crate::ssm::{canonical_f, exchange_h, linear_model, simulate, NoiseSpec};

    #[test]
    fn features_are_causal_and_replayable() {
        let model = linear_model(canonical_f(2), exchange_h(2, 2)).unwrap();
        let traj = simulate(&model, &NoiseSpec::new(0.1, 0.1).unwrap(), &DVector::from_vec(vec![1.0, 0.0]), 30, 4).unwrap();
        let spec = NetworkSpec::GainNet(GainNetConfig {
            architecture: Architecture::arch1(),
            features: FeatureMask::ALL,
            scaling: FeatureScaling::Raw,
        });
        let mut filter = LearnedFilter::new(Network::new(spec, 2, 2, 5).unwrap(), &model).unwrap();
        filter.reset(&traj.x0);
        for t in 0..traj.len() {
            let before = filter.knet_state().unwrap();
            let y = traj.observations.column(t).into_owned();
            let record = filter.knet_step(&y).unwrap().clone();
            let feats = filter.last_step().unwrap().1.clone();
            let replay = compute_features(&before, &y, &record.predicted_obs, FeatureMask::ALL);
            assert_eq!(Some(replay), feats, "step {t}");
            let after = filter.knet_state().unwrap();
            assert_eq!(after.previous_posterior, before.posterior);
            assert_eq!(after.previous_prior, record.prior_mean);
        }
    }

    #[test]
    fn memory_stays_bounded_during_long_runs() {
        let model = linear_model(canonical_f(2), exchange_h(2, 2)).unwrap();
        let spec = NetworkSpec::MbRnn { rho: 1, diff_features: true };
        let mut filter = LearnedFilter::new(Network::new(spec, 2, 2, 5).unwrap(), &model).unwrap();
        filter.reset(&DVector::zeros(2));
        filter.step(&DVector::zeros(2)).unwrap();
        let len = filter.tape.len();
        for _ in 0..50 {
            filter.step(&DVector::from_element(2, 0.3)).unwrap();
        }
        assert_eq!(filter.tape.len(), len);
    }
}
