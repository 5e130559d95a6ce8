use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Which of the four difference features feed the network.
///
/// * `f1`: observation difference `y_t - y_{t-1}`
/// * `f2`: innovation `y_t - y_hat_{t|t-1}`
/// * `f3`: forward evolution difference `x_hat_{t-1|t-1} - x_hat_{t-2|t-2}`
/// * `f4`: forward update difference `x_hat_{t-1|t-1} - x_hat_{t-1|t-2}`
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub f1: bool,
    pub f2: bool,
    pub f3: bool,
    pub f4: bool,
}

impl FeatureMask {
    pub const ALL: Self = Self { f1: true, f2: true, f3: true, f4: true };
    pub const INNOVATION_UPDATE: Self = Self { f1: false, f2: true, f3: false, f4: true };
    pub const OBSERVATION_EVOLUTION_UPDATE: Self = Self { f1: true, f2: false, f3: true, f4: true };

    pub fn is_empty(&self) -> bool {
        !(self.f1 || self.f2 || self.f3 || self.f4)
    }

    /// Concatenated input width for state dimension `m` and observation dimension `n`.
    pub fn width(&self, m: usize, n: usize) -> usize {
        [(self.f1, n), (self.f2, n), (self.f3, m), (self.f4, m)].iter().filter(|(on, _)| *on).map(|(_, w)| w).sum()
    }

    pub fn label(&self) -> String {
        let names = [(self.f1, "F1"), (self.f2, "F2"), (self.f3, "F3"), (self.f4, "F4")];
        names.iter().filter(|(on, _)| *on).map(|(_, s)| *s).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    #[default]
    Raw,
    /// Each feature column scaled to unit Euclidean norm.
    UnitNorm,
}

/// The four features of a batch, one trajectory per column.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

impl Features {
    pub fn scaled(self, tape: &mut Tape, scaling: FeatureScaling) -> Result<Self> {
        Ok(match scaling {
            FeatureScaling::Raw => self,
            FeatureScaling::UnitNorm => Self {
                f1: tape.normalize_columns(self.f1)?,
                f2: tape.normalize_columns(self.f2)?,
                f3: tape.normalize_columns(self.f3)?,
                f4: tape.normalize_columns(self.f4)?,
            },
        })
    }

    /// Active features stacked in the order F1, F2, F3, F4.
    pub fn concat(&self, tape: &mut Tape, mask: FeatureMask) -> Result<Var> {
        let parts: Vec<Var> = [(mask.f1, self.f1), (mask.f2, self.f2), (mask.f3, self.f3), (mask.f4, self.f4)]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, v)| *v)
            .collect();
        tape.concat(&parts)
    }
}

/// Features of a single step as plain vectors; inactive entries are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub f1: Option<DVector<f64>>,
    pub f2: Option<DVector<f64>>,
    pub f3: Option<DVector<f64>>,
    pub f4: Option<DVector<f64>>,
}

impl FeatureVector {
    pub fn concat(&self) -> DVector<f64> {
        let parts: Vec<f64> = [&self.f1, &self.f2, &self.f3, &self.f4]
            .into_iter()
            .flatten()
            .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
            .collect();
        DVector::from_vec(parts)
    }
}

/// Quantities carried between steps of a learned-gain filter on one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct KNetState {
    pub posterior: DVector<f64>,
    pub previous_posterior: DVector<f64>,
    pub previous_prior: DVector<f64>,
    pub previous_observation: DVector<f64>,
}

impl KNetState {
    /// Start of a trajectory: `y_0 := h(x_0)` and both state differences vanish.
    pub fn initial(x0: &DVector<f64>, h_x0: DVector<f64>) -> Self {
        Self { posterior: x0.clone(), previous_posterior: x0.clone(), previous_prior: x0.clone(), previous_observation: h_x0 }
    }
}

/// Features for step `t` from the carried state, `y_t` and the predicted observation.
pub fn compute_features(state: &KNetState, y: &DVector<f64>, y_pred: &DVector<f64>, mask: FeatureMask) -> FeatureVector {
    FeatureVector {
        f1: mask.f1.then(|| y - &state.previous_observation),
        f2: mask.f2.then(|| y - y_pred),
        f3: mask.f3.then(|| &state.posterior - &state.previous_posterior),
        f4: mask.f4.then(|| &state.posterior - &state.previous_prior),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_and_labels() {
        assert_eq!(FeatureMask::INNOVATION_UPDATE.width(3, 2), 5);
        assert_eq!(FeatureMask::ALL.width(3, 2), 10);
        assert_eq!(FeatureMask::OBSERVATION_EVOLUTION_UPDATE.label(), "F1+F3+F4");
    }

    #[test]
    fn perfect_prediction_zeroes_the_innovation() {
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let state = KNetState::initial(&x0, x0.clone());
        let y = DVector::from_vec(vec![0.5, 0.5]);
        let feat = compute_features(&state, &y, &y, FeatureMask::ALL);
        assert_eq!(feat.f2.unwrap(), DVector::zeros(2));
    }

    #[test]
    fn first_step_boundary_convention() {
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let state = KNetState::initial(&x0, DVector::from_vec(vec![2.0, 1.0]));
        let y = DVector::from_vec(vec![3.0, 3.0]);
        let feat = compute_features(&state, &y, &y, FeatureMask::ALL);
        assert_eq!(feat.f1.unwrap(), DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(feat.f3.unwrap(), DVector::zeros(2));
        assert_eq!(feat.f4.unwrap(), DVector::zeros(2));
        let partial = compute_features(&state, &y, &y, FeatureMask::INNOVATION_UPDATE);
        assert!(partial.f1.is_none() && partial.f3.is_none());
        assert_eq!(partial.concat().len(), 4);
    }
}
