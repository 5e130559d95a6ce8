use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureMask, FeatureScaling, Features};
use super::layers::{Gru, Linear};
use super::params::{Bound, ParamSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::SSModel;

fn default_rho() -> usize {
    10
}

fn default_layers() -> usize {
    1
}

fn default_in_mult() -> usize {
    5
}

fn default_out_mult() -> usize {
    40
}

/// Layout of the gain network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Input FC, `layers` stacked GRUs of width `rho (m^2 + n^2)`, output FC to `m n`.
    Arch1 {
        #[serde(default = "default_rho")]
        rho: usize,
        /// Width of the input FC layer; the GRU width when absent.
        #[serde(default)]
        input_width: Option<usize>,
        #[serde(default = "default_layers")]
        layers: usize,
    },
    /// Three cascaded GRUs of widths `m^2`, `m^2`, `n^2`.
    Arch2 {
        #[serde(default = "default_in_mult")]
        in_mult: usize,
        #[serde(default = "default_out_mult")]
        out_mult: usize,
    },
}

impl Architecture {
    pub fn arch1() -> Self {
        Architecture::Arch1 { rho: default_rho(), input_width: None, layers: default_layers() }
    }

    pub fn arch2() -> Self {
        Architecture::Arch2 { in_mult: default_in_mult(), out_mult: default_out_mult() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GainNetConfig {
    pub architecture: Architecture,
    pub features: FeatureMask,
    #[serde(default)]
    pub scaling: FeatureScaling,
}

/// What a [`Network`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    /// Learned Kalman gain inside the model-based predict/update flow.
    GainNet(GainNetConfig),
    /// GRU mapping `y_t` straight to `x_hat_t`.
    VanillaRnn {
        #[serde(default = "default_rho")]
        rho: usize,
    },
    /// Model-based prior plus a GRU-estimated increment. With `diff_features` the
    /// GRU sees the innovation and the forward update difference instead of
    /// `(y_t, prior)`.
    MbRnn {
        #[serde(default = "default_rho")]
        rho: usize,
        #[serde(default)]
        diff_features: bool,
    },
}

impl NetworkSpec {
    pub fn label(&self) -> &'static str {
        match self {
            NetworkSpec::GainNet(_) => "learned-gain",
            NetworkSpec::VanillaRnn { .. } => "vanilla-rnn",
            NetworkSpec::MbRnn { diff_features: false, .. } => "mb-rnn",
            NetworkSpec::MbRnn { diff_features: true, .. } => "mb-rnn-diff",
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Arch1 { input: Linear, grus: Vec<Gru>, output: Linear },
    Arch2 { q: Cascade, sigma: Cascade, link: Linear, s: Cascade, head: Linear, out: Linear },
    Recurrent { input: Linear, gru: Gru, output: Linear },
}

#[derive(Clone, Debug)]
struct Cascade {
    input: Linear,
    gru: Gru,
}

/// Carried quantities of a batched rollout, one trajectory per column.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub posterior: Var,
    pub previous_posterior: Var,
    pub previous_prior: Var,
    pub previous_observation: Var,
    pub hidden: Vec<Var>,
}

impl Rollout {
    fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.posterior, self.previous_posterior, self.previous_prior, self.previous_observation];
        v.extend(&self.hidden);
        v
    }

    fn from_vars(v: Vec<Var>) -> Self {
        Self { posterior: v[0], previous_posterior: v[1], previous_prior: v[2], previous_observation: v[3], hidden: v[4..].to_vec() }
    }

    /// Severs the gradient path into everything carried so far.
    pub fn detach(&mut self, tape: &mut Tape) -> Result<()> {
        let vars = self.vars().into_iter().map(|v| tape.detach(v)).collect::<Result<Vec<_>>>()?;
        *self = Self::from_vars(vars);
        Ok(())
    }

    /// Copies the carried values out, drops the tape past `mark` and records the
    /// values again as leaves. Keeps forward-only rollouts at constant memory.
    pub fn carry(&mut self, tape: &mut Tape, mark: usize) {
        let values: Vec<DMatrix<f64>> = self.vars().into_iter().map(|v| tape.value(v).clone()).collect();
        tape.truncate(mark);
        *self = Self::from_vars(values.into_iter().map(|v| tape.leaf(v)).collect());
    }
}

/// Intermediate results of one batched learned step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub prior: Var,
    pub predicted_obs: Option<Var>,
    pub innovation: Option<Var>,
    /// Row-major flattened `m x n` gains, one column per trajectory.
    pub gain: Option<Var>,
    pub features: Option<Features>,
    pub posterior: Var,
}

/// A trainable recurrent estimator.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    m: usize,
    n: usize,
    seed: u64,
    params: ParamSet,
    body: Body,
}

impl Network {
    pub fn new(spec: NetworkSpec, m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let p = &mut params;
        let body = match spec {
            NetworkSpec::GainNet(cfg) => {
                if cfg.features.is_empty() {
                    return Err(Error::invalid("gain network needs at least one input feature"));
                }
                match cfg.architecture {
                    Architecture::Arch1 { rho, input_width, layers } => {
                        if rho == 0 || layers == 0 {
                            return Err(Error::invalid("rho and the layer count must be positive"));
                        }
                        let hidden = rho * (m * m + n * n);
                        let width = input_width.unwrap_or(hidden);
                        let input = Linear::new(p, "fc_in", cfg.features.width(m, n), width, &mut rng);
                        let grus = (0..layers)
                            .map(|l| Gru::new(p, &format!("gru{l}"), if l == 0 { width } else { hidden }, hidden, &mut rng))
                            .collect();
                        let output = Linear::new(p, "fc_out", hidden, m * n, &mut rng);
                        Body::Arch1 { input, grus, output }
                    }
                    Architecture::Arch2 { in_mult, out_mult } => {
                        if cfg.features != FeatureMask::ALL {
                            return Err(Error::invalid("architecture #2 consumes all four features"));
                        }
                        let (mm, nn) = (m * m, n * n);
                        let q_in = Linear::new(p, "q.fc", m, in_mult * mm, &mut rng);
                        let q = Cascade { gru: Gru::new(p, "q.gru", in_mult * mm, mm, &mut rng), input: q_in };
                        let s_in = Linear::new(p, "sigma.fc", m, in_mult * mm, &mut rng);
                        let sigma = Cascade { gru: Gru::new(p, "sigma.gru", mm + in_mult * mm, mm, &mut rng), input: s_in };
                        let link = Linear::new(p, "sigma_to_s.fc", mm, nn, &mut rng);
                        let o_in = Linear::new(p, "s.fc", 2 * n, in_mult * nn, &mut rng);
                        let s = Cascade { gru: Gru::new(p, "s.gru", nn + in_mult * nn, nn, &mut rng), input: o_in };
                        let head = Linear::new(p, "head.fc", mm + nn, out_mult * (mm + nn), &mut rng);
                        let out = Linear::new(p, "head.out", out_mult * (mm + nn), m * n, &mut rng);
                        Body::Arch2 { q, sigma, link, s, head, out }
                    }
                }
            }
            NetworkSpec::VanillaRnn { rho } | NetworkSpec::MbRnn { rho, .. } => {
                let hidden = rho.max(1) * (m * m + n * n);
                let width = if matches!(spec, NetworkSpec::MbRnn { .. }) { m + n } else { n };
                let input = Linear::new(p, "fc_in", width, hidden, &mut rng);
                let gru = Gru::new(p, "gru0", hidden, hidden, &mut rng);
                let output = Linear::new(p, "fc_out", hidden, m, &mut rng);
                Body::Recurrent { input, gru, output }
            }
        };
        if matches!(spec, NetworkSpec::GainNet(_)) {
            // A zero gain at initialization makes the untrained filter an open-loop
            // predictor, which cannot blow up faster than the model itself.
            let head = if matches!(body, Body::Arch2 { .. }) { "head.out." } else { "fc_out." };
            let names: Vec<String> = params.names().to_vec();
            for (name, v) in names.iter().zip(params.values_mut()) {
                if name.starts_with(head) {
                    v.fill(0.0);
                }
            }
        }
        Ok(Self { spec, m, n, seed, params, body })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Widths of the recurrent states in rollout order.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        match &self.body {
            Body::Arch1 { grus, .. } => grus.iter().map(Gru::hidden).collect(),
            Body::Arch2 { q, sigma, s, .. } => vec![q.gru.hidden(), sigma.gru.hidden(), s.gru.hidden()],
            Body::Recurrent { gru, .. } => vec![gru.hidden()],
        }
    }

    pub fn check_model(&self, model: &SSModel) -> Result<()> {
        if model.m() != self.m || model.n() != self.n {
            return Err(Error::shape(format!(
                "network built for m={} n={}, model has m={} n={}",
                self.m,
                self.n,
                model.m(),
                model.n()
            )));
        }
        Ok(())
    }

    /// Starts a rollout from the known initial states `x0` (`m x M`).
    pub fn begin(&self, tape: &mut Tape, model: &SSModel, x0: &DMatrix<f64>) -> Result<Rollout> {
        self.check_model(model)?;
        if x0.nrows() != self.m {
            return Err(Error::shape("initial states must have m rows"));
        }
        let batch = x0.ncols();
        let h_x0 = DMatrix::from_columns(
            &x0.column_iter().map(|c| model.h(&c.into_owned())).collect::<Vec<_>>(),
        );
        Ok(Rollout {
            posterior: tape.leaf(x0.clone()),
            previous_posterior: tape.leaf(x0.clone()),
            previous_prior: tape.leaf(x0.clone()),
            previous_observation: tape.leaf(h_x0),
            hidden: self.hidden_sizes().into_iter().map(|h| tape.leaf(DMatrix::zeros(h, batch))).collect(),
        })
    }

    /// One step for every trajectory of the batch; `y` is `n x M`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, model: &SSModel, state: &mut Rollout, y: Var) -> Result<StepOutput> {
        if y.rows() != self.n || y.cols() != state.posterior.cols() {
            return Err(Error::shape(format!("observation batch {:?}", y.shape())));
        }
        let out = match (&self.body, &self.spec) {
            (Body::Recurrent { input, gru, output }, NetworkSpec::VanillaRnn { .. }) => {
                let a = input.forward_relu(tape, p, y)?;
                let h = gru.step(tape, p, a, state.hidden[0])?;
                state.hidden[0] = h;
                let x = output.forward(tape, p, h)?;
                StepOutput { prior: state.posterior, predicted_obs: None, innovation: None, gain: None, features: None, posterior: x }
            }
            (Body::Recurrent { input, gru, output }, NetworkSpec::MbRnn { diff_features, .. }) => {
                let prior = tape.map_columns(state.posterior, model.evolution())?;
                let (inp, predicted_obs, innovation) = if *diff_features {
                    let yhat = tape.map_columns(prior, model.observation())?;
                    let dy = tape.sub(y, yhat)?;
                    let f4 = tape.sub(state.posterior, state.previous_prior)?;
                    (tape.concat(&[dy, f4])?, Some(yhat), Some(dy))
                } else {
                    (tape.concat(&[y, prior])?, None, None)
                };
                let a = input.forward_relu(tape, p, inp)?;
                let h = gru.step(tape, p, a, state.hidden[0])?;
                state.hidden[0] = h;
                let dx = output.forward(tape, p, h)?;
                let x = tape.add(prior, dx)?;
                StepOutput { prior, predicted_obs, innovation, gain: None, features: None, posterior: x }
            }
            (_, NetworkSpec::GainNet(cfg)) => {
                let cfg = *cfg;
                learned_gain_step(tape, model, state, y, |tape, feats, hidden| self.gain(tape, p, cfg, feats, hidden))?
            }
            _ => unreachable!("body always matches its spec"),
        };
        if tape.value(out.posterior).iter().any(|v| !v.is_finite()) {
            return Err(Error::FilterDiverged { step: 0, reason: format!("{} produced a non-finite estimate", self.spec.label()) });
        }
        if !matches!(self.spec, NetworkSpec::GainNet(_)) {
            state.previous_posterior = state.posterior;
            state.previous_prior = out.prior;
            state.posterior = out.posterior;
            state.previous_observation = y;
        }
        Ok(out)
    }

    /// Flattened gain `m n x M` from the features; updates the hidden states.
    fn gain(&self, tape: &mut Tape, p: &Bound, cfg: GainNetConfig, feats: &Features, hidden: &mut [Var]) -> Result<Var> {
        let feats = feats.scaled(tape, cfg.scaling)?;
        match &self.body {
            Body::Arch1 { input, grus, output } => {
                let x = feats.concat(tape, cfg.features)?;
                let mut a = input.forward_relu(tape, p, x)?;
                for (gru, h) in grus.iter().zip(hidden.iter_mut()) {
                    *h = gru.step(tape, p, a, *h)?;
                    a = *h;
                }
                output.forward(tape, p, a)
            }
            Body::Arch2 { q, sigma, link, s, head, out } => {
                let aq = q.input.forward_relu(tape, p, feats.f4)?;
                hidden[0] = q.gru.step(tape, p, aq, hidden[0])?;
                let a3 = sigma.input.forward_relu(tape, p, feats.f3)?;
                let in_sigma = tape.concat(&[hidden[0], a3])?;
                hidden[1] = sigma.gru.step(tape, p, in_sigma, hidden[1])?;
                let l1 = link.forward_relu(tape, p, hidden[1])?;
                let obs = tape.concat(&[feats.f1, feats.f2])?;
                let a12 = s.input.forward_relu(tape, p, obs)?;
                let in_s = tape.concat(&[l1, a12])?;
                hidden[2] = s.gru.step(tape, p, in_s, hidden[2])?;
                let joint = tape.concat(&[hidden[2], hidden[1]])?;
                let hd = head.forward_relu(tape, p, joint)?;
                out.forward(tape, p, hd)
            }
            Body::Recurrent { .. } => unreachable!("gain requested from a recurrent baseline"),
        }
    }
}

/// Predict/update recursion with an externally supplied gain: `gain(tape, features,
/// hidden)` returns the row-major flattened gain for every column.
pub fn learned_gain_step(
    tape: &mut Tape,
    model: &SSModel,
    state: &mut Rollout,
    y: Var,
    gain: impl FnOnce(&mut Tape, &Features, &mut [Var]) -> Result<Var>,
) -> Result<StepOutput> {
    let prior = tape.map_columns(state.posterior, model.evolution())?;
    let predicted_obs = tape.map_columns(prior, model.observation())?;
    let innovation = tape.sub(y, predicted_obs)?;
    let features = Features {
        f1: tape.sub(y, state.previous_observation)?,
        f2: innovation,
        f3: tape.sub(state.posterior, state.previous_posterior)?,
        f4: tape.sub(state.posterior, state.previous_prior)?,
    };
    let k = gain(tape, &features, &mut state.hidden)?;
    if k.rows() != model.m() * model.n() {
        return Err(Error::shape(format!("gain has {} rows, expected m n = {}", k.rows(), model.m() * model.n())));
    }
    if tape.value(k).iter().any(|v| !v.is_finite()) {
        return Err(Error::FilterDiverged { step: 0, reason: "non-finite learned gain".into() });
    }
    let correction = tape.gain_apply(k, innovation)?;
    let posterior = tape.add(prior, correction)?;
    state.previous_posterior = state.posterior;
    state.previous_prior = prior;
    state.posterior = posterior;
    state.previous_observation = y;
    Ok(StepOutput {
        prior,
        predicted_obs: Some(predicted_obs),
        innovation: Some(innovation),
        gain: Some(k),
        features: Some(features),
        posterior,
    })
}

/// Flattens one `m x n` gain row-major into an `m n`-vector, repeated for `batch` columns.
pub fn flatten_gain(k: &DMatrix<f64>, batch: usize) -> DMatrix<f64> {
    let (m, n) = k.shape();
    DMatrix::from_fn(m * n, batch, |r, _| k[(r / n, r % n)])
}

/// Inverse of [`flatten_gain`] for one column.
pub fn unflatten_gain(flat: &[f64], m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |i, k| flat[i * n + k])
}
