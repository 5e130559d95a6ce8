use rand::Rng;

use super::params::{Bound, ParamId, ParamSet};
use crate::autodiff::{Tape, Var};
use crate::error::Result;

fn bound_for(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Affine layer `W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    input: usize,
    output: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = bound_for(input);
        let w = params.uniform(format!("{name}.weight"), output, input, bound, rng);
        let b = params.uniform(format!("{name}.bias"), output, 1, bound, rng);
        Self { w, b, input, output }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let wx = tape.matmul(p.var(self.w), x)?;
        tape.add_bias(wx, p.var(self.b))
    }

    pub fn forward_relu(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let a = self.forward(tape, p, x)?;
        tape.relu(a)
    }
}

/// Gated recurrent unit with `h' = (1 - z) * h + z * h~`.
///
/// Input weights of the update, reset and candidate gates are stacked in that
/// order into one `3H x input` matrix.
#[derive(Clone, Debug)]
pub struct Gru {
    w_input: ParamId,
    b_input: ParamId,
    u_gates: ParamId,
    u_candidate: ParamId,
    input: usize,
    hidden: usize,
}

pub const GRU_CONVENTION: &str = "h'=(1-z)*h+z*tanh(Wx+U(r*h)+b)";

impl Gru {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bx = bound_for(input);
        let bh = bound_for(hidden);
        let w_input = params.uniform(format!("{name}.w_input"), 3 * hidden, input, bx, rng);
        let b_input = params.uniform(format!("{name}.b_input"), 3 * hidden, 1, bx, rng);
        let u_gates = params.uniform(format!("{name}.u_gates"), 2 * hidden, hidden, bh, rng);
        let u_candidate = params.uniform(format!("{name}.u_candidate"), hidden, hidden, bh, rng);
        Self { w_input, b_input, u_gates, u_candidate, input, hidden }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let wx = tape.matmul(p.var(self.w_input), x)?;
        let a = tape.add_bias(wx, p.var(self.b_input))?;
        let a_gates = tape.slice(a, 0, 2 * hd)?;
        let a_cand = tape.slice(a, 2 * hd, hd)?;
        let uh = tape.matmul(p.var(self.u_gates), h)?;
        let pre = tape.add(a_gates, uh)?;
        let gates = tape.sigmoid(pre)?;
        let z = tape.slice(gates, 0, hd)?;
        let r = tape.slice(gates, hd, hd)?;
        let rh = tape.hadamard(r, h)?;
        let ur = tape.matmul(p.var(self.u_candidate), rh)?;
        let pre_c = tape.add(a_cand, ur)?;
        let cand = tape.tanh(pre_c)?;
        let delta = tape.sub(cand, h)?;
        let step = tape.hadamard(z, delta)?;
        tape.add(h, step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unrolled_loss(params: &ParamSet, gru: &Gru, head: &Linear, xs: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let mut h = tape.leaf(DMatrix::zeros(gru.hidden(), xs[0].ncols()));
        let mut total = tape.scalar_leaf(0.0);
        for x in xs {
            let xv = tape.leaf(x.clone());
            h = gru.step(&mut tape, &p, xv, h).unwrap();
            let out = head.forward(&mut tape, &p, h).unwrap();
            let sq = tape.l2_norm_sq(out).unwrap();
            total = tape.add(total, sq).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        (tape.scalar(total), p.gradients(&grads))
    }

    #[test]
    fn five_step_gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let gru = Gru::new(&mut params, "gru", 3, 4, &mut rng);
        let head = Linear::new(&mut params, "head", 4, 2, &mut rng);
        let xs: Vec<DMatrix<f64>> =
            (0..5).map(|_| DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let (_, analytic) = unrolled_loss(&params, &gru, &head, &xs);
        let h = 1e-6;
        for k in 0..params.len() {
            for idx in 0..params.values()[k].len() {
                let mut plus = params.clone();
                plus.values_mut()[k][idx] += h;
                let mut minus = params.clone();
                minus.values_mut()[k][idx] -= h;
                let fd = (unrolled_loss(&plus, &gru, &head, &xs).0 - unrolled_loss(&minus, &gru, &head, &xs).0) / (2.0 * h);
                let a = analytic[k][idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                assert!(err < 1e-5, "{} entry {idx}: {a} vs {fd}", params.names()[k]);
            }
        }
    }

    #[test]
    fn zero_update_gate_keeps_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let gru = Gru::new(&mut params, "gru", 2, 3, &mut rng);
        params.fill(0.0);
        // z = sigmoid(-inf) = 0 makes the step an identity
        params.values_mut()[1].rows_mut(0, 3).fill(-1e3);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let h0 = DMatrix::from_column_slice(3, 1, &[0.3, -0.2, 0.9]);
        let h = tape.leaf(h0.clone());
        let x = tape.leaf(DMatrix::from_element(2, 1, 5.0));
        let out = gru.step(&mut tape, &p, x, h).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn initialization_respects_fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let lin = Linear::new(&mut params, "fc", 16, 5, &mut rng);
        assert_eq!((lin.input(), lin.output()), (16, 5));
        assert!(params.values().iter().all(|v| v.amax() <= 0.25));
        assert_eq!(params.count(), 16 * 5 + 5);
    }
}
