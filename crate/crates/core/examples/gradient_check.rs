//! Reverse-mode gradients on the tape against central finite differences for a
//! small two-layer network with a squared loss.

use learned_kalman::autodiff::{Tape, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(tape: &mut Tape, w1: Var, w2: Var, x: Var, y: Var) -> learned_kalman::Result<Var> {
    let h = tape.matmul(w1, x)?;
    let h = tape.tanh(h)?;
    let out = tape.matmul(w2, h)?;
    let err = tape.sub(out, y)?;
    tape.l2_norm_sq(err)
}

fn main() -> learned_kalman::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let (w1, w2, x, y) = (random(5, 3), random(2, 5), random(3, 4), random(2, 4));

    let mut tape = Tape::new();
    let vars = [tape.leaf(w1.clone()), tape.leaf(w2.clone())];
    let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
    let root = loss(&mut tape, vars[0], vars[1], xv, yv)?;
    let grads = tape.backward(root)?;
    println!("loss {:.6} over {} tape nodes", tape.scalar(root), tape.len());

    let eval = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> learned_kalman::Result<f64> {
        let mut t = Tape::inference();
        let (a, b, x, y) = (t.leaf(a.clone()), t.leaf(b.clone()), t.leaf(x.clone()), t.leaf(y.clone()));
        let l = loss(&mut t, a, b, x, y)?;
        Ok(t.scalar(l))
    };
    let eps = 1e-6;
    for (k, name) in ["w1", "w2"].iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let mut params = [w1.clone(), w2.clone()];
            params[k][i] += eps;
            let up = eval(&params[0], &params[1])?;
            params[k][i] -= 2.0 * eps;
            let down = eval(&params[0], &params[1])?;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1e-2));
        }
        println!("{name}: worst relative error {worst:.2e}");
    }
    Ok(())
}
