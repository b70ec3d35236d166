#![allow(dead_code)]

use difflab_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Absolute floor for components whose true gradient is (numerically) zero.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), &mut rng(seed))
}

/// Largest violation of `|analytic − fd| ≤ REL_TOL·max(|analytic|, |fd|) + ABS_FLOOR`,
/// reported as `|analytic − fd| / (REL_TOL·max + ABS_FLOOR)` (≤ 1 passes).
///
/// `build` receives the tape and one leaf per input (all requiring grad) and
/// returns a scalar loss. The finite-difference side re-runs `build` on fresh
/// tapes with each input element nudged by ±h.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.item(loss)
    };
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[j];
            let bound = REL_TOL * a.abs().max(fd.abs()) + ABS_FLOOR;
            worst = worst.max((a - fd).abs() / bound);
        }
    }
    worst
}
