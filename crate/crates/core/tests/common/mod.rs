#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scolio::{Mode, ParamStore, Result, Session, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;

/// `|a - n|` over the larger magnitude, floored at `1e-3` so gradients near
/// zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `v` with a fixed random tensor so any output becomes a scalar
/// with a nontrivial upstream gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(v), &mut rng(seed ^ 0x5EED));
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Max relative error between tape gradients and central differences for a
/// function of plain tensors. Every coordinate is probed.
pub fn check_tape<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).item().expect("scalar loss")
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let g = tape.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}

/// Like [`check_tape`] for code that reads parameters from a store. Each
/// input is probed at up to `max(probes, 16)` random coordinates and each
/// parameter tensor at up to `probes`. Every evaluation runs a fresh session
/// with the same seed so stochastic layers draw the same masks.
pub fn check_session<F>(store: &mut ParamStore, inputs: &[Tensor], mode: Mode, seed: u64, probes: usize, f: F) -> f64
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let loss_at = |store: &mut ParamStore, xs: &[Tensor]| -> f64 {
        let mut s = Session::new(store, mode, seed);
        let vars: Vec<Var> = xs.iter().map(|x| s.tape.variable(x.clone())).collect();
        let out = f(&mut s, &vars).expect("forward");
        s.tape.value(out).item().expect("scalar loss")
    };
    let (input_grads, param_grads) = {
        let mut s = Session::new(store, mode, seed);
        let vars: Vec<Var> = inputs.iter().map(|x| s.tape.variable(x.clone())).collect();
        let out = f(&mut s, &vars).expect("forward");
        s.tape.backward(out).expect("backward");
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| s.tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (ig, s.param_grads())
    };
    let mut pick = rng(seed ^ 0xC0FFEE);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for j in coords(x.numel(), probes.max(16), &mut pick) {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = loss_at(store, &xs);
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = loss_at(store, &xs);
            worst = worst.max(rel_err(input_grads[i].data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).numel();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in coords(n, probes, &mut pick) {
            let saved = store.get(id).clone();
            store.get_mut(id).data_mut()[j] = saved.data()[j] + FD_STEP;
            let up = loss_at(store, inputs);
            store.get_mut(id).data_mut()[j] = saved.data()[j] - FD_STEP;
            let down = loss_at(store, inputs);
            *store.get_mut(id) = saved;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn coords<R: Rng>(n: usize, probes: usize, rng: &mut R) -> Vec<usize> {
    if n <= probes {
        (0..n).collect()
    } else {
        sample(rng, n, probes).into_vec()
    }
}
