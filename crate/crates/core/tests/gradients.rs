mod common;

use common::{check_session, check_tape, rng, weighted_sum};
use scolio::layers::{Attention, BatchNorm2d, CatConv, Conv2d, DropPath, Linear};
use scolio::model::{ModelConfig, Network, Variant};
use scolio::orh::{encode_rank, level_loss, LossWeights, OrdinalHead};
use scolio::sfmm::Sfmm;
use scolio::{Mode, ParamStore, Tensor};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed)).map(|v| 1.5 + v)
}

macro_rules! assert_grad {
    ($err:expr, $tol:expr, $what:expr, $seed:expr) => {{
        let e = $err;
        assert!(e < $tol, "{} seed {}: relative error {e:.3e}", $what, $seed);
    }};
}

#[test]
fn elementwise_ops() {
    for seed in 0..SEEDS {
        let a = randn(&[2, 3, 4], seed);
        let b = randn(&[2, 3, 4], seed + 100);
        let e = check_tape(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let d = t.sub(d, v[1])?;
            let m = t.mul(d, v[0])?;
            let n = t.neg(m);
            let sc = t.scale(n, 0.7);
            let r = t.relu(sc);
            let ex = t.exp(v[1]);
            let c = t.clamp(v[0], -0.5, 0.5);
            let all = t.add(r, ex)?;
            let all = t.add(all, c)?;
            weighted_sum(t, all, seed)
        });
        assert_grad!(e, TOL, "elementwise", seed);
        let e = check_tape(&[positive(&[3, 5], seed)], |t, v| {
            let l = t.log(v[0])?;
            let m = t.mean(l);
            let s = weighted_sum(t, l, seed)?;
            t.add(m, s)
        });
        assert_grad!(e, TOL, "log/mean", seed);
    }
}

#[test]
fn shape_ops() {
    for seed in 0..SEEDS {
        let a = randn(&[2, 3, 2, 4], seed);
        let b = randn(&[2, 1, 2, 4], seed + 1);
        let e = check_tape(&[a, b], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let n = t.narrow(c, 1, 1, 3)?;
            let f = t.flip_width(n)?;
            let r = t.reshape(f, &[2, 3, 8])?;
            let tr = t.transpose(r)?;
            let sr = t.scale_rows(tr, vec![2.0, -0.5])?;
            let cc = t.concat_channels(v[0], v[0])?;
            let p = t.global_avg_pool(cc)?;
            let x = weighted_sum(t, sr, seed)?;
            let y = weighted_sum(t, p, seed + 7)?;
            t.add(x, y)
        });
        assert_grad!(e, TOL, "shape ops", seed);
    }
}

#[test]
fn matmul_and_softmax() {
    for seed in 0..SEEDS {
        let e = check_tape(&[randn(&[3, 4], seed), randn(&[4, 5], seed + 1)], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            weighted_sum(t, m, seed)
        });
        assert_grad!(e, TOL, "matmul", seed);
        let e = check_tape(&[randn(&[2, 3, 4], seed), randn(&[2, 4, 3], seed + 1)], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.softmax(m, 2)?;
            let s1 = t.softmax(v[0], 1)?;
            let x = weighted_sum(t, s, seed)?;
            let y = weighted_sum(t, s1, seed + 3)?;
            t.add(x, y)
        });
        assert_grad!(e, TOL, "batched matmul/softmax", seed);
    }
}

#[test]
fn conv2d_op() {
    for seed in 0..SEEDS {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let inputs = [randn(&[2, 2, 5, 6], seed), randn(&[3, 2, 3, 3], seed + 1), randn(&[3], seed + 2)];
            let e = check_tape(&inputs, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted_sum(t, y, seed)
            });
            assert_grad!(e, TOL, format!("conv2d stride {stride} pad {pad}"), seed);
        }
    }
}

#[test]
fn batch_norm_ops() {
    for seed in 0..SEEDS {
        let inputs = [randn(&[3, 2, 2, 3], seed), positive(&[2], seed + 1), randn(&[2], seed + 2)];
        let e = check_tape(&inputs, |t, v| {
            let bn = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, bn.out, seed)
        });
        assert_grad!(e, TOL, "batch norm (train)", seed);
        let e = check_tape(&inputs, |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.8, 1.7], 1e-5)?;
            weighted_sum(t, y, seed)
        });
        assert_grad!(e, TOL, "batch norm (eval)", seed);
    }
}

#[test]
fn layers_with_parameters() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 2, 1, true, &mut r);
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        let lin = Linear::new(&mut store, "lin", 3, 4, &mut r);
        let x = randn(&[2, 2, 6, 6], seed + 1);
        let e = check_session(&mut store, &[x], Mode::Train, seed, 16, |s, v| {
            let y = conv.forward(s, v[0])?;
            let y = bn.forward(s, y)?;
            let y = s.tape.relu(y);
            let p = s.tape.global_avg_pool(y)?;
            let z = lin.forward(s, p)?;
            weighted_sum(&mut s.tape, z, seed)
        });
        assert_grad!(e, TOL, "conv/bn/linear", seed);
    }
}

#[test]
fn attention_with_and_without_projections() {
    for seed in 0..SEEDS {
        for proj in [false, true] {
            let mut store = ParamStore::new();
            let attn = Attention::new(&mut store, "attn", 4, proj, &mut rng(seed));
            let inputs = [randn(&[2, 5, 4], seed), randn(&[2, 5, 4], seed + 1), randn(&[2, 5, 4], seed + 2)];
            let e = check_session(&mut store, &inputs, Mode::Train, seed, 16, |s, v| {
                let y = attn.forward(s, v[0], v[1], v[2])?;
                weighted_sum(&mut s.tape, y, seed)
            });
            assert_grad!(e, TOL, format!("attention (projections {proj})"), seed);
        }
    }
}

#[test]
fn drop_path_and_catconv() {
    for seed in 0..SEEDS {
        let mut store = ParamStore::new();
        let cc = CatConv::new(&mut store, "cc", 3, &mut rng(seed));
        let dp = DropPath::new(0.5).unwrap();
        let inputs = [randn(&[4, 3, 3, 3], seed), randn(&[4, 3, 3, 3], seed + 1)];
        let e = check_session(&mut store, &inputs, Mode::Train, seed, 16, |s, v| {
            let y = cc.forward(s, v[0], v[1])?;
            let y = dp.forward(s, v[0], y)?;
            weighted_sum(&mut s.tape, y, seed)
        });
        assert_grad!(e, TOL, "catconv + drop path", seed);
    }
}

#[test]
fn sfmm_module() {
    for seed in 0..SEEDS {
        let mut store = ParamStore::new();
        let sfmm = Sfmm::new(&mut store, "sfmm", 4, false, &mut rng(seed));
        let f = randn(&[2, 4, 3, 3], seed);
        let e = check_session(&mut store, &[f], Mode::Train, seed, 12, |s, v| {
            let ff = s.tape.flip_width(v[0])?;
            let y = sfmm.forward(s, v[0], ff)?;
            weighted_sum(&mut s.tape, y, seed)
        });
        assert_grad!(e, TOL, "sfmm", seed);
    }
}

#[test]
fn ordinal_loss() {
    for seed in 0..SEEDS {
        let k = 4;
        let targets: Vec<_> = (0..3).map(|i| encode_rank((seed as usize + i) % k + 1, k).unwrap()).collect();
        let logits = randn(&[3, k - 1, 2], seed);
        let e = check_tape(&[logits], |t, v| {
            let p = t.softmax(v[0], 2)?;
            level_loss(t, p, &targets)
        });
        assert_grad!(e, TOL, "ordinal loss", seed);

        let mut store = ParamStore::new();
        let head = OrdinalHead::new(&mut store, "orh", 5, k, &mut rng(seed)).unwrap();
        let e = check_session(&mut store, &[randn(&[3, 5, 2, 2], seed + 1)], Mode::Train, seed, 40, |s, v| {
            let out = head.forward(s, v[0])?;
            level_loss(&mut s.tape, out.probs, &targets)
        });
        assert_grad!(e, TOL, "ordinal head", seed);
    }
}

/// The joint loss of the complete network, including the backbone, for every
/// variant. A 32-pixel input gives 64-channel 4×4 features.
#[test]
fn full_network_loss() {
    for seed in 0..SEEDS {
        let variant = [Variant::Full, Variant::Baseline, Variant::BaselineSfmm, Variant::BaselineOrh][seed as usize % 4];
        let config = ModelConfig {
            input_size: 32,
            variant,
            ..ModelConfig::default()
        };
        let mut net = Network::new(config, seed).unwrap();
        let (arch, store) = net.split();
        let general = [1 + seed as usize % 4, 4 - seed as usize % 4];
        let fine = [1 + seed as usize % 10, 10 - seed as usize % 10];
        let weights = LossWeights::from_ratio(2.0, 1.0).unwrap();
        let x = Tensor::uniform(&[2, 1, 32, 32], 1.0, &mut rng(seed + 9)).map(|v| 0.5 + 0.5 * v);
        let e = check_session(store, &[x], Mode::Train, seed, 3, |s, v| {
            let out = arch.forward(s, v[0])?;
            Ok(arch.losses(&mut s.tape, &out, &general, &fine, &weights)?.total)
        });
        assert_grad!(e, 1e-4, format!("network {variant}"), seed);
    }
}
