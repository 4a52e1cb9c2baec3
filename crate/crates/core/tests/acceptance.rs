//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 1 2 3`.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use scolio::data::{self, fine_level, fine_to_general, general_level, Sample, Scheme, SynthConfig};
use scolio::explain::{self, Heatmap, LAYERS};
use scolio::layers::{Attention, BatchNorm2d, CatConv, Conv2d, DropPath, Linear};
use scolio::metrics::{accuracy, confusion, kappa, micro_average, roc_auc, ConfusionMatrix, KAPPA_FIXTURES};
use scolio::model::{ClassHead, ModelConfig, Network, Variant};
use scolio::orh::{decode_rank, encode_rank, level_loss, LossWeights, OrdinalHead};
use scolio::sfmm::Sfmm;
use scolio::train::{self, adamw_update, AdamWConfig, Evaluation, Schedule, TrainConfig};
use scolio::{Mode, ParamStore, Tensor};

use common::{check_session, check_tape, rng, weighted_sum};

type Outcome = Result<String, String>;

const SEEDS: [u64; 3] = [0, 1, 2];
const PER_LEVEL: usize = 300;

struct Run {
    eval: Evaluation,
    elapsed: Duration,
    net: Network,
}

#[derive(Default)]
struct Ctx {
    corpora: BTreeMap<u64, (Vec<Sample>, Vec<Sample>)>,
    runs: BTreeMap<(&'static str, &'static str, u64), Run>,
}

impl Ctx {
    /// The held-out split of the 1,200-sample corpus for `seed`, written to
    /// and read back from disk.
    fn corpus(&mut self, seed: u64) -> &(Vec<Sample>, Vec<Sample>) {
        self.corpora.entry(seed).or_insert_with(|| {
            let dir = tempfile::tempdir().expect("tempdir");
            let cfg = SynthConfig {
                seed: 1000 + seed,
                ..SynthConfig::default()
            };
            data::generate_corpus(&cfg, &[PER_LEVEL; 4], Scheme::General, dir.path()).expect("corpus");
            let samples = data::load_corpus(&dir.path().join(data::MANIFEST_NAME)).expect("load corpus");
            let (tr, te) = train::holdout_split(&samples, 5, seed).expect("split");
            (train::select(&samples, &tr), train::select(&samples, &te))
        })
    }

    /// Desk-config training of one variant and loss ratio on one seed.
    fn run(&mut self, variant: Variant, ratio: &'static str, seed: u64) -> &Run {
        let key = (variant.name(), ratio, seed);
        if !self.runs.contains_key(&key) {
            let (train_set, test_set) = self.corpus(seed).clone();
            let cfg = TrainConfig {
                seed,
                weights: LossWeights::parse_ratio(ratio).unwrap(),
                ..TrainConfig::default()
            };
            let model = ModelConfig {
                variant,
                ..ModelConfig::default()
            };
            let start = Instant::now();
            let mut net = Network::new(model, seed).unwrap();
            train::fit(&mut net, &train_set, &cfg, |_, _| {}).expect("training");
            let elapsed = start.elapsed();
            let eval = train::evaluate(&mut net, &test_set).unwrap();
            eprintln!(
                "  trained {variant} {ratio} seed {seed}: general acc {:.4} mae {:.4}, fine acc {:.4} mae {:.4} ({:.0}s)",
                eval.general.acc,
                eval.general.mae,
                eval.fine.acc,
                eval.fine.mae,
                elapsed.as_secs_f64()
            );
            self.runs.insert(key, Run { eval, elapsed, net });
        }
        &self.runs[&key]
    }

    fn median_of(&mut self, variant: Variant, ratio: &'static str, f: impl Fn(&Evaluation) -> f64) -> f64 {
        median(SEEDS.iter().map(|&s| f(&self.run(variant, ratio, s).eval)).collect())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String, ok: bool) -> Outcome {
    let t = elapsed.as_secs_f64();
    let detail = format!("{detail}; {t:.2}s (limit {limit_s}s)");
    if ok && t < limit_s {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_ordinal_round_trip() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for k in [2, 4, 10] {
        for r in 1..=k {
            let t = encode_rank(r, k).map_err(|e| e.to_string())?;
            let back = decode_rank(&t.positives()).map_err(|e| e.to_string())?;
            if back != r {
                return Err(format!("K={k} rank {r} decoded as {back}"));
            }
            checked += 1;
        }
    }
    within(start.elapsed(), 1.0, format!("{checked} ranks round-trip exactly"), true)
}

fn c2_gradients() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..20u64 {
        let x4 = |shape: &[usize], k: u64| Tensor::randn(shape, &mut rng(seed * 31 + k));

        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 2, 1, true, &mut rng(seed));
        note("conv2d", check_session(&mut store, &[x4(&[2, 2, 5, 5], 1)], Mode::Train, seed, 12, |s, v| {
            let y = conv.forward(s, v[0])?;
            weighted_sum(&mut s.tape, y, seed)
        }));

        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        for mode in [Mode::Train, Mode::Eval] {
            note("batchnorm", check_session(&mut store, &[x4(&[3, 3, 2, 2], 2)], mode, seed, 6, |s, v| {
                let y = bn.forward(s, v[0])?;
                weighted_sum(&mut s.tape, y, seed)
            }));
        }

        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng(seed));
        note("linear", check_session(&mut store, &[x4(&[2, 4, 5], 3)], Mode::Train, seed, 15, |s, v| {
            let y = lin.forward(s, v[0])?;
            weighted_sum(&mut s.tape, y, seed)
        }));

        for proj in [false, true] {
            let mut store = ParamStore::new();
            let attn = Attention::new(&mut store, "attn", 4, proj, &mut rng(seed));
            let inputs = [x4(&[2, 5, 4], 4), x4(&[2, 5, 4], 5)];
            note("attention", check_session(&mut store, &inputs, Mode::Train, seed, 8, |s, v| {
                let y = attn.forward(s, v[0], v[1], v[1])?;
                weighted_sum(&mut s.tape, y, seed)
            }));
        }

        let mut store = ParamStore::new();
        let cc = CatConv::new(&mut store, "cc", 3, &mut rng(seed));
        let dp = DropPath::new(0.3).unwrap();
        let inputs = [x4(&[4, 3, 3, 3], 6), x4(&[4, 3, 3, 3], 7)];
        note("catconv+droppath", check_session(&mut store, &inputs, Mode::Train, seed, 8, |s, v| {
            let y = cc.forward(s, v[0], v[1])?;
            let y = dp.forward(s, v[0], y)?;
            weighted_sum(&mut s.tape, y, seed)
        }));

        let mut store = ParamStore::new();
        let sfmm = Sfmm::new(&mut store, "sfmm", 4, seed % 2 == 1, &mut rng(seed));
        note("sfmm", check_session(&mut store, &[x4(&[2, 4, 3, 3], 8)], Mode::Train, seed, 6, |s, v| {
            let ff = s.tape.flip_width(v[0])?;
            let y = sfmm.forward(s, v[0], ff)?;
            weighted_sum(&mut s.tape, y, seed)
        }));

        let mut store = ParamStore::new();
        let head = OrdinalHead::new(&mut store, "orh", 5, 4, &mut rng(seed)).unwrap();
        let cls = ClassHead {
            levels: 4,
            linear: Linear::new(&mut store, "cls", 5, 4, &mut rng(seed + 1)),
        };
        note("heads", check_session(&mut store, &[x4(&[3, 5, 2, 2], 9)], Mode::Train, seed, 12, |s, v| {
            let a = head.forward(s, v[0])?;
            let b = cls.forward(s, v[0])?;
            let x = weighted_sum(&mut s.tape, a.probs, seed)?;
            let y = weighted_sum(&mut s.tape, b.probs, seed + 1)?;
            s.tape.add(x, y)
        }));

        let targets: Vec<_> = (0..3).map(|i| encode_rank((seed as usize + i) % 4 + 1, 4).unwrap()).collect();
        note("ordinal loss", check_tape(&[x4(&[3, 3, 2], 10)], |t, v| {
            let p = t.softmax(v[0], 2)?;
            level_loss(t, p, &targets)
        }));

        let config = ModelConfig {
            input_size: 32,
            general_levels: 4,
            ..ModelConfig::default()
        };
        let mut net = Network::new(config, seed).unwrap();
        let (arch, store) = net.split();
        let general = [1 + seed as usize % 4, 4 - seed as usize % 4];
        let fine = [1 + seed as usize % 10, 10 - seed as usize % 10];
        let weights = LossWeights::from_ratio(1.0 + (seed % 3) as f64, 1.0).unwrap();
        let img = Tensor::uniform(&[2, 1, 32, 32], 0.5, &mut rng(seed + 99)).map(|v| v + 0.5);
        note("dual-path network", check_session(store, &[img], Mode::Train, seed, 1, |s, v| {
            let out = arch.forward(s, v[0])?;
            Ok(arch.losses(&mut s.tape, &out, &general, &fine, &weights)?.total)
        }));
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    within(start.elapsed(), 30.0, format!("max rel err {max:.2e} < {TOL:e} over 20 seeds ({})", parts.join(", ")), max < TOL)
}

fn c3_attention_rows() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let c = [2, 4, 8][r.gen_range(0..3)];
        let (n, h, w) = (r.gen_range(2..5), r.gen_range(1..6), r.gen_range(1..6));
        let mut store = ParamStore::new();
        let sfmm = Sfmm::new(&mut store, "sfmm", c, i % 2 == 1, &mut r);
        let scale = 10f64.powi(r.gen_range(-2..3));
        let f = Tensor::randn(&[n, c, h, w], &mut r).map(|v| v * scale);
        let mode = if i % 3 == 0 { Mode::Eval } else { Mode::Train };
        let mut s = scolio::Session::new(&mut store, mode, i);
        let fv = s.input(f);
        let ff = s.tape.flip_width(fv).map_err(|e| e.to_string())?;
        let t = sfmm.trace(&mut s, fv, ff).map_err(|e| e.to_string())?;
        for scores in [t.scores, t.scores_flipped] {
            let v = s.tape.value(scores);
            let cols = *v.shape().last().unwrap();
            for row in v.data().chunks(cols) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    within(start.elapsed(), 5.0, format!("max |row sum - 1| = {worst:.1e} over 100 forwards"), worst <= 1e-12)
}

fn c4_metrics() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    for _ in 0..100 {
        let k = r.gen_range(2..11);
        let n = r.gen_range(1..200);
        let t: Vec<usize> = (0..n).map(|_| r.gen_range(1..=k)).collect();
        let p: Vec<usize> = (0..n).map(|_| r.gen_range(1..=k)).collect();
        let cm = confusion(&t, &p, k).map_err(|e| e.to_string())?;
        let (re, _) = micro_average(&cm);
        if re != Some(accuracy(&cm).unwrap()) {
            return Err(format!("micro recall {re:?} differs from accuracy on {cm:?}"));
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.gen_range(2..60);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| (r.gen::<f64>() * 8.0).floor() / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        worst = worst.max((auc - wins / pairs).abs());
    }
    for &(levels, counts, want) in KAPPA_FIXTURES {
        let cm = ConfusionMatrix::from_counts(levels, counts.to_vec()).unwrap();
        let got = kappa(&cm).unwrap();
        if (got - want).abs() > 1e-12 {
            return Err(format!("kappa {got} on {counts:?}, expected {want}"));
        }
    }
    within(
        start.elapsed(),
        10.0,
        format!(
            "micro recall == acc on 100 matrices; max |AUC - U| = {worst:.1e}; {} kappa fixtures",
            KAPPA_FIXTURES.len()
        ),
        worst <= 1e-12,
    )
}

fn c5_binning() -> Outcome {
    let start = Instant::now();
    let (mut last_g, mut last_f) = (0, 0);
    for i in 0..=1800 {
        let a = i as f64 / 10.0;
        let (g, f) = (general_level(a).unwrap(), fine_level(a).unwrap());
        if fine_to_general(f) != g {
            return Err(format!("angle {a}: fine {f} groups to {}, general is {g}", fine_to_general(f)));
        }
        if g < last_g || f < last_f {
            return Err(format!("not monotone at angle {a}"));
        }
        (last_g, last_f) = (g, f);
    }
    within(start.elapsed(), 1.0, "1801 angles consistent and monotone".into(), true)
}

fn c6_optimizer() -> Outcome {
    let cfg = AdamWConfig {
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
    adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, &cfg).map_err(|e| e.to_string())?;
    let step_ok = (theta[0] - 0.899).abs() <= 1e-6;
    let desk = TrainConfig::default().schedule().unwrap();
    let mut ends_ok = true;
    for (total, w) in [(desk.total_epochs, desk.warmup_epochs), (10, 1), (100, 5), (7, 3), (3, 0)] {
        let s = Schedule::with_warmup(desk.lr_max, desk.lr_min, total, w).unwrap();
        ends_ok &= s.lr_at(w as f64).unwrap() == s.lr_max && s.lr_at(total as f64).unwrap() == s.lr_min;
    }
    let detail = format!("theta' = {:.8}; lr(W) = lr_max and lr(T) = lr_min exactly: {ends_ok}", theta[0]);
    if step_ok && ends_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c7_end_to_end(ctx: &mut Ctx) -> Outcome {
    let acc = ctx.median_of(Variant::Full, "1:1", |e| e.general.acc);
    let mae = ctx.median_of(Variant::Full, "1:1", |e| e.general.mae);
    let slowest = SEEDS
        .iter()
        .map(|&s| ctx.run(Variant::Full, "1:1", s).elapsed)
        .max()
        .unwrap();
    let detail = format!(
        "median held-out acc {acc:.4} (>= 0.85), mae {mae:.4} (<= 0.20); slowest run {:.0}s (<= 1800s)",
        slowest.as_secs_f64()
    );
    if acc >= 0.85 && mae <= 0.20 && slowest.as_secs_f64() <= 1800.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_ablation(ctx: &mut Ctx) -> Outcome {
    let mut acc = BTreeMap::new();
    for v in Variant::ALL {
        acc.insert(v.name(), ctx.median_of(v, "1:1", |e| e.general.acc));
    }
    let full_mae = ctx.median_of(Variant::Full, "1:1", |e| e.general.mae);
    let base_mae = ctx.median_of(Variant::Baseline, "1:1", |e| e.general.mae);
    let (full, sfmm, orh, base) = (acc["full"], acc["baseline+sfmm"], acc["baseline+orh"], acc["baseline"]);
    let middle = sfmm.max(orh);
    let detail = format!(
        "median acc full {full:.4}, +sfmm {sfmm:.4}, +orh {orh:.4}, baseline {base:.4}; mae full {full_mae:.4} vs baseline {base_mae:.4}"
    );
    if full >= middle && middle >= base && full_mae <= base_mae {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_tradeoff(ctx: &mut Ctx) -> Outcome {
    let g21 = ctx.median_of(Variant::Full, "2:1", |e| e.general.mae);
    let g12 = ctx.median_of(Variant::Full, "1:2", |e| e.general.mae);
    let f21 = ctx.median_of(Variant::Full, "2:1", |e| e.fine.mae);
    let f12 = ctx.median_of(Variant::Full, "1:2", |e| e.fine.mae);
    let detail = format!("general mae 2:1 {g21:.4} vs 1:2 {g12:.4}; fine mae 1:2 {f12:.4} vs 2:1 {f21:.4}");
    if g21 <= g12 && f12 <= f21 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c10_determinism() -> Outcome {
    let cfg = SynthConfig {
        seed: 10,
        ..SynthConfig::default()
    };
    let samples: Vec<Sample> = (0..48u64)
        .map(|i| data::synth_indexed(&cfg, Scheme::General, (i % 4) as usize + 1, i).unwrap())
        .collect();
    let tc = TrainConfig {
        epochs: 3,
        seed: 10,
        ..TrainConfig::default()
    };
    let model = ModelConfig::default();
    let train_once = || {
        let mut net = Network::new(model.clone(), 10).unwrap();
        let logs = train::fit(&mut net, &samples, &tc, |_, _| {}).unwrap();
        (train::loss_csv(&logs), net)
    };
    let (csv_a, mut net_a) = train_once();
    let (csv_b, _) = train_once();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    train::save_checkpoint(net_a.store(), &path).map_err(|e| e.to_string())?;
    let mut net_c = Network::new(model.clone(), 999).unwrap();
    train::restore(net_c.store_mut(), &path).map_err(|e| e.to_string())?;
    let before = train::predict_samples(&mut net_a, &samples).unwrap();
    let after = train::predict_samples(&mut net_c, &samples).unwrap();
    let bits = |p: &[scolio::model::Prediction]| -> Vec<u64> {
        p.iter()
            .flat_map(|p| p.general.scores.iter().chain(&p.fine.scores).map(|v| v.to_bits()))
            .collect()
    };
    let same_csv = csv_a == csv_b;
    let same_preds = bits(&before) == bits(&after) && before == after;
    let detail = format!("loss CSV identical: {same_csv}; predictions bit-identical after reload: {same_preds}");
    if same_csv && same_preds {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c11_gradcam(ctx: &mut Ctx) -> Outcome {
    ctx.run(Variant::Full, "1:1", 0);
    let net = &mut ctx.runs.get_mut(&(Variant::Full.name(), "1:1", 0)).unwrap().net;
    let cfg = SynthConfig::default();
    let size = net.config().input_size;
    let mut in_range = true;
    let mut diffs = Vec::new();
    for seed in 0..5u64 {
        let s = data::synth_back(60.0, &cfg, data::sample_seed(11, seed)).unwrap();
        let img = data::crop_bbox(&s, size, size).unwrap();
        for layer in LAYERS {
            let (h, _) = explain::gradcam(net, &img, layer).map_err(|e| e.to_string())?;
            in_range &= h.values.iter().all(|v| (0.0..=1.0).contains(v));
        }
        let (h, _): (Heatmap, _) = explain::gradcam(net, &img, explain::DEFAULT_LAYER).unwrap();
        let (left, right) = h.half_masses();
        diffs.push(right - left);
    }
    let s = data::synth_back(60.0, &cfg, 7).unwrap();
    let img = data::crop_bbox(&s, size, size).unwrap();
    let (flat, _) = explain::gradcam_with(net, &img, explain::DEFAULT_LAYER, "constant", |tape, _, _| {
        Ok(tape.constant(Tensor::scalar(1.0)))
    })
    .map_err(|e| e.to_string())?;
    let (flat2, _) = explain::gradcam_with(net, &img, explain::DEFAULT_LAYER, "zero-weighted", |tape, out, _| {
        let logits = out.general.head.logits;
        let z = tape.scale(logits, 0.0);
        Ok(tape.sum(z))
    })
    .map_err(|e| e.to_string())?;
    let zero = flat.values.iter().chain(&flat2.values).all(|&v| v == 0.0);
    let med = median(diffs.clone());
    let detail = format!(
        "values in [0,1]: {in_range}; constant target gives zero map: {zero}; median right-minus-left heat {med:.3} over 5 seeds"
    );
    if in_range && zero && med > 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut ctx = Ctx::default();
    let mut failed = 0;
    let mut report = |n: u32, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "criterion {n:>2} {tag}  {name}: {detail}");
        let _ = out.flush();
    };
    type Plain = fn() -> Outcome;
    type Shared = fn(&mut Ctx) -> Outcome;
    let plain: [(u32, &str, Plain); 7] = [
        (1, "ordinal round-trip", c1_ordinal_round_trip),
        (2, "gradient oracle", c2_gradients),
        (3, "attention normalization", c3_attention_rows),
        (4, "metrics oracles", c4_metrics),
        (5, "binning consistency", c5_binning),
        (6, "optimizer and schedule", c6_optimizer),
        (10, "determinism and persistence", c10_determinism),
    ];
    let shared: [(u32, &str, Shared); 4] = [
        (7, "synthetic end-to-end", c7_end_to_end),
        (8, "ablation direction", c8_ablation),
        (9, "loss-weight trade-off", c9_tradeoff),
        (11, "grad-cam sanity", c11_gradcam),
    ];
    for (n, name, f) in plain {
        if selected(n) {
            report(n, name, f());
        }
    }
    for (n, name, f) in shared {
        if selected(n) {
            report(n, name, f(&mut ctx));
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
