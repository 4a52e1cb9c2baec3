//! AdamW, the warmup + cosine schedule, the epoch loop, evaluation, fold
//! splits and checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{augment, batch_images, crop_bbox, sample_seed, AugmentPolicy, Sample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{LevelPrediction, ModelConfig, Network, Prediction};
use crate::orh::LossWeights;
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One decoupled-weight-decay Adam update of a flat parameter. `t` is the
/// already incremented step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::invalid(format!(
            "adamw: parameter of length {} with gradient {} and moments {}/{}",
            theta.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(Error::invalid("adamw: step count starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        let p = theta[i];
        theta[i] = p - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * p;
    }
    Ok(())
}

/// Moment buffers for every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid("one gradient slot per parameter expected"));
        }
        self.moments.resize(store.len(), None);
        self.step += 1;
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let n = g.numel();
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adamw_update(store.get_mut(id).data_mut(), g.data(), m, v, self.step, lr, &self.config)?;
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay, indexed by (possibly fractional)
/// epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl Schedule {
    /// Warmup covers 5% of the epochs, rounded up.
    pub fn new(lr_max: f64, lr_min: f64, total_epochs: usize) -> Result<Self> {
        let warmup = (total_epochs as f64 * 0.05).ceil() as usize;
        Self::with_warmup(lr_max, lr_min, total_epochs, warmup.min(total_epochs.saturating_sub(1)))
    }

    pub fn with_warmup(lr_max: f64, lr_min: f64, total_epochs: usize, warmup_epochs: usize) -> Result<Self> {
        if warmup_epochs >= total_epochs {
            return Err(Error::invalid(format!(
                "warmup of {warmup_epochs} epochs must be shorter than {total_epochs} epochs"
            )));
        }
        if !(lr_max > 0.0) || !(lr_min >= 0.0) || lr_min > lr_max {
            return Err(Error::invalid("need 0 <= lr_min <= lr_max with lr_max > 0"));
        }
        Ok(Schedule {
            lr_max,
            lr_min,
            total_epochs,
            warmup_epochs,
        })
    }

    pub fn lr_at(&self, t: f64) -> Result<f64> {
        let (w, total) = (self.warmup_epochs as f64, self.total_epochs as f64);
        if !(0.0..=total).contains(&t) {
            return Err(Error::invalid(format!("epoch {t} outside 0..={total}")));
        }
        if t < w {
            // Reaches lr_max one epoch early and holds it, which keeps
            // fractional epochs continuous at `w`.
            return Ok((self.lr_max * (t + 1.0) / w).min(self.lr_max));
        }
        let phase = PI * (t - w) / (total - w);
        let span = self.lr_max - self.lr_min;
        // Anchored at whichever end is nearer so both ends come out exact.
        Ok(if phase < PI / 2.0 {
            self.lr_max - 0.5 * span * (1.0 - phase.cos())
        } else {
            self.lr_min + 0.5 * span * (1.0 + phase.cos())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// `None` picks 5% of the epochs.
    pub warmup_epochs: Option<usize>,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr_max: 1e-4,
            lr_min: 1e-6,
            warmup_epochs: None,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        match self.warmup_epochs {
            Some(w) => Schedule::with_warmup(self.lr_max, self.lr_min, self.epochs, w),
            None => Schedule::new(self.lr_max, self.lr_min, self.epochs),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::invalid("need at least one epoch and batches of at least 2"));
        }
        self.augment.validate()?;
        self.schedule().map(|_| ())
    }
}

/// Epoch-mean losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLosses {
    pub general: f64,
    pub fine: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub losses: EpochLosses,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,l_general,l_fine,l_total,lr\n";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.epoch, self.losses.general, self.losses.fine, self.losses.total, self.lr
        )
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    sample_seed(seed ^ 0x5EED_0F_E90C, epoch as u64)
}

/// One pass over `data` in a seed-determined order. A trailing batch of a
/// single sample is skipped because batch statistics need two.
pub fn train_epoch(net: &mut Network, data: &[Sample], optim: &mut AdamW, lr: f64, cfg: &TrainConfig, epoch: usize) -> Result<EpochLosses> {
    if data.len() < 2 {
        return Err(Error::invalid("training needs at least two samples"));
    }
    let eseed = epoch_seed(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(eseed));

    let size = net.config().input_size;
    let (mut sums, mut seen) = ([0.0; 3], 0usize);
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        if idx.len() < 2 {
            continue;
        }
        let augmented: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(eseed, i as u64));
                augment(&data[i], &mut rng, &cfg.augment)
            })
            .collect();
        let refs: Vec<&Sample> = augmented.iter().collect();
        let images = batch_images(&refs, size)?;
        let general: Vec<usize> = augmented.iter().map(|s| s.general_level).collect();
        let fine: Vec<usize> = augmented.iter().map(|s| s.fine_level).collect();

        let (arch, store) = net.split();
        let mut s = Session::new(store, Mode::Train, sample_seed(eseed, u64::MAX - b as u64));
        let x = s.input(images);
        let out = arch.forward(&mut s, x)?;
        let l = arch.losses(&mut s.tape, &out, &general, &fine, &cfg.weights)?;
        s.tape.backward(l.total)?;
        let values = [
            s.tape.value(l.general).item()?,
            s.tape.value(l.fine).item()?,
            s.tape.value(l.total).item()?,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = s.param_grads();
        drop(s);
        optim.step(store, &grads, lr)?;
        for (acc, v) in sums.iter_mut().zip(values) {
            *acc += v * idx.len() as f64;
        }
        seen += idx.len();
    }
    Ok(EpochLosses {
        general: sums[0] / seen as f64,
        fine: sums[1] / seen as f64,
        total: sums[2] / seen as f64,
    })
}

/// Trains for `cfg.epochs`, calling `on_epoch` after each epoch.
pub fn fit(net: &mut Network, data: &[Sample], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog, &mut Network)) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut optim = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch as f64)?;
        let losses = train_epoch(net, data, &mut optim, lr, cfg, epoch)?;
        let log = EpochLog {
            epoch: epoch + 1,
            losses,
            lr,
        };
        on_epoch(&log, net);
        logs.push(log);
    }
    Ok(logs)
}

pub fn loss_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    logs.iter().for_each(|l| out.push_str(&l.csv_row()));
    out
}

/// Network predictions for un-augmented crops of `samples`.
pub fn predict_samples(net: &mut Network, samples: &[Sample]) -> Result<Vec<Prediction>> {
    let size = net.config().input_size;
    let crops = samples
        .iter()
        .map(|s| crop_bbox(s, size, size))
        .collect::<Result<Vec<_>>>()?;
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    net.predict(&Tensor::stack(&crops)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub general: MetricsReport,
    pub fine: MetricsReport,
}

fn report(truth: &[usize], preds: &[&LevelPrediction], levels: usize) -> Result<MetricsReport> {
    let ranks: Vec<usize> = preds.iter().map(|p| p.rank).collect();
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.scores.clone()).collect();
    MetricsReport::compute(truth, &ranks, &scores, levels)
}

pub fn evaluate(net: &mut Network, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let preds = predict_samples(net, samples)?;
    evaluation_from(samples, &preds, net.config())
}

/// Scores predictions already made for `samples`.
pub fn evaluation_from(samples: &[Sample], preds: &[Prediction], model: &ModelConfig) -> Result<Evaluation> {
    if samples.len() != preds.len() {
        return Err(Error::invalid("one prediction per sample expected"));
    }
    let general: Vec<usize> = samples.iter().map(|s| s.general_level).collect();
    let fine: Vec<usize> = samples.iter().map(|s| s.fine_level).collect();
    Ok(Evaluation {
        general: report(&general, &preds.iter().map(|p| &p.general).collect::<Vec<_>>(), model.general_levels)?,
        fine: report(&fine, &preds.iter().map(|p| &p.fine).collect::<Vec<_>>(), model.fine_levels)?,
    })
}

/// Assigns every index to one of `k` folds, balancing general levels.
pub fn fold_assignment(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || samples.len() < k {
        return Err(Error::invalid(format!("cannot split {} samples into {k} folds", samples.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 0xF01D));
    let mut folds = vec![Vec::new(); k];
    let max_level = samples.iter().map(|s| s.general_level).max().unwrap_or(1);
    let mut next = 0;
    for level in 1..=max_level {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].general_level == level).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// `(train, test)` indices holding out every `k`-th sample of each level.
pub fn holdout_split(samples: &[Sample], k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let folds = fold_assignment(samples, k, seed)?;
    let test = folds[0].clone();
    let mut train: Vec<usize> = folds[1..].concat();
    train.sort_unstable();
    Ok((train, test))
}

pub fn select(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub acc: f64,
    pub mae: f64,
    pub kappa: f64,
}

impl Summary {
    pub fn mean(reports: &[&MetricsReport]) -> Self {
        let n = reports.len() as f64;
        Summary {
            acc: reports.iter().map(|r| r.acc).sum::<f64>() / n,
            mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
            kappa: reports.iter().map(|r| r.kappa).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossValidation {
    pub folds: Vec<Evaluation>,
    pub general: Summary,
    pub fine: Summary,
}

impl CrossValidation {
    pub fn from_folds(folds: Vec<Evaluation>) -> Self {
        let general = Summary::mean(&folds.iter().map(|f| &f.general).collect::<Vec<_>>());
        let fine = Summary::mean(&folds.iter().map(|f| &f.fine).collect::<Vec<_>>());
        CrossValidation { folds, general, fine }
    }
}

/// Trains a fresh network per fold on the other folds and evaluates on the
/// held-out one.
pub fn cross_validate(samples: &[Sample], k: usize, model: &ModelConfig, cfg: &TrainConfig) -> Result<CrossValidation> {
    let folds = fold_assignment(samples, k, cfg.seed)?;
    let mut evals = Vec::with_capacity(k);
    for (i, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let fold_cfg = TrainConfig {
            seed: sample_seed(cfg.seed, i as u64),
            ..cfg.clone()
        };
        let mut net = Network::new(model.clone(), fold_cfg.seed)?;
        fit(&mut net, &select(samples, &train), &fold_cfg, |_, _| {})?;
        evals.push(evaluate(&mut net, &select(samples, test))?);
    }
    Ok(CrossValidation::from_folds(evals))
}

pub fn five_fold(samples: &[Sample], model: &ModelConfig, cfg: &TrainConfig) -> Result<CrossValidation> {
    cross_validate(samples, 5, model, cfg)
}

// ---- checkpoints -----------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SPODR1\n";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Serializes tensors sorted by name.
pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateName(w[0].0.clone()));
    }
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend((sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend(len.to_le_bytes());
        out.extend(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) { Error::Truncated } else { Error::BadMagic });
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader {
        buf: &bytes[CHECKPOINT_MAGIC.len()..],
    };
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::invalid("tensor name is not UTF-8"))?
            .to_string();
        let [dtype] = r.array()?;
        let [rank] = r.array()?;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DTYPE_F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(Error::invalid(format!("unknown dtype code {other}"))),
        };
        if out.iter().any(|(existing, _)| *existing == name) {
            return Err(Error::DuplicateName(name));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    if !r.buf.is_empty() {
        return Err(Error::invalid(format!("{} trailing bytes after the last tensor", r.buf.len())));
    }
    Ok(out)
}

/// Writes every tensor of the store, running statistics included.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&store.named_tensors())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Overwrites the store's tensors with a checkpoint's.
pub fn restore(store: &mut ParamStore, path: &Path) -> Result<()> {
    store.assign_from(&load_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_hand_value() {
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, &cfg).unwrap();
        assert!((theta[0] - 0.899).abs() < 1e-6, "{}", theta[0]);
    }

    #[test]
    fn adamw_zero_gradient() {
        let mut cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let (mut theta, mut m, mut v) = ([0.7, -2.0], [0.0; 2], [0.0; 2]);
        for t in 1..5 {
            adamw_update(&mut theta, &[0.0; 2], &mut m, &mut v, t, 0.1, &cfg).unwrap();
        }
        assert_eq!(theta, [0.7, -2.0]);
        cfg.weight_decay = 0.5;
        adamw_update(&mut theta, &[0.0; 2], &mut m, &mut v, 5, 0.1, &cfg).unwrap();
        assert_eq!(theta, [0.7 - 0.1 * 0.5 * 0.7, -2.0 - 0.1 * 0.5 * -2.0]);
        assert!(adamw_update(&mut theta, &[0.0], &mut m, &mut v, 6, 0.1, &cfg).is_err());
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::new(1e-4, 1e-6, 40).unwrap();
        assert_eq!(s.warmup_epochs, 2);
        assert_eq!(s.lr_at(2.0).unwrap(), 1e-4);
        assert_eq!(s.lr_at(40.0).unwrap(), 1e-6);
        assert!((s.lr_at(21.0).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(s.lr_at(0.0).unwrap(), 0.5e-4);
        assert!(s.lr_at(40.5).is_err());
        assert!(Schedule::with_warmup(1e-4, 1e-6, 10, 10).is_err());
        assert_eq!(Schedule::new(1e-3, 0.0, 1).unwrap().warmup_epochs, 0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let tensors = vec![
            ("b".to_string(), Tensor::from_vec(vec![1.5, -0.0, f64::MIN_POSITIVE])),
            ("a".to_string(), Tensor::zeros(&[2, 1, 3])),
        ];
        let bytes = encode_checkpoint(&tensors).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].1, tensors[0].1);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic)));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated)));
        assert!(matches!(decode_checkpoint(&bytes[..4]), Err(Error::Truncated)));

        let dup = vec![tensors[0].clone(), tensors[0].clone()];
        assert!(matches!(encode_checkpoint(&dup), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn f32_payload_is_accepted() {
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.extend([DTYPE_F32, 1]);
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(0.5f32.to_le_bytes());
        bytes.extend((-2.0f32).to_le_bytes());
        let t = decode_checkpoint(&bytes).unwrap();
        assert_eq!(t[0].1.data(), &[0.5, -2.0]);
    }
}
