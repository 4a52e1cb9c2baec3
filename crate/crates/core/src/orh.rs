//! Ordinal regression head.
//!
//! A `K`-level ordinal label is split into `K-1` binary questions "is the rank
//! greater than `k`?". Each question gets its own two-way linear classifier
//! with a softmax; the rank is decoded by counting the confident "yes"
//! answers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

/// Ground-truth rank and its `(K-1)×2` binary encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalTarget {
    pub levels: usize,
    pub rank: usize,
    /// Row `k` (0-based) is `[1, 0]` when `rank > k + 1`, else `[0, 1]`.
    pub rows: Vec<[f64; 2]>,
}

impl OrdinalTarget {
    /// First column of the encoding, one entry per classifier.
    pub fn positives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }
}

pub fn encode_rank(rank: usize, levels: usize) -> Result<OrdinalTarget> {
    if levels < 2 {
        return Err(Error::invalid(format!("need at least 2 levels, got {levels}")));
    }
    if rank < 1 || rank > levels {
        return Err(Error::invalid(format!("rank {rank} outside 1..={levels}")));
    }
    let rows = (1..levels)
        .map(|k| if rank > k { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    Ok(OrdinalTarget { levels, rank, rows })
}

/// `1 + Σ round(p_k)` with halves rounded up. Inputs need not be monotone.
pub fn decode_rank(positives: &[f64]) -> Result<usize> {
    let mut rank = 1;
    for &p in positives {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        if p >= 0.5 {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Decoded output of the head for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalPrediction {
    /// `(K-1)×2` softmax outputs.
    pub rows: Vec<[f64; 2]>,
    pub rank: usize,
}

impl OrdinalPrediction {
    pub fn from_rows(rows: Vec<[f64; 2]>) -> Result<Self> {
        let pos: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let rank = decode_rank(&pos)?;
        Ok(OrdinalPrediction { rows, rank })
    }

    pub fn positives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn levels(&self) -> usize {
        self.rows.len() + 1
    }

    pub fn level_scores(&self) -> Vec<f64> {
        level_scores(&self.positives())
    }
}

/// Per-level pseudo-probabilities from cumulative "rank > k" probabilities:
/// `p(j) = P(>j-1) - P(>j)` with `P(>0) = 1` and `P(>K) = 0`, negative
/// differences clamped to zero and the result renormalized.
pub fn level_scores(positives: &[f64]) -> Vec<f64> {
    let k = positives.len() + 1;
    let cum = |j: usize| -> f64 {
        match j {
            0 => 1.0,
            j if j >= k => 0.0,
            j => positives[j - 1],
        }
    };
    let raw: Vec<f64> = (1..=k).map(|j| (cum(j - 1) - cum(j)).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Literal per-sample loss on probabilities: the mean binary cross-entropy
/// over the `K-1` classifiers.
pub fn level_loss_value(positives: &[f64], target: &OrdinalTarget) -> Result<f64> {
    if positives.len() != target.rows.len() {
        return Err(Error::invalid(format!(
            "prediction has {} classifiers, target has {}",
            positives.len(),
            target.rows.len()
        )));
    }
    let total: f64 = positives
        .iter()
        .zip(&target.rows)
        .map(|(&p, y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            y[0] * p.ln() + (1.0 - y[0]) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / positives.len() as f64)
}

/// Batch-mean ordinal loss on the tape. `probs` is `N×(K-1)×2`.
pub fn level_loss(tape: &mut Tape, probs: Var, targets: &[OrdinalTarget]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 3 || shape[2] != 2 || shape[0] != targets.len() {
        return Err(Error::InvalidShape {
            op: "level_loss",
            msg: format!("probabilities {shape:?} for {} targets", targets.len()),
        });
    }
    let (n, km1) = (shape[0], shape[1]);
    let mut y = Vec::with_capacity(n * km1 * 2);
    for t in targets {
        if t.rows.len() != km1 {
            return Err(Error::invalid(format!(
                "target has {} levels, head has {}",
                t.levels,
                km1 + 1
            )));
        }
        for r in &t.rows {
            y.extend_from_slice(r);
        }
    }
    let y = tape.constant(Tensor::new(&shape, y)?);
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let logp = tape.log(p)?;
    let picked = tape.mul(logp, y)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / (n * km1) as f64))
}

/// Weights of the general and fine-grained losses; they must sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub general: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            general: 0.5,
            fine: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(general: f64, fine: f64) -> Result<Self> {
        if general < 0.0 || fine < 0.0 || !general.is_finite() || !fine.is_finite() {
            return Err(Error::invalid(format!("loss weights must be non-negative, got ({general}, {fine})")));
        }
        if (general + fine - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "loss weights must sum to 1, got {general} + {fine}"
            )));
        }
        Ok(LossWeights { general, fine })
    }

    /// Normalizes a `general:fine` ratio, e.g. `2:1 -> (2/3, 1/3)`.
    pub fn from_ratio(general: f64, fine: f64) -> Result<Self> {
        let total = general + fine;
        if general < 0.0 || fine < 0.0 || total <= 0.0 {
            return Err(Error::invalid(format!("bad loss ratio {general}:{fine}")));
        }
        Self::new(general / total, fine / total)
    }

    /// Parses `"a:b"` as a ratio.
    pub fn parse_ratio(text: &str) -> Result<Self> {
        let (a, b) = text
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("expected a ratio like 1:1, got `{text}`")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad ratio component `{s}`")))
        };
        Self::from_ratio(parse(a)?, parse(b)?)
    }

    pub fn combine(&self, general: f64, fine: f64) -> f64 {
        self.general * general + self.fine * fine
    }

    pub fn combine_on_tape(&self, tape: &mut Tape, general: Var, fine: Var) -> Result<Var> {
        let g = tape.scale(general, self.general);
        let f = tape.scale(fine, self.fine);
        tape.add(g, f)
    }
}

pub fn joint_loss(general: f64, fine: f64, weights: &LossWeights) -> Result<f64> {
    LossWeights::new(weights.general, weights.fine)?;
    Ok(weights.combine(general, fine))
}

/// Global average pooling followed by `K-1` independent two-way classifiers.
#[derive(Clone, Debug)]
pub struct OrdinalHead {
    pub levels: usize,
    pub channels: usize,
    /// All classifiers stacked: weight `2(K-1)×C`, bias `2(K-1)`; rows
    /// `2k, 2k+1` belong to classifier `k`.
    pub linear: Linear,
}

/// Tape handles for one head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub pooled: Var,
    /// Pre-softmax scores, `N×(K-1)×2` for the ordinal head.
    pub logits: Var,
    pub probs: Var,
}

impl OrdinalHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, levels: usize, rng: &mut R) -> Result<Self> {
        if levels < 2 {
            return Err(Error::invalid(format!("need at least 2 levels, got {levels}")));
        }
        Ok(OrdinalHead {
            levels,
            channels,
            linear: Linear::new(store, name, channels, 2 * (levels - 1), rng),
        })
    }

    pub fn forward(&self, s: &mut Session, feat: Var) -> Result<HeadOutput> {
        let shape = s.tape.shape(feat).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::InvalidShape {
                op: "ordinal head",
                msg: format!("expected N×{}×H×W features, got {shape:?}", self.channels),
            });
        }
        let pooled = s.tape.global_avg_pool(feat)?;
        let flat = self.linear.forward(s, pooled)?;
        let logits = s.tape.reshape(flat, &[shape[0], self.levels - 1, 2])?;
        let probs = s.tape.softmax(logits, 2)?;
        Ok(HeadOutput { pooled, logits, probs })
    }

    /// Decodes `N×(K-1)×2` probabilities into per-sample predictions.
    pub fn predictions(probs: &Tensor) -> Result<Vec<OrdinalPrediction>> {
        let s = probs.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::InvalidShape {
                op: "ordinal predictions",
                msg: format!("{s:?}"),
            });
        }
        probs
            .data()
            .chunks(s[1] * 2)
            .map(|sample| OrdinalPrediction::from_rows(sample.chunks(2).map(|r| [r[0], r[1]]).collect()))
            .collect()
    }
}
