//! The full two-branch network and its ablation variants.
//!
//! ```text
//! image ──┬─ backbone ── F ──┐
//!         └ flip ─ backbone ─ Fᶠ ┴─┬─ SFMM ── ORH (general, K=4)
//!                                  └─ SFMM ── ORH (fine,    K=10)
//! ```
//!
//! The baseline variants drop the mirrored path and SFMM (features are pooled
//! straight from `F`) and/or replace the ordinal head with a plain `K`-way
//! softmax classifier.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::orh::{encode_rank, level_loss, HeadOutput, LossWeights, OrdinalHead, OrdinalTarget, PROB_EPS};
use crate::params::{Mode, ParamStore, Session};
use crate::sfmm::Sfmm;
use crate::tensor::Tensor;

pub const GENERAL_LEVELS: usize = 4;
pub const FINE_LEVELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single path, softmax classifier.
    Baseline,
    /// Mirrored path + SFMM, softmax classifier.
    BaselineSfmm,
    /// Single path, ordinal head.
    BaselineOrh,
    /// Mirrored path + SFMM + ordinal head.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::BaselineSfmm,
        Variant::BaselineOrh,
        Variant::Full,
    ];

    pub fn dual_path(self) -> bool {
        matches!(self, Variant::BaselineSfmm | Variant::Full)
    }

    pub fn ordinal(self) -> bool {
        matches!(self, Variant::BaselineOrh | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineSfmm => "baseline+sfmm",
            Variant::BaselineOrh => "baseline+orh",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    pub general_levels: usize,
    pub fine_levels: usize,
    pub attention_projections: bool,
    /// Side length of the square network input.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            variant: Variant::Full,
            general_levels: GENERAL_LEVELS,
            fine_levels: FINE_LEVELS,
            attention_projections: false,
            input_size: 64,
        }
    }
}

/// Plain `K`-way softmax classifier over pooled features (ablation baseline).
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub levels: usize,
    pub linear: Linear,
}

impl ClassHead {
    pub fn forward(&self, s: &mut Session, feat: Var) -> Result<HeadOutput> {
        let pooled = s.tape.global_avg_pool(feat)?;
        let logits = self.linear.forward(s, pooled)?;
        let probs = s.tape.softmax(logits, 1)?;
        Ok(HeadOutput { pooled, logits, probs })
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Ordinal(OrdinalHead),
    Class(ClassHead),
}

impl Head {
    pub fn levels(&self) -> usize {
        match self {
            Head::Ordinal(h) => h.levels,
            Head::Class(h) => h.levels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub sfmm: Option<Sfmm>,
    pub head: Head,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Feature map entering the head (SFMM output, or `F` without SFMM).
    pub fused: Var,
    pub head: HeadOutput,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub flipped_features: Option<Var>,
    pub general: BranchOutput,
    pub fine: BranchOutput,
}

impl Branch {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &ModelConfig, levels: usize, rng: &mut R) -> Result<Self> {
        let c = config.backbone.out_channels();
        let sfmm = config
            .variant
            .dual_path()
            .then(|| Sfmm::new(store, &format!("{name}.sfmm"), c, config.attention_projections, rng));
        let head = if config.variant.ordinal() {
            Head::Ordinal(OrdinalHead::new(store, &format!("{name}.orh"), c, levels, rng)?)
        } else {
            Head::Class(ClassHead {
                levels,
                linear: Linear::new(store, &format!("{name}.cls"), c, levels, rng),
            })
        };
        Ok(Branch { sfmm, head })
    }

    pub fn forward(&self, s: &mut Session, f: Var, ff: Option<Var>) -> Result<BranchOutput> {
        let fused = match (&self.sfmm, ff) {
            (Some(sfmm), Some(ff)) => sfmm.forward(s, f, ff)?,
            (None, _) => f,
            (Some(_), None) => return Err(Error::invalid("SFMM branch needs mirrored features")),
        };
        let head = match &self.head {
            Head::Ordinal(h) => h.forward(s, fused)?,
            Head::Class(h) => h.forward(s, fused)?,
        };
        Ok(BranchOutput { fused, head })
    }

    /// Batch-mean loss of this branch against 1-based ranks.
    pub fn loss(&self, tape: &mut Tape, out: &BranchOutput, ranks: &[usize]) -> Result<Var> {
        let levels = self.head.levels();
        match self.head {
            Head::Ordinal(_) => {
                let targets = ranks
                    .iter()
                    .map(|&r| encode_rank(r, levels))
                    .collect::<Result<Vec<OrdinalTarget>>>()?;
                level_loss(tape, out.head.probs, &targets)
            }
            Head::Class(_) => {
                let n = ranks.len();
                let mut onehot = vec![0.0; n * levels];
                for (i, &r) in ranks.iter().enumerate() {
                    if r < 1 || r > levels {
                        return Err(Error::invalid(format!("rank {r} outside 1..={levels}")));
                    }
                    onehot[i * levels + r - 1] = 1.0;
                }
                let y = tape.constant(Tensor::new(&[n, levels], onehot)?);
                let p = tape.clamp(out.head.probs, PROB_EPS, 1.0 - PROB_EPS);
                let logp = tape.log(p)?;
                let picked = tape.mul(logp, y)?;
                let total = tape.sum(picked);
                Ok(tape.scale(total, -1.0 / n as f64))
            }
        }
    }

    /// Decodes head probabilities for every sample in the batch.
    pub fn predictions(&self, probs: &Tensor) -> Result<Vec<LevelPrediction>> {
        match self.head {
            Head::Ordinal(_) => Ok(OrdinalHead::predictions(probs)?
                .into_iter()
                .map(|p| LevelPrediction {
                    rank: p.rank,
                    scores: p.level_scores(),
                    positives: Some(p.positives()),
                })
                .collect()),
            Head::Class(ref h) => Ok(probs
                .data()
                .chunks(h.levels)
                .map(|row| {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                    LevelPrediction {
                        rank: best + 1,
                        scores: row.to_vec(),
                        positives: None,
                    }
                })
                .collect()),
        }
    }
}

/// Prediction of one branch for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPrediction {
    pub rank: usize,
    /// Per-level scores summing to one; used for ROC curves.
    pub scores: Vec<f64>,
    /// `P(rank > k)` for each ordinal classifier; absent for softmax heads.
    pub positives: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub general: LevelPrediction,
    pub fine: LevelPrediction,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Backbone,
    pub general: Branch,
    pub fine: Branch,
    dual_path: bool,
}

/// Tape handles for the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub general: Var,
    pub fine: Var,
    pub total: Var,
}

impl Architecture {
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<ForwardOutput> {
        let (f, ff) = if self.dual_path {
            let (f, ff) = self.backbone.dual_path(s, images)?;
            (f, Some(ff))
        } else {
            (self.backbone.forward(s, images)?, None)
        };
        let general = self.general.forward(s, f, ff)?;
        let fine = self.fine.forward(s, f, ff)?;
        Ok(ForwardOutput {
            features: f,
            flipped_features: ff,
            general,
            fine,
        })
    }

    pub fn losses(&self, tape: &mut Tape, out: &ForwardOutput, general: &[usize], fine: &[usize], weights: &LossWeights) -> Result<Losses> {
        let g = self.general.loss(tape, &out.general, general)?;
        let f = self.fine.loss(tape, &out.fine, fine)?;
        let total = weights.combine_on_tape(tape, g, f)?;
        Ok(Losses {
            general: g,
            fine: f,
            total,
        })
    }

    pub fn predictions(&self, tape: &Tape, out: &ForwardOutput) -> Result<Vec<Prediction>> {
        let g = self.general.predictions(tape.value(out.general.head.probs))?;
        let f = self.fine.predictions(tape.value(out.fine.head.probs))?;
        Ok(g.into_iter()
            .zip(f)
            .map(|(general, fine)| Prediction { general, fine })
            .collect())
    }
}

/// Architecture plus the parameters it reads.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    arch: Architecture,
    store: ParamStore,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.general_levels < 2 || config.fine_levels < 2 {
            return Err(Error::invalid("each branch needs at least 2 levels"));
        }
        config.backbone.output_hw(config.input_size, config.input_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", &config.backbone, &mut rng)?;
        let general = Branch::new(&mut store, "general", &config, config.general_levels, &mut rng)?;
        let fine = Branch::new(&mut store, "fine", &config, config.fine_levels, &mut rng)?;
        let arch = Architecture {
            backbone,
            general,
            fine,
            dual_path: config.variant.dual_path(),
        };
        Ok(Network { config, arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Borrows the architecture and the parameters separately so a session
    /// can hold the parameters while layers are evaluated.
    pub fn split(&mut self) -> (&Architecture, &mut ParamStore) {
        (&self.arch, &mut self.store)
    }

    /// Eval-mode predictions for an `N×c×h×w` batch.
    pub fn predict(&mut self, images: &Tensor) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 32;
        let n = images.shape().first().copied().unwrap_or(0);
        let mut all = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let chunk = images.narrow_batch(start, len)?;
            let (arch, store) = self.split();
            let mut s = Session::inference(store);
            let x = s.input(chunk);
            let out = arch.forward(&mut s, x)?;
            all.extend(arch.predictions(&s.tape, &out)?);
            start += len;
        }
        Ok(all)
    }

    /// Runs one forward pass in `mode` and returns the loss values without
    /// touching gradients.
    pub fn evaluate_loss(&mut self, images: &Tensor, general: &[usize], fine: &[usize], weights: &LossWeights, mode: Mode, seed: u64) -> Result<(f64, f64, f64)> {
        let (arch, store) = self.split();
        let mut s = Session::new(store, mode, seed);
        let x = s.input(images.clone());
        let out = arch.forward(&mut s, x)?;
        let l = arch.losses(&mut s.tape, &out, general, fine, weights)?;
        Ok((
            s.tape.value(l.general).item()?,
            s.tape.value(l.fine).item()?,
            s.tape.value(l.total).item()?,
        ))
    }
}
