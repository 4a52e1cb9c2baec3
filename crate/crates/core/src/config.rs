//! The run configuration: model and training settings as one flat
//! `key = value` file.

use std::path::Path;

use crate::backbone::StageConfig;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::model::{ModelConfig, Network, Variant};
use crate::orh::LossWeights;
use crate::train::{restore, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// The loss-weight ratio as written, e.g. `2:1`.
    pub lambda: String,
    /// One in `holdout_folds` samples is held out for evaluation.
    pub holdout_folds: usize,
    /// Whether training left the held-out fold out.
    pub holdout: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lambda: "1:1".into(),
            holdout_folds: 5,
            holdout: false,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "variant",
    "stages",
    "drop_path",
    "attention_projections",
    "input_size",
    "epochs",
    "batch_size",
    "lr_max",
    "lr_min",
    "warmup_epochs",
    "weight_decay",
    "lambda",
    "augment_clip",
    "augment_flip",
    "augment_jitter",
    "augment_scale",
    "holdout_folds",
    "holdout",
    "seed",
    "general_levels",
    "fine_levels",
];

/// `channels:blocks:stride` triples separated by commas.
pub fn parse_stages(text: &str) -> Result<Vec<StageConfig>> {
    text.split(',')
        .map(|part| {
            let nums = part
                .trim()
                .split(':')
                .map(|n| n.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::invalid(format!("bad stage `{part}`")))?;
            match nums[..] {
                [channels, blocks, stride] => Ok(StageConfig {
                    channels,
                    blocks,
                    stride,
                }),
                _ => Err(Error::invalid(format!("stage `{part}` is not channels:blocks:stride"))),
            }
        })
        .collect()
}

pub fn render_stages(stages: &[StageConfig]) -> String {
    stages
        .iter()
        .map(|s| format!("{}:{}:{}", s.channels, s.blocks, s.stride))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&KEYS)?;
        let mut c = RunConfig::default();
        if let Some(v) = kv.get("variant") {
            c.model.variant = v.parse::<Variant>()?;
        }
        if let Some(v) = kv.get("stages") {
            c.model.backbone.stages = parse_stages(v)?;
        }
        kv.apply("drop_path", &mut c.model.backbone.drop_path)?;
        kv.apply("attention_projections", &mut c.model.attention_projections)?;
        kv.apply("input_size", &mut c.model.input_size)?;
        kv.apply("general_levels", &mut c.model.general_levels)?;
        kv.apply("fine_levels", &mut c.model.fine_levels)?;
        kv.apply("epochs", &mut c.train.epochs)?;
        kv.apply("batch_size", &mut c.train.batch_size)?;
        kv.apply("lr_max", &mut c.train.lr_max)?;
        kv.apply("lr_min", &mut c.train.lr_min)?;
        match kv.get("warmup_epochs") {
            None | Some("auto") => {}
            Some(_) => {
                let mut w = 0usize;
                kv.apply("warmup_epochs", &mut w)?;
                c.train.warmup_epochs = Some(w);
            }
        }
        kv.apply("weight_decay", &mut c.train.weight_decay)?;
        if let Some(v) = kv.get("lambda") {
            c.set_lambda(v)?;
        }
        kv.apply("augment_clip", &mut c.train.augment.clip)?;
        kv.apply("augment_flip", &mut c.train.augment.flip_prob)?;
        kv.apply("augment_jitter", &mut c.train.augment.jitter)?;
        kv.apply("augment_scale", &mut c.train.augment.scale)?;
        kv.apply("holdout_folds", &mut c.holdout_folds)?;
        kv.apply("holdout", &mut c.holdout)?;
        kv.apply("seed", &mut c.train.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?).map_err(|e| match e {
            e @ Error::Io { .. } => e,
            other => Error::Format {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
    }

    pub fn set_lambda(&mut self, ratio: &str) -> Result<()> {
        self.train.weights = LossWeights::parse_ratio(ratio)?;
        self.lambda = ratio.trim().to_string();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.model
            .backbone
            .output_hw(self.model.input_size, self.model.input_size)?;
        if self.holdout_folds < 2 {
            return Err(Error::invalid("holdout_folds must be at least 2"));
        }
        self.train.validate()
    }

    /// Every setting, defaults included.
    pub fn to_kv(&self) -> KvFile {
        let (m, t) = (&self.model, &self.train);
        let mut kv = KvFile::default();
        kv.set("variant", m.variant);
        kv.set("stages", render_stages(&m.backbone.stages));
        kv.set("drop_path", m.backbone.drop_path);
        kv.set("attention_projections", m.attention_projections);
        kv.set("input_size", m.input_size);
        kv.set("general_levels", m.general_levels);
        kv.set("fine_levels", m.fine_levels);
        kv.set("epochs", t.epochs);
        kv.set("batch_size", t.batch_size);
        kv.set("lr_max", t.lr_max);
        kv.set("lr_min", t.lr_min);
        kv.set(
            "warmup_epochs",
            t.warmup_epochs.map_or("auto".to_string(), |w| w.to_string()),
        );
        kv.set("weight_decay", t.weight_decay);
        kv.set("lambda", &self.lambda);
        kv.set("augment_clip", t.augment.clip);
        kv.set("augment_flip", t.augment.flip_prob);
        kv.set("augment_jitter", t.augment.jitter);
        kv.set("augment_scale", t.augment.scale);
        kv.set("holdout_folds", self.holdout_folds);
        kv.set("holdout", self.holdout);
        kv.set("seed", t.seed);
        kv
    }
}

/// The resolved config written next to every checkpoint.
pub const SIDECAR_NAME: &str = "config.txt";

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_file_name(SIDECAR_NAME)
}

/// Rebuilds a trained network from a checkpoint and the config beside it.
pub fn load_network(checkpoint: &Path) -> Result<(RunConfig, Network)> {
    let config = RunConfig::read(&sidecar_path(checkpoint))?;
    let mut net = Network::new(config.model.clone(), config.train.seed)?;
    restore(net.store_mut(), checkpoint)?;
    Ok((config, net))
}
