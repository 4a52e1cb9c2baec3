//! Residual convolutional feature extractor shared by the original and the
//! mirrored input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, DropPath};
use crate::params::{ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stages: Vec<StageConfig>,
    pub drop_path: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |channels| StageConfig {
            channels,
            blocks: 1,
            stride: 2,
        };
        BackboneConfig {
            input_channels: 1,
            stages: vec![stage(16), stage(32), stage(64)],
            drop_path: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.channels)
    }

    /// Spatial size of the feature map for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::invalid(format!(
                "input {h}×{w} is not divisible by the total stride {s}"
            )));
        }
        Ok((h / s, w / s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("backbone needs at least one stage"));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::invalid("stage channels and stride must be positive"));
        }
        DropPath::new(self.drop_path)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    drop: DropPath,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    down_bn: BatchNorm2d,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let drop = DropPath::new(config.drop_path)?;
        let mut c_in = config.input_channels;
        let mut stages = Vec::new();
        for (i, st) in config.stages.iter().enumerate() {
            let prefix = format!("{name}.stage{i}");
            let down = Conv2d::new(store, &format!("{prefix}.down"), c_in, st.channels, 3, st.stride, 1, false, rng);
            let down_bn = BatchNorm2d::new(store, &format!("{prefix}.down_bn"), st.channels);
            let blocks = (0..st.blocks)
                .map(|b| Block {
                    conv: Conv2d::new(store, &format!("{prefix}.block{b}.conv"), st.channels, st.channels, 3, 1, 1, false, rng),
                    bn: BatchNorm2d::new(store, &format!("{prefix}.block{b}.bn"), st.channels),
                    drop,
                })
                .collect();
            stages.push(Stage { down, down_bn, blocks });
            c_in = st.channels;
        }
        Ok(Backbone {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `N×c×h×w -> N×C×(h/s)×(w/s)`.
    pub fn forward(&self, s: &mut Session, img: Var) -> Result<Var> {
        let shape = s.tape.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::InvalidShape {
                op: "backbone",
                msg: format!(
                    "expected N×{}×H×W input, got {shape:?}",
                    self.config.input_channels
                ),
            });
        }
        self.config.output_hw(shape[2], shape[3])?;
        let mut x = img;
        for stage in &self.stages {
            x = stage.down.forward(s, x)?;
            x = stage.down_bn.forward(s, x)?;
            x = s.tape.relu(x);
            for block in &stage.blocks {
                let r = block.conv.forward(s, x)?;
                let r = block.bn.forward(s, r)?;
                let r = s.tape.relu(r);
                x = block.drop.forward(s, x, r)?;
            }
        }
        Ok(x)
    }

    /// Features of the image and of its horizontal mirror, from one parameter
    /// set. Both halves travel through the network as a single `2N` batch.
    pub fn dual_path(&self, s: &mut Session, img: Var) -> Result<(Var, Var)> {
        let n = s.tape.shape(img).first().copied().unwrap_or(0);
        let flipped = s.tape.flip_width(img)?;
        let both = s.tape.concat(&[img, flipped], 0)?;
        let feats = self.forward(s, both)?;
        let f = s.tape.narrow(feats, 0, 0, n)?;
        let ff = s.tape.narrow(feats, 0, n, n)?;
        Ok((f, ff))
    }
}
