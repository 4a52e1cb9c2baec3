//! Network building blocks: convolution, batch norm, linear, scaled
//! dot-product attention, DropPath and the concat-convolution fusion block.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{standard_normal, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[c_out, c_in, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Per-channel batch norm. Running statistics live in the store as
/// non-trainable buffers and only move in training mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.is_train() {
            let bn = s.tape.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            let store = s.store_mut();
            for (r, b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&bn.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&bn.var) {
                *r = (1.0 - m) * *r + m * b;
            }
            Ok(bn.out)
        } else {
            let mean = s.store().get(self.running_mean).data().to_vec();
            let var = s.store().get(self.running_var).data().to_vec();
            s.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// `y = x·Wᵀ + b` over `N×in` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[d_out, d_in], bound, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let wt = s.tape.transpose(w)?;
        let shape = s.tape.shape(x).to_vec();
        // tokens (N×T×d) are flattened to rows and restored afterwards
        let rows = if shape.len() == 3 {
            s.tape.reshape(x, &[shape[0] * shape[1], shape[2]])?
        } else {
            x
        };
        let y = s.tape.matmul(rows, wt)?;
        let y = s.tape.add(y, b)?;
        if shape.len() == 3 {
            let d_out = s.tape.shape(y)[1];
            s.tape.reshape(y, &[shape[0], shape[1], d_out])
        } else {
            Ok(y)
        }
    }
}

/// Single-head scaled dot-product attention, `softmax(QKᵀ/√d)·V`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub dim: usize,
    pub projections: Option<[Linear; 3]>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, use_projections: bool, rng: &mut R) -> Self {
        assert!(dim > 0, "attention dim must be positive");
        let projections = use_projections.then(|| {
            [
                Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
                Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
                Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            ]
        });
        Attention { dim, projections }
    }

    /// Projects keys and values once so several queries can reuse them.
    pub fn keys_values(&self, s: &mut Session, k: Var, v: Var) -> Result<(Var, Var)> {
        match &self.projections {
            Some([_, wk, wv]) => Ok((wk.forward(s, k)?, wv.forward(s, v)?)),
            None => Ok((k, v)),
        }
    }

    /// Row-stochastic `N×T×T` attention matrix for query tokens against
    /// already projected keys.
    pub fn scores(&self, s: &mut Session, q: Var, k: Var) -> Result<Var> {
        let (sq, sk) = (s.tape.shape(q).to_vec(), s.tape.shape(k).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: sq,
                right: sk,
            });
        }
        let q = match &self.projections {
            Some([wq, _, _]) => wq.forward(s, q)?,
            None => q,
        };
        let kt = s.tape.transpose(k)?;
        let logits = s.tape.matmul(q, kt)?;
        let logits = s.tape.scale(logits, 1.0 / (self.dim as f64).sqrt());
        s.tape.softmax(logits, 2)
    }

    /// Attention with projected keys/values from [`Attention::keys_values`].
    pub fn attend(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<Var> {
        if s.tape.shape(k) != s.tape.shape(v) {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: s.tape.shape(k).to_vec(),
                right: s.tape.shape(v).to_vec(),
            });
        }
        let weights = self.scores(s, q, k)?;
        s.tape.matmul(weights, v)
    }

    /// Full attention over `N×T×d` token tensors.
    pub fn forward(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<Var> {
        let (k, v) = self.keys_values(s, k, v)?;
        self.attend(s, q, k, v)
    }
}

/// Stochastic depth on a residual branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropPath {
    pub drop_prob: f64,
}

impl DropPath {
    pub fn new(drop_prob: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::invalid(format!("drop_prob {drop_prob} outside [0, 1)")));
        }
        Ok(DropPath { drop_prob })
    }

    /// `x + residual` in eval mode; in training each sample's residual is
    /// dropped with probability `p` and survivors are scaled by `1/(1-p)`.
    pub fn forward(&self, s: &mut Session, x: Var, residual: Var) -> Result<Var> {
        if s.tape.shape(x) != s.tape.shape(residual) {
            return Err(Error::ShapeMismatch {
                op: "droppath",
                left: s.tape.shape(x).to_vec(),
                right: s.tape.shape(residual).to_vec(),
            });
        }
        if !s.is_train() || self.drop_prob == 0.0 {
            return s.tape.add(x, residual);
        }
        let keep = 1.0 - self.drop_prob;
        let n = s.tape.shape(residual)[0];
        let factors = (0..n)
            .map(|_| if s.rng().gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let dropped = s.tape.scale_rows(residual, factors)?;
        s.tape.add(x, dropped)
    }
}

/// `ReLU(BN(conv3×3(conv1×1(cat(a, b)))))`: fuses two `C`-channel maps back
/// into `C` channels.
#[derive(Clone, Debug)]
pub struct CatConv {
    pub reduce: Conv2d,
    pub fuse: Conv2d,
    pub bn: BatchNorm2d,
}

impl CatConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        CatConv {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), 2 * channels, channels, 1, 1, 0, true, rng),
            fuse: Conv2d::new(store, &format!("{name}.fuse"), channels, channels, 3, 1, 1, true, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
        }
    }

    pub fn forward(&self, s: &mut Session, a: Var, b: Var) -> Result<Var> {
        if s.tape.shape(a) != s.tape.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "cat_conv",
                left: s.tape.shape(a).to_vec(),
                right: s.tape.shape(b).to_vec(),
            });
        }
        let cat = s.tape.concat_channels(a, b)?;
        let x = self.reduce.forward(s, cat)?;
        let x = self.fuse.forward(s, x)?;
        let x = self.bn.forward(s, x)?;
        Ok(s.tape.relu(x))
    }
}

/// Tokens for attention: `N×C×H×W -> N×(H·W)×C`, row-major over `(H, W)`.
pub fn to_tokens(s: &mut Session, x: Var) -> Result<Var> {
    let sh = s.tape.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(Error::InvalidShape {
            op: "to_tokens",
            msg: format!("expected N×C×H×W, got {sh:?}"),
        });
    }
    let flat = s.tape.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]])?;
    s.tape.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(s: &mut Session, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let t = s.tape.transpose(tokens)?;
    let sh = s.tape.shape(t).to_vec();
    s.tape.reshape(t, &[sh[0], sh[1], h, w])
}
