//! Grad-CAM heatmaps and their overlays.

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::data::{resize_region, save_png, BBox};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Head, Network, Prediction};
use crate::params::Session;
use crate::tensor::Tensor;

/// Layers a heatmap can be taken from.
pub const LAYERS: [&str; 3] = ["general.sfmm", "fine.sfmm", "backbone"];
pub const DEFAULT_LAYER: &str = "general.sfmm";
pub const DEFAULT_ALPHA: f64 = 0.4;

/// `height×width` values in `[0,1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub layer: String,
    pub target: String,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Heat in columns `[0, width/2)` and `[width - width/2, width)`; a middle
    /// column of an odd width belongs to neither half.
    pub fn half_masses(&self) -> (f64, f64) {
        let half = self.width / 2;
        let (mut left, mut right) = (0.0, 0.0);
        for row in self.values.chunks(self.width) {
            left += row[..half].iter().sum::<f64>();
            right += row[self.width - half..].iter().sum::<f64>();
        }
        (left, right)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.values.clone()).expect("heatmap dims")
    }
}

/// Weights each channel of `activation` (`C×H×W`) by the spatial mean of its
/// gradient, rectifies the sum and min-max normalizes it.
pub fn cam(activation: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
    let s = activation.shape();
    if s.len() != 3 || grad.shape() != s {
        return Err(Error::ShapeMismatch {
            op: "cam",
            left: s.to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let hw = s[1] * s[2];
    let mut map = vec![0.0; hw];
    for (a, g) in activation.data().chunks(hw).zip(grad.data().chunks(hw)) {
        let w = g.iter().sum::<f64>() / hw as f64;
        for (m, v) in map.iter_mut().zip(a) {
            *m += w * v;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Ok(vec![0.0; hw]);
    }
    Ok(map.into_iter().map(|v| (v - lo) / (hi - lo)).collect())
}

fn layer_var(out: &ForwardOutput, layer: &str) -> Result<Var> {
    match layer {
        "general.sfmm" => Ok(out.general.fused),
        "fine.sfmm" => Ok(out.fine.fused),
        "backbone" => Ok(out.features),
        other => Err(Error::UnknownLayer(other.to_string())),
    }
}

/// Grad-CAM for an arbitrary scalar built from the forward pass. `image` is a
/// single `1×H×W` network input.
pub fn gradcam_with<F>(net: &mut Network, image: &Tensor, layer: &str, target: &str, score: F) -> Result<(Heatmap, Prediction)>
where
    F: FnOnce(&mut Tape, &ForwardOutput, &Prediction) -> Result<Var>,
{
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidShape {
            op: "gradcam",
            msg: format!("expected one 1×H×W image, got {s:?}"),
        });
    }
    let (arch, store) = net.split();
    let mut sess = Session::inference(store);
    // The input carries the gradient requirement because parameters are
    // recorded as constants.
    let x = sess.tape.variable(image.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let out = arch.forward(&mut sess, x)?;
    let a = layer_var(&out, layer)?;
    let pred = arch.predictions(&sess.tape, &out)?.remove(0);
    sess.tape.retain_grad(a);
    let score = score(&mut sess.tape, &out, &pred)?;
    sess.tape.backward(score)?;
    let act = sess.tape.value(a).clone();
    let dims = act.shape().to_vec();
    let act = act.reshape(&dims[1..])?;
    let grad = match sess.tape.grad(a) {
        Some(g) => g.reshape(&dims[1..])?,
        None => Tensor::zeros(&dims[1..]),
    };
    let values = cam(&act, &grad)?;
    Ok((
        Heatmap {
            height: dims[2],
            width: dims[3],
            values,
            layer: layer.to_string(),
            target: target.to_string(),
        },
        pred,
    ))
}

/// Grad-CAM of the general branch's decoded level. For the ordinal head the
/// score is the sum of the positive-class logits of every classifier below
/// the decoded rank; for the softmax head it is the winning logit.
pub fn gradcam(net: &mut Network, image: &Tensor, layer: &str) -> Result<(Heatmap, Prediction)> {
    let head = net.arch().general.head.clone();
    gradcam_with(net, image, layer, "general decoded level", |tape, out, pred| {
        let logits = out.general.head.logits;
        let shape = tape.shape(logits).to_vec();
        let mut mask = Tensor::zeros(&shape);
        match head {
            Head::Ordinal(_) => {
                for k in 0..pred.general.rank - 1 {
                    mask.set(&[0, k, 0], 1.0);
                }
            }
            Head::Class(_) => mask.set(&[0, pred.general.rank - 1], 1.0),
        }
        let m = tape.constant(mask);
        let picked = tape.mul(logits, m)?;
        Ok(tape.sum(picked))
    })
}

/// Blends the heatmap, bilinearly upsampled to the image size, over a
/// grayscale `1×H×W` image: `(1 − alpha)·image + alpha·heat`.
pub fn blend(heatmap: &Heatmap, image: &Tensor, alpha: f64) -> Result<Tensor> {
    let s = image.shape();
    let full = BBox::full(s.get(2).copied().unwrap_or(0), s.get(1).copied().unwrap_or(0));
    blend_in(heatmap, image, full, alpha)
}

/// Like [`blend`] but only inside `bbox`, the region the network saw.
pub fn blend_in(heatmap: &Heatmap, image: &Tensor, bbox: BBox, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidShape {
            op: "overlay",
            msg: format!("expected a 1×H×W image, got {s:?}"),
        });
    }
    if !bbox.fits(s[2], s[1]) {
        return Err(Error::invalid(format!("bbox {bbox:?} outside the image")));
    }
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    let heat = resize_region(&heatmap.to_tensor(), BBox::full(heatmap.width, heatmap.height), bbox.h, bbox.w)?;
    let mut out = image.clone();
    let w = s[2];
    let data = out.data_mut();
    for (r, row) in heat.data().chunks(bbox.w).enumerate() {
        let dst = &mut data[(bbox.y + r) * w + bbox.x..][..bbox.w];
        for (p, h) in dst.iter_mut().zip(row) {
            *p = ((1.0 - alpha) * *p + alpha * h).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

pub fn overlay(heatmap: &Heatmap, image: &Tensor, bbox: BBox, alpha: f64, path: &Path) -> Result<()> {
    save_png(path, &blend_in(heatmap, image, bbox, alpha)?)
}
