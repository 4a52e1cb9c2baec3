//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every operation appends a node to the [`Tape`]; node order is a valid
//! topological order, so [`Tape::backward`] simply walks the nodes in reverse.
//! A tape belongs to one forward pass. Drop it (or call [`Tape::clear`]) to
//! free every recorded value.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    FlipWidth(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Geometry of a 2-D convolution over an `N×Cin×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}


/// Output of a training-mode batch norm: the normalized value plus the batch
/// statistics the caller folds into its running averages.
pub struct BatchNormOutput {
    pub out: Var,
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records a leaf. Gradients are only tracked through leaves that ask for them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keeps the gradient of an intermediate node after backward. Only leaves
    /// keep theirs by default.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let retain = matches!(op, Op::Leaf);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    /// `b` must match `a` exactly or equal its trailing dims.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !ok {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(self.value(b).numel().max(1))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let inner = self.broadcast_check(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av
            .data()
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::NonPositiveLog(bad));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Multiplies each leading-axis slice `x[i, ...]` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(Error::InvalidShape {
                op: "scale_rows",
                msg: format!("{} factors for shape {shape:?}", factors.len()),
            });
        }
        let inner = self.value(x).numel() / factors.len().max(1);
        let mut data = self.value(x).data().to_vec();
        for (row, &f) in data.chunks_mut(inner.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ScaleRows { x, factors }, rg))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Swaps the last two axes (`[.., m, n] -> [.., n, m]`).
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("rank {} < 2", shape.len()),
            });
        }
        let out = transpose_last2(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::TransposeLast2(a), rg))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            let others_agree = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !others_agree {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Channel concatenation of `N×C×H×W` feature maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        self.concat(&[a, b], 1)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                msg: format!("{start}+{len} along axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Narrow { x: a, axis, start }, rg))
    }

    /// Reverses the last axis (horizontal mirror for `...×H×W` maps).
    pub fn flip_width(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() < 2 {
            return Err(Error::InvalidShape {
                op: "flip_width",
                msg: "rank < 2".into(),
            });
        }
        let out = self.value(a).flip_width();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::FlipWidth(a), rg))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m×k]·[k×n]`, or a batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(mismatch()),
        };
        let mut data = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                0.0,
                &mut data[i * m * n..],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::InvalidShape {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", x.shape()),
            });
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let out = softmax_values(x, axis);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { x: a, axis }, rg))
    }

    // ---- convolution & normalization ---------------------------------------

    /// Direct cross-correlation of `x: N×Cin×H×W` with `w: Cout×Cin×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {:?} does not fit input {sx:?} with padding {pad}", &sw[2..]),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![sw[0]],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let hw = ho * wo;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let in_len = geom.c_in * geom.h * geom.w;
        let mut cols = vec![0.0; geom.patch() * hw];
        let mut data = vec![0.0; geom.batch * geom.c_out * hw];
        for (n, dst) in data.chunks_mut(geom.c_out * hw).enumerate() {
            im2col(&xd[n * in_len..][..in_len], &geom, &mut cols);
            gemm(geom.c_out, geom.patch(), hw, wd, false, &cols, false, 0.0, dst);
            if let Some(b) = b {
                for (plane, bv) in dst.chunks_mut(hw).zip(self.value(b).data()) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new(&[geom.batch, geom.c_out, ho, wo], data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch norm over `(N, H, W)` of an `N×C×H×W` input using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<BatchNormOutput> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                msg: "training-mode batch norm needs a batch of at least 2".into(),
            });
        }
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] += xd[(ni * c + ci) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                var[ci] += xd[(ni * c + ci) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1.0).max(1.0)).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok(BatchNormOutput {
            out,
            mean,
            var: unbiased,
        })
    }

    /// Batch norm with fixed statistics; a pure affine map of the input.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::invalid(format!("running stats sized {} / {} for {c} channels", mean.len(), var.len())));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                msg: format!("expected N×C×H×W, got {s:?}"),
            });
        }
        let c = s[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: vec![c],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        Ok((s[0], c, s[2] * s[3]))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut data = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    data[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Spatial mean: `N×C×H×W -> N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                msg: format!("expected N×C×H×W, got {s:?}"),
            });
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[s[0], s[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `∂loss/∂v` into the gradient of every ancestor `v`.
    ///
    /// Calling it again without [`Tape::zero_grad`] adds a second copy.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss is not recorded on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut work);
            }
            if !self.nodes[i].retain {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn propagate(&self, i: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(work, *a, |d| add_into(d, g));
                self.acc(work, *b, |d| reduce_broadcast(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(work, *a, |d| add_into(d, g));
                self.acc(work, *b, |d| reduce_broadcast(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let inner = bv.len().max(1);
                self.acc(work, *a, |d| {
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv += g[j] * bv[j % inner];
                    }
                });
                self.acc(work, *b, |d| {
                    for (j, (&gv, &x)) in g.iter().zip(av).enumerate() {
                        d[j % inner] += gv * x;
                    }
                });
            }
            Op::Neg(a) => self.acc(work, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)),
            Op::Scale(a, f) => self.acc(work, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)),
            Op::Relu(a) => self.acc(work, *a, |d| {
                for ((d, g), &y) in d.iter_mut().zip(g).zip(out) {
                    if y > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(work, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                })
            }
            Op::Exp(a) => self.acc(work, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y;
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.acc(work, *a, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                        if x >= *lo && x <= *hi {
                            *d += g;
                        }
                    }
                })
            }
            Op::Sum(a) => self.acc(work, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::ScaleRows { x, factors } => {
                let inner = g.len() / factors.len().max(1);
                self.acc(work, *x, |d| {
                    for ((drow, grow), f) in d.chunks_mut(inner.max(1)).zip(g.chunks(inner.max(1))).zip(factors) {
                        drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * f);
                    }
                })
            }
            Op::Reshape(a) => self.acc(work, *a, |d| add_into(d, g)),
            Op::TransposeLast2(a) => {
                let gt = transpose_last2(&Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape"));
                self.acc(work, *a, |d| add_into(d, gt.data()));
            }
            Op::FlipWidth(a) => {
                let w = *node.value.shape().last().unwrap();
                self.acc(work, *a, |d| {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(w)) {
                        for (dv, gv) in drow.iter_mut().zip(grow.iter().rev()) {
                            *dv += gv;
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    self.acc(work, p, |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * len..(o + 1) * len], &g[o * total + offset..][..len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let full = src_shape[*axis];
                self.acc(work, *x, |d| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..][..len * inner]);
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(work, *a, |d| {
                    for i in 0..batch {
                        // dA = G·Bᵀ
                        gemm(m, n, k, &g[i * m * n..], false, &bd[i * k * n..], true, 1.0, &mut d[i * m * k..]);
                    }
                });
                self.acc(work, *b, |d| {
                    for i in 0..batch {
                        // dB = Aᵀ·G
                        gemm(k, m, n, &ad[i * m * k..], true, &g[i * m * n..], false, 1.0, &mut d[i * k * n..]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                self.acc(work, *x, |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| (o * len + t) * inner + j;
                            let dot: f64 = (0..len).map(|t| g[idx(t)] * out[idx(t)]).sum();
                            for t in 0..len {
                                d[idx(t)] += out[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, work),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for j in off..off + hw {
                            dgamma[ci] += g[j] * xhat[j];
                            dbeta[ci] += g[j];
                        }
                    }
                }
                let gm = self.value(*gamma).data();
                self.acc(work, *x, |d| {
                    let m = (n * hw) as f64;
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let k = gm[ci] * inv_std[ci];
                            for j in off..off + hw {
                                d[j] += if *batch_stats {
                                    k * (g[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
                self.acc(work, *gamma, |d| add_into(d, &dgamma));
                self.acc(work, *beta, |d| add_into(d, &dbeta));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.acc(work, *x, |d| {
                    for (chunk, gv) in d.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv / hw as f64);
                    }
                })
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let hw = geom.out_h() * geom.out_w();
        let out_len = geom.c_out * hw;
        let in_len = geom.c_in * geom.h * geom.w;
        if let Some(b) = b {
            self.acc(work, b, |d| {
                for gn in g.chunks(out_len) {
                    for (dv, plane) in d.iter_mut().zip(gn.chunks(hw)) {
                        *dv += plane.iter().sum::<f64>();
                    }
                }
            });
        }
        let mut cols = vec![0.0; geom.patch() * hw];
        if self.requires_grad(w) {
            let xd = self.value(x).data();
            self.acc(work, w, |d| {
                for (n, gn) in g.chunks(out_len).enumerate() {
                    im2col(&xd[n * in_len..][..in_len], geom, &mut cols);
                    gemm(geom.c_out, hw, geom.patch(), gn, false, &cols, true, 1.0, d);
                }
            });
        }
        if self.requires_grad(x) {
            let wd = self.value(w).data();
            self.acc(work, x, |d| {
                for (gn, dn) in g.chunks(out_len).zip(d.chunks_mut(in_len)) {
                    gemm(geom.patch(), geom.c_out, hw, wd, true, gn, false, 0.0, &mut cols);
                    col2im_add(&cols, geom, dn);
                }
            });
        }
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    fn acc(&self, work: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = work[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sums a full-shape gradient down onto a trailing-dims broadcast operand.
fn reduce_broadcast(dst: &mut [f64], g: &[f64], sign: f64) {
    let inner = dst.len().max(1);
    for chunk in g.chunks(inner) {
        for (d, v) in dst.iter_mut().zip(chunk) {
            *d += sign * v;
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (m * n).max(1);
    let src = t.data();
    let mut data = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 1, r - 2);
    Tensor::new(&shape, data).expect("transpose shape")
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut data = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + j;
            let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                data[idx(t)] = e;
                total += e;
            }
            for t in 0..len {
                data[idx(t)] /= total;
            }
        }
    }
    Tensor::new(shape, data).expect("softmax shape")
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside
/// `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize, wo: usize) -> std::ops::Range<usize> {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(wo) } else { 0 };
    lo..hi.max(lo)
}

/// Unfolds one `Cin×H×W` image into a `(Cin·kh·kw) × (Ho·Wo)` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * hw..][..hw];
                let valid = valid_cols(g, kj, wo);
                for (oy, seg) in dst.chunks_mut(wo).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || valid.is_empty() {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..][..g.w];
                    seg[..valid.start].fill(0.0);
                    seg[valid.end..].fill(0.0);
                    let first = valid.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        seg[valid.clone()].copy_from_slice(&src_row[first..][..valid.len()]);
                    } else {
                        for (d, s) in seg[valid.clone()].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto one image.
fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &dcols[row * hw..][..hw];
                let valid = valid_cols(g, kj, wo);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * g.stride + kj - g.pad;
                for (oy, seg) in src.chunks(wo).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                    for (d, s) in dst_row[first..].iter_mut().step_by(g.stride).zip(&seg[valid.clone()]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
