//! Symmetric feature matching: fuse the original and mirrored feature maps,
//! match each against the fused map with attention, then fuse the two
//! matched maps again.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{from_tokens, to_tokens, Attention, CatConv};
use crate::params::{ParamStore, Session};

#[derive(Clone, Debug)]
pub struct Sfmm {
    pub catconv_in: CatConv,
    pub attn: Attention,
    pub catconv_out: CatConv,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SfmmTrace {
    /// Fused map that serves as key and value.
    pub fused: Var,
    pub matched: Var,
    pub matched_flipped: Var,
    /// `N×T×T` attention weights for the original / mirrored queries.
    pub scores: Var,
    pub scores_flipped: Var,
    pub out: Var,
}

impl Sfmm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, use_projections: bool, rng: &mut R) -> Self {
        Sfmm {
            catconv_in: CatConv::new(store, &format!("{name}.catconv_in"), channels, rng),
            attn: Attention::new(store, &format!("{name}.attn"), channels, use_projections, rng),
            catconv_out: CatConv::new(store, &format!("{name}.catconv_out"), channels, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, f: Var, ff: Var) -> Result<Var> {
        Ok(self.trace(s, f, ff)?.out)
    }

    pub fn trace(&self, s: &mut Session, f: Var, ff: Var) -> Result<SfmmTrace> {
        let shape = s.tape.shape(f).to_vec();
        if shape.len() != 4 || shape != s.tape.shape(ff) {
            return Err(Error::ShapeMismatch {
                op: "sfmm",
                left: shape,
                right: s.tape.shape(ff).to_vec(),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let fused = self.catconv_in.forward(s, f, ff)?;

        let kv = to_tokens(s, fused)?;
        let (k, v) = self.attn.keys_values(s, kv, kv)?;
        let q = to_tokens(s, f)?;
        let qf = to_tokens(s, ff)?;
        let scores = self.attn.scores(s, q, k)?;
        let scores_flipped = self.attn.scores(s, qf, k)?;
        let m = s.tape.matmul(scores, v)?;
        let mf = s.tape.matmul(scores_flipped, v)?;
        let matched = from_tokens(s, m, h, w)?;
        let matched_flipped = from_tokens(s, mf, h, w)?;

        let out = self.catconv_out.forward(s, matched, matched_flipped)?;
        Ok(SfmmTrace {
            fused,
            matched,
            matched_flipped,
            scores,
            scores_flipped,
            out,
        })
    }

    /// Attention weights of query map `fq` against the fused map `fc`.
    pub fn attention_scores(&self, s: &mut Session, fq: Var, fc: Var) -> Result<Var> {
        let kv = to_tokens(s, fc)?;
        let (k, _) = self.attn.keys_values(s, kv, kv)?;
        let q = to_tokens(s, fq)?;
        self.attn.scores(s, q, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let sfmm = Sfmm::new(&mut store, "s", 64, false, &mut rng);
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let f = s.input(Tensor::randn(&[1, 64, 8, 8], &mut rng));
        let ff = s.input(Tensor::randn(&[1, 64, 8, 8], &mut rng));
        let out = sfmm.forward(&mut s, f, ff).unwrap();
        assert_eq!(s.tape.shape(out), &[1, 64, 8, 8]);
    }

    #[test]
    fn single_token_matches_fused_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let sfmm = Sfmm::new(&mut store, "s", 4, false, &mut rng);
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let f = s.input(Tensor::randn(&[1, 4, 1, 1], &mut rng));
        let ff = s.input(Tensor::randn(&[1, 4, 1, 1], &mut rng));
        let tr = sfmm.trace(&mut s, f, ff).unwrap();
        let fused = s.tape.value(tr.fused).clone();
        assert_eq!(s.tape.value(tr.matched), &fused);
        assert_eq!(s.tape.value(tr.matched_flipped), &fused);
        let direct = sfmm.catconv_out.forward(&mut s, tr.fused, tr.fused).unwrap();
        assert_eq!(s.tape.value(direct), s.tape.value(tr.out));
    }

    #[test]
    fn mismatched_inputs_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let sfmm = Sfmm::new(&mut store, "s", 4, false, &mut rng);
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let f = s.input(Tensor::zeros(&[1, 4, 2, 2]));
        let ff = s.input(Tensor::zeros(&[1, 4, 2, 1]));
        assert!(sfmm.forward(&mut s, f, ff).is_err());
    }
}
