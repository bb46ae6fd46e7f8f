//! Mask decoder: fuses the image embedding, positional encoding and prompt
//! embeddings into full-resolution mask logits.

use rand::Rng;

use crate::encoders::EMBED_DIM;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Dense, Up};
use crate::param::{ParamId, ParamStore};
use crate::prompt::{PromptVars, NUM_SPARSE_TOKENS};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    c: usize,
    fuse: Conv,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    mix: Dense,
    conv16: Conv,
    up32: Up,
    conv32: Conv,
    up64: Up,
    head: Conv,
}

impl MaskDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let c = EMBED_DIM;
        Self {
            c,
            fuse: Conv::new(store, &format!("{name}.fuse"), c, c, 1, 1, rng),
            q: Dense::new(store, &format!("{name}.attn.q"), c, c, rng),
            k: Dense::new(store, &format!("{name}.attn.k"), c, c, rng),
            v: Dense::new(store, &format!("{name}.attn.v"), c, c, rng),
            o: Dense::new(store, &format!("{name}.attn.o"), c, c, rng),
            mix: Dense::new(store, &format!("{name}.token_mix"), NUM_SPARSE_TOKENS * c, c, rng),
            conv16: Conv::new(store, &format!("{name}.conv16"), c, c, 3, 1, rng),
            up32: Up::new(store, &format!("{name}.up32"), c, c / 2, rng),
            conv32: Conv::new(store, &format!("{name}.conv32"), c / 2, c / 2, 3, 1, rng),
            up64: Up::new(store, &format!("{name}.up64"), c / 2, c / 4, rng),
            head: Conv::new(store, &format!("{name}.head"), c / 4, 1, 1, 1, rng),
        }
    }

    /// Logits `[B,1,4·H_e,4·W_e]` from `F_I [B,C,H_e,W_e]`, `P_p [C,H_e,W_e]` and the prompts.
    ///
    /// `fused = conv1×1(F_I + P_p + P_d)`; the sparse tokens attend once over
    /// the fused positions, are mixed into one vector and added back as a
    /// per-channel offset; two transposed convolutions restore full extent.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        f_i: Var,
        pe: Var,
        prompts: PromptVars,
    ) -> Result<Var> {
        let s = g.shape(f_i).to_vec();
        if s.len() != 4 || s[1] != self.c || g.shape(prompts.dense) != s.as_slice() {
            return shape_err(
                "decode_mask",
                format!("F_I {:?} vs dense prompt {:?}", s, g.shape(prompts.dense)),
            );
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if g.shape(prompts.sparse) != [b, NUM_SPARSE_TOKENS, c] {
            return shape_err("decode_mask", format!("sparse prompt {:?}", g.shape(prompts.sparse)));
        }
        let x = g.add_batch_broadcast(f_i, pe)?;
        let x = g.add(x, prompts.dense)?;
        let fused = self.fuse.forward(g, store, x)?;

        let n = NUM_SPARSE_TOKENS;
        let tokens = g.reshape(prompts.sparse, &[b * n, c])?;
        let q = self.q.forward(g, store, tokens)?;
        let q = g.reshape(q, &[b, n, c])?;
        let flat = g.reshape(fused, &[b, c, hw])?;
        let pos = g.transpose_last2(flat)?;
        let pos = g.reshape(pos, &[b * hw, c])?;
        let k = self.k.forward(g, store, pos)?;
        let k = g.reshape(k, &[b, hw, c])?;
        let v = self.v.forward(g, store, pos)?;
        let v = g.reshape(v, &[b, hw, c])?;
        let kt = g.transpose_last2(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
        let attn = g.softmax_last(scores)?;
        let read = g.bmm(attn, v)?;
        let read = g.reshape(read, &[b * n, c])?;
        let out = self.o.forward(g, store, read)?;
        let updated = g.add(tokens, out)?;
        let updated = g.reshape(updated, &[b, n * c])?;
        let offset = self.mix.forward(g, store, updated)?;
        let offset = g.reshape(offset, &[b * c])?;
        let x = g.add_channel_bias(fused, offset)?;

        let x = self.conv16.forward_relu(g, store, x)?;
        let x = self.up32.forward(g, store, x)?;
        let x = g.relu(x)?;
        let x = self.conv32.forward_relu(g, store, x)?;
        let x = self.up64.forward(g, store, x)?;
        let x = g.relu(x)?;
        self.head.forward(g, store, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![];
        for d in [&self.q, &self.k, &self.v, &self.o, &self.mix] {
            ids.extend([d.w, d.b]);
        }
        for c in [&self.fuse, &self.conv16, &self.conv32, &self.head] {
            ids.extend([c.w, c.b]);
        }
        for u in [&self.up32, &self.up64] {
            ids.extend([u.w, u.b]);
        }
        ids
    }
}

/// `sigmoid(logit) > threshold` as {0, 1}. Compared in logit space, so the
/// result is exact for any finite logit.
pub fn binarize(logits: &Tensor, threshold: f64) -> Tensor {
    let keep: Box<dyn Fn(f32) -> bool> = if threshold <= 0.0 {
        Box::new(|_| true)
    } else if threshold >= 1.0 {
        Box::new(|_| false)
    } else {
        let cut = (threshold / (1.0 - threshold)).ln();
        Box::new(move |l| l as f64 > cut)
    };
    logits.map(|l| if keep(l) { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_conventions() {
        let l = Tensor::new(&[4], vec![0.0, 10.0, -1e30, 1e-6]).unwrap();
        assert_eq!(binarize(&l, 0.5).data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(binarize(&Tensor::full(&[3], 10.0), 0.5).data(), &[1.0; 3]);
        assert_eq!(binarize(&l, 0.0).data(), &[1.0; 4]);
        // {0,1} masks as ±large logits come back unchanged
        let m = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let as_logits = m.map(|v| if v > 0.5 { 1e4 } else { -1e4 });
        assert_eq!(binarize(&as_logits, 0.5), m);
    }

    #[test]
    fn zero_inputs_give_constant_logits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = MaskDecoder::new(&mut store, "dec", &mut rng);
        let mut g = Graph::<f32>::no_grad();
        let f = g.constant(Tensor::zeros(&[2, 32, 16, 16]));
        let pe = g.constant(Tensor::zeros(&[32, 16, 16]));
        let dense = g.constant(Tensor::zeros(&[2, 32, 16, 16]));
        let sparse = g.constant(Tensor::zeros(&[2, 2, 32]));
        let y = dec.decode(&mut g, &store, f, pe, PromptVars { sparse, dense }).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 64, 64]);
        let first = g.value(y).data()[0];
        assert!(g.value(y).data().iter().all(|&v| v == first));
    }

    #[test]
    fn rejects_mismatched_prompts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = MaskDecoder::new(&mut store, "dec", &mut rng);
        let mut g = Graph::<f32>::no_grad();
        let f = g.constant(Tensor::zeros(&[1, 32, 16, 16]));
        let pe = g.constant(Tensor::zeros(&[32, 16, 16]));
        let dense = g.constant(Tensor::zeros(&[1, 32, 8, 8]));
        let sparse = g.constant(Tensor::zeros(&[1, 2, 32]));
        assert!(dec.decode(&mut g, &store, f, pe, PromptVars { sparse, dense }).is_err());
    }
}
