//! Class-conditioned diffusion prompt encoder.
//!
//! A class index is projected to a spatial map and added, together with
//! Gaussian noise, to the image embedding. One convolutional encoder then
//! feeds two decoders: a dense branch gated element-wise by an attention map
//! and a sparse branch gated per channel, which ends in two tokens.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::EMBED_DIM;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{tile_rows, Conv, Dense, Up};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sparse tokens per prompt.
pub const NUM_SPARSE_TOKENS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrompt {
    pub class_id: usize,
    pub one_hot: Tensor,
}

impl ClassPrompt {
    pub fn new(class_id: usize, num_classes: usize) -> Result<Self> {
        if class_id >= num_classes {
            return Err(Error::Invalid(format!("class {class_id} outside [0, {num_classes})")));
        }
        let mut one_hot = Tensor::zeros(&[num_classes]);
        one_hot.data_mut()[class_id] = 1.0;
        Ok(Self { class_id, one_hot })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Noise standard deviation is `σ_t`.
    Std,
    /// Noise variance is `σ_t`.
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub variance_mode: VarianceMode,
    /// When off, the encoder sees the clean embedding: no noise and no class map.
    pub enabled: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 10, variance_mode: VarianceMode::Std, enabled: true }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("diffusion steps must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn inference_t(&self) -> usize {
        self.steps - 1
    }

    /// Standard deviation of the noise injected at step `t`.
    pub fn noise_std(&self, t: usize) -> f64 {
        let s = 1.0 / (t as f64 + 1.0);
        match self.variance_mode {
            VarianceMode::Std => s,
            VarianceMode::Variance => s.sqrt(),
        }
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.steps)
    }
}

/// `σ_t = 1 / (t + 1)`.
pub fn noise_schedule(t: i64) -> Result<f64> {
    if t < 0 {
        return Err(Error::Invalid(format!("diffusion step must be ≥ 0, got {t}")));
    }
    Ok(1.0 / (t as f64 + 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Dense,
    Sparse,
    Both,
}

/// Replaces a learned gate with a fixed one (diagnostics and tests).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Gate {
    #[default]
    Learned,
    Ones,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Random `t` and Gaussian noise.
    Train,
    /// Noise-free, deterministic.
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub struct PromptOptions {
    pub branch_mode: BranchMode,
    pub dense_gate: Gate,
    pub sparse_gate: Gate,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { branch_mode: BranchMode::Both, dense_gate: Gate::Learned, sparse_gate: Gate::Learned }
    }
}

/// Prompt embeddings recorded on a graph: `sparse [B,2,C]`, `dense [B,C,H_e,W_e]`.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub sparse: Var,
    pub dense: Var,
}

/// Prompt embeddings as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbeddings {
    pub sparse: Tensor,
    pub dense: Tensor,
}

impl PromptEmbeddings {
    pub fn from_vars<T: Real>(g: &Graph<T>, v: PromptVars) -> Self {
        Self { sparse: g.value(v.sparse).cast(), dense: g.value(v.dense).cast() }
    }
}

/// Upsample, concatenate the encoder map of the same extent, convolve.
/// Both branches share this layout with separate weights.
#[derive(Clone, Debug)]
pub struct BranchDecoder {
    fuse4: Conv,
    up8: Up,
    fuse8: Conv,
    up16: Up,
    fuse16: Conv,
    out: Conv,
}

impl BranchDecoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            fuse4: Conv::new(store, &format!("{name}.fuse4"), 2 * c, c, 3, 1, rng),
            up8: Up::new(store, &format!("{name}.up8"), c, c, rng),
            fuse8: Conv::new(store, &format!("{name}.fuse8"), 2 * c, c, 3, 1, rng),
            up16: Up::new(store, &format!("{name}.up16"), c, c / 2, rng),
            fuse16: Conv::new(store, &format!("{name}.fuse16"), c / 2 + c, c / 2, 3, 1, rng),
            out: Conv::new(store, &format!("{name}.out"), c / 2, c, 1, 1, rng),
        }
    }

    /// `gated` and `feats[1]` live at the deepest extent, `feats[0]` one level up, `f_t` at full embedding extent.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        gated: Var,
        feats: &[Var],
        f_t: Var,
    ) -> Result<Var> {
        let x = g.concat_channels(gated, feats[1])?;
        let x = self.fuse4.forward_relu(g, store, x)?;
        let x = self.up8.forward(g, store, x)?;
        let x = g.concat_channels(x, feats[0])?;
        let x = self.fuse8.forward_relu(g, store, x)?;
        let x = self.up16.forward(g, store, x)?;
        let x = g.concat_channels(x, f_t)?;
        let x = self.fuse16.forward_relu(g, store, x)?;
        self.out.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub num_classes: usize,
    pub c_e: usize,
    pub h_e: usize,
    pub w_e: usize,
    pub diffusion: DiffusionConfig,
    class_proj: Dense,
    class_token: Dense,
    enc: [Conv; 3],
    dense_att: Conv,
    dense_dec: BranchDecoder,
    sparse_att: Conv,
    sparse_dec: BranchDecoder,
    sparse_head: Dense,
    /// Stand-ins used when a branch is ablated.
    no_sparse: ParamId,
    no_dense: ParamId,
}

impl PromptEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_classes: usize,
        h_e: usize,
        w_e: usize,
        diffusion: DiffusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        diffusion.validate()?;
        if num_classes == 0 || h_e % 4 != 0 || w_e % 4 != 0 {
            return Err(Error::Config(format!("prompt encoder needs K ≥ 1 and extents divisible by 4, got K={num_classes}, {h_e}×{w_e}")));
        }
        let c = EMBED_DIM;
        let deep = (h_e / 4) * (w_e / 4);
        Ok(Self {
            num_classes,
            c_e: c,
            h_e,
            w_e,
            diffusion,
            class_proj: Dense::new(store, "prompt.class_proj", num_classes, h_e * w_e, rng),
            class_token: Dense::new(store, "prompt.class_token", num_classes, deep, rng),
            enc: [
                Conv::new(store, "prompt.enc0", c, c, 3, 2, rng),
                Conv::new(store, "prompt.enc1", c, c, 3, 2, rng),
                Conv::new(store, "prompt.enc2", c, c, 3, 1, rng),
            ],
            dense_att: Conv::new(store, "prompt.dense.att", c + 1, c, 3, 1, rng),
            dense_dec: BranchDecoder::new(store, "prompt.dense.dec", c, rng),
            sparse_att: Conv::new(store, "prompt.sparse.att", c + 1, c, 1, 1, rng),
            sparse_dec: BranchDecoder::new(store, "prompt.sparse.dec", c, rng),
            sparse_head: Dense::new(store, "prompt.sparse.head", c, NUM_SPARSE_TOKENS * c, rng),
            no_sparse: store.add_zeros("prompt.no_sparse", &[1, NUM_SPARSE_TOKENS * c]),
            no_dense: store.add_zeros("prompt.no_dense", &[1, c]),
        })
    }

    fn one_hot<T: Real>(&self, g: &mut Graph<T>, classes: &[usize]) -> Result<Var> {
        let k = self.num_classes;
        let mut data = vec![T::zero(); classes.len() * k];
        for (i, &c) in classes.iter().enumerate() {
            if c >= k {
                return Err(Error::Invalid(format!("class {c} outside [0, {k})")));
            }
            data[i * k + c] = T::one();
        }
        Ok(g.constant(Tensor::new(&[classes.len(), k], data)?))
    }

    /// `c_expand`: the class projected to one `[B,1,H_e,W_e]` map.
    pub fn project_class<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, classes: &[usize]) -> Result<Var> {
        let oh = self.one_hot(g, classes)?;
        let p = self.class_proj.forward(g, store, oh)?;
        g.reshape(p, &[classes.len(), 1, self.h_e, self.w_e])
    }

    /// `c_p` for the deepest encoder level, `[B,1,H_e/4,W_e/4]`.
    pub fn class_map_deep<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, classes: &[usize]) -> Result<Var> {
        let oh = self.one_hot(g, classes)?;
        let p = self.class_token.forward(g, store, oh)?;
        g.reshape(p, &[classes.len(), 1, self.h_e / 4, self.w_e / 4])
    }

    /// `F_t = F_I + ε + c_expand` with `ε` i.i.d. per element at the std of each
    /// sample's step; `rng = None` injects no noise.
    pub fn forward_diffuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        f_i: Var,
        c_expand: Var,
        t: &[usize],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let shape = g.shape(f_i).to_vec();
        if shape.len() != 4 || shape[0] != t.len() {
            return shape_err("forward_diffuse", format!("F_I {:?} with {} steps", shape, t.len()));
        }
        let x = match rng {
            Some(rng) => {
                let per = shape[1..].iter().product::<usize>();
                let mut eps = Vec::with_capacity(shape[0] * per);
                for &tb in t {
                    let std = self.diffusion.noise_std(tb);
                    for _ in 0..per {
                        let z: f64 = StandardNormal.sample(rng);
                        eps.push(T::of(std * z));
                    }
                }
                let eps = g.constant(Tensor::new(&shape, eps)?);
                g.add(f_i, eps)?
            }
            None => f_i,
        };
        g.add_channel_map(x, c_expand)
    }

    /// The three encoder stages; every intermediate map is kept for skips.
    pub fn encode_features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, f_t: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(3);
        let mut x = f_t;
        for stage in &self.enc {
            x = stage.forward_relu(g, store, x)?;
            feats.push(x);
        }
        Ok(feats)
    }

    fn check_feats(feats: &[Var]) -> Result<()> {
        if feats.len() != 3 {
            return shape_err("prompt branch", format!("expected 3 encoder maps, got {}", feats.len()));
        }
        Ok(())
    }

    /// `P_d`: `A = ReLU(conv([F_enc ⊕ c_p]))`, `F' = F_enc ⊙ A`, then decoded.
    pub fn dense_branch<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        feats: &[Var],
        c_p: Var,
        f_t: Var,
        gate: Gate,
    ) -> Result<Var> {
        Self::check_feats(feats)?;
        let gated = self.dense_gated(g, store, feats[2], c_p, gate)?;
        self.dense_dec.forward(g, store, gated, feats, f_t)
    }

    /// The deepest map after gating in the dense branch; exposed for tests.
    pub fn dense_gated<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        deep: Var,
        c_p: Var,
        gate: Gate,
    ) -> Result<Var> {
        match gate {
            Gate::Learned => {
                let cat = g.concat_channels(deep, c_p)?;
                let a = self.dense_att.forward_relu(g, store, cat)?;
                g.mul(deep, a)
            }
            Gate::Ones => Ok(deep),
            Gate::Zeros => g.scale(deep, 0.0),
        }
    }

    /// Channel attention `sigmoid(conv1×1(pool([F_enc ⊕ c_p])))`, `[B, C]`.
    pub fn sparse_attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        deep: Var,
        c_p: Var,
    ) -> Result<Var> {
        let b = g.shape(deep)[0];
        let cat = g.concat_channels(deep, c_p)?;
        let pooled = g.adaptive_avg_pool(cat)?;
        let a = self.sparse_att.forward(g, store, pooled)?;
        let a = g.sigmoid(a)?;
        g.reshape(a, &[b, self.c_e])
    }

    /// `P_s`: channel-gated deepest map, decoded, pooled and projected to two tokens.
    pub fn sparse_branch<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        feats: &[Var],
        c_p: Var,
        f_t: Var,
        gate: Gate,
    ) -> Result<Var> {
        Self::check_feats(feats)?;
        let deep = feats[2];
        let b = g.shape(deep)[0];
        let gated = match gate {
            Gate::Learned => {
                let a = self.sparse_attention(g, store, deep, c_p)?;
                g.scale_channels(deep, a)?
            }
            Gate::Ones => deep,
            Gate::Zeros => g.scale(deep, 0.0)?,
        };
        let dec = self.sparse_dec.forward(g, store, gated, feats, f_t)?;
        let pooled = g.adaptive_avg_pool(dec)?;
        let pooled = g.reshape(pooled, &[b, self.c_e])?;
        let tokens = self.sparse_head.forward(g, store, pooled)?;
        g.reshape(tokens, &[b, NUM_SPARSE_TOKENS, self.c_e])
    }

    /// Learned constant tokens standing in for an ablated sparse branch.
    pub fn constant_sparse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, batch: usize) -> Result<Var> {
        let t = tile_rows(g, store, self.no_sparse, batch)?;
        g.reshape(t, &[batch, NUM_SPARSE_TOKENS, self.c_e])
    }

    /// Learned per-channel constant map standing in for an ablated dense branch.
    pub fn constant_dense<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, batch: usize) -> Result<Var> {
        let v = tile_rows(g, store, self.no_dense, batch)?;
        let v = g.reshape(v, &[batch * self.c_e])?;
        let zeros = g.constant(Tensor::zeros(&[batch, self.c_e, self.h_e, self.w_e]));
        g.add_channel_bias(zeros, v)
    }

    /// Full composition from `F_I` and per-sample classes to prompt embeddings.
    /// Train mode draws `t` and noise from `rng`; infer mode uses neither.
    pub fn encode_prompts<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        f_i: Var,
        classes: &[usize],
        mode: Mode,
        rng: &mut dyn RngCore,
        opts: &PromptOptions,
    ) -> Result<PromptVars> {
        let b = classes.len();
        let f_t = if self.diffusion.enabled {
            let c_expand = self.project_class(g, store, classes)?;
            match mode {
                Mode::Train => {
                    let t: Vec<usize> = classes.iter().map(|_| self.diffusion.sample_t(rng)).collect();
                    self.forward_diffuse(g, f_i, c_expand, &t, Some(rng))?
                }
                Mode::Infer => {
                    let t = vec![self.diffusion.inference_t(); b];
                    self.forward_diffuse(g, f_i, c_expand, &t, None)?
                }
            }
        } else {
            f_i
        };
        let feats = self.encode_features(g, store, f_t)?;
        let c_p = self.class_map_deep(g, store, classes)?;
        let dense = match opts.branch_mode {
            BranchMode::Dense | BranchMode::Both => self.dense_branch(g, store, &feats, c_p, f_t, opts.dense_gate)?,
            BranchMode::Sparse => self.constant_dense(g, store, b)?,
        };
        let sparse = match opts.branch_mode {
            BranchMode::Sparse | BranchMode::Both => {
                self.sparse_branch(g, store, &feats, c_p, f_t, opts.sparse_gate)?
            }
            BranchMode::Dense => self.constant_sparse(g, store, b)?,
        };
        Ok(PromptVars { sparse, dense })
    }

    /// Every parameter this encoder owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.class_proj.w,
            self.class_proj.b,
            self.class_token.w,
            self.class_token.b,
            self.dense_att.w,
            self.dense_att.b,
            self.sparse_att.w,
            self.sparse_att.b,
            self.sparse_head.w,
            self.sparse_head.b,
            self.no_sparse,
            self.no_dense,
        ];
        for c in &self.enc {
            ids.extend([c.w, c.b]);
        }
        for d in [&self.dense_dec, &self.sparse_dec] {
            ids.extend([d.fuse4.w, d.fuse4.b, d.up8.w, d.up8.b, d.fuse8.w, d.fuse8.b]);
            ids.extend([d.up16.w, d.up16.b, d.fuse16.w, d.fuse16.b, d.out.w, d.out.b]);
        }
        ids
    }

    /// Parameters of the two projections from the class one-hot.
    pub fn class_param_ids(&self) -> [ParamId; 4] {
        [self.class_proj.w, self.class_proj.b, self.class_token.w, self.class_token.b]
    }
}
