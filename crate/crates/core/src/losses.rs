//! Loss members, learned uncertainty weighting and the frozen distillation teacher.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{BoxPrompt, EMBED_DIM, ENCODER_STRIDE};
use crate::error::{shape_err, Error, Result};
use crate::graph::{floored_lambda, Graph, Var, LAMBDA_FLOOR, SD_EPS};
use crate::layers::Conv;
use crate::metrics::{shape_target_map, BinaryMask, SHAPE_D_MAX};
use crate::param::{ParamId, ParamStore};
use crate::prompt::{PromptEmbeddings, PromptVars, NUM_SPARSE_TOKENS};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMember {
    MseSparse,
    MseDense,
    Ce,
    Dice,
    Sd,
}

impl LossMember {
    pub const ALL: [LossMember; 5] =
        [LossMember::MseSparse, LossMember::MseDense, LossMember::Ce, LossMember::Dice, LossMember::Sd];

    pub fn name(self) -> &'static str {
        match self {
            LossMember::MseSparse => "mse_sparse",
            LossMember::MseDense => "mse_dense",
            LossMember::Ce => "ce",
            LossMember::Dice => "dice",
            LossMember::Sd => "sd",
        }
    }
}

/// Which loss families are active. `mse` covers both distillation members.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub ce: bool,
    pub dc: bool,
    pub sd: bool,
    pub mse: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { ce: true, dc: true, sd: true, mse: true }
    }
}

impl LossToggles {
    pub fn members(&self) -> Vec<LossMember> {
        let mut m = vec![];
        if self.mse {
            m.extend([LossMember::MseSparse, LossMember::MseDense]);
        }
        if self.ce {
            m.push(LossMember::Ce);
        }
        if self.dc {
            m.push(LossMember::Dice);
        }
        if self.sd {
            m.push(LossMember::Sd);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.members().is_empty() {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        Ok(())
    }

    /// Parses a comma list such as `CE,DC,SD,MSE` (case-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Self { ce: false, dc: false, sd: false, mse: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "CE" => t.ce = true,
                "DC" => t.dc = true,
                "SD" => t.sd = true,
                "MSE" => t.mse = true,
                other => return Err(Error::Config(format!("unknown loss {other:?}"))),
            }
        }
        t.validate()?;
        Ok(t)
    }

    pub fn label(&self) -> String {
        let mut parts = vec![];
        for (on, n) in [(self.ce, "CE"), (self.dc, "DC"), (self.sd, "SD"), (self.mse, "MSE")] {
            if on {
                parts.push(n);
            }
        }
        parts.join(",")
    }
}

/// One learned scalar λ per loss member, initialised to 1.
#[derive(Clone, Debug)]
pub struct UncertaintyWeights {
    pub lambdas: BTreeMap<LossMember, ParamId>,
}

impl UncertaintyWeights {
    pub fn new(store: &mut ParamStore, members: &[LossMember]) -> Self {
        let mut lambdas = BTreeMap::new();
        for &m in members {
            let id = store.add(format!("lambda.{}", m.name()), Tensor::full(&[1], 1.0));
            store.set_no_decay(id);
            lambdas.insert(m, id);
        }
        Self { lambdas }
    }

    pub fn values(&self, store: &ParamStore) -> BTreeMap<String, f64> {
        self.lambdas.iter().map(|(m, &id)| (m.name().to_string(), store.tensor(id).data()[0] as f64)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub raw: f64,
    /// `1 / (2λ²)`, or 1 without joint weighting.
    pub weight: f64,
    /// `ln(1 + λ²)`, or 0 without joint weighting.
    pub reg: f64,
}

/// One line of the per-step loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub members: BTreeMap<String, MemberReport>,
    pub total: f64,
    pub lambdas: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl LossReport {
    /// `|total − Σ(weight·raw + reg)|`.
    pub fn reduction_error(&self) -> f64 {
        let s: f64 = self.members.values().map(|m| m.weight * m.raw + m.reg).sum();
        (self.total - s).abs()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// `(MSE(P_s, P_s_ref), MSE(P_d, P_d_ref))`, each a mean over all elements.
pub fn mse_distill<T: Real>(g: &mut Graph<T>, student: PromptVars, teacher: &PromptEmbeddings) -> Result<(Var, Var)> {
    let ts = g.constant(teacher.sparse.cast());
    let td = g.constant(teacher.dense.cast());
    Ok((g.mse(student.sparse, ts)?, g.mse(student.dense, td)?))
}

pub fn dice_loss<T: Real>(g: &mut Graph<T>, probs: Var, gt: &Tensor<T>) -> Result<Var> {
    g.dice_loss(probs, gt)
}

pub fn ce_loss<T: Real>(g: &mut Graph<T>, probs: Var, gt: &Tensor<T>) -> Result<Var> {
    g.bce_loss(probs, gt)
}

/// Target maps `D` for a `[B,C,H,W]` binary tensor.
pub fn shape_targets<T: Real>(gt: &Tensor<T>) -> Result<Tensor<T>> {
    let s = gt.shape();
    if s.len() != 4 {
        return shape_err("shape_distance_loss", format!("expected [B,C,H,W], got {:?}", s));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(gt.len());
    for plane in gt.data().chunks(h * w) {
        let m = BinaryMask::from_plane(h, w, plane)?;
        out.extend(shape_target_map(&m, SHAPE_D_MAX).into_iter().map(T::of));
    }
    Tensor::new(s, out)
}

/// Shape-distance loss against precomputed targets `D`. Returns the loss and
/// whether any plane hit the `ε` floor on `Σ pred`.
pub fn shape_distance_loss<T: Real>(g: &mut Graph<T>, probs: Var, dmap: &Tensor<T>) -> Result<(Var, bool)> {
    let s = g.shape(probs).to_vec();
    let plane = s.iter().skip(2).product::<usize>().max(1);
    let degenerate = g.value(probs).data().chunks(plane).any(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() < SD_EPS);
    Ok((g.shape_distance_loss(probs, dmap)?, degenerate))
}

/// Combines members as `Σ L_j/(2λ_j²) + ln(1+λ_j²)` (joint) or `Σ L_j` (plain).
pub fn uncertainty_aggregate<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore,
    members: &[(LossMember, Var)],
    weights: &UncertaintyWeights,
    joint: bool,
    step: usize,
) -> Result<(Var, LossReport)> {
    if members.is_empty() {
        return Err(Error::Invalid("no loss members to aggregate".into()));
    }
    let mut report = LossReport {
        step,
        members: BTreeMap::new(),
        total: 0.0,
        lambdas: weights.values(store),
        warnings: vec![],
    };
    let mut total: Option<Var> = None;
    for &(m, l) in members {
        let raw = g.value(l).item().as_f64();
        let term = if joint {
            let id = *weights
                .lambdas
                .get(&m)
                .ok_or_else(|| Error::Invalid(format!("no λ registered for {}", m.name())))?;
            let lam_raw = store.tensor(id).data()[0] as f64;
            if lam_raw.abs() < LAMBDA_FLOOR {
                report.warnings.push(format!("lambda.{} = {lam_raw:e} clamped to the floor", m.name()));
            }
            let lam = floored_lambda(lam_raw);
            report.members.insert(
                m.name().into(),
                MemberReport { raw, weight: 1.0 / (2.0 * lam * lam), reg: (1.0 + lam * lam).ln() },
            );
            let lv = g.param(store, id);
            g.uncertainty_term(l, lv)?
        } else {
            report.members.insert(m.name().into(), MemberReport { raw, weight: 1.0, reg: 0.0 });
            l
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.expect("at least one member");
    report.total = g.value(total).item().as_f64();
    Ok((total, report))
}

/// Frozen stand-in for a pretrained box-prompt encoder: maps ground-truth
/// boxes to reference embeddings.
#[derive(Clone, Debug)]
pub struct Teacher {
    sparse_bias: ParamId,
    dense: Conv,
}

impl Teacher {
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.sparse_bias, self.dense.w, self.dense.b]
    }

    /// Reference embeddings for boxes on an `h × w` image.
    pub fn embed(&self, store: &ParamStore, boxes: &[BoxPrompt], h: usize, w: usize) -> Result<PromptEmbeddings> {
        let (h_e, w_e, c) = (h / ENCODER_STRIDE, w / ENCODER_STRIDE, EMBED_DIM);
        let n = boxes.len();
        let bias = store.tensor(self.sparse_bias).data();
        let mut sparse = Vec::with_capacity(n * NUM_SPARSE_TOKENS * c);
        let mut cover = Vec::with_capacity(n * h_e * w_e);
        for b in boxes {
            b.validate(h, w)?;
            sparse.extend(b.corner_encodings(h_e, w_e, c).iter().zip(bias).map(|(&p, &q)| p as f32 + q));
            cover.extend(b.coverage(h_e, w_e).into_iter().map(|v| v as f32));
        }
        let mut g = Graph::<f32>::no_grad();
        let x = g.constant(Tensor::new(&[n, 1, h_e, w_e], cover)?);
        let d = self.dense.forward(&mut g, store, x)?;
        Ok(PromptEmbeddings { sparse: Tensor::new(&[n, NUM_SPARSE_TOKENS, c], sparse)?, dense: g.value(d).clone() })
    }
}

/// A frozen teacher drawn from `seed`.
pub fn make_teacher(store: &mut ParamStore, seed: u64) -> Teacher {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sparse_bias = store.add("teacher.sparse_bias", Tensor::randn(&[NUM_SPARSE_TOKENS * EMBED_DIM], 0.5, &mut rng));
    let dense = Conv::new(store, "teacher.dense", 1, EMBED_DIM, 3, 1, &mut rng);
    let bias = Tensor::randn(&[EMBED_DIM], 0.2, &mut rng);
    store.set_value(dense.b, bias).expect("teacher bias shape");
    store.freeze(sparse_bias);
    dense.freeze(store);
    Teacher { sparse_bias, dense }
}
