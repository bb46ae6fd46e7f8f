//! Training configuration, prepared data, the training loop, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{binarize, DEFAULT_THRESHOLD};
use crate::encoders::BoxPrompt;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    ce_loss, dice_loss, mse_distill, shape_targets, shape_distance_loss, uncertainty_aggregate, LossMember,
    LossReport, LossToggles,
};
use crate::metrics::{evaluate_batch, BinaryMask, MetricReport, DEFAULT_TAU};
use crate::model::{ModelConfig, PromptKind, SegModel};
use crate::optim::{AdamState, AdamW, Plateau};
use crate::param::ParamId;
use crate::phantom::PhantomSample;
use crate::prompt::{BranchMode, DiffusionConfig, Mode, PromptEmbeddings, PromptOptions, VarianceMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub cooldown: usize,
    pub seed: u64,
    pub loss_toggles: LossToggles,
    pub joint_optimization: bool,
    pub branch_mode: BranchMode,
    pub diffusion_enabled: bool,
    pub diffusion_steps: usize,
    pub variance_mode: VarianceMode,
    pub prompt_kind: PromptKind,
    /// Box mode: each training box edge grows outward by up to this many pixels.
    pub box_jitter: usize,
    pub tau: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 100,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            plateau_factor: 0.9,
            plateau_patience: 5,
            cooldown: 0,
            seed: 0,
            loss_toggles: LossToggles::default(),
            joint_optimization: true,
            branch_mode: BranchMode::Both,
            diffusion_enabled: true,
            diffusion_steps: 10,
            variance_mode: VarianceMode::Std,
            prompt_kind: PromptKind::Class,
            box_jitter: 5,
            tau: DEFAULT_TAU,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "batch_size",
        "epochs",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "plateau_factor",
        "plateau_patience",
        "cooldown",
        "seed",
        "loss_toggles",
        "joint_optimization",
        "branch_mode",
        "diffusion_enabled",
        "diffusion_steps",
        "variance_mode",
        "prompt_kind",
        "box_jitter",
        "tau",
        "threshold",
    ];

    /// Sets one field from its textual form. Unknown keys are a config error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "eps" => self.eps = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "plateau_factor" => self.plateau_factor = parse_num(key, v)?,
            "plateau_patience" => self.plateau_patience = parse_num(key, v)?,
            "cooldown" => self.cooldown = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "loss_toggles" => {
                self.loss_toggles = LossToggles::parse(v).map_err(|e| Error::Config(format!("{key}: {e}")))?
            }
            "joint_optimization" => self.joint_optimization = parse_bool(key, v)?,
            "branch_mode" => {
                self.branch_mode = match v.to_ascii_lowercase().as_str() {
                    "dense" => BranchMode::Dense,
                    "sparse" => BranchMode::Sparse,
                    "both" => BranchMode::Both,
                    _ => return Err(Error::Config(format!("{key}: expected dense|sparse|both, got {v:?}"))),
                }
            }
            "diffusion_enabled" => self.diffusion_enabled = parse_bool(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse_num(key, v)?,
            "variance_mode" => {
                self.variance_mode = match v.to_ascii_lowercase().as_str() {
                    "std" => VarianceMode::Std,
                    "variance" => VarianceMode::Variance,
                    _ => return Err(Error::Config(format!("{key}: expected std|variance, got {v:?}"))),
                }
            }
            "prompt_kind" => {
                self.prompt_kind = match v.to_ascii_lowercase().as_str() {
                    "class" => PromptKind::Class,
                    "box" => PromptKind::Box,
                    _ => return Err(Error::Config(format!("{key}: expected class|box, got {v:?}"))),
                }
            }
            "box_jitter" => self.box_jitter = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let branch = match self.branch_mode {
            BranchMode::Dense => "dense",
            BranchMode::Sparse => "sparse",
            BranchMode::Both => "both",
        };
        let variance = match self.variance_mode {
            VarianceMode::Std => "std",
            VarianceMode::Variance => "variance",
        };
        let kind = match self.prompt_kind {
            PromptKind::Class => "class",
            PromptKind::Box => "box",
        };
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("cooldown", self.cooldown.to_string()),
            ("seed", self.seed.to_string()),
            ("loss_toggles", self.loss_toggles.label()),
            ("joint_optimization", self.joint_optimization.to_string()),
            ("branch_mode", branch.into()),
            ("diffusion_enabled", self.diffusion_enabled.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("variance_mode", variance.into()),
            ("prompt_kind", kind.into()),
            ("box_jitter", self.box_jitter.to_string()),
            ("tau", self.tau.to_string()),
            ("threshold", self.threshold.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs < 1 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay ≥ 0".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.diffusion_steps < 1 {
            return bad("diffusion_steps must be ≥ 1".into());
        }
        if self.tau < 0.0 {
            return bad("tau must be ≥ 0".into());
        }
        self.loss_toggles.validate()?;
        if self.prompt_kind == PromptKind::Box && self.members().is_empty() {
            return bad("box prompts need at least one of CE, DC, SD".into());
        }
        Ok(())
    }

    /// Active loss members; distillation targets class prompts only.
    pub fn members(&self) -> Vec<LossMember> {
        let mut m = self.loss_toggles.members();
        if self.prompt_kind == PromptKind::Box {
            m.retain(|x| !matches!(x, LossMember::MseSparse | LossMember::MseDense));
        }
        m
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig { steps: self.diffusion_steps, variance_mode: self.variance_mode, enabled: self.diffusion_enabled }
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions { branch_mode: self.branch_mode, ..PromptOptions::default() }
    }
}

/// Everything a step needs about one (sample, class) pair, computed once.
#[derive(Clone, Debug)]
pub struct ClassTarget {
    pub class_id: usize,
    pub mask: BinaryMask,
    /// `[1, H, W]`.
    pub gt: Tensor,
    /// Shape-distance targets, `[1, H, W]`.
    pub dmap: Tensor,
    pub bbox: BoxPrompt,
    /// Reference prompt embeddings for the tight box, batch of one.
    pub teacher: Option<PromptEmbeddings>,
}

#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: usize,
    /// `F_I`, `[C_e, H_e, W_e]`.
    pub f_i: Tensor,
    /// Classes with a non-empty mask.
    pub targets: Vec<ClassTarget>,
}

/// Encodes images once with the frozen encoder and derives per-class targets.
pub fn prepare(model: &SegModel, samples: &[PhantomSample], with_teacher: bool) -> Result<Vec<PreparedSample>> {
    let cfg = &model.config;
    samples
        .par_iter()
        .map(|s| {
            if s.height() != cfg.height || s.width() != cfg.width || s.masks.shape()[0] != cfg.num_classes {
                return Err(Error::Incompatible(format!(
                    "sample {} is {}×{} with {} classes, model expects {}×{} with {}",
                    s.index,
                    s.height(),
                    s.width(),
                    s.masks.shape()[0],
                    cfg.height,
                    cfg.width,
                    cfg.num_classes
                )));
            }
            let (h, w) = (cfg.height, cfg.width);
            let img = s.image.reshape(&[1, 3, h, w])?;
            let f_i = model.encode_images(&img)?.index_batch(0)?;
            let mut targets = vec![];
            for &c in &s.class_ids {
                let mask = s.mask(c);
                let Some(bbox) = BoxPrompt::from_mask(&mask) else { continue };
                let gt: Tensor = mask.to_tensor::<f32>().reshape(&[1, h, w])?;
                let dmap = shape_targets(&gt.reshape(&[1, 1, h, w])?)?.reshape(&[1, h, w])?;
                let teacher = if with_teacher { Some(model.teacher.embed(&model.store, &[bbox], h, w)?) } else { None };
                targets.push(ClassTarget { class_id: c, mask, gt, dmap, bbox, teacher });
            }
            Ok(PreparedSample { sample_id: s.index, f_i, targets })
        })
        .collect()
}

/// SHA-256 over images and masks of the given splits, in order.
pub fn dataset_hash(splits: &[&[PhantomSample]]) -> String {
    let mut h = Sha256::new();
    for split in splits {
        h.update((split.len() as u64).to_le_bytes());
        for s in split.iter() {
            h.update(s.image.to_atsr_bytes());
            h.update(s.masks.to_atsr_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Where the box prompt for an evaluation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxOffset {
    Pixels(usize),
    ImageBoundary,
}

impl BoxOffset {
    pub fn label(&self) -> String {
        match self {
            BoxOffset::Pixels(p) => p.to_string(),
            BoxOffset::ImageBoundary => "Image Boundary".into(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Prompting {
    Class(PromptOptions),
    Box(BoxOffset),
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub prompting: Prompting,
    pub threshold: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Restrict to these class ids; `None` keeps all.
    pub classes: Option<Vec<usize>>,
}

/// Inference over every (sample, class) pair, parallel across batches.
pub fn evaluate(model: &SegModel, data: &[PreparedSample], opts: &EvalOptions) -> Result<MetricReport> {
    let (h, w) = (model.config.height, model.config.width);
    let pairs: Vec<(&PreparedSample, &ClassTarget)> = data
        .iter()
        .flat_map(|s| s.targets.iter().map(move |t| (s, t)))
        .filter(|(_, t)| opts.classes.as_ref().is_none_or(|cs| cs.contains(&t.class_id)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let preds: Vec<Vec<BinaryMask>> = pairs
        .par_chunks(opts.batch_size.max(1))
        .map(|chunk| {
            let f_i = Tensor::stack(&chunk.iter().map(|(s, _)| s.f_i.clone()).collect::<Vec<_>>())?;
            let logits = match opts.prompting {
                Prompting::Class(p) => {
                    let classes: Vec<usize> = chunk.iter().map(|(_, t)| t.class_id).collect();
                    model.predict_class(&f_i, &classes, &p)?
                }
                Prompting::Box(off) => {
                    let boxes: Vec<BoxPrompt> = chunk
                        .iter()
                        .map(|(_, t)| match off {
                            BoxOffset::Pixels(p) => t.bbox.dilate(p, h, w),
                            BoxOffset::ImageBoundary => BoxPrompt::image_boundary(h, w),
                        })
                        .collect();
                    model.predict_box(&f_i, &boxes)?
                }
            };
            let bin = binarize(&logits, opts.threshold);
            bin.data().chunks(h * w).map(|p| BinaryMask::from_plane(h, w, p)).collect()
        })
        .collect::<Result<_>>()?;
    let preds: Vec<BinaryMask> = preds.into_iter().flatten().collect();
    let gts: Vec<BinaryMask> = pairs.iter().map(|(_, t)| t.mask.clone()).collect();
    let classes: Vec<usize> = pairs.iter().map(|(_, t)| t.class_id).collect();
    let ids: Vec<usize> = pairs.iter().map(|(s, _)| s.sample_id).collect();
    evaluate_batch(&preds, &gts, &classes, &ids, opts.tau)
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub next_lr: f64,
    pub mean_loss: f64,
    pub eval: MetricReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal text of the 128-bit word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Format("rng word_pos".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

const DATA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub struct Trainer {
    pub model: SegModel,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub scheduler: Plateau,
    pub lr: f64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
    /// Drives data order and class choice only, so variants that differ in
    /// model or loss still see identical batches.
    data_rng: ChaCha8Rng,
    /// Diffusion steps and noise.
    noise_rng: ChaCha8Rng,
    /// Chained digest of every (sample, class) batch drawn so far.
    order_digest: [u8; 32],
    pub dataset_hash: String,
    pub best_dsc: Option<f64>,
    train: Vec<PreparedSample>,
    val: Vec<PreparedSample>,
    trainable: Vec<ParamId>,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &[PhantomSample], val: &[PhantomSample]) -> Result<Self> {
        config.validate()?;
        let first = train.first().ok_or_else(|| Error::Invalid("training split is empty".into()))?;
        if val.is_empty() {
            return Err(Error::Invalid("validation split is empty".into()));
        }
        let model = SegModel::new(ModelConfig {
            num_classes: first.masks.shape()[0],
            height: first.height(),
            width: first.width(),
            diffusion: config.diffusion(),
            init_seed: config.seed,
        })?;
        Self::with_model(model, config, train, val)
    }

    fn with_model(model: SegModel, config: TrainConfig, train: &[PhantomSample], val: &[PhantomSample]) -> Result<Self> {
        let dataset_hash = dataset_hash(&[train, val]);
        let train_p = prepare(&model, train, config.prompt_kind == PromptKind::Class)?;
        let val_p = prepare(&model, val, false)?;
        if train_p.iter().all(|s| s.targets.is_empty()) {
            return Err(Error::Invalid("no training sample has a non-empty mask".into()));
        }
        let trainable = model.trainable_for(config.prompt_kind);
        Ok(Self {
            optimizer: AdamW::new(config.beta1, config.beta2, config.eps, config.weight_decay),
            scheduler: Plateau::new(config.plateau_factor, config.plateau_patience, config.cooldown),
            lr: config.lr,
            epoch: 0,
            step: 0,
            data_rng: seeded(config.seed, DATA_STREAM),
            noise_rng: seeded(config.seed, NOISE_STREAM),
            order_digest: [0; 32],
            dataset_hash,
            best_dsc: None,
            train: train_p,
            val: val_p,
            trainable,
            model,
            config,
        })
    }

    pub fn order_hash(&self) -> String {
        hex::encode(self.order_digest)
    }

    pub fn val_data(&self) -> &[PreparedSample] {
        &self.val
    }

    /// The batches of the next epoch as `(train index, class id)` pairs.
    fn draw_epoch(&mut self) -> Vec<Vec<(usize, usize)>> {
        let mut order: Vec<usize> = (0..self.train.len()).filter(|&i| !self.train[i].targets.is_empty()).collect();
        order.shuffle(&mut self.data_rng);
        let pairs: Vec<(usize, usize)> = order
            .into_iter()
            .map(|i| {
                let k = self.data_rng.random_range(0..self.train[i].targets.len());
                (i, k)
            })
            .collect();
        pairs.chunks(self.config.batch_size).map(|c| c.to_vec()).collect()
    }

    fn abort(&self, batch: &[(usize, usize)], detail: String) -> Error {
        let items: Vec<String> = batch
            .iter()
            .map(|&(i, k)| format!("{}:{}", self.train[i].sample_id, self.train[i].targets[k].class_id))
            .collect();
        Error::NumericAbort { step: self.step, detail: format!("{detail}; batch (sample:class) [{}]", items.join(", ")) }
    }

    /// One optimiser step on `(train index, target index)` pairs.
    pub fn train_step(&mut self, batch: &[(usize, usize)]) -> Result<LossReport> {
        let mut h = Sha256::new();
        h.update(self.order_digest);
        for &(i, k) in batch {
            h.update((self.train[i].sample_id as u64).to_le_bytes());
            h.update((self.train[i].targets[k].class_id as u64).to_le_bytes());
        }
        self.order_digest = h.finalize().into();

        match self.forward_backward(batch) {
            Ok(report) => {
                self.optimizer.step(&mut self.model.store, &self.trainable, self.lr);
                self.model.store.zero_grad();
                self.step += 1;
                let lambdas = self.model.weights.values(&self.model.store);
                if let Some((n, v)) = lambdas.iter().find(|(_, v)| !v.is_finite()) {
                    return Err(self.abort(batch, format!("lambda.{n} became {v}")));
                }
                Ok(report)
            }
            Err(e @ Error::NonFinite { .. }) => {
                self.model.store.zero_grad();
                Err(self.abort(batch, e.to_string()))
            }
            Err(e) => {
                self.model.store.zero_grad();
                Err(e)
            }
        }
    }

    fn forward_backward(&mut self, batch: &[(usize, usize)]) -> Result<LossReport> {
        let items: Vec<(&PreparedSample, &ClassTarget)> =
            batch.iter().map(|&(i, k)| (&self.train[i], &self.train[i].targets[k])).collect();
        let f_i = Tensor::stack(&items.iter().map(|(s, _)| s.f_i.clone()).collect::<Vec<_>>())?;
        let gt = Tensor::stack(&items.iter().map(|(_, t)| t.gt.clone()).collect::<Vec<_>>())?;
        let dmap = Tensor::stack(&items.iter().map(|(_, t)| t.dmap.clone()).collect::<Vec<_>>())?;
        let model = &self.model;
        let mut g = Graph::<f32>::new();
        let fv = g.constant(f_i);
        let (prompts, logits) = match self.config.prompt_kind {
            PromptKind::Class => {
                let classes: Vec<usize> = items.iter().map(|(_, t)| t.class_id).collect();
                let opts = self.config.prompt_options();
                let (p, l) = model.forward_class(&mut g, fv, &classes, Mode::Train, &mut self.noise_rng, &opts)?;
                (Some(p), l)
            }
            PromptKind::Box => {
                let (h, w) = (model.config.height, model.config.width);
                let j = self.config.box_jitter;
                let boxes: Vec<BoxPrompt> = items
                    .iter()
                    .map(|(_, t)| if j == 0 { t.bbox } else { t.bbox.jitter(j, h, w, &mut self.noise_rng) })
                    .collect();
                (None, model.forward_box(&mut g, fv, &boxes)?)
            }
        };
        let probs = g.sigmoid(logits)?;
        let mut members = vec![];
        let mut degenerate = false;
        for m in self.config.members() {
            match m {
                LossMember::MseSparse => {
                    let Some(p) = prompts else { continue };
                    let teacher = stack_teacher(&items)?;
                    let (ls, ld) = mse_distill(&mut g, p, &teacher)?;
                    members.push((LossMember::MseSparse, ls));
                    members.push((LossMember::MseDense, ld));
                }
                LossMember::MseDense => {}
                LossMember::Ce => members.push((m, ce_loss(&mut g, probs, &gt)?)),
                LossMember::Dice => members.push((m, dice_loss(&mut g, probs, &gt)?)),
                LossMember::Sd => {
                    let (l, d) = shape_distance_loss(&mut g, probs, &dmap)?;
                    degenerate |= d;
                    members.push((m, l));
                }
            }
        }
        let (total, mut report) = uncertainty_aggregate(
            &mut g,
            &model.store,
            &members,
            &model.weights,
            self.config.joint_optimization,
            self.step,
        )?;
        if degenerate {
            report.warnings.push("shape-distance denominator hit its floor".into());
        }
        if !report.total.is_finite() || report.members.values().any(|m| !m.raw.is_finite()) {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        g.backward(total, &mut self.model.store)?;
        Ok(report)
    }

    pub fn eval_options(&self) -> EvalOptions {
        let prompting = match self.config.prompt_kind {
            PromptKind::Class => Prompting::Class(self.config.prompt_options()),
            PromptKind::Box => Prompting::Box(BoxOffset::Pixels(0)),
        };
        EvalOptions {
            prompting,
            threshold: self.config.threshold,
            tau: self.config.tau,
            batch_size: self.config.batch_size,
            classes: None,
        }
    }

    pub fn evaluate(&self) -> Result<MetricReport> {
        evaluate(&self.model, &self.val, &self.eval_options())
    }

    /// Trains one epoch, evaluates on the held-out split and updates the learning rate.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&LossReport)) -> Result<EpochSummary> {
        let start = Instant::now();
        let lr = self.lr;
        let batches = self.draw_epoch();
        let mut loss_sum = 0.0;
        for b in &batches {
            let report = self.train_step(b)?;
            loss_sum += report.total;
            on_step(&report);
        }
        let eval = self.evaluate()?;
        self.lr = self.scheduler.step(self.lr, eval.mean_dsc)?;
        self.epoch += 1;
        if self.best_dsc.is_none_or(|b| eval.mean_dsc > b) {
            self.best_dsc = Some(eval.mean_dsc);
        }
        Ok(EpochSummary {
            epoch: self.epoch,
            steps: batches.len(),
            lr,
            next_lr: self.lr,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            eval,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochSummary) -> Result<()>) -> Result<Vec<EpochSummary>> {
        let mut out = vec![];
        while self.epoch < self.config.epochs {
            let s = self.run_epoch(|_| {})?;
            on_epoch(self, &s)?;
            out.push(s);
        }
        Ok(out)
    }

    /// Writes parameters, moments and loop state under `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let blobs = dir.join("blobs");
        fs::create_dir_all(&blobs)?;
        let mut params = vec![];
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            let file = format!("blobs/p{i:03}.atsr");
            p.tensor.write_atsr(fs::File::create(dir.join(&file))?)?;
            params.push(ParamEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), frozen: p.frozen, file });
        }
        let mut moments = vec![];
        for (i, (name, st)) in self.optimizer.state.iter().enumerate() {
            let shape = [st.m.len()];
            let m_file = format!("blobs/m{i:03}.atsr");
            let v_file = format!("blobs/v{i:03}.atsr");
            Tensor::new(&shape, st.m.clone())?.write_atsr(fs::File::create(dir.join(&m_file))?)?;
            Tensor::new(&shape, st.v.clone())?.write_atsr(fs::File::create(dir.join(&v_file))?)?;
            moments.push(MomentEntry { name: name.clone(), step: st.step, m_file, v_file });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            epoch: self.epoch,
            step: self.step,
            lr: self.lr,
            lambda: self.model.weights.values(&self.model.store),
            rng: RngPair { data: RngState::capture(&self.data_rng), noise: RngState::capture(&self.noise_rng) },
            order_hash: self.order_hash(),
            dataset_hash: self.dataset_hash.clone(),
            best_dsc: self.best_dsc,
            scheduler: self.scheduler.clone(),
            model: self.model.config.clone(),
            train: self.config.clone(),
            params,
            moments,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`] over the same data.
    pub fn resume(dir: &Path, train: &[PhantomSample], val: &[PhantomSample]) -> Result<Self> {
        let (model, manifest) = load_model(dir)?;
        let mut t = Self::with_model(model, manifest.train.clone(), train, val)?;
        if t.dataset_hash != manifest.dataset_hash {
            return Err(Error::Incompatible("checkpoint was trained on a different dataset".into()));
        }
        for e in &manifest.moments {
            let m = Tensor::read_atsr(fs::File::open(dir.join(&e.m_file))?)?.into_data();
            let v = Tensor::read_atsr(fs::File::open(dir.join(&e.v_file))?)?.into_data();
            t.optimizer.state.insert(e.name.clone(), AdamState { step: e.step, m, v });
        }
        t.epoch = manifest.epoch;
        t.step = manifest.step;
        t.lr = manifest.lr;
        t.scheduler = manifest.scheduler.clone();
        t.data_rng = manifest.rng.data.restore()?;
        t.noise_rng = manifest.rng.noise.restore()?;
        let digest = hex::decode(&manifest.order_hash).map_err(|e| Error::Format(format!("order hash: {e}")))?;
        t.order_digest = digest.try_into().map_err(|_| Error::Format("order hash must be 32 bytes".into()))?;
        t.best_dsc = manifest.best_dsc;
        Ok(t)
    }
}

fn stack_teacher(items: &[(&PreparedSample, &ClassTarget)]) -> Result<PromptEmbeddings> {
    let mut sparse = vec![];
    let mut dense = vec![];
    for (_, t) in items {
        let te = t.teacher.as_ref().ok_or_else(|| Error::Invalid("teacher embeddings were not prepared".into()))?;
        sparse.push(te.sparse.index_batch(0)?);
        dense.push(te.dense.index_batch(0)?);
    }
    Ok(PromptEmbeddings { sparse: Tensor::stack(&sparse)?, dense: Tensor::stack(&dense)? })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FORMAT: &str = "aseg-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub step: u64,
    pub m_file: String,
    pub v_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngPair {
    pub data: RngState,
    pub noise: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub lambda: BTreeMap<String, f64>,
    pub rng: RngPair,
    pub order_hash: String,
    pub dataset_hash: String,
    pub best_dsc: Option<f64>,
    pub scheduler: Plateau,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<ParamEntry>,
    pub moments: Vec<MomentEntry>,
}

/// Rebuilds the model stored in a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(SegModel, CheckpointManifest)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Incompatible(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let mut model = SegModel::new(manifest.model.clone())?;
    if model.store.len() != manifest.params.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for e in &manifest.params {
        let id = model
            .store
            .id(&e.name)
            .ok_or_else(|| Error::Incompatible(format!("unknown parameter {:?} in checkpoint", e.name)))?;
        let t = Tensor::read_atsr(fs::File::open(dir.join(&e.file))?)?;
        model.store.set_value(id, t)?;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        for (k, v) in TrainConfig::default().to_pairs() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, TrainConfig::default());
        assert_eq!(TrainConfig::KEYS.to_vec(), c.to_pairs().iter().map(|(k, _)| *k).collect::<Vec<_>>());
        c.set("branch_mode", "sparse").unwrap();
        c.set("loss_toggles", "dc").unwrap();
        assert_eq!(c.branch_mode, BranchMode::Sparse);
        assert_eq!(c.members(), vec![LossMember::Dice]);
        let err = c.set("learning_rate", "1").unwrap_err().to_string();
        assert!(err.contains("learning_rate"));
        assert!(c.set("epochs", "many").is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        let mse_only = LossToggles { ce: false, dc: false, sd: false, mse: true };
        assert!(TrainConfig { loss_toggles: mse_only, ..ok.clone() }.validate().is_ok());
        assert!(TrainConfig { loss_toggles: mse_only, prompt_kind: PromptKind::Box, ..ok }.validate().is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut r = seeded(9, NOISE_STREAM);
        let _: u64 = r.random();
        let s = RngState::capture(&r);
        let mut back = s.restore().unwrap();
        assert_eq!(r.random::<u64>(), back.random::<u64>());
    }
}
