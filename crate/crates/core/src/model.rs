//! The assembled segmentation model and its parameter store.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{binarize, MaskDecoder};
use crate::encoders::{positional_encoding, BoxEncoder, BoxPrompt, ImageEncoder, EMBED_DIM, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{make_teacher, LossMember, Teacher, UncertaintyWeights};
use crate::param::{ParamId, ParamStore};
use crate::prompt::{DiffusionConfig, Mode, PromptEncoder, PromptOptions, PromptVars};
use crate::real::Real;
use crate::tensor::Tensor;

/// Seeds of the frozen parts; fixed so that every run shares them.
pub const IMAGE_ENCODER_SEED: u64 = 0x1AE5_0001;
pub const TEACHER_SEED: u64 = 0x1AE5_0002;

/// How the mask decoder is prompted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Class index through the diffusion prompt encoder.
    Class,
    /// Bounding box through the box encoder (offset study).
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub diffusion: DiffusionConfig,
    /// Seed of the trainable initialisation.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn embed_extent(&self) -> (usize, usize) {
        (self.height / ENCODER_STRIDE, self.width / ENCODER_STRIDE)
    }
}

pub struct SegModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image_encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub mask_decoder: MaskDecoder,
    pub box_encoder: BoxEncoder,
    pub teacher: Teacher,
    pub weights: UncertaintyWeights,
    /// `P_p`, `[C_e, H_e, W_e]`.
    pub pe: Tensor,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.height % (4 * ENCODER_STRIDE) != 0 || config.width % (4 * ENCODER_STRIDE) != 0 {
            return Err(Error::Config(format!(
                "image extents must be multiples of {}, got {}×{}",
                4 * ENCODER_STRIDE,
                config.height,
                config.width
            )));
        }
        let mut store = ParamStore::new();
        let image_encoder = ImageEncoder::new(&mut store, IMAGE_ENCODER_SEED);
        let teacher = make_teacher(&mut store, TEACHER_SEED);
        let (h_e, w_e) = config.embed_extent();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let prompt_encoder =
            PromptEncoder::new(&mut store, config.num_classes, h_e, w_e, config.diffusion.clone(), &mut rng)?;
        let mask_decoder = MaskDecoder::new(&mut store, "decoder", &mut rng);
        let box_encoder = BoxEncoder::new(&mut store, "box", EMBED_DIM);
        let weights = UncertaintyWeights::new(&mut store, &LossMember::ALL);
        let pe = positional_encoding(h_e, w_e, EMBED_DIM)?;
        Ok(Self { config, store, image_encoder, prompt_encoder, mask_decoder, box_encoder, teacher, weights, pe })
    }

    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        self.image_encoder.encode(&self.store, images)
    }

    /// Class-prompted logits `[B,1,H,W]` and the prompt embeddings behind them.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_class<T: Real>(
        &self,
        g: &mut Graph<T>,
        f_i: Var,
        classes: &[usize],
        mode: Mode,
        rng: &mut dyn RngCore,
        opts: &PromptOptions,
    ) -> Result<(PromptVars, Var)> {
        let prompts = self.prompt_encoder.encode_prompts(g, &self.store, f_i, classes, mode, rng, opts)?;
        let pe = g.constant(self.pe.cast());
        let logits = self.mask_decoder.decode(g, &self.store, f_i, pe, prompts)?;
        Ok((prompts, logits))
    }

    /// Box-prompted logits: corner tokens plus the learned no-mask dense embedding.
    pub fn forward_box<T: Real>(&self, g: &mut Graph<T>, f_i: Var, boxes: &[BoxPrompt]) -> Result<Var> {
        let (h, w) = (self.config.height, self.config.width);
        let sparse = self.box_encoder.encode(g, &self.store, boxes, h, w)?;
        let dense = self.prompt_encoder.constant_dense(g, &self.store, boxes.len())?;
        let pe = g.constant(self.pe.cast());
        self.mask_decoder.decode(g, &self.store, f_i, pe, PromptVars { sparse, dense })
    }

    /// Inference-mode logits for a batch of embeddings and classes.
    pub fn predict_class(&self, f_i: &Tensor, classes: &[usize], opts: &PromptOptions) -> Result<Tensor> {
        let mut g = Graph::<f32>::no_grad();
        let f = g.constant(f_i.clone());
        // infer mode draws nothing from the generator
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (_, logits) = self.forward_class(&mut g, f, classes, Mode::Infer, &mut unused, opts)?;
        Ok(g.value(logits).clone())
    }

    pub fn predict_box(&self, f_i: &Tensor, boxes: &[BoxPrompt]) -> Result<Tensor> {
        let mut g = Graph::<f32>::no_grad();
        let f = g.constant(f_i.clone());
        let logits = self.forward_box(&mut g, f, boxes)?;
        Ok(g.value(logits).clone())
    }

    pub fn predict_masks(&self, f_i: &Tensor, classes: &[usize], opts: &PromptOptions, threshold: f64) -> Result<Tensor> {
        Ok(binarize(&self.predict_class(f_i, classes, opts)?, threshold))
    }

    /// Parameters a run may update for the given prompt kind.
    pub fn trainable_for(&self, kind: PromptKind) -> Vec<ParamId> {
        let mut ids = self.mask_decoder.param_ids();
        match kind {
            PromptKind::Class => ids.extend(self.prompt_encoder.param_ids()),
            PromptKind::Box => {
                ids.push(self.box_encoder.corner_bias);
                ids.extend(self.prompt_encoder.param_ids());
            }
        }
        ids.extend(self.weights.lambdas.values().copied());
        ids
    }

    pub fn frozen_hash(&self) -> String {
        self.store.frozen_hash()
    }
}
