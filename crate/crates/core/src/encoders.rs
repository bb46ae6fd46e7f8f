//! Frozen image encoder, 2-D sinusoidal positional encoding and the box-prompt encoder.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{tile_rows, Conv};
use crate::metrics::BinaryMask;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Embedding channels.
pub const EMBED_DIM: usize = 32;
/// Image pixels per embedding cell along each axis.
pub const ENCODER_STRIDE: usize = 4;
/// Scale folded into the last encoder stage so that embeddings of `[0, 1]`
/// images come out near unit scale, comparable to the positional encoding.
pub const EMBED_GAIN: f32 = 6.0;

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub stages: [Conv; 3],
}

impl ImageEncoder {
    /// Random weights drawn from `seed` alone and frozen.
    pub fn new(store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = [
            Conv::new(store, "image_encoder.0", 3, 16, 3, 2, &mut rng),
            Conv::new(store, "image_encoder.1", 16, EMBED_DIM, 3, 2, &mut rng),
            Conv::new(store, "image_encoder.2", EMBED_DIM, EMBED_DIM, 3, 1, &mut rng),
        ];
        let last = stages[2].w;
        let scaled = store.tensor(last).map(|v| v * EMBED_GAIN);
        store.set_value(last, scaled).expect("same shape");
        for s in &stages {
            s.freeze(store);
        }
        Self { stages }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return shape_err("encode_image", format!("expected [B,3,H,W], got {:?}", s));
        }
        if s[2] % ENCODER_STRIDE != 0 || s[3] % ENCODER_STRIDE != 0 {
            return shape_err("encode_image", format!("extents {}×{} not divisible by {}", s[2], s[3], ENCODER_STRIDE));
        }
        let mut x = image;
        for stage in &self.stages {
            x = stage.forward_relu(g, store, x)?;
        }
        Ok(x)
    }

    /// `F_I` for a `[B,3,H,W]` batch, without recording gradients.
    pub fn encode(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::no_grad();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }
}

/// Channel `c` of the encoding at embedding-grid position `(y, x)` (fractional allowed).
///
/// Channels come in four groups of `c_e / 4`: sin and cos of the column
/// coordinate, then sin and cos of the row coordinate, at frequencies
/// `(i + 1)·π/2` over coordinates normalised by the grid extent.
pub fn pe_at(y: f64, x: f64, h_e: usize, w_e: usize, c_e: usize) -> Vec<f64> {
    let q = c_e / 4;
    let (u, v) = (x / w_e as f64, y / h_e as f64);
    let mut out = Vec::with_capacity(c_e);
    for (coord, f) in [(u, f64::sin as fn(f64) -> f64), (u, f64::cos), (v, f64::sin), (v, f64::cos)] {
        for i in 0..q {
            out.push(f((i + 1) as f64 * FRAC_PI_2 * coord));
        }
    }
    out
}

/// `P_p` as `[C_e, H_e, W_e]`.
pub fn positional_encoding(h_e: usize, w_e: usize, c_e: usize) -> Result<Tensor> {
    if c_e == 0 || c_e % 4 != 0 {
        return Err(Error::Invalid(format!("positional encoding needs channels divisible by 4, got {c_e}")));
    }
    let mut data = vec![0f32; c_e * h_e * w_e];
    for y in 0..h_e {
        for x in 0..w_e {
            for (c, v) in pe_at(y as f64, x as f64, h_e, w_e, c_e).into_iter().enumerate() {
                data[(c * h_e + y) * w_e + x] = v as f32;
            }
        }
    }
    Tensor::new(&[c_e, h_e, w_e], data)
}

/// Axis-aligned box in pixel edges: covers `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxPrompt {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Invalid(format!("degenerate box {:?}", self)));
        }
        if self.x_max > w || self.y_max > h {
            return Err(Error::Invalid(format!("box {:?} exceeds {}×{} image", self, h, w)));
        }
        Ok(())
    }

    /// Tight box around the foreground; `None` for an empty mask.
    pub fn from_mask(m: &BinaryMask) -> Option<Self> {
        m.bbox().map(|(x0, y0, x1, y1)| Self::new(x0, y0, x1 + 1, y1 + 1))
    }

    pub fn image_boundary(h: usize, w: usize) -> Self {
        Self::new(0, 0, w, h)
    }

    /// Grown by `offset` pixels on every side, clamped to the image.
    pub fn dilate(&self, offset: usize, h: usize, w: usize) -> Self {
        Self::new(
            self.x_min.saturating_sub(offset),
            self.y_min.saturating_sub(offset),
            (self.x_max + offset).min(w),
            (self.y_max + offset).min(h),
        )
    }

    /// Each edge moved outward by an independent uniform `0..=max` pixels, clamped to the image.
    pub fn jitter(&self, max: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut d = || rng.random_range(0..=max);
        Self::new(
            self.x_min.saturating_sub(d()),
            self.y_min.saturating_sub(d()),
            (self.x_max + d()).min(w),
            (self.y_max + d()).min(h),
        )
    }

    /// Fraction of each embedding cell covered by the box, `[h_e · w_e]`.
    pub fn coverage(&self, h_e: usize, w_e: usize) -> Vec<f64> {
        let s = ENCODER_STRIDE;
        let overlap = |lo: usize, hi: usize, c: usize| hi.min((c + 1) * s).saturating_sub(lo.max(c * s)) as f64;
        let mut out = Vec::with_capacity(h_e * w_e);
        for cy in 0..h_e {
            for cx in 0..w_e {
                let a = overlap(self.y_min, self.y_max, cy) * overlap(self.x_min, self.x_max, cx);
                out.push(a / (s * s) as f64);
            }
        }
        out
    }

    /// Positional encodings of the top-left and bottom-right corners, `[2 · c_e]`.
    pub fn corner_encodings(&self, h_e: usize, w_e: usize, c_e: usize) -> Vec<f64> {
        let s = ENCODER_STRIDE as f64;
        let mut out = pe_at(self.y_min as f64 / s, self.x_min as f64 / s, h_e, w_e, c_e);
        out.extend(pe_at(self.y_max as f64 / s, self.x_max as f64 / s, h_e, w_e, c_e));
        out
    }
}

/// Sparse tokens for box prompts: corner encodings plus a learned per-corner bias.
#[derive(Clone, Debug)]
pub struct BoxEncoder {
    pub corner_bias: ParamId,
    pub c_e: usize,
}

impl BoxEncoder {
    pub fn new(store: &mut ParamStore, name: &str, c_e: usize) -> Self {
        let corner_bias = store.add_zeros(format!("{name}.corner_bias"), &[1, 2 * c_e]);
        Self { corner_bias, c_e }
    }

    /// `[B, 2, C_e]` tokens for a batch of boxes.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        boxes: &[BoxPrompt],
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (h_e, w_e) = (h / ENCODER_STRIDE, w / ENCODER_STRIDE);
        let mut data = Vec::with_capacity(boxes.len() * 2 * self.c_e);
        for b in boxes {
            b.validate(h, w)?;
            data.extend(b.corner_encodings(h_e, w_e, self.c_e).into_iter().map(T::of));
        }
        let n = boxes.len();
        let pe = g.constant(Tensor::new(&[n, 2 * self.c_e], data)?);
        let bias = tile_rows(g, store, self.corner_bias, n)?;
        let tokens = g.add(pe, bias)?;
        g.reshape(tokens, &[n, 2, self.c_e])
    }
}
