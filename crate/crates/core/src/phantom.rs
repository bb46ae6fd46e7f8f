//! Deterministic multi-class phantom images.
//!
//! Every class is a superellipse with a radial Fourier perturbation. In
//! symmetric-pair mode class 1 is the exact horizontal mirror of class 0 and
//! shares its intensity, so only the side of the image tells them apart.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::pgm::{self, Gray8};
use crate::tensor::Tensor;

pub const BACKGROUND_BASE: f32 = 0.1;
pub const MIN_AREA_FRAC: f64 = 0.01;
pub const MAX_AREA_FRAC: f64 = 0.40;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub contrast: f64,
    pub noise_std: f64,
    pub symmetric_pair: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, num_classes: 4, contrast: 0.8, noise_std: 0.05, symmetric_pair: true, seed: 0 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("image must be at least 16×16, got {}×{}", self.height, self.width)));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be ≥ 1".into()));
        }
        if self.symmetric_pair && self.num_classes < 2 {
            return Err(Error::Config("symmetric_pair needs at least two classes".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast must lie in (0, 1], got {}", self.contrast)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Intensity group of each class; mirror partners share a group.
    pub fn texture_group(&self, class: usize) -> usize {
        if self.symmetric_pair && class >= 1 {
            class - 1
        } else {
            class
        }
    }

    /// Intensity bases, equally spaced over `[0.3, 0.8]` by texture group.
    pub fn class_base(&self, class: usize) -> f32 {
        let groups = if self.symmetric_pair { self.num_classes - 1 } else { self.num_classes };
        if groups <= 1 {
            return 0.3;
        }
        (0.3 + 0.5 * self.texture_group(class) as f64 / (groups - 1) as f64) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub index: usize,
    /// `[3, H, W]`, identical channels, values in `[0, 1]`.
    pub image: Tensor,
    /// `[K, H, W]`, exactly {0, 1}.
    pub masks: Tensor,
    pub class_ids: Vec<usize>,
    pub seed: u64,
}

impl PhantomSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask(&self, class: usize) -> BinaryMask {
        let (h, w) = (self.height(), self.width());
        BinaryMask::from_plane(h, w, &self.masks.data()[class * h * w..(class + 1) * h * w])
            .expect("mask plane extents")
    }
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed ^ mix(index as u64))
}

struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    exponent: f64,
    rotation: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let s = h.min(w) as f64;
        let harmonics = (2..=4)
            .map(|k| (k as f64, rng.random_range(0.0..0.08), rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self {
            cy: rng.random_range(0.15 * h as f64..0.85 * h as f64),
            cx: rng.random_range(0.1 * w as f64..0.9 * w as f64),
            a: rng.random_range(0.07 * s..0.15 * s),
            b: rng.random_range(0.07 * s..0.15 * s),
            exponent: rng.random_range(1.6..3.5),
            rotation: rng.random_range(0.0..PI),
            harmonics,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.rotation.sin_cos();
        let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        let r = ((u / self.a).abs().powf(self.exponent) + (v / self.b).abs().powf(self.exponent))
            .powf(1.0 / self.exponent);
        let theta = v.atan2(u);
        let bound = 1.0 + self.harmonics.iter().map(|&(k, amp, ph)| amp * (k * theta + ph).cos()).sum::<f64>();
        r <= bound
    }

    fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

fn area_ok(m: &BinaryMask) -> bool {
    let frac = m.count() as f64 / (m.height() * m.width()) as f64;
    (MIN_AREA_FRAC..=MAX_AREA_FRAC).contains(&frac)
}

fn mirror(m: &BinaryMask) -> BinaryMask {
    let w = m.width();
    BinaryMask::from_fn(m.height(), w, |y, x| m.get(y, w - 1 - x))
}

fn generate_one(config: &PhantomConfig, index: usize) -> Result<PhantomSample> {
    let (h, w, k) = (config.height, config.width, config.num_classes);
    let seed = sample_seed(config.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut claimed = BinaryMask::zeros(h, w);
    let mut masks: Vec<BinaryMask> = Vec::with_capacity(k);
    let mut class = 0;
    while class < k {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let blob = Blob::random(&mut rng, h, w);
            let mut m = blob.rasterize(h, w);
            if config.symmetric_pair && class == 0 {
                // confined to the left half so the mirror partner is disjoint
                if (0..h).any(|y| (w / 2..w).any(|x| m.get(y, x))) || !area_ok(&m) {
                    continue;
                }
                placed = Some(m);
                break;
            }
            for (i, c) in claimed.data().iter().enumerate() {
                if *c == 1 {
                    m.set(i / w, i % w, false);
                }
            }
            if area_ok(&m) {
                placed = Some(m);
                break;
            }
        }
        let m = placed.ok_or_else(|| {
            Error::Config(format!("could not place class {class} within the area bounds after {MAX_ATTEMPTS} tries"))
        })?;
        let mut add = |m: BinaryMask, masks: &mut Vec<BinaryMask>| {
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) {
                        claimed.set(y, x, true);
                    }
                }
            }
            masks.push(m);
        };
        if config.symmetric_pair && class == 0 {
            let partner = mirror(&m);
            add(m, &mut masks);
            add(partner, &mut masks);
            class += 2;
        } else {
            add(m, &mut masks);
            class += 1;
        }
    }

    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut plane = vec![BACKGROUND_BASE; h * w];
    for (c, m) in masks.iter().enumerate() {
        let base = config.class_base(c);
        let inside = BACKGROUND_BASE + config.contrast as f32 * (base - BACKGROUND_BASE);
        for (p, &v) in plane.iter_mut().zip(m.data()) {
            if v == 1 {
                *p = inside;
            }
        }
    }
    if config.noise_std > 0.0 {
        for p in plane.iter_mut() {
            *p = (*p + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    let mut image = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        image.extend_from_slice(&plane);
    }
    let mut mask_data = Vec::with_capacity(k * h * w);
    for m in &masks {
        mask_data.extend(m.data().iter().map(|&v| v as f32));
    }
    Ok(PhantomSample {
        index,
        image: Tensor::new(&[3, h, w], image)?,
        masks: Tensor::new(&[k, h, w], mask_data)?,
        class_ids: (0..k).collect(),
        seed,
    })
}

/// `n` samples; sample `i` depends only on `(config, i)`.
pub fn generate(config: &PhantomConfig, n: usize) -> Result<Vec<PhantomSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    (0..n).into_par_iter().map(|i| generate_one(config, i)).collect()
}

/// Order-stable split; the first `round(n · train_frac)` samples train.
pub fn split<T: Clone>(samples: &[T], train_frac: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Invalid(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    let k = (samples.len() as f64 * train_frac).round() as usize;
    if k == 0 || k == samples.len() {
        return Err(Error::Invalid(format!("split of {} at {} leaves one side empty", samples.len(), train_frac)));
    }
    Ok((samples[..k].to_vec(), samples[k..].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFiles {
    pub image: String,
    pub masks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: usize,
    pub class_ids: Vec<usize>,
    pub seed: u64,
    pub files: IndexFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: PhantomConfig,
    pub samples: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `image_XXXX.pgm`, one `mask_XXXX_cK.pgm` per class and `index.json`.
pub fn export(samples: &[PhantomSample], config: &PhantomConfig, dir: &Path) -> Result<DatasetIndex> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let image = format!("image_{:04}.pgm", s.index);
        let gray = Gray8 { width: w, height: h, pixels: s.image.data()[..h * w].iter().map(|&v| to_byte(v)).collect() };
        pgm::write(&dir.join(&image), &gray)?;
        let mut masks = Vec::with_capacity(config.num_classes);
        for c in 0..config.num_classes {
            let name = format!("mask_{:04}_c{}.pgm", s.index, c);
            pgm::write(&dir.join(&name), &pgm::mask_to_gray(&s.mask(c)))?;
            masks.push(name);
        }
        entries.push(IndexEntry {
            sample_id: s.index,
            class_ids: s.class_ids.clone(),
            seed: s.seed,
            files: IndexFiles { image, masks },
        });
    }
    let index = DatasetIndex { config: config.clone(), samples: entries };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(index)
}

/// Reads a dataset written by [`export`]; image intensities come back quantised to 1/255.
pub fn import(dir: &Path) -> Result<(DatasetIndex, Vec<PhantomSample>)> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(index.samples.len());
    for e in &index.samples {
        let img = pgm::read(&dir.join(&e.files.image))?;
        let (h, w) = (img.height, img.width);
        let plane: Vec<f32> = img.pixels.iter().map(|&v| v as f32 / 255.0).collect();
        let mut image = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            image.extend_from_slice(&plane);
        }
        let mut masks = Vec::with_capacity(e.files.masks.len() * h * w);
        for f in &e.files.masks {
            let m = pgm::read(&dir.join(f))?;
            if m.width != w || m.height != h {
                return Err(Error::Format(format!("{f} is {}×{}, image is {}×{}", m.height, m.width, h, w)));
            }
            masks.extend(m.pixels.iter().map(|&v| (v > 0) as u8 as f32));
        }
        samples.push(PhantomSample {
            index: e.sample_id,
            image: Tensor::new(&[3, h, w], image)?,
            masks: Tensor::new(&[e.files.masks.len(), h, w], masks)?,
            class_ids: e.class_ids.clone(),
            seed: e.seed,
        });
    }
    Ok((index, samples))
}
