//! Distance transforms, boundaries, DSC and NSD.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 2.0;

/// Distance scale of the shape-distance target map.
pub const SHAPE_D_MAX: f64 = 10.0;

/// An `h × w` grid of strictly {0, 1} values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return shape_err("BinaryMask::new", format!("{}×{} needs {} values, got {}", h, w, h * w, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        Self { h, w, data }
    }

    /// Thresholds a single plane: entries `> 0.5` become foreground.
    pub fn from_plane<T: Real>(h: usize, w: usize, plane: &[T]) -> Result<Self> {
        if plane.len() != h * w {
            return shape_err("BinaryMask::from_plane", format!("{} values for {}×{}", plane.len(), h, w));
        }
        Ok(Self { h, w, data: plane.iter().map(|v| (v.as_f64() > 0.5) as u8).collect() })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[self.h, self.w], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("mask extents")
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)` of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    fn same_extent(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return shape_err(op, format!("{}×{} vs {}×{}", self.h, self.w, other.h, other.w));
        }
        Ok(())
    }
}

/// Per-pixel Euclidean distance to the nearest source pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    /// No source pixel existed; every entry holds the sentinel.
    pub empty_source: bool,
}

impl DistanceMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Stand-in for "infinitely far" on an `h × w` grid: one past the diagonal.
    pub fn sentinel(h: usize, w: usize) -> f64 {
        ((h * h + w * w) as f64).sqrt() + 1.0
    }
}

/// Exact EDT to the foreground of `mask`: column scans followed by a row-wise
/// lower envelope of parabolas (Felzenszwalb & Huttenlocher).
pub fn edt(mask: &BinaryMask) -> DistanceMap {
    let (h, w) = (mask.h, mask.w);
    if mask.is_empty() {
        return DistanceMap { h, w, data: vec![DistanceMap::sentinel(h, w); h * w], empty_source: true };
    }
    // squared vertical distance per column, None when the column has no source
    let mut col: Vec<Option<u64>> = vec![None; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask.get(y, x) {
                last = Some(y);
            }
            col[y * w + x] = last.map(|s| ((y - s) * (y - s)) as u64);
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask.get(y, x) {
                next = Some(y);
            }
            if let Some(s) = next {
                let d = ((s - y) * (s - y)) as u64;
                let cell = &mut col[y * w + x];
                *cell = Some(cell.map_or(d, |c| c.min(d)));
            }
        }
    }
    let mut data = vec![0.0; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    for y in 0..h {
        let f = |q: usize| col[y * w + q].map(|v| v as f64);
        sites.clear();
        bounds.clear();
        for q in 0..w {
            let Some(fq) = f(q) else { continue };
            loop {
                let Some(&v) = sites.last() else {
                    sites.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let fv = f(v).expect("site is finite");
                let s = ((fq + (q * q) as f64) - (fv + (v * v) as f64)) / (2.0 * (q - v) as f64);
                if s <= *bounds.last().expect("bounds track sites") {
                    sites.pop();
                    bounds.pop();
                } else {
                    sites.push(q);
                    bounds.push(s);
                    break;
                }
            }
        }
        let mut k = 0;
        for q in 0..w {
            while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
                k += 1;
            }
            let v = sites[k];
            let dq = q.abs_diff(v) as u64;
            let sq = dq * dq + col[y * w + v].expect("site is finite");
            data[y * w + q] = (sq as f64).sqrt();
        }
    }
    DistanceMap { h, w, data, empty_source: false }
}

/// Foreground pixels with a 4-neighbour in the background; outside the image
/// counts as background.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let bg = |y: isize, x: isize| {
        y < 0 || x < 0 || y >= h as isize || x >= w as isize || !mask.get(y as usize, x as usize)
    };
    BinaryMask::from_fn(h, w, |y, x| {
        let (yi, xi) = (y as isize, x as isize);
        mask.get(y, x) && (bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1))
    })
}

/// `2|G ∩ S| / (|G| + |S|)`; two empty masks score 1.
pub fn dsc(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    g.same_extent(s, "dsc")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in g.data.iter().zip(&s.data) {
        inter += (a & b) as usize;
        total += (a + b) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Normalized surface distance at tolerance `tau`. Both empty → 1, one empty → 0.
pub fn nsd(g: &BinaryMask, s: &BinaryMask, tau: f64) -> Result<f64> {
    g.same_extent(s, "nsd")?;
    match (g.is_empty(), s.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (bg, bs) = (boundary(g), boundary(s));
    let (dg, ds) = (edt(&bg), edt(&bs));
    let mut hits = 0usize;
    for i in 0..bg.data.len() {
        if bg.data[i] == 1 && ds.data[i] <= tau {
            hits += 1;
        }
        if bs.data[i] == 1 && dg.data[i] <= tau {
            hits += 1;
        }
    }
    Ok(hits as f64 / (bg.count() + bs.count()) as f64)
}

/// Target map of the shape-distance loss: `1 − clamp(d / d_max, 0, 1)` where `d`
/// is the distance to the nearest foreground pixel. Empty masks give all zeros.
pub fn shape_target_map(gt: &BinaryMask, d_max: f64) -> Vec<f64> {
    let d = edt(gt);
    if d.empty_source {
        return vec![0.0; d.data.len()];
    }
    d.data.iter().map(|&v| 1.0 - (v / d_max).clamp(0.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample: usize,
    pub class_id: usize,
    pub dsc: f64,
    pub nsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub count: usize,
    pub dsc: f64,
    pub nsd: f64,
}

/// Scores in percent, rounded to three decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tau: f64,
    pub per_class: BTreeMap<usize, ClassScore>,
    /// Mean over classes of the per-class means.
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub samples: Vec<SampleScore>,
}

pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Scores aligned `(pred, gt, class)` triples; `sample_ids` label the rows.
pub fn evaluate_batch(
    preds: &[BinaryMask],
    gts: &[BinaryMask],
    classes: &[usize],
    sample_ids: &[usize],
    tau: f64,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.len() != classes.len() || preds.len() != sample_ids.len() {
        return shape_err(
            "evaluate_batch",
            format!("{} preds, {} gts, {} classes, {} ids", preds.len(), gts.len(), classes.len(), sample_ids.len()),
        );
    }
    let raw: Vec<(f64, f64)> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| Ok((dsc(g, p)?, nsd(g, p, tau)?)))
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (&c, &(d, n)) in classes.iter().zip(&raw) {
        let e = sums.entry(c).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += d;
        e.2 += n;
    }
    let per_class: BTreeMap<usize, ClassScore> = sums
        .iter()
        .map(|(&c, &(k, d, n))| {
            (c, ClassScore { count: k, dsc: round3(100.0 * d / k as f64), nsd: round3(100.0 * n / k as f64) })
        })
        .collect();
    let nc = sums.len().max(1) as f64;
    let mean_dsc = sums.values().map(|&(k, d, _)| d / k as f64).sum::<f64>() / nc;
    let mean_nsd = sums.values().map(|&(k, _, n)| n / k as f64).sum::<f64>() / nc;
    let samples = sample_ids
        .iter()
        .zip(classes)
        .zip(&raw)
        .map(|((&s, &c), &(d, n))| SampleScore { sample: s, class_id: c, dsc: round3(100.0 * d), nsd: round3(100.0 * n) })
        .collect();
    Ok(MetricReport {
        tau,
        per_class,
        mean_dsc: round3(100.0 * mean_dsc),
        mean_nsd: round3(100.0 * mean_nsd),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| y >= y0 && y < y0 + side && x >= x0 && x < x0 + side)
    }

    #[test]
    fn edt_three_four_five() {
        let mut m = BinaryMask::zeros(8, 8);
        m.set(0, 0, true);
        assert_eq!(edt(&m).get(3, 4), 5.0);
    }

    #[test]
    fn edt_full_source_is_zero() {
        let m = BinaryMask::from_fn(5, 7, |_, _| true);
        assert!(edt(&m).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edt_empty_source_is_flagged() {
        let d = edt(&BinaryMask::zeros(4, 4));
        assert!(d.empty_source);
        assert!(d.data.iter().all(|&v| v == DistanceMap::sentinel(4, 4)));
    }

    #[test]
    fn boundary_conventions() {
        let full = BinaryMask::from_fn(4, 5, |_, _| true);
        let ring = boundary(&full);
        assert_eq!(ring.count(), 2 * 5 + 2 * 2);
        assert!(!ring.get(1, 1) && !ring.get(2, 3));

        let mut single = BinaryMask::zeros(5, 5);
        single.set(2, 2, true);
        assert_eq!(boundary(&single), single);

        let sq = square(5, 1, 1, 3);
        let b = boundary(&sq);
        assert_eq!(b.count(), 8);
        assert!(!b.get(2, 2));
    }

    #[test]
    fn dsc_values() {
        let a = square(6, 0, 0, 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &square(6, 4, 4, 2)).unwrap(), 0.0);
        // |G| = |S| = 4, |G ∩ S| = 2
        assert_eq!(dsc(&a, &square(6, 0, 1, 2)).unwrap(), 0.5);
        let z = BinaryMask::zeros(6, 6);
        assert_eq!(dsc(&z, &z).unwrap(), 1.0);
        assert!(dsc(&a, &BinaryMask::zeros(5, 6)).is_err());
    }

    #[test]
    fn nsd_values() {
        let a = square(16, 4, 4, 6);
        assert_eq!(nsd(&a, &a, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &square(16, 5, 4, 6), 2.0).unwrap(), 1.0);
        let far = BinaryMask::from_fn(32, 32, |y, x| y < 4 && x < 4);
        let far2 = BinaryMask::from_fn(32, 32, |y, x| y >= 28 && x >= 28);
        assert_eq!(nsd(&far, &far2, 2.0).unwrap(), 0.0);
        let z = BinaryMask::zeros(16, 16);
        assert_eq!(nsd(&z, &z, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &z, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn shape_target_is_one_inside_and_decays() {
        let m = square(32, 10, 10, 4);
        let d = shape_target_map(&m, SHAPE_D_MAX);
        assert_eq!(d[11 * 32 + 11], 1.0);
        assert!((d[11 * 32 + 14] - 0.9).abs() < 1e-12);
        assert_eq!(d[31 * 32 + 31], 0.0);
    }

    #[test]
    fn single_perfect_pair_reports_hundred() {
        let a = square(8, 2, 2, 3);
        let r = evaluate_batch(&[a.clone()], &[a], &[0], &[0], DEFAULT_TAU).unwrap();
        assert_eq!(r.mean_dsc, 100.0);
        assert_eq!(r.mean_nsd, 100.0);
    }

    #[test]
    fn per_class_means_by_hand() {
        let g = square(8, 2, 2, 2);
        let half = square(8, 2, 3, 2); // DSC 0.5
        let miss = square(8, 6, 6, 2); // DSC 0
        let r = evaluate_batch(
            &[g.clone(), half, miss],
            &[g.clone(), g.clone(), g],
            &[1, 1, 2],
            &[0, 1, 2],
            DEFAULT_TAU,
        )
        .unwrap();
        assert_eq!(r.per_class[&1].dsc, 75.0);
        assert_eq!(r.per_class[&2].dsc, 0.0);
        assert_eq!(r.mean_dsc, 37.5);
        assert!(evaluate_batch(&[], &[BinaryMask::zeros(2, 2)], &[], &[], 2.0).is_err());
    }
}
