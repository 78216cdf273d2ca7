//! Attention step 1: a coarse class heatmap and the best fixed-size window.
//!
//! Context vectors on the deep grid are max-pooled 2×2, every pooled pixel
//! inherits its image's label, and a boosted-tree classifier learns
//! pixel-level class probabilities. At inference the pooled probability
//! tensor is upsampled back to the deep grid, each pixel's distribution is
//! renormalized, and the pixel with the highest top-class confidence picks
//! a fixed window in the original image centered on its receptive field.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;

use crate::context::{extract_context_with, ContextCascade, ContextGrid};
use crate::error::{Result, SalError};
use crate::gbdt::{GbdtClassifier, GbdtConfig};
use crate::saab::HopProjector;
use crate::tensor::ImageTensor;
use crate::util::seeded_rng;

/// Side length of the attention window in image coordinates.
pub const WINDOW_SIZE: usize = 19;
/// Deep-grid position (i, j) has its receptive field centered at
/// (i + CENTER_OFFSET, j + CENTER_OFFSET) in the image.
pub const CENTER_OFFSET: usize = (WINDOW_SIZE - 1) / 2;

/// A square window given by its top-left corner in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Window {
    pub fn center(&self) -> (usize, usize) {
        (self.row + self.size / 2, self.col + self.size / 2)
    }

    pub fn bottom_right(&self) -> (usize, usize) {
        (self.row + self.size - 1, self.col + self.size - 1)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r <= self.row + self.size - 1 && c >= self.col && c <= self.col + self.size - 1
    }
}

/// Channel-wise 2×2 max pool of a context grid; the grid side must be even.
pub fn pool_context_grid(grid: &ContextGrid) -> Result<ContextGrid> {
    let s = grid.grid_size;
    if s % 2 != 0 {
        return Err(SalError::InvalidInput(format!("grid side {s} not divisible by 2")));
    }
    let half = s / 2;
    let mut features = Array2::<f32>::zeros((half * half, grid.dim));
    for i in 0..half {
        for j in 0..half {
            let mut row = features.row_mut(i * half + j);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = grid.vector(2 * i + dr, 2 * j + dc);
                for (o, &v) in row.iter_mut().zip(src) {
                    *o = if (dr, dc) == (0, 0) { v } else { o.max(v) };
                }
            }
        }
    }
    Ok(ContextGrid { grid_size: half, dim: grid.dim, features })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Step1Config {
    /// Cap on pixel training samples, enforced class-balanced.
    pub sample_cap: usize,
    pub gbdt: GbdtConfig,
    pub seed: u64,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self { sample_cap: 200_000, gbdt: GbdtConfig::default(), seed: 0 }
    }
}

/// Pooled context grids for a set of images, cached in memory when they fit
/// a byte budget and recomputed in batches otherwise. Either way the grids
/// visit callbacks in image order.
pub struct PooledSource<'a> {
    images: &'a [ImageTensor],
    cascade: &'a ContextCascade,
    projectors: Vec<HopProjector>,
    cache: Option<Vec<ContextGrid>>,
    batch: usize,
}

impl<'a> PooledSource<'a> {
    pub fn new(
        images: &'a [ImageTensor],
        cascade: &'a ContextCascade,
        batch: usize,
        cache_budget_bytes: usize,
    ) -> Result<Self> {
        let projectors = cascade.projectors();
        let half = cascade.deepest_size() / 2;
        let bytes = images.len() * half * half * cascade.context_dim() * std::mem::size_of::<f32>();
        let mut src = Self { images, cascade, projectors, cache: None, batch: batch.max(1) };
        if bytes <= cache_budget_bytes {
            let mut all = Vec::with_capacity(images.len());
            src.for_each_batch(0..images.len(), |_, g| all.push(g.clone()))?;
            src.cache = Some(all);
        }
        Ok(src)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn grid_side(&self) -> usize {
        self.cascade.deepest_size() / 2
    }

    pub fn pixels_per_image(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn for_each_batch<F: FnMut(usize, &ContextGrid)>(
        &self,
        range: std::ops::Range<usize>,
        mut f: F,
    ) -> Result<()> {
        use rayon::prelude::*;
        let mut start = range.start;
        while start < range.end {
            let end = (start + self.batch).min(range.end);
            let grids: Result<Vec<ContextGrid>> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let grid =
                        extract_context_with(&self.images[i], self.cascade, &self.projectors)?;
                    pool_context_grid(&grid)
                })
                .collect();
            for (off, g) in grids?.iter().enumerate() {
                f(start + off, g);
            }
            start = end;
        }
        Ok(())
    }

    /// Visits every image's pooled grid in order.
    pub fn for_each<F: FnMut(usize, &ContextGrid)>(&self, mut f: F) -> Result<()> {
        match &self.cache {
            Some(grids) => {
                for (i, g) in grids.iter().enumerate() {
                    f(i, g);
                }
                Ok(())
            }
            None => self.for_each_batch(0..self.images.len(), f),
        }
    }
}

/// Stacks pooled-grid vectors as rows with their image's label, then
/// enforces the cap with a seeded, class-balanced subsample that keeps
/// original row order within each class.
pub fn build_pixel_training_set(
    pooled: &[ContextGrid],
    labels: &[usize],
    num_classes: usize,
    cfg: &Step1Config,
) -> Result<(Array2<f32>, Vec<usize>)> {
    if pooled.is_empty() || pooled.len() != labels.len() {
        return Err(SalError::InvalidInput(format!(
            "{} grids for {} labels",
            pooled.len(),
            labels.len()
        )));
    }
    let dim = pooled[0].dim;
    let per_image = pooled[0].grid_size * pooled[0].grid_size;
    for g in pooled {
        if g.dim != dim || g.grid_size != pooled[0].grid_size {
            return Err(SalError::InvalidInput("pooled grids disagree in shape".into()));
        }
    }
    let total = pooled.len() * per_image;

    let keep: Vec<usize> = if total <= cfg.sample_cap {
        (0..total).collect()
    } else {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (img, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(SalError::InvalidClass { index: y, num_classes });
            }
            for p in 0..per_image {
                by_class[y].push(img * per_image + p);
            }
        }
        let quota = cfg.sample_cap / num_classes;
        let mut keep = Vec::with_capacity(cfg.sample_cap);
        for (k, rows) in by_class.iter().enumerate() {
            if rows.len() <= quota {
                keep.extend_from_slice(rows);
            } else {
                let mut rng = seeded_rng(cfg.seed, &format!("step1/sample/class{k}"));
                let mut picks: Vec<usize> =
                    sample_indices(&mut rng, rows.len(), quota).into_iter().collect();
                picks.sort_unstable();
                keep.extend(picks.into_iter().map(|p| rows[p]));
            }
        }
        keep.sort_unstable();
        keep
    };

    let mut x = Array2::<f32>::zeros((keep.len(), dim));
    let mut y = Vec::with_capacity(keep.len());
    for (out_row, &row_id) in keep.iter().enumerate() {
        let img = row_id / per_image;
        let p = row_id % per_image;
        let g = &pooled[img];
        x.row_mut(out_row)
            .into_slice()
            .expect("contiguous")
            .copy_from_slice(g.vector(p / g.grid_size, p % g.grid_size));
        y.push(labels[img]);
    }
    Ok((x, y))
}

pub fn train_pixel_classifier(
    pooled: &[ContextGrid],
    labels: &[usize],
    num_classes: usize,
    cfg: &Step1Config,
) -> Result<GbdtClassifier> {
    let (x, y) = build_pixel_training_set(pooled, labels, num_classes, cfg)?;
    GbdtClassifier::fit(x.view(), &y, num_classes, &cfg.gbdt)
}

/// Row ids (image-major) to keep under the cap: everything when it fits,
/// otherwise a seeded class-balanced sample, ascending either way.
pub fn capped_row_ids(
    labels: &[usize],
    per_image: usize,
    num_classes: usize,
    cfg: &Step1Config,
) -> Result<Vec<usize>> {
    let total = labels.len() * per_image;
    if total <= cfg.sample_cap {
        return Ok((0..total).collect());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (img, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(SalError::InvalidClass { index: y, num_classes });
        }
        for p in 0..per_image {
            by_class[y].push(img * per_image + p);
        }
    }
    let quota = cfg.sample_cap / num_classes;
    let mut keep = Vec::with_capacity(cfg.sample_cap);
    for (k, rows) in by_class.iter().enumerate() {
        if rows.len() <= quota {
            keep.extend_from_slice(rows);
        } else {
            let mut rng = seeded_rng(cfg.seed, &format!("step1/sample/class{k}"));
            let mut picks: Vec<usize> =
                sample_indices(&mut rng, rows.len(), quota).into_iter().collect();
            picks.sort_unstable();
            keep.extend(picks.into_iter().map(|p| rows[p]));
        }
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Streaming variant of [`build_pixel_training_set`] over a pooled-grid
/// source; produces the same rows as the in-memory path.
pub fn train_pixel_classifier_streaming(
    src: &PooledSource,
    labels: &[usize],
    num_classes: usize,
    cfg: &Step1Config,
) -> Result<GbdtClassifier> {
    if src.len() != labels.len() {
        return Err(SalError::InvalidInput(format!(
            "{} grids for {} labels",
            src.len(),
            labels.len()
        )));
    }
    if src.is_empty() {
        return Err(SalError::DegenerateInput("empty training set".into()));
    }
    let per_image = src.pixels_per_image();
    let keep = capped_row_ids(labels, per_image, num_classes, cfg)?;
    let dim = src.cascade.context_dim();
    let mut x = Array2::<f32>::zeros((keep.len(), dim));
    let mut y = Vec::with_capacity(keep.len());
    let mut cursor = 0usize;
    src.for_each(|img, grid| {
        let side = grid.grid_size;
        while cursor < keep.len() && keep[cursor] / per_image == img {
            let p = keep[cursor] % per_image;
            x.row_mut(cursor)
                .into_slice()
                .expect("contiguous")
                .copy_from_slice(grid.vector(p / side, p % side));
            y.push(labels[img]);
            cursor += 1;
        }
    })?;
    debug_assert_eq!(cursor, keep.len());
    GbdtClassifier::fit(x.view(), &y, num_classes, &cfg.gbdt)
}

/// Per-pixel class probabilities on the pooled grid as an s×s×K tensor.
pub fn class_heatmap(model: &GbdtClassifier, pooled: &ContextGrid) -> Result<ImageTensor> {
    let proba = model.predict_proba(pooled.features.view())?;
    let s = pooled.grid_size;
    let k = model.num_classes();
    let mut out = ImageTensor::zeros(s, s, k);
    for i in 0..s {
        for j in 0..s {
            let row = proba.row(i * s + j);
            for (c, &p) in row.iter().enumerate() {
                out.set(i, j, c, p);
            }
        }
    }
    Ok(out)
}

/// Channel-wise 2× bilinear upsample with half-pixel centers
/// (align_corners = false) and edge clamping.
pub fn upsample_bilinear_2x(t: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (t.height(), t.width(), t.channels());
    let mut out = ImageTensor::zeros(2 * h, 2 * w, c);

    // source index and neighbor weights for one output axis position
    let axis = |dst: usize, n: usize| -> (usize, usize, f32) {
        let src = (dst as f32 + 0.5) * 0.5 - 0.5;
        let floor = src.floor();
        let frac = src - floor;
        let i0 = (floor.max(0.0) as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        if floor < 0.0 {
            (i0, i0, 0.0)
        } else {
            (i0, i1, frac)
        }
    };

    for r in 0..2 * h {
        let (r0, r1, fr) = axis(r, h);
        for cc in 0..2 * w {
            let (c0, c1, fc) = axis(cc, w);
            for ch in 0..c {
                let v00 = t.get(r0, c0, ch);
                let v01 = t.get(r0, c1, ch);
                let v10 = t.get(r1, c0, ch);
                let v11 = t.get(r1, c1, ch);
                let top = v00 + (v01 - v00) * fc;
                let bot = v10 + (v11 - v10) * fc;
                out.set(r, cc, ch, top + (bot - top) * fr);
            }
        }
    }
    out
}

/// Rescales each pixel's channel vector to sum to one; an all-zero pixel
/// becomes uniform.
pub fn renormalize_pixel_probs(t: &mut ImageTensor) {
    let (h, w, c) = (t.height(), t.width(), t.channels());
    for r in 0..h {
        for cc in 0..w {
            let s: f32 = (0..c).map(|ch| t.get(r, cc, ch)).sum();
            if s > 0.0 {
                for ch in 0..c {
                    let v = t.get(r, cc, ch) / s;
                    t.set(r, cc, ch, v);
                }
            } else {
                for ch in 0..c {
                    t.set(r, cc, ch, 1.0 / c as f32);
                }
            }
        }
    }
}

/// Max class probability per pixel.
pub fn confidence_map(probs: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (probs.height(), probs.width(), probs.channels());
    let mut out = ImageTensor::zeros(h, w, 1);
    for r in 0..h {
        for cc in 0..w {
            let m = (0..c).map(|ch| probs.get(r, cc, ch)).fold(f32::NEG_INFINITY, f32::max);
            out.set(r, cc, 0, m);
        }
    }
    out
}

/// Picks the most confident deep-grid pixel (row-major first on ties) and
/// returns the window centered on its receptive field. The grid must be the
/// deep grid of a cascade over an image large enough to contain the window,
/// which holds for every grid position by construction.
pub fn select_window(confidence: &ImageTensor) -> Result<(usize, usize, Window)> {
    if confidence.channels() != 1 {
        return Err(SalError::InvalidInput("confidence map must have one channel".into()));
    }
    let (h, w) = (confidence.height(), confidence.width());
    if h == 0 || w == 0 {
        return Err(SalError::InvalidInput("empty confidence map".into()));
    }
    let mut best = (0usize, 0usize);
    let mut best_v = f32::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            let v = confidence.get(r, c, 0);
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
    }
    let (p, q) = best;
    Ok((p, q, Window { row: p, col: q, size: WINDOW_SIZE }))
}

/// Full step-1 inference for one image.
#[derive(Debug, Clone)]
pub struct Step1Output {
    /// Renormalized class probabilities on the deep grid.
    pub probs: ImageTensor,
    pub confidence: ImageTensor,
    /// Selected deep-grid position.
    pub grid_pos: (usize, usize),
    pub window: Window,
}

pub fn localize_step1(
    img: &ImageTensor,
    cascade: &ContextCascade,
    projectors: &[HopProjector],
    model: &GbdtClassifier,
) -> Result<Step1Output> {
    let grid = extract_context_with(img, cascade, projectors)?;
    let pooled = pool_context_grid(&grid)?;
    localize_from_pooled(model, &pooled)
}

/// The post-pooling half of step 1, reusable when pooled grids are already
/// on hand (e.g. during training passes).
pub fn localize_from_pooled(model: &GbdtClassifier, pooled: &ContextGrid) -> Result<Step1Output> {
    let heat = class_heatmap(model, pooled)?;
    let mut probs = upsample_bilinear_2x(&heat);
    renormalize_pixel_probs(&mut probs);
    let confidence = confidence_map(&probs);
    let (p, q, grid_win) = select_window(&confidence)?;
    // grid position → image window centered on its receptive field
    let window = Window { row: grid_win.row, col: grid_win.col, size: WINDOW_SIZE };
    debug_assert_eq!((window.row, window.col), (p, q));
    let center = (p + CENTER_OFFSET, q + CENTER_OFFSET);
    debug_assert_eq!(window.center(), center);
    Ok(Step1Output { probs, confidence, grid_pos: (p, q), window })
}
