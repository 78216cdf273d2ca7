//! Attention step 3: from the soft attention map to a clean object crop.
//!
//! The map is thresholded, despeckled with a clipped majority filter, and
//! boxed. Small boxes are enlarged to a minimum long side while preserving
//! aspect ratio, then the box is cropped and resampled to the standard
//! input size with a separable Lanczos-3 kernel. An empty mask falls back
//! to the fixed step-1 window.

use crate::error::{Result, SalError};
use crate::sal_step1::Window;
use crate::tensor::ImageTensor;
use crate::util::round_half_up;

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_superset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a || !b)
    }
}

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.r0 + self.r1) as f64 / 2.0, (self.c0 + self.c1) as f64 / 2.0)
    }

    pub fn from_window(w: &Window) -> Self {
        let (br, bc) = w.bottom_right();
        BBox { r0: w.row, c0: w.col, r1: br, c1: bc }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BboxMode {
    /// Tightest box over all foreground pixels.
    Tightest,
    /// Box of the 4-connected component with the most pixels; ties go to
    /// the component whose first pixel comes first in row-major order.
    MaxOccupancy,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Step3Config {
    /// Attention threshold.
    pub t_att: f32,
    /// Majority-filter radius.
    pub median_radius: usize,
    /// Minimum long side of the regularized box.
    pub min_long_side: usize,
    /// Side length of the resampled crop.
    pub output_size: usize,
    pub bbox_mode: BboxMode,
}

impl Default for Step3Config {
    fn default() -> Self {
        Self {
            t_att: 0.5,
            median_radius: 3,
            min_long_side: 16,
            output_size: 32,
            bbox_mode: BboxMode::Tightest,
        }
    }
}

/// Foreground where the map is at or above the threshold.
pub fn binarize(map: &ImageTensor, t_att: f32) -> Result<Mask> {
    if map.channels() != 1 {
        return Err(SalError::InvalidInput("attention map must have one channel".into()));
    }
    let mut m = Mask::new(map.height(), map.width());
    for r in 0..map.height() {
        for c in 0..map.width() {
            m.set(r, c, map.get(r, c, 0) >= t_att);
        }
    }
    Ok(m)
}

/// Majority filter over a (2·radius+1)² window clipped at the borders;
/// exact ties keep the pixel foreground. Monotone: adding foreground to the
/// input never removes foreground from the output.
pub fn median_clean(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = (mask.height, mask.width);
    // summed-area table of foreground counts
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            sat[(r + 1) * (w + 1) + (c + 1)] = mask.get(r, c) as u32
                + sat[r * (w + 1) + (c + 1)]
                + sat[(r + 1) * (w + 1) + c]
                - sat[r * (w + 1) + c];
        }
    }
    let rect = |r0: usize, c0: usize, r1: usize, c1: usize| -> u32 {
        sat[(r1 + 1) * (w + 1) + (c1 + 1)] + sat[r0 * (w + 1) + c0]
            - sat[r0 * (w + 1) + (c1 + 1)]
            - sat[(r1 + 1) * (w + 1) + c0]
    };
    let mut out = Mask::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let r0 = r.saturating_sub(radius);
            let c0 = c.saturating_sub(radius);
            let r1 = (r + radius).min(h - 1);
            let c1 = (c + radius).min(w - 1);
            let total = ((r1 - r0 + 1) * (c1 - c0 + 1)) as u32;
            let fg = rect(r0, c0, r1, c1);
            out.set(r, c, 2 * fg >= total);
        }
    }
    out
}

/// Bounding box of the mask under the chosen mode; `None` when empty.
pub fn extract_bbox(mask: &Mask, mode: BboxMode) -> Option<BBox> {
    match mode {
        BboxMode::Tightest => tightest_bbox(mask),
        BboxMode::MaxOccupancy => largest_component_bbox(mask),
    }
}

fn tightest_bbox(mask: &Mask) -> Option<BBox> {
    let mut bb: Option<BBox> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                bb = Some(match bb {
                    None => BBox { r0: r, c0: c, r1: r, c1: c },
                    Some(b) => BBox {
                        r0: b.r0.min(r),
                        c0: b.c0.min(c),
                        r1: b.r1.max(r),
                        c1: b.c1.max(c),
                    },
                });
            }
        }
    }
    bb
}

fn largest_component_bbox(mask: &Mask) -> Option<BBox> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        // flood fill in row-major discovery order
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0usize;
        let mut bb = BBox { r0: h, c0: w, r1: 0, c1: 0 };
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            count += 1;
            bb.r0 = bb.r0.min(r);
            bb.c0 = bb.c0.min(c);
            bb.r1 = bb.r1.max(r);
            bb.c1 = bb.c1.max(c);
            let mut push = |q: usize| {
                if mask.data[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        // strictly-greater keeps the earliest component on ties
        if best.as_ref().is_none_or(|(bc, _)| count > *bc) {
            best = Some((count, bb));
        }
    }
    best.map(|(_, bb)| bb)
}

/// Enlarges a small box so its long side reaches `min_long_side`, keeping
/// the aspect ratio (short side rounds half-up) and the center, then
/// translates the result to lie inside the image. Boxes already long enough
/// pass through unchanged.
pub fn regularize_bbox(
    bbox: &BBox,
    img_h: usize,
    img_w: usize,
    min_long_side: usize,
) -> Result<BBox> {
    if bbox.r1 >= img_h || bbox.c1 >= img_w || bbox.r0 > bbox.r1 || bbox.c0 > bbox.c1 {
        return Err(SalError::DegenerateGeometry(format!(
            "bbox {bbox:?} invalid for {img_h}×{img_w} image"
        )));
    }
    if min_long_side > img_h.min(img_w) {
        return Err(SalError::InvalidConfig(format!(
            "min long side {min_long_side} exceeds image {img_h}×{img_w}"
        )));
    }
    let (h, w) = (bbox.height(), bbox.width());
    let long = h.max(w);
    if long >= min_long_side {
        return Ok(*bbox);
    }
    let scale = min_long_side as f64 / long as f64;
    let new_h = if h >= w { min_long_side } else { (round_half_up(h as f64 * scale) as usize).max(1) };
    let new_w = if w > h { min_long_side } else { (round_half_up(w as f64 * scale) as usize).max(1) };
    let (cr, cc) = bbox.center();
    let mut r0 = round_half_up(cr - (new_h as f64 - 1.0) / 2.0).max(0) as usize;
    let mut c0 = round_half_up(cc - (new_w as f64 - 1.0) / 2.0).max(0) as usize;
    if r0 + new_h > img_h {
        r0 = img_h - new_h;
    }
    if c0 + new_w > img_w {
        c0 = img_w - new_w;
    }
    Ok(BBox { r0, c0, r1: r0 + new_h - 1, c1: c0 + new_w - 1 })
}

fn lanczos3(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x.abs() >= 3.0 {
        return 0.0;
    }
    let px = std::f64::consts::PI * x;
    3.0 * px.sin() * (px / 3.0).sin() / (px * px)
}

/// Tap indices and normalized weights for one output position of a 1-D
/// Lanczos-3 resample with half-pixel centers; out-of-range taps are
/// dropped and the rest renormalized.
fn lanczos_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, Vec<f64>) {
    let scale = in_len as f64 / out_len as f64;
    let support = 3.0 * scale.max(1.0);
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let lo = ((src - support).floor() as i64 + 1).max(0) as usize;
    let hi = ((src + support).floor() as i64).min(in_len as i64 - 1) as usize;
    let filter_scale = scale.max(1.0);
    let mut weights = Vec::with_capacity(hi - lo + 1);
    let mut sum = 0.0;
    for i in lo..=hi {
        let wgt = lanczos3((i as f64 - src) / filter_scale);
        weights.push(wgt);
        sum += wgt;
    }
    for wgt in &mut weights {
        *wgt /= sum;
    }
    (lo, weights)
}

fn resample_axis(
    input: &ImageTensor,
    out_len: usize,
    vertical: bool,
) -> ImageTensor {
    let (h, w, ch) = (input.height(), input.width(), input.channels());
    let in_len = if vertical { h } else { w };
    let (oh, ow) = if vertical { (out_len, w) } else { (h, out_len) };
    let mut out = ImageTensor::zeros(oh, ow, ch);
    for d in 0..out_len {
        let (lo, weights) = lanczos_taps(d, in_len, out_len);
        if vertical {
            for c in 0..w {
                for k in 0..ch {
                    let mut acc = 0.0f64;
                    for (t, wgt) in weights.iter().enumerate() {
                        acc += wgt * input.get(lo + t, c, k) as f64;
                    }
                    out.set(d, c, k, acc as f32);
                }
            }
        } else {
            for r in 0..h {
                for k in 0..ch {
                    let mut acc = 0.0f64;
                    for (t, wgt) in weights.iter().enumerate() {
                        acc += wgt * input.get(r, lo + t, k) as f64;
                    }
                    out.set(r, d, k, acc as f32);
                }
            }
        }
    }
    out
}

/// Crops the box and resamples it to `size`×`size` with separable
/// Lanczos-3; ringing is clamped per channel to the crop's value range.
pub fn crop_resize(img: &ImageTensor, bbox: &BBox, size: usize) -> Result<ImageTensor> {
    if bbox.r1 >= img.height() || bbox.c1 >= img.width() {
        return Err(SalError::DegenerateGeometry(format!(
            "bbox {bbox:?} outside {}×{} image",
            img.height(),
            img.width()
        )));
    }
    let (ch, hh, ww) = (img.channels(), bbox.height(), bbox.width());
    let mut crop = ImageTensor::zeros(hh, ww, ch);
    let mut lo = vec![f32::INFINITY; ch];
    let mut hi = vec![f32::NEG_INFINITY; ch];
    for r in 0..hh {
        for c in 0..ww {
            for k in 0..ch {
                let v = img.get(bbox.r0 + r, bbox.c0 + c, k);
                crop.set(r, c, k, v);
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
    }
    let mut resized = resample_axis(&resample_axis(&crop, size, true), size, false);
    for px in resized.data_mut().chunks_mut(ch) {
        for (k, val) in px.iter_mut().enumerate() {
            *val = val.clamp(lo[k], hi[k]);
        }
    }
    Ok(resized)
}

/// Step-3 result for one image.
#[derive(Debug, Clone)]
pub struct Step3Output {
    pub raw_mask: Mask,
    pub cleaned: Mask,
    pub bbox: BBox,
    pub crop: ImageTensor,
    pub used_fallback: bool,
}

/// Full step 3: threshold, clean, box, regularize, crop. An empty cleaned
/// mask falls back to the step-1 window.
pub fn localize_step3(
    attention: &ImageTensor,
    img: &ImageTensor,
    fallback: &Window,
    cfg: &Step3Config,
) -> Result<Step3Output> {
    let raw_mask = binarize(attention, cfg.t_att)?;
    let cleaned = median_clean(&raw_mask, cfg.median_radius);
    let (bbox, used_fallback) = match extract_bbox(&cleaned, cfg.bbox_mode) {
        Some(bb) => (bb, false),
        None => (BBox::from_window(fallback), true),
    };
    let bbox = regularize_bbox(&bbox, img.height(), img.width(), cfg.min_long_side)?;
    let crop = crop_resize(img, &bbox, cfg.output_size)?;
    Ok(Step3Output { raw_mask, cleaned, bbox, crop, used_fallback })
}
