//! Attention step 2: a pixel-level attention refiner.
//!
//! The coarse window from step 1 supervises a binary pixel classifier:
//! pixels deep inside the window are positives, pixels far outside are
//! negatives, and a band of width `margin` around the window boundary is
//! left unlabeled. Features come from a shallow reflect-padded cascade that
//! keeps full resolution, so the refiner scores every pixel of the image
//! and produces a 32×32 attention map.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;

use crate::context::ContextCascade;
use crate::error::{Result, SalError};
use crate::gbdt::{GbdtClassifier, GbdtConfig};
use crate::saab::{upsample_nearest_2x, HopProjector};
use crate::sal_step1::Window;
use crate::tensor::ImageTensor;
use crate::util::seeded_rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Step2Config {
    /// Unlabeled band width around the window boundary.
    pub margin: usize,
    /// Cap on refiner training rows across all images.
    pub sample_cap: usize,
    pub gbdt: GbdtConfig,
    pub seed: u64,
}

impl Default for Step2Config {
    fn default() -> Self {
        Self { margin: 3, sample_cap: 200_000, gbdt: GbdtConfig::default(), seed: 0 }
    }
}

/// Chebyshev distance from a pixel to the nearest pixel of the window set;
/// zero inside the window.
fn chebyshev_to_window(r: usize, c: usize, w: &Window) -> usize {
    let (br, bc) = w.bottom_right();
    let dr = if r < w.row {
        w.row - r
    } else if r > br {
        r - br
    } else {
        0
    };
    let dc = if c < w.col {
        w.col - c
    } else if c > bc {
        c - bc
    } else {
        0
    };
    dr.max(dc)
}

/// Chebyshev distance from an inside pixel to the nearest image pixel
/// outside the window; zero for pixels outside. A side flush with the image
/// edge has no exterior there and is skipped.
fn chebyshev_to_exterior(r: usize, c: usize, w: &Window, height: usize, width: usize) -> usize {
    if chebyshev_to_window(r, c, w) > 0 {
        return 0;
    }
    let (br, bc) = w.bottom_right();
    let mut d = usize::MAX;
    if w.row > 0 {
        d = d.min(r - w.row + 1);
    }
    if br + 1 < height {
        d = d.min(br - r + 1);
    }
    if w.col > 0 {
        d = d.min(c - w.col + 1);
    }
    if bc + 1 < width {
        d = d.min(bc - c + 1);
    }
    d
}

/// Labeled pixel positions for one image: all confident positives and an
/// equally sized seeded sample of far-outside negatives, each in row-major
/// order.
pub fn sample_refinement_pixels(
    window: &Window,
    height: usize,
    width: usize,
    margin: usize,
    seed: u64,
    tag: &str,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let (br, bc) = window.bottom_right();
    if br >= height || bc >= width {
        return Err(SalError::InvalidInput(format!(
            "window {window:?} exceeds {height}×{width} image"
        )));
    }
    let mut positives = Vec::new();
    let mut negative_pool = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if window.contains(r, c) {
                if chebyshev_to_exterior(r, c, window, height, width) > margin {
                    positives.push((r, c));
                }
            } else if chebyshev_to_window(r, c, window) > margin {
                negative_pool.push((r, c));
            }
        }
    }
    if positives.is_empty() {
        return Err(SalError::DegenerateGeometry(format!(
            "margin {margin} leaves no positive pixels in a {0}×{0} window",
            window.size
        )));
    }
    let want = positives.len().min(negative_pool.len());
    let negatives = if want == negative_pool.len() {
        negative_pool
    } else {
        let mut rng = seeded_rng(seed, tag);
        let mut picks: Vec<usize> =
            sample_indices(&mut rng, negative_pool.len(), want).into_iter().collect();
        picks.sort_unstable();
        picks.into_iter().map(|i| negative_pool[i]).collect()
    };
    Ok((positives, negatives))
}

/// Per-pixel refinement features: hop-2 output concatenated with the
/// nearest-neighbor upsampled hop-4 output, both at full resolution.
pub fn refinement_features(
    img: &ImageTensor,
    cascade: &ContextCascade,
    projectors: &[HopProjector],
) -> Result<ImageTensor> {
    if cascade.num_hops() != 4 || cascade.pool_after() != Some(1) {
        return Err(SalError::InvalidInput(
            "refinement features need a 4-hop cascade pooled after hop 2".into(),
        ));
    }
    let outputs = cascade.apply_all(img, projectors)?;
    let hop2 = &outputs[1];
    let hop4 = upsample_nearest_2x(&outputs[3]);
    let (h, w) = (hop2.height(), hop2.width());
    if hop4.height() != h || hop4.width() != w {
        return Err(SalError::InvalidInput(format!(
            "hop-4 upsample {}×{} does not match hop-2 {h}×{w}",
            hop4.height(),
            hop4.width()
        )));
    }
    let (c2, c4) = (hop2.channels(), hop4.channels());
    let mut out = ImageTensor::zeros(h, w, c2 + c4);
    for r in 0..h {
        for c in 0..w {
            let dst = out.pixel_mut(r, c);
            dst[..c2].copy_from_slice(hop2.pixel(r, c));
            dst[c2..].copy_from_slice(hop4.pixel(r, c));
        }
    }
    Ok(out)
}

/// Trains the binary attention refiner from step-1 windows.
///
/// Each image contributes its positives and matched negatives; when the
/// total would exceed the cap, a per-image quota of positive/negative pairs
/// is sampled instead, keeping the set balanced.
pub fn train_refiner(
    images: &[ImageTensor],
    windows: &[Window],
    cascade: &ContextCascade,
    cfg: &Step2Config,
) -> Result<GbdtClassifier> {
    if images.is_empty() || images.len() != windows.len() {
        return Err(SalError::InvalidInput(format!(
            "{} images for {} windows",
            images.len(),
            windows.len()
        )));
    }
    let projectors = cascade.projectors();
    let n = images.len();
    let probe = sample_refinement_pixels(
        &windows[0],
        images[0].height(),
        images[0].width(),
        cfg.margin,
        cfg.seed,
        "step2/probe",
    )?;
    let per_image_full = probe.0.len() + probe.1.len();
    let pair_quota = if n * per_image_full <= cfg.sample_cap {
        usize::MAX
    } else {
        (cfg.sample_cap / (2 * n)).max(1)
    };

    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dim = 0usize;
    for (i, (img, win)) in images.iter().zip(windows).enumerate() {
        let feats = refinement_features(img, cascade, &projectors)?;
        dim = feats.channels();
        let (mut pos, mut neg) = sample_refinement_pixels(
            img_window_checked(win, img)?,
            img.height(),
            img.width(),
            cfg.margin,
            cfg.seed,
            &format!("step2/neg/img{i}"),
        )?;
        if pair_quota < pos.len() {
            let mut rng = seeded_rng(cfg.seed, &format!("step2/quota/img{i}"));
            pos = pick_sorted(&pos, pair_quota, &mut rng);
            neg = pick_sorted(&neg, pair_quota.min(neg.len()), &mut rng);
        }
        for &(r, c) in &pos {
            rows.push(feats.pixel(r, c).to_vec());
            labels.push(1);
        }
        for &(r, c) in &neg {
            rows.push(feats.pixel(r, c).to_vec());
            labels.push(0);
        }
    }

    let mut x = Array2::<f32>::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        x.row_mut(i).into_slice().expect("contiguous").copy_from_slice(row);
    }
    GbdtClassifier::fit(x.view(), &labels, 2, &cfg.gbdt)
}

fn img_window_checked<'w>(w: &'w Window, img: &ImageTensor) -> Result<&'w Window> {
    let (br, bc) = w.bottom_right();
    if br >= img.height() || bc >= img.width() {
        return Err(SalError::InvalidInput(format!(
            "window {w:?} exceeds {}×{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(w)
}

fn pick_sorted(
    items: &[(usize, usize)],
    take: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if take >= items.len() {
        return items.to_vec();
    }
    let mut picks: Vec<usize> = sample_indices(rng, items.len(), take).into_iter().collect();
    picks.sort_unstable();
    picks.into_iter().map(|i| items[i]).collect()
}

/// Scores every pixel with the refiner: a 1-channel map of attention
/// probabilities.
pub fn predict_attention_map(
    img: &ImageTensor,
    cascade: &ContextCascade,
    projectors: &[HopProjector],
    refiner: &GbdtClassifier,
) -> Result<ImageTensor> {
    let feats = refinement_features(img, cascade, projectors)?;
    let (h, w, d) = (feats.height(), feats.width(), feats.channels());
    let mut x = Array2::<f32>::zeros((h * w, d));
    for r in 0..h {
        for c in 0..w {
            x.row_mut(r * w + c)
                .into_slice()
                .expect("contiguous")
                .copy_from_slice(feats.pixel(r, c));
        }
    }
    let proba = refiner.predict_proba(x.view())?;
    let mut out = ImageTensor::zeros(h, w, 1);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, 0, proba[(r * w + c, 1)]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{fit_cascade, CascadeConfig};
    use crate::util::seeded_rng;
    use rand::Rng;

    fn brute_force_sets(
        w: &Window,
        h: usize,
        width: usize,
        margin: usize,
    ) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let inside: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .filter(|&(r, c)| w.contains(r, c))
            .collect();
        let outside: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .filter(|&(r, c)| !w.contains(r, c))
            .collect();
        let cheb = |a: (usize, usize), b: (usize, usize)| -> usize {
            a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
        };
        let pos: Vec<_> = inside
            .iter()
            .copied()
            .filter(|&p| outside.iter().map(|&q| cheb(p, q)).min().unwrap() > margin)
            .collect();
        let neg: Vec<_> = outside
            .iter()
            .copied()
            .filter(|&p| inside.iter().map(|&q| cheb(p, q)).min().unwrap() > margin)
            .collect();
        (pos, neg)
    }

    #[test]
    fn margin_three_gives_169_positives() {
        let w = Window { row: 6, col: 6, size: 19 };
        let (pos, neg) = sample_refinement_pixels(&w, 32, 32, 3, 0, "t").unwrap();
        assert_eq!(pos.len(), 169);
        assert_eq!(neg.len(), 169);
        let (bpos, _) = brute_force_sets(&w, 32, 32, 3);
        assert_eq!(pos, bpos);
    }

    #[test]
    fn margin_zero_counts_match_full_partition() {
        let w = Window { row: 6, col: 6, size: 19 };
        let (pos, neg) = sample_refinement_pixels(&w, 32, 32, 0, 0, "t").unwrap();
        assert_eq!(pos.len(), 361);
        // negatives are balanced down to the positive count
        assert_eq!(neg.len(), 361);
        let (bpos, bneg) = brute_force_sets(&w, 32, 32, 0);
        assert_eq!(bpos.len(), 361);
        assert_eq!(bneg.len(), 663);
        assert_eq!(pos, bpos);
        for p in &neg {
            assert!(bneg.contains(p));
        }
    }

    #[test]
    fn candidate_sets_match_brute_force_on_random_windows() {
        let mut rng = seeded_rng(9, "bf");
        for _ in 0..6 {
            let row = rng.random_range(0..14);
            let col = rng.random_range(0..14);
            let margin = rng.random_range(0..4);
            let w = Window { row, col, size: 19 };
            let (bpos, bneg) = brute_force_sets(&w, 32, 32, margin);
            let (pos, neg) =
                sample_refinement_pixels(&w, 32, 32, margin, 1, "bf").unwrap();
            assert_eq!(pos, bpos, "positives at {w:?} margin {margin}");
            assert_eq!(neg.len(), bpos.len().min(bneg.len()));
            for p in &neg {
                assert!(bneg.contains(p), "negative {p:?} outside oracle set");
            }
        }
    }

    #[test]
    fn oversized_margin_is_degenerate() {
        // the 19×19 window center survives margin 9 (distance 10); 10 empties it
        let w = Window { row: 6, col: 6, size: 19 };
        let (pos, _) = sample_refinement_pixels(&w, 32, 32, 9, 0, "t").unwrap();
        assert_eq!(pos, vec![(15, 15)]);
        match sample_refinement_pixels(&w, 32, 32, 10, 0, "t") {
            Err(SalError::DegenerateGeometry(_)) => {}
            other => panic!("expected DegenerateGeometry, got {other:?}"),
        }
    }

    #[test]
    fn negative_sampling_is_deterministic() {
        let w = Window { row: 3, col: 10, size: 19 };
        let a = sample_refinement_pixels(&w, 32, 32, 3, 42, "same").unwrap();
        let b = sample_refinement_pixels(&w, 32, 32, 3, 42, "same").unwrap();
        assert_eq!(a, b);
        let c = sample_refinement_pixels(&w, 32, 32, 3, 43, "same").unwrap();
        assert_ne!(a.1, c.1);
    }

    fn blobby_images(n: usize, seed: u64) -> (Vec<ImageTensor>, Vec<Window>) {
        let mut rng = seeded_rng(seed, "blobby");
        let mut images = Vec::new();
        let mut windows = Vec::new();
        for _ in 0..n {
            let wr = rng.random_range(0..14);
            let wc = rng.random_range(0..14);
            let win = Window { row: wr, col: wc, size: 19 };
            let mut img = ImageTensor::zeros(32, 32, 3);
            for r in 0..32 {
                for c in 0..32 {
                    let inside = win.contains(r, c);
                    for ch in 0..3 {
                        let base = if inside { 200.0 } else { 40.0 };
                        img.set(r, c, ch, base + rng.random_range(-20.0..20.0));
                    }
                }
            }
            images.push(img);
            windows.push(win);
        }
        (images, windows)
    }

    #[test]
    fn refiner_recovers_bright_windows() {
        let (images, windows) = blobby_images(12, 21);
        let cascade = fit_cascade(
            &images,
            &CascadeConfig { max_channels: Some(5), batch_size: 4, ..CascadeConfig::refinement() },
        )
        .unwrap();
        let cfg = Step2Config {
            gbdt: GbdtConfig { rounds: 25, ..Default::default() },
            ..Default::default()
        };
        let refiner = train_refiner(&images, &windows, &cascade, &cfg).unwrap();
        let projectors = cascade.projectors();
        let map = predict_attention_map(&images[0], &cascade, &projectors, &refiner).unwrap();
        assert_eq!((map.height(), map.width(), map.channels()), (32, 32, 1));
        let win = &windows[0];
        let (cr, cc) = win.center();
        assert!(map.get(cr, cc, 0) > 0.5, "center score {}", map.get(cr, cc, 0));
        // far corner opposite the window should be background
        let (fr, fc) = (if win.row < 7 { 31 } else { 0 }, if win.col < 7 { 31 } else { 0 });
        assert!(map.get(fr, fc, 0) < 0.5, "corner score {}", map.get(fr, fc, 0));
    }

    #[test]
    fn sample_cap_bounds_training_rows() {
        let (images, windows) = blobby_images(6, 33);
        let cascade = fit_cascade(
            &images,
            &CascadeConfig { max_channels: Some(4), batch_size: 4, ..CascadeConfig::refinement() },
        )
        .unwrap();
        let cfg = Step2Config {
            sample_cap: 120,
            gbdt: GbdtConfig { rounds: 5, ..Default::default() },
            ..Default::default()
        };
        // quota = 120 / (2·6) = 10 pairs per image; training just has to succeed
        let refiner = train_refiner(&images, &windows, &cascade, &cfg).unwrap();
        assert_eq!(refiner.num_classes(), 2);
    }
}
