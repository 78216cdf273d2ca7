//! Cascaded hop units and per-pixel context vectors.
//!
//! The context cascade stacks hop units at stride 1 with no pooling or
//! padding, so the per-hop outputs shrink by 2 each stage and stay spatially
//! aligned: the receptive-field centers of all hops coincide once each hop's
//! grid is shifted by its depth. Concatenating the aligned responses of all
//! hops gives the context vector at a pixel.
//!
//! The same engine also fits the shallow refinement cascade, which instead
//! uses reflect padding and a single 2×2 max-pool mid-cascade.

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;

use crate::data_io::persist::TrainedPipeline;
use crate::error::{Result, SalError};
use crate::saab::{
    fit_saab_from_moments, max_pool_2x2, HopProjector, HopUnit, Padding, SaabFilterBank,
    SaabMoments,
};
use crate::tensor::ImageTensor;
use crate::util::{chunked_reduce, seeded_rng};

/// Patch dimension above which covariance is estimated from a capped,
/// seeded subsample of patches instead of every patch.
const EXACT_COV_DIM_LIMIT: usize = 512;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CascadeConfig {
    pub num_hops: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    /// Cumulative AC energy retained per hop.
    pub energy_threshold: f64,
    /// Optional hard cap on kept channels per hop.
    pub max_channels: Option<usize>,
    /// Patch budget for covariance estimation when the patch dimension
    /// exceeds the exact-covariance limit.
    pub max_cov_patches: usize,
    /// Insert a 2×2 max-pool after this hop index (0-based).
    pub pool_after: Option<usize>,
    pub seed: u64,
    /// Images per streaming batch during fitting.
    pub batch_size: usize,
    /// Feature-map cache budget; beyond it, fitting recomputes maps from the
    /// raw images every hop.
    pub cache_budget_bytes: usize,
}

impl CascadeConfig {
    /// Nine hops, no pooling, no padding: the context-vector extractor.
    pub fn context() -> Self {
        Self {
            num_hops: 9,
            kernel_size: 3,
            padding: Padding::None,
            energy_threshold: 0.98,
            max_channels: None,
            max_cov_patches: 1_000_000,
            pool_after: None,
            seed: 0,
            batch_size: 256,
            cache_budget_bytes: 1_500_000_000,
        }
    }

    /// Four hops with reflect padding and a pool after hop 2: the
    /// refinement feature extractor.
    pub fn refinement() -> Self {
        Self {
            num_hops: 4,
            padding: Padding::Reflect,
            pool_after: Some(1),
            ..Self::context()
        }
    }
}

/// An ordered stack of fitted hop units plus bookkeeping for alignment and
/// cascade-level energy accounting.
#[derive(Debug, Clone)]
pub struct ContextCascade {
    hops: Vec<HopUnit>,
    input_shape: (usize, usize, usize),
    /// Spatial side length of each hop output.
    spatial_sizes: Vec<usize>,
    pool_after: Option<usize>,
    /// Per hop, per kept AC channel: parent retained energy × local
    /// eigenvalue fraction.
    global_energies: Vec<Vec<f64>>,
}

impl ContextCascade {
    pub fn hops(&self) -> &[HopUnit] {
        &self.hops
    }

    pub fn num_hops(&self) -> usize {
        self.hops.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn spatial_sizes(&self) -> &[usize] {
        &self.spatial_sizes
    }

    pub fn pool_after(&self) -> Option<usize> {
        self.pool_after
    }

    pub fn global_energies(&self) -> &[Vec<f64>] {
        &self.global_energies
    }

    /// Sum of kept channels over all hops.
    pub fn context_dim(&self) -> usize {
        self.hops.iter().map(|h| h.kept_channels).sum()
    }

    pub fn deepest_size(&self) -> usize {
        *self.spatial_sizes.last().expect("at least one hop")
    }

    pub fn projectors(&self) -> Vec<HopProjector> {
        self.hops.iter().map(|h| h.projector()).collect()
    }

    /// Applies every hop in order, returning each hop's raw output map; a
    /// mid-cascade pool applies to the next hop's input, not the returned
    /// map.
    pub fn apply_all(&self, img: &ImageTensor, projectors: &[HopProjector]) -> Result<Vec<ImageTensor>> {
        let (h, w, c) = self.input_shape;
        img.expect_shape(h, w, c)?;
        let mut outputs = Vec::with_capacity(self.hops.len());
        let mut current = img.clone();
        for (u, proj) in projectors.iter().enumerate() {
            let out = proj.apply(&current)?;
            current = if self.pool_after == Some(u) { max_pool_2x2(&out)? } else { out.clone() };
            outputs.push(out);
        }
        Ok(outputs)
    }

    pub fn from_parts(
        hops: Vec<HopUnit>,
        input_shape: (usize, usize, usize),
        pool_after: Option<usize>,
        global_energies: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut spatial_sizes = Vec::with_capacity(hops.len());
        let mut size = input_shape.0;
        for (u, hop) in hops.iter().enumerate() {
            size = match hop.padding {
                Padding::None => size + 1 - hop.kernel_size(),
                Padding::Reflect => size,
            };
            // sizes record raw hop outputs; a pool shrinks the next input
            spatial_sizes.push(size);
            if pool_after == Some(u) {
                size /= 2;
            }
        }
        Ok(Self { hops, input_shape, spatial_sizes, pool_after, global_energies })
    }

    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        let (h, w, c) = self.input_shape;
        let pool = self.pool_after.map_or(0, |u| u as i64 + 1);
        p.put_i64(
            &format!("{prefix}/meta"),
            vec![5],
            vec![self.hops.len() as i64, h as i64, w as i64, c as i64, pool],
        )?;
        for (u, hop) in self.hops.iter().enumerate() {
            let bank = &hop.bank;
            let (kh, kw, cin) = bank.patch_shape();
            let pad = match hop.padding {
                Padding::None => 0,
                Padding::Reflect => 1,
            };
            p.put_i64(
                &format!("{prefix}/hop{u}/meta"),
                vec![6],
                vec![
                    kh as i64,
                    kw as i64,
                    cin as i64,
                    bank.num_channels() as i64,
                    hop.kept_channels as i64,
                    pad,
                ],
            )?;
            p.put_f64(
                &format!("{prefix}/hop{u}/mean"),
                vec![bank.patch_dim()],
                bank.mean().to_vec(),
            )?;
            p.put_f64(
                &format!("{prefix}/hop{u}/kernels"),
                vec![bank.num_channels(), bank.patch_dim()],
                bank.kernels().iter().copied().collect(),
            )?;
            p.put_f64(
                &format!("{prefix}/hop{u}/energies"),
                vec![bank.energies().len()],
                bank.energies().to_vec(),
            )?;
            p.put_f64(&format!("{prefix}/hop{u}/bias"), vec![1], vec![bank.bias()])?;
            p.put_f64(
                &format!("{prefix}/hop{u}/global_energy"),
                vec![self.global_energies[u].len()],
                self.global_energies[u].clone(),
            )?;
        }
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, meta) = p.get_i64(&format!("{prefix}/meta"))?;
        if meta.len() != 5 {
            return Err(SalError::CorruptFormat(format!("{prefix}: cascade meta length")));
        }
        let num_hops = meta[0] as usize;
        let input_shape = (meta[1] as usize, meta[2] as usize, meta[3] as usize);
        let pool_after = if meta[4] == 0 { None } else { Some(meta[4] as usize - 1) };
        let mut hops = Vec::with_capacity(num_hops);
        let mut global = Vec::with_capacity(num_hops);
        for u in 0..num_hops {
            let (_, hm) = p.get_i64(&format!("{prefix}/hop{u}/meta"))?;
            if hm.len() != 6 {
                return Err(SalError::CorruptFormat(format!("{prefix}/hop{u}: meta length")));
            }
            let patch_shape = (hm[0] as usize, hm[1] as usize, hm[2] as usize);
            let num_channels = hm[3] as usize;
            let kept = hm[4] as usize;
            let padding = match hm[5] {
                0 => Padding::None,
                1 => Padding::Reflect,
                other => {
                    return Err(SalError::CorruptFormat(format!(
                        "{prefix}/hop{u}: padding code {other}"
                    )))
                }
            };
            let dim = patch_shape.0 * patch_shape.1 * patch_shape.2;
            let (mshape, mean) = p.get_f64(&format!("{prefix}/hop{u}/mean"))?;
            let (kshape, kernels) = p.get_f64(&format!("{prefix}/hop{u}/kernels"))?;
            if mshape != [dim] || kshape != [num_channels, dim] {
                return Err(SalError::CorruptFormat(format!("{prefix}/hop{u}: blob shapes")));
            }
            let (_, energies) = p.get_f64(&format!("{prefix}/hop{u}/energies"))?;
            let (_, bias) = p.get_f64(&format!("{prefix}/hop{u}/bias"))?;
            let (_, genergy) = p.get_f64(&format!("{prefix}/hop{u}/global_energy"))?;
            let bank = SaabFilterBank::from_parts(
                patch_shape,
                Array1::from_vec(mean.to_vec()),
                Array2::from_shape_vec((num_channels, dim), kernels.to_vec())
                    .map_err(|e| SalError::CorruptFormat(e.to_string()))?,
                energies.to_vec(),
                bias[0],
            );
            hops.push(HopUnit::new(bank, padding, kept)?);
            global.push(genergy.to_vec());
        }
        Self::from_parts(hops, input_shape, pool_after, global)
    }
}

/// Concatenated multi-hop responses aligned at the deepest grid.
#[derive(Debug, Clone)]
pub struct ContextGrid {
    pub grid_size: usize,
    pub dim: usize,
    /// grid_size² rows in row-major position order.
    pub features: Array2<f32>,
}

impl ContextGrid {
    #[inline]
    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        self.features.row(row * self.grid_size + col).to_slice().expect("contiguous")
    }
}

/// Fits the cascade hop by hop on the training images.
///
/// Covariance is streamed in image batches; the transformed maps are cached
/// between hops while they fit the budget and recomputed from the raw
/// images otherwise, which yields bit-identical moments either way.
pub fn fit_cascade(images: &[ImageTensor], cfg: &CascadeConfig) -> Result<ContextCascade> {
    if images.is_empty() {
        return Err(SalError::DegenerateInput("empty training set".into()));
    }
    let (h0, w0, c0) = (images[0].height(), images[0].width(), images[0].channels());
    for img in images {
        img.expect_shape(h0, w0, c0)?;
    }

    let mut hops: Vec<HopUnit> = Vec::with_capacity(cfg.num_hops);
    let mut global_energies: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_hops);
    let mut retained = 1.0f64;
    let mut cache: Option<Vec<ImageTensor>> = Some(images.to_vec());
    let mut channels = c0;
    let mut size = h0;

    for u in 0..cfg.num_hops {
        let dim = cfg.kernel_size * cfg.kernel_size * channels;
        let grid_len = match cfg.padding {
            Padding::None => {
                let s = size.checked_sub(cfg.kernel_size - 1).filter(|&s| s > 0).ok_or_else(
                    || SalError::TooSmall(format!("hop {u}: spatial size {size} exhausted")),
                )?;
                s * s
            }
            Padding::Reflect => size * size,
        };

        let per_image_quota = if dim > EXACT_COV_DIM_LIMIT {
            Some((cfg.max_cov_patches.div_ceil(images.len())).clamp(1, grid_len))
        } else {
            None
        };

        let projectors: Vec<HopProjector> = hops.iter().map(|h| h.projector()).collect();
        let fitted_prefix = ContextCascade::from_parts(
            hops.clone(),
            (h0, w0, c0),
            cfg.pool_after,
            Vec::new(),
        )?;

        let moments = chunked_reduce(
            images.len(),
            cfg.batch_size,
            |range| {
                let mut m = SaabMoments::new(dim);
                for i in range {
                    let fm_owned;
                    let fm: &ImageTensor = match &cache {
                        Some(maps) => &maps[i],
                        None => {
                            let outs = fitted_prefix
                                .apply_all(&images[i], &projectors)
                                .expect("prefix application");
                            let raw = outs.into_iter().last().unwrap_or_else(|| images[i].clone());
                            // a pool right at the prefix boundary applies here
                            fm_owned = if u > 0 && cfg.pool_after == Some(u - 1) {
                                max_pool_2x2(&raw).expect("pool")
                            } else {
                                raw
                            };
                            &fm_owned
                        }
                    };
                    let patches = crate::saab::extract_patches(fm, cfg.kernel_size, cfg.padding)
                        .expect("patch extraction");
                    match per_image_quota {
                        None => m.accumulate(patches.matrix.view()),
                        Some(q) => {
                            let mut rng = seeded_rng(cfg.seed, &format!("cascade/hop{u}/img{i}"));
                            let picks = sample_indices(&mut rng, grid_len, q.min(grid_len));
                            let sel = patches.matrix.select(
                                ndarray::Axis(0),
                                &picks.iter().collect::<Vec<_>>(),
                            );
                            m.accumulate(sel.view());
                        }
                    }
                }
                m
            },
            |acc, m| acc.merge(m),
            SaabMoments::new(dim),
        );

        let bank = fit_saab_from_moments(&moments, (cfg.kernel_size, cfg.kernel_size, channels))?;
        if bank.ac_energies().first().is_none_or(|&e| e <= 0.0) {
            return Err(SalError::DegenerateInput(format!(
                "hop {u}: no AC variance in training patches"
            )));
        }

        let mut kept = bank.channels_for_threshold(cfg.energy_threshold);
        if let Some(cap) = cfg.max_channels {
            kept = kept.min(cap.max(1));
        }

        let local: Vec<f64> = bank.ac_energies()[..kept - 1].to_vec();
        let hop_retained: f64 = local.iter().sum();
        global_energies.push(local.iter().map(|f| retained * f).collect());
        retained *= hop_retained;

        let hop = HopUnit::new(bank, cfg.padding, kept)?;

        // advance cached maps through the new hop
        size = match cfg.padding {
            Padding::None => size + 1 - cfg.kernel_size,
            Padding::Reflect => size,
        };
        if cfg.pool_after == Some(u) {
            size /= 2;
        }
        channels = kept;

        if u + 1 < cfg.num_hops {
            let next_bytes = images.len() * size * size * channels * std::mem::size_of::<f32>();
            if cache.is_some() && next_bytes <= cfg.cache_budget_bytes {
                let proj = hop.projector();
                let maps = cache.take().expect("cache present");
                let new_maps: Result<Vec<ImageTensor>> = {
                    use rayon::prelude::*;
                    maps.par_iter()
                        .map(|fm| {
                            let mut out = proj.apply(fm)?;
                            if cfg.pool_after == Some(u) {
                                out = max_pool_2x2(&out)?;
                            }
                            Ok(out)
                        })
                        .collect()
                };
                cache = Some(new_maps?);
            } else {
                cache = None;
            }
        }

        hops.push(hop);
    }

    ContextCascade::from_parts(hops, (h0, w0, c0), cfg.pool_after, global_energies)
}

/// Concatenates, for every deepest-grid position, the responses of all hops
/// whose receptive-field centers coincide there.
///
/// Valid only for the no-pool, no-padding cascade; position (i, j) of the
/// deepest grid reads hop u (0-based) at (i + depth_offset, j + depth_offset)
/// with depth_offset = num_hops - 1 - u.
pub fn extract_context(img: &ImageTensor, cascade: &ContextCascade) -> Result<ContextGrid> {
    extract_context_with(img, cascade, &cascade.projectors())
}

pub fn extract_context_with(
    img: &ImageTensor,
    cascade: &ContextCascade,
    projectors: &[HopProjector],
) -> Result<ContextGrid> {
    if cascade.pool_after.is_some() || cascade.hops.iter().any(|h| h.padding != Padding::None) {
        return Err(SalError::InvalidInput(
            "context extraction requires a no-pool, no-padding cascade".into(),
        ));
    }
    let outputs = cascade.apply_all(img, projectors)?;
    let n = cascade.num_hops();
    let grid = cascade.deepest_size();
    let dim = cascade.context_dim();

    let mut features = Array2::<f32>::zeros((grid * grid, dim));
    for i in 0..grid {
        for j in 0..grid {
            let row = i * grid + j;
            let out = features.row_mut(row).into_slice().expect("contiguous");
            let mut o = 0;
            for (u, fm) in outputs.iter().enumerate() {
                let off = n - 1 - u;
                let (si, sj) = (i + off, j + off);
                assert!(
                    si < fm.height() && sj < fm.width(),
                    "alignment out of bounds: hop {u} ({si},{sj}) vs {}",
                    fm.height()
                );
                let px = fm.pixel(si, sj);
                out[o..o + px.len()].copy_from_slice(px);
                o += px.len();
            }
        }
    }
    Ok(ContextGrid { grid_size: grid, dim, features })
}

/// Receptive-field side length at 1-based hop depth `u` for odd kernel `k`
/// at stride 1: 1 + u·(k-1).
pub fn receptive_field(kernel_size: usize, hop_depth: usize) -> usize {
    1 + hop_depth * (kernel_size - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_images(n: usize, side: usize, ch: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = seeded_rng(seed, "test-images");
        (0..n)
            .map(|_| {
                let data = (0..side * side * ch).map(|_| rng.random_range(0.0..255.0)).collect();
                ImageTensor::new(side, side, ch, data).unwrap()
            })
            .collect()
    }

    // white noise has a flat spectrum, so cap channels to keep the patch
    // dimension from growing geometrically across hops
    fn small_cfg(hops: usize) -> CascadeConfig {
        CascadeConfig {
            num_hops: hops,
            batch_size: 8,
            max_channels: Some(6),
            ..CascadeConfig::context()
        }
    }

    #[test]
    fn spatial_chain_descends_by_two() {
        let images = random_images(12, 32, 3, 7);
        let cascade = fit_cascade(&images, &small_cfg(9)).unwrap();
        assert_eq!(cascade.spatial_sizes(), &[30, 28, 26, 24, 22, 20, 18, 16, 14]);
        assert_eq!(cascade.deepest_size(), 14);
    }

    #[test]
    fn deepest_receptive_field_is_19() {
        assert_eq!(receptive_field(3, 9), 19);
    }

    #[test]
    fn constant_training_set_is_degenerate() {
        let images = vec![ImageTensor::filled(32, 32, 3, 5.0)];
        match fit_cascade(&images, &small_cfg(2)) {
            Err(SalError::DegenerateInput(_)) => {}
            other => panic!("expected DegenerateInput, got {other:?}"),
        }
    }

    #[test]
    fn context_vectors_share_dimension_and_align_hop1() {
        let images = random_images(10, 32, 3, 3);
        let cascade = fit_cascade(&images, &small_cfg(9)).unwrap();
        let grid = extract_context(&images[0], &cascade).unwrap();
        assert_eq!(grid.grid_size, 14);
        assert_eq!(grid.dim, cascade.context_dim());

        // hop-1 slice at grid (0,0) equals hop-1 output at (8,8)
        let outputs = cascade.apply_all(&images[0], &cascade.projectors()).unwrap();
        let hop1 = &outputs[0];
        let c1 = cascade.hops()[0].kept_channels;
        assert_eq!(&grid.vector(0, 0)[..c1], hop1.pixel(8, 8));

        // deepest hop slice aligns with offset 0
        let deepest = outputs.last().unwrap();
        let cd = cascade.hops().last().unwrap().kept_channels;
        let v = grid.vector(3, 5);
        assert_eq!(&v[grid.dim - cd..], deepest.pixel(3, 5));
    }

    #[test]
    fn constant_image_yields_equal_context_vectors() {
        let images = random_images(10, 32, 3, 11);
        let cascade = fit_cascade(&images, &small_cfg(9)).unwrap();
        let grid = extract_context(&ImageTensor::filled(32, 32, 3, 9.0), &cascade).unwrap();
        let first = grid.vector(0, 0).to_vec();
        for i in 0..grid.grid_size {
            for j in 0..grid.grid_size {
                assert_eq!(grid.vector(i, j), first.as_slice());
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let images = random_images(8, 32, 3, 5);
        let cascade = fit_cascade(&images, &small_cfg(4)).unwrap();
        let a = cascade.apply_all(&images[1], &cascade.projectors()).unwrap();
        let b = cascade.apply_all(&images[1], &cascade.projectors()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn refinement_cascade_keeps_resolution_and_pools_once() {
        let images = random_images(10, 32, 3, 13);
        let cascade = fit_cascade(&images, &CascadeConfig {
            batch_size: 8,
            max_channels: Some(6),
            ..CascadeConfig::refinement()
        })
        .unwrap();
        assert_eq!(cascade.spatial_sizes(), &[32, 32, 16, 16]);
    }

    #[test]
    fn cache_and_recompute_paths_agree() {
        let images = random_images(10, 16, 3, 17);
        let mut cfg = small_cfg(3);
        cfg.batch_size = 4;
        let cached = fit_cascade(&images, &cfg).unwrap();
        cfg.cache_budget_bytes = 0;
        let streamed = fit_cascade(&images, &cfg).unwrap();
        for (a, b) in cached.hops().iter().zip(streamed.hops()) {
            assert_eq!(a.kept_channels, b.kept_channels);
            assert_eq!(a.bank.kernels(), b.bank.kernels());
        }
    }

    #[test]
    fn cache_and_recompute_paths_agree_with_pool() {
        let images = random_images(10, 16, 3, 19);
        let mut cfg = CascadeConfig {
            batch_size: 4,
            ..CascadeConfig::refinement()
        };
        cfg.max_channels = Some(6);
        let cached = fit_cascade(&images, &cfg).unwrap();
        cfg.cache_budget_bytes = 0;
        let streamed = fit_cascade(&images, &cfg).unwrap();
        for (a, b) in cached.hops().iter().zip(streamed.hops()) {
            assert_eq!(a.bank.kernels(), b.bank.kernels());
        }
    }
}
