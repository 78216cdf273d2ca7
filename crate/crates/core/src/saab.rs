//! PCA-derived filter banks over local neighborhoods.
//!
//! Each hop unit projects every k×k patch onto one constant (DC) kernel plus
//! orthonormal AC kernels obtained from a principal component analysis of
//! mean-removed, DC-removed patches. A bias shift on the DC response absorbs
//! the nonlinearity of the cascaded formulation. Channels are ranked by
//! eigenvalue energy and pruned by a cumulative-energy threshold.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, SalError};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    None,
    Reflect,
}

/// Flattened patches over a spatial grid, one row per position.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub rows: usize,
    pub cols: usize,
    /// (rows * cols) × (k*k*c_in), flattened in (row, col, channel) order.
    pub matrix: Array2<f32>,
}

/// Mirror index without edge repetition: -1 -> 1, n -> n-2.
#[inline]
fn reflect_index(idx: isize, len: usize) -> usize {
    let n = len as isize;
    let m = if idx < 0 {
        -idx
    } else if idx >= n {
        2 * n - 2 - idx
    } else {
        idx
    };
    debug_assert!((0..n).contains(&m));
    m as usize
}

/// Extracts every k×k patch of `fm` at stride 1.
///
/// With `Padding::None` the output grid is (H-k+1)×(W-k+1); with
/// `Padding::Reflect` it stays H×W.
pub fn extract_patches(fm: &ImageTensor, k: usize, padding: Padding) -> Result<PatchSet> {
    if k % 2 == 0 || k == 0 {
        return Err(SalError::InvalidKernel(k));
    }
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let half = (k - 1) / 2;
    let (rows, cols, row0) = match padding {
        Padding::None => {
            if h < k || w < k {
                return Err(SalError::TooSmall(format!(
                    "{h}x{w} image cannot host a {k}x{k} kernel without padding"
                )));
            }
            (h - k + 1, w - k + 1, 0isize)
        }
        Padding::Reflect => {
            if h <= half || w <= half {
                return Err(SalError::TooSmall(format!(
                    "{h}x{w} image too small for reflect padding of {half}"
                )));
            }
            (h, w, -(half as isize))
        }
    };

    let dim = k * k * c;
    let mut matrix = Array2::<f32>::zeros((rows * cols, dim));
    let data = fm.data();
    for (pr, out_row) in matrix.outer_iter_mut().enumerate() {
        let (gr, gc) = (pr / cols, pr % cols);
        let out = out_row.into_slice().expect("contiguous row");
        let mut o = 0;
        for dr in 0..k {
            let sr = reflect_index(row0 + gr as isize + dr as isize, h);
            for dc in 0..k {
                let sc = reflect_index(row0 + gc as isize + dc as isize, w);
                let base = (sr * w + sc) * c;
                out[o..o + c].copy_from_slice(&data[base..base + c]);
                o += c;
            }
        }
    }
    Ok(PatchSet { rows, cols, matrix })
}

/// Running first/second moments of a patch population, mergeable across
/// batches in a fixed order.
#[derive(Debug, Clone)]
pub struct SaabMoments {
    dim: usize,
    count: usize,
    sum: Array1<f64>,
    gram: Array2<f64>,
    max_norm_sq: f64,
}

impl SaabMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: Array1::zeros(dim),
            gram: Array2::zeros((dim, dim)),
            max_norm_sq: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn accumulate(&mut self, patches: ArrayView2<f32>) {
        assert_eq!(patches.ncols(), self.dim);
        let x = patches.mapv(|v| v as f64);
        self.gram += &x.t().dot(&x);
        self.sum += &x.sum_axis(Axis(0));
        for row in x.outer_iter() {
            let n = row.dot(&row);
            if n > self.max_norm_sq {
                self.max_norm_sq = n;
            }
        }
        self.count += patches.nrows();
    }

    pub fn merge(&mut self, other: SaabMoments) {
        assert_eq!(self.dim, other.dim);
        self.gram += &other.gram;
        self.sum += &other.sum;
        self.max_norm_sq = self.max_norm_sq.max(other.max_norm_sq);
        self.count += other.count;
    }

    fn covariance(&self) -> Array2<f64> {
        let n = self.count as f64;
        let mean = &self.sum / n;
        let mut cov = &self.gram / n;
        for i in 0..self.dim {
            for j in 0..self.dim {
                cov[[i, j]] -= mean[i] * mean[j];
            }
        }
        cov
    }
}

/// Fitted per-hop kernels: row 0 of `kernels` is the DC kernel, the rest are
/// AC kernels in descending energy order.
#[derive(Debug, Clone)]
pub struct SaabFilterBank {
    patch_shape: (usize, usize, usize),
    mean: Array1<f64>,
    kernels: Array2<f64>,
    energies: Vec<f64>,
    bias: f64,
}

impl SaabFilterBank {
    pub fn patch_shape(&self) -> (usize, usize, usize) {
        self.patch_shape
    }

    pub fn patch_dim(&self) -> usize {
        let (kh, kw, c) = self.patch_shape;
        kh * kw * c
    }

    pub fn num_channels(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    /// DC plus AC kernels, one per row.
    pub fn kernels(&self) -> &Array2<f64> {
        &self.kernels
    }

    pub fn dc_kernel(&self) -> ndarray::ArrayView1<'_, f64> {
        self.kernels.row(0)
    }

    pub fn ac_kernels(&self) -> ArrayView2<'_, f64> {
        self.kernels.slice(ndarray::s![1.., ..])
    }

    /// Per output channel; index 0 is the DC sentinel (1.0), the rest are AC
    /// eigenvalue fractions summing to 1 when any variance exists.
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn ac_energies(&self) -> &[f64] {
        &self.energies[1..]
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Number of channels (DC included) covering `threshold` of the AC
    /// energy; channels past that point are discardable.
    pub fn channels_for_threshold(&self, threshold: f64) -> usize {
        let mut cum = 0.0;
        let mut kept = 0;
        for &e in self.ac_energies() {
            if e <= 0.0 {
                break;
            }
            if cum >= threshold - 1e-12 {
                break;
            }
            cum += e;
            kept += 1;
        }
        1 + kept
    }

    pub fn from_parts(
        patch_shape: (usize, usize, usize),
        mean: Array1<f64>,
        kernels: Array2<f64>,
        energies: Vec<f64>,
        bias: f64,
    ) -> Self {
        Self { patch_shape, mean, kernels, energies, bias }
    }
}

/// Orthonormal basis of the subspace orthogonal to the constant direction,
/// as columns of a D×(D-1) matrix (Householder reflector of e0 -> dc).
fn dc_complement_basis(dim: usize) -> Array2<f64> {
    let inv = 1.0 / (dim as f64).sqrt();
    let mut v = Array1::from_elem(dim, -inv);
    v[0] += 1.0; // e0 - dc
    let norm_sq = v.dot(&v);
    let mut basis = Array2::zeros((dim, dim - 1));
    for j in 1..dim {
        for i in 0..dim {
            basis[[i, j - 1]] = f64::from(i == j) - 2.0 * v[i] * v[j] / norm_sq;
        }
    }
    basis
}

/// Flips each kernel row so its largest-magnitude coefficient is positive.
fn fix_signs(kernels: &mut Array2<f64>) {
    for mut row in kernels.outer_iter_mut() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

pub fn fit_saab_from_moments(
    moments: &SaabMoments,
    patch_shape: (usize, usize, usize),
) -> Result<SaabFilterBank> {
    let dim = moments.dim();
    assert_eq!(dim, patch_shape.0 * patch_shape.1 * patch_shape.2);
    if moments.count() < 2 {
        return Err(SalError::DegenerateInput(format!(
            "need at least 2 patches, got {}",
            moments.count()
        )));
    }

    let mean = &moments.sum / moments.count() as f64;
    let bias = moments.max_norm_sq.sqrt();

    // 1 DC row plus dim-1 AC rows
    let mut kernels = Array2::<f64>::zeros((dim, dim));
    let inv = 1.0 / (dim as f64).sqrt();
    kernels.row_mut(0).fill(inv);

    let mut energies = vec![1.0];

    if dim > 1 {
        let basis = dc_complement_basis(dim);
        let cov = moments.covariance();
        let reduced = basis.t().dot(&cov).dot(&basis);

        let sym = nalgebra::DMatrix::from_fn(dim - 1, dim - 1, |i, j| {
            0.5 * (reduced[[i, j]] + reduced[[j, i]])
        });
        let eig = sym.symmetric_eigen();

        // stable descending order; eigensolver output order breaks ties
        let mut order: Vec<usize> = (0..dim - 1).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
        });

        let total: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0)).sum();
        for (row, &src) in order.iter().enumerate() {
            let u = eig.eigenvectors.column(src);
            for i in 0..dim {
                let mut acc = 0.0;
                for j in 0..dim - 1 {
                    acc += basis[[i, j]] * u[j];
                }
                kernels[[row + 1, i]] = acc;
            }
            let lambda = eig.eigenvalues[src].max(0.0);
            energies.push(if total > 0.0 { lambda / total } else { 0.0 });
        }
        fix_signs(&mut kernels);
    }

    Ok(SaabFilterBank { patch_shape, mean: mean.to_owned(), kernels, energies, bias })
}

/// Fits a filter bank directly from a patch matrix.
///
/// `energy_threshold` only validates the config here; pruning is decided by
/// the caller via [`SaabFilterBank::channels_for_threshold`].
pub fn fit_saab(
    patches: ArrayView2<f32>,
    patch_shape: (usize, usize, usize),
    energy_threshold: f64,
) -> Result<SaabFilterBank> {
    if !(energy_threshold > 0.0 && energy_threshold <= 1.0) {
        return Err(SalError::InvalidConfig(format!(
            "energy threshold {energy_threshold} not in (0, 1]"
        )));
    }
    let mut moments = SaabMoments::new(patches.ncols());
    for chunk in patches.axis_chunks_iter(Axis(0), 8192) {
        moments.accumulate(chunk);
    }
    fit_saab_from_moments(&moments, patch_shape)
}

/// One cascade stage: a filter bank plus its padding mode and the channel
/// count retained after energy pruning.
#[derive(Debug, Clone)]
pub struct HopUnit {
    pub bank: SaabFilterBank,
    pub padding: Padding,
    pub kept_channels: usize,
}

impl HopUnit {
    pub fn new(bank: SaabFilterBank, padding: Padding, kept_channels: usize) -> Result<Self> {
        if kept_channels == 0 || kept_channels > bank.num_channels() {
            return Err(SalError::InvalidConfig(format!(
                "kept_channels {} outside 1..={}",
                kept_channels,
                bank.num_channels()
            )));
        }
        Ok(Self { bank, padding, kept_channels })
    }

    pub fn kernel_size(&self) -> usize {
        self.bank.patch_shape.0
    }

    /// Precomputed f32 projection for repeated application.
    pub fn projector(&self) -> HopProjector {
        let d = self.bank.patch_dim();
        let c = self.kept_channels;
        let mut weights = Array2::<f32>::zeros((d, c));
        for j in 0..c {
            for i in 0..d {
                weights[[i, j]] = self.bank.kernels[[j, i]] as f32;
            }
        }
        let mut offset = Array1::<f32>::zeros(c);
        offset[0] = self.bank.bias as f32;
        HopProjector {
            kernel_size: self.kernel_size(),
            in_channels: self.bank.patch_shape.2,
            padding: self.padding,
            weights,
            offset,
        }
    }
}

/// Compiled projection of patches onto retained kernels: response =
/// patch·Kᵀ with the bias added to the DC channel (the bias-shifted patch
/// only moves the DC response since AC kernels are orthogonal to constants).
#[derive(Debug, Clone)]
pub struct HopProjector {
    kernel_size: usize,
    in_channels: usize,
    padding: Padding,
    weights: Array2<f32>,
    offset: Array1<f32>,
}

impl HopProjector {
    pub fn out_channels(&self) -> usize {
        self.weights.ncols()
    }

    pub fn apply(&self, fm: &ImageTensor) -> Result<ImageTensor> {
        if fm.channels() != self.in_channels {
            return Err(SalError::InvalidInput(format!(
                "feature map has {} channels, filter bank expects {}",
                fm.channels(),
                self.in_channels
            )));
        }
        let patches = extract_patches(fm, self.kernel_size, self.padding)?;
        let mut out = patches.matrix.dot(&self.weights);
        for mut row in out.outer_iter_mut() {
            row += &self.offset;
        }
        let (rows, cols) = (patches.rows, patches.cols);
        let c = self.out_channels();
        let (data, _) = out.into_raw_vec_and_offset();
        ImageTensor::new(rows, cols, c, data)
    }
}

/// Projects a feature map through one hop unit.
pub fn apply_hop(fm: &ImageTensor, unit: &HopUnit) -> Result<ImageTensor> {
    unit.projector().apply(fm)
}

/// 2×2 max pooling with stride 2, per channel. Spatial dims must be even.
pub fn max_pool_2x2(fm: &ImageTensor) -> Result<ImageTensor> {
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SalError::InvalidInput(format!("{h}x{w} map not divisible by 2")));
    }
    let mut out = ImageTensor::zeros(h / 2, w / 2, c);
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for ch in 0..c {
                let m = fm
                    .get(2 * r, 2 * col, ch)
                    .max(fm.get(2 * r, 2 * col + 1, ch))
                    .max(fm.get(2 * r + 1, 2 * col, ch))
                    .max(fm.get(2 * r + 1, 2 * col + 1, ch));
                out.set(r, col, ch, m);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor ×2 upsampling: out(r, c) reads in(r/2, c/2).
pub fn upsample_nearest_2x(fm: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (fm.height(), fm.width(), fm.channels());
    let mut out = ImageTensor::zeros(h * 2, w * 2, c);
    for r in 0..h * 2 {
        for col in 0..w * 2 {
            for ch in 0..c {
                out.set(r, col, ch, fm.get(r / 2, col / 2, ch));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize, c: usize) -> ImageTensor {
        let data = (0..h * w * c).map(|i| i as f32).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    #[test]
    fn patch_grid_shapes() {
        let img = ramp_image(32, 32, 3);
        let p = extract_patches(&img, 3, Padding::None).unwrap();
        assert_eq!((p.rows, p.cols), (30, 30));
        assert_eq!(p.matrix.ncols(), 27);

        let img = ramp_image(14, 14, 5);
        let p = extract_patches(&img, 3, Padding::Reflect).unwrap();
        assert_eq!((p.rows, p.cols), (14, 14));
    }

    #[test]
    fn even_kernel_rejected() {
        let img = ramp_image(8, 8, 1);
        assert!(matches!(extract_patches(&img, 2, Padding::None), Err(SalError::InvalidKernel(2))));
    }

    #[test]
    fn image_smaller_than_kernel_rejected() {
        let img = ramp_image(2, 2, 1);
        assert!(matches!(extract_patches(&img, 3, Padding::None), Err(SalError::TooSmall(_))));
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = ImageTensor::filled(6, 6, 2, 3.5);
        let p = extract_patches(&img, 3, Padding::Reflect).unwrap();
        let first = p.matrix.row(0).to_owned();
        for row in p.matrix.outer_iter() {
            assert_eq!(row, first.view());
        }
    }

    #[test]
    fn reflect_indexing_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(5, 5), 3);
    }

    #[test]
    fn patch_flattening_row_col_channel_order() {
        let img = ramp_image(3, 3, 2);
        let p = extract_patches(&img, 3, Padding::None).unwrap();
        // single patch must equal the raw tensor data in order
        assert_eq!(p.matrix.row(0).to_vec(), img.data().to_vec());
    }

    #[test]
    fn all_equal_patches_keep_only_dc() {
        let patches = Array2::from_elem((10, 9), 2.0f32);
        let bank = fit_saab(patches.view(), (3, 3, 1), 0.98).unwrap();
        assert!(bank.ac_energies().iter().all(|&e| e == 0.0));
        assert_eq!(bank.channels_for_threshold(0.98), 1);
    }

    #[test]
    fn single_patch_is_degenerate() {
        let patches = Array2::from_elem((1, 9), 2.0f32);
        assert!(matches!(
            fit_saab(patches.view(), (3, 3, 1), 0.98),
            Err(SalError::DegenerateInput(_))
        ));
    }

    #[test]
    fn constant_image_has_zero_ac_response() {
        // fit on varied patches, apply to constant input
        let mut rng_state = 123u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f32) / (u32::MAX as f32)
        };
        let patches = Array2::from_shape_fn((500, 9), |_| next());
        let bank = fit_saab(patches.view(), (3, 3, 1), 1.0).unwrap();
        let kept = bank.num_channels();
        let unit = HopUnit::new(bank, Padding::None, kept).unwrap();
        let out = apply_hop(&ImageTensor::filled(5, 5, 1, 0.7), &unit).unwrap();
        for r in 0..out.height() {
            for c in 0..out.width() {
                for ch in 1..out.channels() {
                    assert!(out.get(r, c, ch).abs() < 1e-4, "AC response {}", out.get(r, c, ch));
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let patches = Array2::from_shape_fn((50, 9), |(i, j)| (i * 7 + j) as f32);
        let bank = fit_saab(patches.view(), (3, 3, 1), 0.98).unwrap();
        let unit = HopUnit::new(bank, Padding::None, 2).unwrap();
        let img = ramp_image(5, 5, 3);
        assert!(matches!(apply_hop(&img, &unit), Err(SalError::InvalidInput(_))));
    }

    #[test]
    fn pooling_and_upsampling_geometry() {
        let img = ramp_image(4, 4, 1);
        let pooled = max_pool_2x2(&img).unwrap();
        assert_eq!((pooled.height(), pooled.width()), (2, 2));
        assert_eq!(pooled.get(0, 0, 0), 5.0); // max of {0,1,4,5}

        let up = upsample_nearest_2x(&pooled);
        assert_eq!((up.height(), up.width()), (4, 4));
        assert_eq!(up.get(5 % 4, 5 % 4, 0), pooled.get((5 % 4) / 2, (5 % 4) / 2, 0));
        assert_eq!(up.get(3, 3, 0), pooled.get(1, 1, 0));
    }
}
