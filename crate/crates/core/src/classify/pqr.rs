//! PQR color transform: a 3×3 PCA of RGB pixel colors.
//!
//! The three principal directions of the training pixel colors replace the
//! RGB axes, decorrelating the channels before the cascade. Rows of the
//! basis are ordered by descending eigenvalue and sign-fixed so the
//! largest-magnitude coefficient is positive.

use crate::data_io::persist::TrainedPipeline;
use crate::error::{Result, SalError};
use crate::tensor::ImageTensor;
use crate::util::chunked_reduce;

#[derive(Debug, Clone, PartialEq)]
pub struct PqrTransform {
    pub mean: [f64; 3],
    /// Rows are the P, Q, R directions.
    pub basis: [[f64; 3]; 3],
    pub eigenvalues: [f64; 3],
}

pub fn fit_pqr(images: &[ImageTensor]) -> Result<PqrTransform> {
    if images.is_empty() {
        return Err(SalError::DegenerateInput("no images for color PCA".into()));
    }
    for img in images {
        if img.channels() != 3 {
            return Err(SalError::InvalidInput(format!(
                "color PCA needs 3 channels, got {}",
                img.channels()
            )));
        }
    }

    #[derive(Clone)]
    struct ColorMoments {
        count: f64,
        sum: [f64; 3],
        gram: [[f64; 3]; 3],
    }
    let zero = ColorMoments { count: 0.0, sum: [0.0; 3], gram: [[0.0; 3]; 3] };
    let m = chunked_reduce(
        images.len(),
        64,
        |range| {
            let mut m = zero.clone();
            for i in range {
                for px in images[i].data().chunks_exact(3) {
                    let v = [px[0] as f64, px[1] as f64, px[2] as f64];
                    for a in 0..3 {
                        m.sum[a] += v[a];
                        for b in 0..3 {
                            m.gram[a][b] += v[a] * v[b];
                        }
                    }
                    m.count += 1.0;
                }
            }
            m
        },
        |acc, m| {
            acc.count += m.count;
            for a in 0..3 {
                acc.sum[a] += m.sum[a];
                for b in 0..3 {
                    acc.gram[a][b] += m.gram[a][b];
                }
            }
        },
        zero.clone(),
    );

    if m.count < 2.0 {
        return Err(SalError::DegenerateInput("fewer than two pixels".into()));
    }
    let mean = [m.sum[0] / m.count, m.sum[1] / m.count, m.sum[2] / m.count];
    let mut cov = [[0.0f64; 3]; 3];
    let mut total_var = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            cov[a][b] = m.gram[a][b] / m.count - mean[a] * mean[b];
        }
        total_var += cov[a][a];
    }
    if total_var <= 0.0 {
        return Err(SalError::DegenerateInput("constant colors across training set".into()));
    }

    let sym = nalgebra::Matrix3::from_fn(|i, j| 0.5 * (cov[i][j] + cov[j][i]));
    let eig = sym.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
    });

    let mut basis = [[0.0f64; 3]; 3];
    let mut eigenvalues = [0.0f64; 3];
    for (row, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut v = [col[0], col[1], col[2]];
        let mut best = 0;
        for i in 1..3 {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        basis[row] = v;
        eigenvalues[row] = eig.eigenvalues[src].max(0.0);
    }

    Ok(PqrTransform { mean, basis, eigenvalues })
}

/// Projects every pixel onto the PQR axes (mean-centered).
pub fn apply_pqr(img: &ImageTensor, t: &PqrTransform) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(SalError::InvalidInput(format!(
            "color transform needs 3 channels, got {}",
            img.channels()
        )));
    }
    let mut out = ImageTensor::zeros(img.height(), img.width(), 3);
    for (src, dst) in img.data().chunks_exact(3).zip(out.data_mut().chunks_exact_mut(3)) {
        let v = [
            src[0] as f64 - t.mean[0],
            src[1] as f64 - t.mean[1],
            src[2] as f64 - t.mean[2],
        ];
        for (k, row) in t.basis.iter().enumerate() {
            dst[k] = (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]) as f32;
        }
    }
    Ok(out)
}

impl PqrTransform {
    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        p.put_f64(&format!("{prefix}/mean"), vec![3], self.mean.to_vec())?;
        p.put_f64(
            &format!("{prefix}/basis"),
            vec![3, 3],
            self.basis.iter().flatten().copied().collect(),
        )?;
        p.put_f64(&format!("{prefix}/eigenvalues"), vec![3], self.eigenvalues.to_vec())?;
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, mean) = p.get_f64(&format!("{prefix}/mean"))?;
        let (_, basis) = p.get_f64(&format!("{prefix}/basis"))?;
        let (_, ev) = p.get_f64(&format!("{prefix}/eigenvalues"))?;
        if mean.len() != 3 || basis.len() != 9 || ev.len() != 3 {
            return Err(SalError::CorruptFormat(format!("{prefix}: color blob shapes")));
        }
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            b[i].copy_from_slice(&basis[3 * i..3 * i + 3]);
        }
        Ok(Self {
            mean: [mean[0], mean[1], mean[2]],
            basis: b,
            eigenvalues: [ev[0], ev[1], ev[2]],
        })
    }
}
