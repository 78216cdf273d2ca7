//! Multinomial logistic regression trained by full-batch gradient descent.
//!
//! Inputs are standardized per feature before optimization, and weights
//! optimize in f64 with a fixed iteration count and step size, so fits are
//! bit-reproducible. The binary case is just K = 2 softmax.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::data_io::persist::TrainedPipeline;
use crate::error::{Result, SalError};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LogisticConfig {
    pub iters: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { iters: 300, learning_rate: 0.5, l2: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticRegression {
    num_classes: usize,
    /// K×D weights over standardized features.
    weights: Array2<f64>,
    bias: Array1<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl LogisticRegression {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fit(
        features: ArrayView2<f32>,
        labels: &[usize],
        num_classes: usize,
        cfg: &LogisticConfig,
    ) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        if n == 0 || d == 0 {
            return Err(SalError::DegenerateInput("empty training matrix".into()));
        }
        if labels.len() != n {
            return Err(SalError::InvalidInput(format!("{} labels for {n} rows", labels.len())));
        }
        if num_classes < 2 {
            return Err(SalError::InvalidConfig("need at least two classes".into()));
        }
        let mut seen = vec![false; num_classes];
        for &y in labels {
            if y >= num_classes {
                return Err(SalError::InvalidClass { index: y, num_classes });
            }
            seen[y] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(SalError::DegenerateLabels(
                "training labels cover fewer than two classes".into(),
            ));
        }

        let x64 = features.mapv(|v| v as f64);
        let mean = x64.mean_axis(Axis(0)).expect("n > 0");
        let std = x64.var_axis(Axis(0), 0.0).mapv(|v| {
            let s = v.sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        let mut x = x64;
        for mut row in x.rows_mut() {
            row -= &mean;
            row /= &std;
        }

        let mut onehot = Array2::<f64>::zeros((n, num_classes));
        for (i, &y) in labels.iter().enumerate() {
            onehot[(i, y)] = 1.0;
        }

        let mut weights = Array2::<f64>::zeros((num_classes, d));
        let mut bias = Array1::<f64>::zeros(num_classes);
        let inv_n = 1.0 / n as f64;

        for _ in 0..cfg.iters {
            // P = softmax(X Wᵀ + b)
            let mut logits = x.dot(&weights.t());
            for mut row in logits.rows_mut() {
                row += &bias;
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|l| (l - m).exp());
                let z = row.sum();
                row /= z;
            }
            let resid = &logits - &onehot;
            let grad_w = resid.t().dot(&x) * inv_n + &(&weights * cfg.l2);
            let grad_b = resid.sum_axis(Axis(0)) * inv_n;
            weights -= &(&grad_w * cfg.learning_rate);
            bias -= &(&grad_b * cfg.learning_rate);
        }

        Ok(Self { num_classes, weights, bias, mean, std })
    }

    pub fn predict_proba(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != self.num_features() {
            return Err(SalError::InvalidInput(format!(
                "expected {} features, got {}",
                self.num_features(),
                features.ncols()
            )));
        }
        let mut x = features.mapv(|v| v as f64);
        for mut row in x.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        let mut logits = x.dot(&self.weights.t());
        let mut out = Array2::<f32>::zeros((features.nrows(), self.num_classes));
        for (mut row, mut orow) in logits.rows_mut().into_iter().zip(out.rows_mut()) {
            row += &self.bias;
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in row.iter_mut() {
                *l = (*l - m).exp();
                z += *l;
            }
            for (o, &l) in orow.iter_mut().zip(row.iter()) {
                *o = (l / z) as f32;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, features: ArrayView2<f32>) -> Result<Vec<usize>> {
        Ok(crate::gbdt::argmax_rows(&self.predict_proba(features)?))
    }

    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        let k = self.num_classes;
        let d = self.num_features();
        p.put_i64(&format!("{prefix}/meta"), vec![2], vec![k as i64, d as i64])?;
        p.put_f64(
            &format!("{prefix}/weights"),
            vec![k, d],
            self.weights.iter().copied().collect(),
        )?;
        p.put_f64(&format!("{prefix}/bias"), vec![k], self.bias.to_vec())?;
        p.put_f64(&format!("{prefix}/mean"), vec![d], self.mean.to_vec())?;
        p.put_f64(&format!("{prefix}/std"), vec![d], self.std.to_vec())?;
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, meta) = p.get_i64(&format!("{prefix}/meta"))?;
        if meta.len() != 2 {
            return Err(SalError::CorruptFormat(format!("{prefix}/meta length")));
        }
        let (k, d) = (meta[0] as usize, meta[1] as usize);
        let (_, w) = p.get_f64(&format!("{prefix}/weights"))?;
        let (_, b) = p.get_f64(&format!("{prefix}/bias"))?;
        let (_, m) = p.get_f64(&format!("{prefix}/mean"))?;
        let (_, s) = p.get_f64(&format!("{prefix}/std"))?;
        if w.len() != k * d || b.len() != k || m.len() != d || s.len() != d {
            return Err(SalError::CorruptFormat(format!("{prefix}: blob shape mismatch")));
        }
        Ok(Self {
            num_classes: k,
            weights: Array2::from_shape_vec((k, d), w.to_vec())
                .map_err(|e| SalError::CorruptFormat(e.to_string()))?,
            bias: Array1::from_vec(b.to_vec()),
            mean: Array1::from_vec(m.to_vec()),
            std: Array1::from_vec(s.to_vec()),
        })
    }
}
