//! Stage-1 classifier: pooled context features → pixel-level class scores →
//! image-level decision.
//!
//! Training runs entirely without backprop: a color PCA decorrelates the
//! input, the cascade is fitted by successive Saab transforms, a gradient
//! boosting classifier scores every pooled context vector with the image
//! label, and a small logistic model maps the flattened class heatmap to the
//! image-level prediction. An optional second pass duplicates hard training
//! images (wrong or low-confidence under the first model) and refits the two
//! discriminative layers on the enlarged multiset.

use ndarray::Array2;
use rayon::prelude::*;

use crate::classify::pqr::{apply_pqr, fit_pqr, PqrTransform};
use crate::context::{extract_context_with, fit_cascade, CascadeConfig, ContextCascade};
use crate::data_io::persist::TrainedPipeline;
use crate::error::{Result, SalError};
use crate::gbdt::{argmax_rows, GbdtClassifier};
use crate::logistic::{LogisticConfig, LogisticRegression};
use crate::sal_step1::{
    class_heatmap, pool_context_grid, train_pixel_classifier_streaming, PooledSource, Step1Config,
};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Stage1Config {
    pub cascade: CascadeConfig,
    pub pixel: Step1Config,
    pub meta: LogisticConfig,
    /// Second training pass over duplicated hard examples.
    pub hard_mining: bool,
    /// Correctly classified images still count as hard below this top
    /// probability.
    pub hard_prob_threshold: f32,
    pub batch_size: usize,
    pub cache_budget_bytes: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            cascade: CascadeConfig::context(),
            pixel: Step1Config::default(),
            meta: LogisticConfig::default(),
            hard_mining: true,
            hard_prob_threshold: 0.6,
            batch_size: 256,
            cache_budget_bytes: 1 << 30,
        }
    }
}

#[derive(Debug)]
pub struct Stage1Model {
    pub num_classes: usize,
    pub pqr: PqrTransform,
    pub cascade: ContextCascade,
    pub pixel: GbdtClassifier,
    pub meta: LogisticRegression,
}

/// Flattened heatmap rows (grid² × classes per image) for the meta model.
fn heatmap_features(
    pixel: &GbdtClassifier,
    src: &PooledSource,
) -> Result<Array2<f32>> {
    let side = src.grid_side();
    let dim = side * side * pixel.num_classes();
    let mut x = Array2::<f32>::zeros((src.len(), dim));
    let mut err = None;
    src.for_each(|i, grid| {
        if err.is_some() {
            return;
        }
        match class_heatmap(pixel, grid) {
            Ok(heat) => {
                x.row_mut(i).into_slice().expect("contiguous").copy_from_slice(&heat.into_data());
            }
            Err(e) => err = Some(e),
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(x),
    }
}

fn fit_discriminative(
    images: &[ImageTensor],
    labels: &[usize],
    num_classes: usize,
    cascade: &ContextCascade,
    cfg: &Stage1Config,
) -> Result<(GbdtClassifier, LogisticRegression, Array2<f32>)> {
    let src = PooledSource::new(images, cascade, cfg.batch_size, cfg.cache_budget_bytes)?;
    let pixel = train_pixel_classifier_streaming(&src, labels, num_classes, &cfg.pixel)?;
    let heat = heatmap_features(&pixel, &src)?;
    let meta = LogisticRegression::fit(heat.view(), labels, num_classes, &cfg.meta)?;
    Ok((pixel, meta, heat))
}

pub fn train_stage1(
    images: &[ImageTensor],
    labels: &[usize],
    num_classes: usize,
    cfg: &Stage1Config,
) -> Result<Stage1Model> {
    if images.len() != labels.len() {
        return Err(SalError::InvalidInput(format!(
            "{} images for {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(SalError::DegenerateInput("empty training set".into()));
    }
    for &y in labels {
        if y >= num_classes {
            return Err(SalError::InvalidClass { index: y, num_classes });
        }
    }

    let pqr = fit_pqr(images)?;
    let tx: Vec<ImageTensor> =
        images.par_iter().map(|img| apply_pqr(img, &pqr)).collect::<Result<_>>()?;
    let cascade = fit_cascade(&tx, &cfg.cascade)?;
    let (mut pixel, mut meta, heat) =
        fit_discriminative(&tx, labels, num_classes, &cascade, cfg)?;

    if cfg.hard_mining {
        let proba = meta.predict_proba(heat.view())?;
        let preds = argmax_rows(&proba);
        let hard: Vec<usize> = (0..tx.len())
            .filter(|&i| {
                preds[i] != labels[i] || proba[(i, preds[i])] < cfg.hard_prob_threshold
            })
            .collect();
        // nothing hard, or everything: a second identical pass is pointless
        if !hard.is_empty() && hard.len() < tx.len() {
            let mut aug_images = tx.clone();
            let mut aug_labels = labels.to_vec();
            aug_images.extend(hard.iter().map(|&i| tx[i].clone()));
            aug_labels.extend(hard.iter().map(|&i| labels[i]));
            let (p2, m2, _) =
                fit_discriminative(&aug_images, &aug_labels, num_classes, &cascade, cfg)?;
            pixel = p2;
            meta = m2;
        }
    }

    Ok(Stage1Model { num_classes, pqr, cascade, pixel, meta })
}

/// Class probabilities and argmax predictions for a batch of images.
pub fn predict_stage1(
    model: &Stage1Model,
    images: &[ImageTensor],
    batch_size: usize,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let projectors = model.cascade.projectors();
    let side = model.cascade.deepest_size() / 2;
    let dim = side * side * model.pixel.num_classes();
    let mut probs = Array2::<f32>::zeros((images.len(), model.num_classes));
    let batch = batch_size.max(1);
    for (b, chunk) in images.chunks(batch).enumerate() {
        let rows: Vec<Vec<f32>> = chunk
            .par_iter()
            .map(|img| {
                let t = apply_pqr(img, &model.pqr)?;
                let grid = extract_context_with(&t, &model.cascade, &projectors)?;
                let pooled = pool_context_grid(&grid)?;
                Ok(class_heatmap(&model.pixel, &pooled)?.into_data())
            })
            .collect::<Result<_>>()?;
        let mut x = Array2::<f32>::zeros((chunk.len(), dim));
        for (r, row) in rows.iter().enumerate() {
            x.row_mut(r).into_slice().expect("contiguous").copy_from_slice(row);
        }
        let p = model.meta.predict_proba(x.view())?;
        let base = b * batch;
        for r in 0..chunk.len() {
            probs.row_mut(base + r).assign(&p.row(r));
        }
    }
    let preds = argmax_rows(&probs);
    Ok((probs, preds))
}

impl Stage1Model {
    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        p.put_i64(&format!("{prefix}/meta"), vec![1], vec![self.num_classes as i64])?;
        self.pqr.write_blobs(&format!("{prefix}/pqr"), p)?;
        self.cascade.write_blobs(&format!("{prefix}/cascade"), p)?;
        self.pixel.write_blobs(&format!("{prefix}/pixel"), p)?;
        self.meta.write_blobs(&format!("{prefix}/meta_lr"), p)?;
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, meta) = p.get_i64(&format!("{prefix}/meta"))?;
        if meta.len() != 1 {
            return Err(SalError::CorruptFormat(format!("{prefix}/meta length")));
        }
        Ok(Self {
            num_classes: meta[0] as usize,
            pqr: PqrTransform::read_blobs(&format!("{prefix}/pqr"), p)?,
            cascade: ContextCascade::read_blobs(&format!("{prefix}/cascade"), p)?,
            pixel: GbdtClassifier::read_blobs(&format!("{prefix}/pixel"), p)?,
            meta: LogisticRegression::read_blobs(&format!("{prefix}/meta_lr"), p)?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut p = TrainedPipeline::new();
        self.write_blobs("stage1", &mut p)?;
        crate::data_io::persist::save_pipeline(&p, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p = crate::data_io::persist::load_pipeline(path)?;
        Self::read_blobs("stage1", &p)
    }
}
