//! End-to-end attention localization: fit once on a labeled image set, then
//! localize any image in three steps.
//!
//! Fitting chains the pieces in order: the deep context cascade, the pixel
//! classifier that yields step-1 windows, the shallow refinement cascade,
//! and the window-supervised refiner. Localization replays them: step 1
//! proposes a window, step 2 turns it into a dense attention map, step 3
//! distills the map into a box and a fixed-size crop.

use std::path::Path;

use crate::context::{fit_cascade, CascadeConfig, ContextCascade};
use crate::data_io::persist::{load_pipeline, save_pipeline, TrainedPipeline};
use crate::error::{Result, SalError};
use crate::gbdt::GbdtClassifier;
use crate::saab::HopProjector;
use crate::sal_step1::{
    localize_from_pooled, localize_step1, train_pixel_classifier_streaming, PooledSource,
    Step1Config, Step1Output, Window,
};
use crate::sal_step2::{predict_attention_map, train_refiner, Step2Config};
use crate::sal_step3::{localize_step3, BboxMode, Step3Config, Step3Output};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SalConfig {
    /// Deep stride-1 cascade behind the context vectors.
    pub context: CascadeConfig,
    /// Shallow padded cascade behind the refinement features.
    pub refine: CascadeConfig,
    pub step1: Step1Config,
    pub step2: Step2Config,
    pub step3: Step3Config,
    pub batch_size: usize,
    /// Budget for caching pooled context grids during fitting.
    pub cache_budget_bytes: usize,
}

impl Default for SalConfig {
    fn default() -> Self {
        Self {
            context: CascadeConfig::context(),
            refine: CascadeConfig::refinement(),
            step1: Step1Config::default(),
            step2: Step2Config::default(),
            step3: Step3Config::default(),
            batch_size: 256,
            cache_budget_bytes: 3 << 29,
        }
    }
}

#[derive(Debug)]
pub struct SalPipeline {
    pub num_classes: usize,
    pub context: ContextCascade,
    pub pixel: GbdtClassifier,
    pub refine: ContextCascade,
    pub refiner: GbdtClassifier,
    pub step3: Step3Config,
}

pub fn fit_sal(
    images: &[ImageTensor],
    labels: &[usize],
    num_classes: usize,
    cfg: &SalConfig,
) -> Result<SalPipeline> {
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

    let context = fit_cascade(images, &cfg.context)?;
    let src = PooledSource::new(images, &context, cfg.batch_size, cfg.cache_budget_bytes)?;
    let pixel = train_pixel_classifier_streaming(&src, labels, num_classes, &cfg.step1)?;

    let mut windows: Vec<Window> = Vec::with_capacity(images.len());
    let mut err = None;
    src.for_each(|_, grid| {
        if err.is_some() {
            return;
        }
        match localize_from_pooled(&pixel, grid) {
            Ok(out) => windows.push(out.window),
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }

    let refine = fit_cascade(images, &cfg.refine)?;
    let refiner = train_refiner(images, &windows, &refine, &cfg.step2)?;

    Ok(SalPipeline {
        num_classes,
        context,
        pixel,
        refine,
        refiner,
        step3: cfg.step3.clone(),
    })
}

#[derive(Debug)]
pub struct SalLocalization {
    pub step1: Step1Output,
    /// Dense refinement scores on the image grid, one channel.
    pub attention: ImageTensor,
    pub step3: Step3Output,
}

/// Reusable localizer holding precomputed projections for both cascades.
pub struct SalLocalizer<'a> {
    pipeline: &'a SalPipeline,
    context_projectors: Vec<HopProjector>,
    refine_projectors: Vec<HopProjector>,
}

impl SalPipeline {
    pub fn localizer(&self) -> SalLocalizer<'_> {
        SalLocalizer {
            pipeline: self,
            context_projectors: self.context.projectors(),
            refine_projectors: self.refine.projectors(),
        }
    }

    /// One-off localization; prefer [`SalPipeline::localizer`] in loops.
    pub fn localize(&self, img: &ImageTensor) -> Result<SalLocalization> {
        self.localizer().localize(img)
    }

    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        p.put_i64(&format!("{prefix}/meta"), vec![1], vec![self.num_classes as i64])?;
        self.context.write_blobs(&format!("{prefix}/context"), p)?;
        self.pixel.write_blobs(&format!("{prefix}/pixel"), p)?;
        self.refine.write_blobs(&format!("{prefix}/refine"), p)?;
        self.refiner.write_blobs(&format!("{prefix}/refiner"), p)?;
        let mode = match self.step3.bbox_mode {
            BboxMode::Tightest => 0i64,
            BboxMode::MaxOccupancy => 1,
        };
        p.put_i64(
            &format!("{prefix}/step3/meta"),
            vec![4],
            vec![
                self.step3.median_radius as i64,
                self.step3.min_long_side as i64,
                self.step3.output_size as i64,
                mode,
            ],
        )?;
        p.put_f64(&format!("{prefix}/step3/t_att"), vec![1], vec![self.step3.t_att as f64])?;
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, meta) = p.get_i64(&format!("{prefix}/meta"))?;
        if meta.len() != 1 {
            return Err(SalError::CorruptFormat(format!("{prefix}/meta length")));
        }
        let (_, s3) = p.get_i64(&format!("{prefix}/step3/meta"))?;
        if s3.len() != 4 {
            return Err(SalError::CorruptFormat(format!("{prefix}/step3: meta length")));
        }
        let bbox_mode = match s3[3] {
            0 => BboxMode::Tightest,
            1 => BboxMode::MaxOccupancy,
            other => {
                return Err(SalError::CorruptFormat(format!("{prefix}/step3: mode {other}")))
            }
        };
        let (_, t_att) = p.get_f64(&format!("{prefix}/step3/t_att"))?;
        Ok(Self {
            num_classes: meta[0] as usize,
            context: ContextCascade::read_blobs(&format!("{prefix}/context"), p)?,
            pixel: GbdtClassifier::read_blobs(&format!("{prefix}/pixel"), p)?,
            refine: ContextCascade::read_blobs(&format!("{prefix}/refine"), p)?,
            refiner: GbdtClassifier::read_blobs(&format!("{prefix}/refiner"), p)?,
            step3: Step3Config {
                t_att: t_att[0] as f32,
                median_radius: s3[0] as usize,
                min_long_side: s3[1] as usize,
                output_size: s3[2] as usize,
                bbox_mode,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut p = TrainedPipeline::new();
        self.write_blobs("sal", &mut p)?;
        save_pipeline(&p, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = load_pipeline(path)?;
        Self::read_blobs("sal", &p)
    }
}

impl SalLocalizer<'_> {
    pub fn localize(&self, img: &ImageTensor) -> Result<SalLocalization> {
        let p = self.pipeline;
        let step1 = localize_step1(img, &p.context, &self.context_projectors, &p.pixel)?;
        let attention =
            predict_attention_map(img, &p.refine, &self.refine_projectors, &p.refiner)?;
        let step3 = localize_step3(&attention, img, &step1.window, &p.step3)?;
        Ok(SalLocalization { step1, attention, step3 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::GbdtConfig;
    use crate::util::seeded_rng;
    use rand::Rng;

    /// Bright square objects on dark noisy backgrounds; the class encodes
    /// the object's color channel.
    fn object_dataset(n_per_class: usize, seed: u64) -> (Vec<ImageTensor>, Vec<usize>) {
        let mut rng = seeded_rng(seed, "pipeline/toy");
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for k in 0..2usize {
            for _ in 0..n_per_class {
                let mut img = ImageTensor::zeros(32, 32, 3);
                for v in img.data_mut() {
                    *v = rng.random_range(0.0..40.0);
                }
                let r0 = rng.random_range(4..18usize);
                let c0 = rng.random_range(4..18usize);
                for r in r0..r0 + 10 {
                    for c in c0..c0 + 10 {
                        img.set(r, c, k, 200.0 + rng.random_range(-20.0..20.0));
                    }
                }
                images.push(img);
                labels.push(k);
            }
        }
        (images, labels)
    }

    fn tiny_config() -> SalConfig {
        let mut cfg = SalConfig::default();
        // small channel caps keep the cascades cheap on noisy test images
        cfg.context.max_channels = Some(4);
        cfg.context.seed = 5;
        cfg.refine.max_channels = Some(4);
        cfg.refine.seed = 5;
        cfg.step1.gbdt = GbdtConfig { rounds: 20, max_depth: 2, ..GbdtConfig::default() };
        cfg.step2.gbdt = GbdtConfig { rounds: 20, max_depth: 2, ..GbdtConfig::default() };
        cfg.step2.sample_cap = 30_000;
        cfg.batch_size = 8;
        cfg
    }

    #[test]
    fn fit_and_localize_on_synthetic_objects() {
        let (images, labels) = object_dataset(6, 1);
        let pipe = fit_sal(&images, &labels, 2, &tiny_config()).unwrap();
        let loc = pipe.localizer();
        for img in &images {
            let out = loc.localize(img).unwrap();
            assert_eq!(out.attention.height(), 32);
            assert_eq!(out.attention.channels(), 1);
            assert_eq!(out.step3.crop.height(), 32);
            assert_eq!(out.step3.crop.width(), 32);
            assert_eq!(out.step3.crop.channels(), 3);
            let bb = &out.step3.bbox;
            assert!(bb.height() >= 16 || bb.width() >= 16);
            let s: f32 = (0..2).map(|k| out.step1.probs.get(0, 0, k)).sum();
            assert!((s - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (images, labels) = object_dataset(5, 2);
        let pipe = fit_sal(&images, &labels, 2, &tiny_config()).unwrap();
        let dir = std::env::temp_dir().join("sal_pipe_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.salpipe");
        pipe.save(&path).unwrap();
        let restored = SalPipeline::load(&path).unwrap();

        let a = pipe.localize(&images[0]).unwrap();
        let b = restored.localize(&images[0]).unwrap();
        assert_eq!(a.attention.data(), b.attention.data());
        assert_eq!(a.step3.bbox, b.step3.bbox);
        assert_eq!(a.step3.crop.data(), b.step3.crop.data());

        // a second save of the restored pipeline is byte-identical
        let path2 = dir.join("roundtrip2.salpipe");
        restored.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(&path2).ok();
    }

    #[test]
    fn fitting_is_deterministic() {
        let (images, labels) = object_dataset(4, 3);
        let cfg = tiny_config();
        let a = fit_sal(&images, &labels, 2, &cfg).unwrap();
        let b = fit_sal(&images, &labels, 2, &cfg).unwrap();
        let la = a.localize(&images[1]).unwrap();
        let lb = b.localize(&images[1]).unwrap();
        assert_eq!(la.attention.data(), lb.attention.data());
        assert_eq!(la.step1.window, lb.step1.window);
    }

    #[test]
    fn step1_window_always_fits_the_image() {
        let (images, labels) = object_dataset(4, 4);
        let pipe = fit_sal(&images, &labels, 2, &tiny_config()).unwrap();
        let loc = pipe.localizer();
        for img in &images {
            let out = loc.localize(img).unwrap();
            let w = &out.step1.window;
            let (br, bc) = w.bottom_right();
            assert!(br < 32 && bc < 32, "window {w:?} escapes the image");
        }
    }
}
