//! `sal fit`: train the localization pipeline and the first-stage
//! classifier, writing both models plus the config echo.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use sal_core::classify::train_stage1;
use sal_core::data_io::{load_cifar10, LabeledDataset, Split};
use sal_core::pipeline::fit_sal;

use crate::config::{presets, RunConfig, SMOKE_TRAIN_PER_CLASS};

pub fn load_train(data: &Path, smoke: bool) -> Result<LabeledDataset> {
    if !data.exists() {
        bail!("dataset not found: {}", data.display());
    }
    let full = load_cifar10(data, Split::Train)
        .with_context(|| format!("loading training batches from {}", data.display()))?;
    Ok(if smoke { full.take_per_class(SMOKE_TRAIN_PER_CLASS) } else { full })
}

pub fn run(data: &Path, out: &Path, seed: u64, smoke: bool) -> Result<()> {
    let train = load_train(data, smoke)?;
    let k = train.num_classes();
    println!("fitting on {} images, {} classes (smoke={smoke})", train.len(), k);

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let p = presets(smoke, seed);
    RunConfig {
        command: "fit".into(),
        experiment: None,
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        seed,
        smoke,
        viz: false,
        pairs: None,
        resolved_sets: None,
        sal: p.sal.clone(),
        stage1: p.stage1.clone(),
        stage2: p.stage2.clone(),
    }
    .write(&out.join("fit_config.json"))?;

    let t = Instant::now();
    let pipeline = fit_sal(&train.images, &train.labels, k, &p.sal)?;
    pipeline.save(&out.join("pipeline.bin"))?;
    println!("localization pipeline fitted in {:.1}s -> pipeline.bin", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let stage1 = train_stage1(&train.images, &train.labels, k, &p.stage1)?;
    stage1.save(&out.join("stage1.bin"))?;
    println!("stage-1 classifier fitted in {:.1}s -> stage1.bin", t.elapsed().as_secs_f64());
    Ok(())
}
