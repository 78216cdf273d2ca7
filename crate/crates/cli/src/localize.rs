//! `sal localize`: apply a fitted pipeline to the test split, writing one
//! box record per image and optional four-panel visualizations.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Result};
use rayon::prelude::*;

use sal_core::data_io::{load_cifar10, Split};
use sal_core::pipeline::SalPipeline;

use crate::config::{presets, RunConfig, SMOKE_TEST_PER_CLASS};
use crate::records::BoxRecord;
use crate::viz;

pub fn run(data: &Path, out: &Path, seed: u64, smoke: bool, with_viz: bool) -> Result<()> {
    if !data.exists() {
        bail!("dataset not found: {}", data.display());
    }
    let pipeline_path = out.join("pipeline.bin");
    if !pipeline_path.exists() {
        bail!("no fitted pipeline at {} (run `sal fit` first)", pipeline_path.display());
    }
    let pipeline = SalPipeline::load(&pipeline_path)?;

    let test = load_cifar10(data, Split::Test)?;
    let test = if smoke { test.take_per_class(SMOKE_TEST_PER_CLASS) } else { test };
    println!("localizing {} test images", test.len());

    fs::create_dir_all(out)?;
    let p = presets(smoke, seed);
    RunConfig {
        command: "localize".into(),
        experiment: None,
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        seed,
        smoke,
        viz: with_viz,
        pairs: None,
        resolved_sets: None,
        sal: p.sal,
        stage1: p.stage1,
        stage2: p.stage2,
    }
    .write(&out.join("localize_config.json"))?;

    let viz_dir = out.join("viz");
    if with_viz {
        fs::create_dir_all(&viz_dir)?;
    }

    let localizer = pipeline.localizer();
    let records: Vec<BoxRecord> = test
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| match localizer.localize(img) {
            Ok(loc) => {
                let viz_err = if with_viz {
                    viz::four_panel(img, &loc)
                        .save(viz_dir.join(format!("box_{i:05}.png")))
                        .err()
                        .map(|e| format!("viz: {e}"))
                } else {
                    None
                };
                BoxRecord {
                    index: i,
                    label: test.labels[i],
                    window: Some(loc.step1.window),
                    bbox: Some(loc.step3.bbox),
                    used_fallback: loc.step3.used_fallback,
                    error: viz_err,
                }
            }
            Err(e) => BoxRecord {
                index: i,
                label: test.labels[i],
                window: None,
                bbox: None,
                used_fallback: false,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let boxes_path = out.join("boxes.jsonl");
    {
        let mut w = BufWriter::new(File::create(&boxes_path)?);
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
    }

    // read the file back and require an exact round trip
    let reread: Vec<BoxRecord> = BufReader::new(File::open(&boxes_path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    if reread != records {
        bail!("box record file does not round-trip");
    }

    let fallbacks = records.iter().filter(|r| r.used_fallback).count();
    let failures: Vec<&BoxRecord> = records.iter().filter(|r| r.error.is_some()).collect();
    println!(
        "wrote {} box records ({} via fallback) -> {}",
        records.len(),
        fallbacks,
        boxes_path.display()
    );
    if !failures.is_empty() {
        for r in &failures {
            eprintln!("image {} failed: {}", r.index, r.error.as_deref().unwrap_or(""));
        }
        bail!("{} of {} images failed", failures.len(), records.len());
    }
    Ok(())
}
