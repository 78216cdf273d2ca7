//! `sal evaluate`: named experiments over the two-stage classifier.
//!
//! * `table1` — the four most-confused pairs, each scored by the full-frame
//!   branch, the attention branch, and their ensemble.
//! * `table2` — the ten-class ablation: stage-1 alone, then confusion-set
//!   resolution at each requested set count, all three strategies.
//! * `pairs` — like `table1` for an arbitrary pair list, or for the top
//!   confusion pairs found by stage-1 when no list is given.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;

use sal_core::classify::{
    predict_stage1, select_confusion_sets, train_pair_model, train_pair_models, train_stage1,
    two_stage_evaluate, Stage2Config,
};
use sal_core::data_io::{load_cifar10, subset_pairs, LabeledDataset, Split};

use crate::config::{parse_counts, parse_pairs, presets, Presets, RunConfig, SMOKE_TEST_PER_CLASS};
use crate::fit::load_train;
use crate::records::{EvalRecord, EvalReport};

/// The four pairs the ten-class model confuses most.
const DEFAULT_PAIRS: [(usize, usize); 4] = [(3, 5), (0, 8), (1, 9), (4, 7)];

const STRATEGIES: [&str; 3] = ["full", "attention", "ensemble"];

pub struct EvalArgs<'a> {
    pub experiment: &'a str,
    pub data: &'a Path,
    pub out: &'a Path,
    pub seed: u64,
    pub smoke: bool,
    pub pairs: Option<&'a str>,
    pub resolved_sets: Option<&'a str>,
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let pairs = args.pairs.map(parse_pairs).transpose()?;
    let counts = args.resolved_sets.map(parse_counts).transpose()?;
    if !matches!(args.experiment, "table1" | "table2" | "pairs") {
        bail!("unknown experiment {:?} (expected table1, table2, or pairs)", args.experiment);
    }

    let train = load_train(args.data, args.smoke)?;
    let test = load_cifar10(args.data, Split::Test)?;
    let test = if args.smoke { test.take_per_class(SMOKE_TEST_PER_CLASS) } else { test };
    println!(
        "experiment {}: {} train / {} test images",
        args.experiment,
        train.len(),
        test.len()
    );

    fs::create_dir_all(args.out)?;
    let p = presets(args.smoke, args.seed);
    RunConfig {
        command: "evaluate".into(),
        experiment: Some(args.experiment.to_string()),
        data: args.data.to_path_buf(),
        out: args.out.to_path_buf(),
        seed: args.seed,
        smoke: args.smoke,
        viz: false,
        pairs: pairs.as_ref().map(|v| v.iter().map(|&(a, b)| [a, b]).collect()),
        resolved_sets: counts.clone(),
        sal: p.sal.clone(),
        stage1: p.stage1.clone(),
        stage2: p.stage2.clone(),
    }
    .write(&args.out.join(format!("evaluate_{}_config.json", args.experiment)))?;

    let records = match args.experiment {
        "table1" => {
            let pairs = pairs.unwrap_or_else(|| DEFAULT_PAIRS.to_vec());
            pair_rows("table1", &train, &test, &pairs, &p.stage2)?
        }
        "table2" => {
            let counts = counts.unwrap_or_else(|| {
                if args.smoke {
                    vec![3, 6]
                } else {
                    vec![25, 45]
                }
            });
            table2_rows(&train, &test, &counts, &p)?
        }
        "pairs" => {
            let pairs = match pairs {
                Some(v) => v,
                None => {
                    let n = counts.as_ref().and_then(|c| c.first().copied()).unwrap_or(15);
                    top_confusion_pairs(&train, &test, n, &p)?
                }
            };
            pair_rows("pairs", &train, &test, &pairs, &p.stage2)?
        }
        _ => unreachable!(),
    };

    let report = EvalReport { experiment: args.experiment.to_string(), records };
    let path = args.out.join(format!("results_{}.json", args.experiment));
    {
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
    }
    print_table(&report);
    println!("results -> {}", path.display());
    Ok(())
}

fn binary_correct(probs: &Array2<f32>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| usize::from(probs[(i, 1)] > probs[(i, 0)]) == l)
        .count()
}

/// One pair model per listed pair, scored on that pair's test subset.
fn pair_rows(
    experiment: &str,
    train: &LabeledDataset,
    test: &LabeledDataset,
    pairs: &[(usize, usize)],
    cfg: &Stage2Config,
) -> Result<Vec<EvalRecord>> {
    let mut rows = Vec::new();
    for &(a, b) in pairs {
        let name = format!("{}/{}", test.class_names[a], test.class_names[b]);
        let model = train_pair_model(&train.images, &train.labels, a, b, cfg)
            .with_context(|| format!("fitting pair model {name}"))?;
        let sub = subset_pairs(test, a, b)?;
        let d = model.predict_branches(&sub.images, cfg.batch_size)?;
        for (strategy, probs) in STRATEGIES.iter().zip([&d.full, &d.attention, &d.ensemble]) {
            let correct = binary_correct(probs, &sub.labels);
            rows.push(EvalRecord {
                experiment: experiment.to_string(),
                row: "pair".into(),
                pair: Some(name.clone()),
                a: Some(a),
                b: Some(b),
                n_sets: None,
                strategy: Some(strategy.to_string()),
                accuracy: correct as f64 / sub.len() as f64,
                correct,
                total: sub.len(),
            });
        }
    }
    Ok(rows)
}

fn table2_rows(
    train: &LabeledDataset,
    test: &LabeledDataset,
    counts: &[usize],
    p: &Presets,
) -> Result<Vec<EvalRecord>> {
    let k = train.num_classes();
    let stage1 = train_stage1(&train.images, &train.labels, k, &p.stage1)?;
    let (probs, preds) = predict_stage1(&stage1, &test.images, p.stage1.batch_size)?;
    let stage1_correct =
        preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    println!(
        "stage-1 accuracy {:.2}% ({stage1_correct}/{})",
        100.0 * stage1_correct as f64 / test.len() as f64,
        test.len()
    );

    let mut rows = vec![EvalRecord {
        experiment: "table2".into(),
        row: "stage1".into(),
        pair: None,
        a: None,
        b: None,
        n_sets: None,
        strategy: None,
        accuracy: stage1_correct as f64 / test.len() as f64,
        correct: stage1_correct,
        total: test.len(),
    }];

    for &n in counts {
        let sets = select_confusion_sets(probs.view(), n)?;
        println!("resolving {} confusion sets", sets.len());
        for s in &sets {
            println!(
                "  {}/{}: {} test images",
                test.class_names[s.a], test.class_names[s.b], s.len()
            );
        }
        let models = train_pair_models(&train.images, &train.labels, &sets, &p.stage2)?;
        let report =
            two_stage_evaluate(probs.view(), &test.labels, &test.images, &models, p.stage2.batch_size)?;
        for (strategy, outcome) in
            STRATEGIES.iter().zip([&report.full, &report.attention, &report.ensemble])
        {
            let correct =
                outcome.preds.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
            rows.push(EvalRecord {
                experiment: "table2".into(),
                row: "resolved".into(),
                pair: None,
                a: None,
                b: None,
                n_sets: Some(n),
                strategy: Some(strategy.to_string()),
                accuracy: outcome.accuracy,
                correct,
                total: test.len(),
            });
        }
    }
    Ok(rows)
}

/// Stage-1's most confused pairs on the test split, heaviest first.
fn top_confusion_pairs(
    train: &LabeledDataset,
    test: &LabeledDataset,
    n: usize,
    p: &Presets,
) -> Result<Vec<(usize, usize)>> {
    let k = train.num_classes();
    let stage1 = train_stage1(&train.images, &train.labels, k, &p.stage1)?;
    let (probs, _) = predict_stage1(&stage1, &test.images, p.stage1.batch_size)?;
    let sets = select_confusion_sets(probs.view(), n)?;
    Ok(sets.iter().map(|s| (s.a, s.b)).collect())
}

fn print_table(report: &EvalReport) {
    println!("\n{}", report.experiment);
    for r in &report.records {
        let label = match r.row.as_str() {
            "stage1" => "stage-1".to_string(),
            "resolved" => format!("resolved n={}", r.n_sets.unwrap_or(0)),
            _ => r.pair.clone().unwrap_or_default(),
        };
        let strategy = r.strategy.as_deref().unwrap_or("");
        println!(
            "  {label:<22} {strategy:<10} {:>6.2}%  ({}/{})",
            100.0 * r.accuracy,
            r.correct,
            r.total
        );
    }
}
