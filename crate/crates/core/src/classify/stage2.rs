//! Stage-2 resolution of confused class pairs.
//!
//! Images sharing the same stage-1 top-two classes form a confusion set;
//! the sets partition the evaluated images. Each resolved pair gets a
//! dedicated model: an attention localizer fitted on the pair's training
//! images, a full-frame binary branch, a branch on the attention crops, and
//! a logistic ensemble over both branches' soft decisions fitted on a
//! held-out slice. At evaluation, an image routed to a resolved pair has
//! its stage-1 decision replaced by the pair's output.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;

use crate::classify::stage1::{predict_stage1, train_stage1, Stage1Config, Stage1Model};
use crate::data_io::persist::TrainedPipeline;
use crate::error::{Result, SalError};
use crate::logistic::{LogisticConfig, LogisticRegression};
use crate::pipeline::{fit_sal, SalConfig, SalPipeline};
use crate::tensor::ImageTensor;
use crate::util::seeded_rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Stage2Config {
    /// Attention localizer fitted per pair on that pair's training images.
    pub sal: SalConfig,
    /// Branch model configuration, shared by the full-frame and the
    /// cropped branch.
    pub branch: Stage1Config,
    pub ensemble: LogisticConfig,
    /// Fraction of each pair's images held out for the ensemble fit.
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            sal: SalConfig::default(),
            branch: Stage1Config::default(),
            ensemble: LogisticConfig::default(),
            holdout_fraction: 0.1,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// An unordered class pair and the images whose top-two classes name it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionSet {
    pub a: usize,
    pub b: usize,
    /// Row indices into the scored image set.
    pub members: Vec<usize>,
}

impl ConfusionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Top-two class indices of one probability row; ties go to the lower
/// class index.
pub fn top_two(row: &[f32]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
    let mut first = 0usize;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[first] {
            first = k;
        }
    }
    let mut second = usize::MAX;
    for (k, &v) in row.iter().enumerate() {
        if k == first {
            continue;
        }
        if second == usize::MAX || v > row[second] {
            second = k;
        }
    }
    (first, second)
}

/// Groups every row by its top-two pair. The sets partition the rows and
/// come back ordered by descending size, pair order breaking ties.
pub fn confusion_sets(probs: ArrayView2<f32>) -> Result<Vec<ConfusionSet>> {
    let k = probs.ncols();
    if k < 2 {
        return Err(SalError::InvalidInput("need at least two classes".into()));
    }
    let mut members = vec![Vec::<usize>::new(); k * k];
    for (i, row) in probs.rows().into_iter().enumerate() {
        let r = row.to_slice().expect("contiguous");
        let (x, y) = top_two(r);
        let (a, b) = (x.min(y), x.max(y));
        members[a * k + b].push(i);
    }
    let mut sets: Vec<ConfusionSet> = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if !members[a * k + b].is_empty() {
                sets.push(ConfusionSet { a, b, members: std::mem::take(&mut members[a * k + b]) });
            }
        }
    }
    sets.sort_by(|x, y| {
        y.members.len().cmp(&x.members.len()).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b))
    });
    Ok(sets)
}

/// The `n` largest confusion sets; `n` may not exceed the number of
/// distinct class pairs.
pub fn select_confusion_sets(probs: ArrayView2<f32>, n: usize) -> Result<Vec<ConfusionSet>> {
    let k = probs.ncols();
    let max_pairs = k * (k - 1) / 2;
    if n > max_pairs {
        return Err(SalError::InvalidConfig(format!(
            "{n} confusion sets requested but only {max_pairs} class pairs exist"
        )));
    }
    let mut sets = confusion_sets(probs)?;
    sets.truncate(n);
    Ok(sets)
}

#[derive(Debug)]
pub struct PairModel {
    pub a: usize,
    pub b: usize,
    /// Localizer fitted on this pair's training images.
    pub sal: SalPipeline,
    pub full: Stage1Model,
    pub cropped: Stage1Model,
    /// Combiner over the concatenated branch soft decisions (4 features).
    pub ensemble: LogisticRegression,
}

/// Seeded stratified split of per-pair row positions into (train,
/// holdout). Every class keeps at least one image on each side.
fn split_holdout(
    binary: &[usize],
    fraction: f64,
    seed: u64,
    tag: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut per_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in binary.iter().enumerate() {
        per_class[y].push(i);
    }
    let mut hold_flags = vec![false; binary.len()];
    for (k, rows) in per_class.iter().enumerate() {
        if rows.len() < 2 {
            return Err(SalError::DegenerateLabels(format!(
                "pair class {k} has {} images; need at least 2",
                rows.len()
            )));
        }
        let want = ((rows.len() as f64 * fraction).floor() as usize).clamp(1, rows.len() - 1);
        let mut rng = seeded_rng(seed, &format!("{tag}/class{k}"));
        let mut picks: Vec<usize> =
            sample_indices(&mut rng, rows.len(), want).into_iter().collect();
        picks.sort_unstable();
        for p in picks {
            hold_flags[rows[p]] = true;
        }
    }
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for (i, &f) in hold_flags.iter().enumerate() {
        if f {
            hold.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, hold))
}

fn gather(images: &[ImageTensor], idx: &[usize]) -> Vec<ImageTensor> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

fn crop_with(sal: &SalPipeline, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    let loc = sal.localizer();
    images.par_iter().map(|img| Ok(loc.localize(img)?.step3.crop)).collect()
}

fn branch_features(pf: &Array2<f32>, pc: &Array2<f32>) -> Array2<f32> {
    let n = pf.nrows();
    let mut x = Array2::<f32>::zeros((n, 4));
    for i in 0..n {
        x[(i, 0)] = pf[(i, 0)];
        x[(i, 1)] = pf[(i, 1)];
        x[(i, 2)] = pc[(i, 0)];
        x[(i, 3)] = pc[(i, 1)];
    }
    x
}

/// Trains the pair's localizer, both branches, and the ensemble, using the
/// training images labeled `a` or `b` (binary labels: `a` → 0, `b` → 1).
pub fn train_pair_model(
    images: &[ImageTensor],
    labels: &[usize],
    a: usize,
    b: usize,
    cfg: &Stage2Config,
) -> Result<PairModel> {
    if a >= b {
        return Err(SalError::InvalidConfig(format!("pair must be ordered, got ({a},{b})")));
    }
    if images.len() != labels.len() {
        return Err(SalError::InvalidInput("images and labels must align".into()));
    }
    let member_idx: Vec<usize> =
        (0..labels.len()).filter(|&i| labels[i] == a || labels[i] == b).collect();
    let pair_images = gather(images, &member_idx);
    let binary: Vec<usize> =
        member_idx.iter().map(|&i| usize::from(labels[i] == b)).collect();

    let sal = fit_sal(&pair_images, &binary, 2, &cfg.sal)?;
    let crops = crop_with(&sal, &pair_images)?;

    let (train_pos, hold_pos) = split_holdout(
        &binary,
        cfg.holdout_fraction,
        cfg.seed,
        &format!("stage2/holdout/{a}_{b}"),
    )?;
    let y_of = |pos: &[usize]| -> Vec<usize> { pos.iter().map(|&i| binary[i]).collect() };

    let full =
        train_stage1(&gather(&pair_images, &train_pos), &y_of(&train_pos), 2, &cfg.branch)?;
    let cropped = train_stage1(&gather(&crops, &train_pos), &y_of(&train_pos), 2, &cfg.branch)?;

    let (pf, _) = predict_stage1(&full, &gather(&pair_images, &hold_pos), cfg.batch_size)?;
    let (pc, _) = predict_stage1(&cropped, &gather(&crops, &hold_pos), cfg.batch_size)?;
    let x = branch_features(&pf, &pc);
    let ensemble = LogisticRegression::fit(x.view(), &y_of(&hold_pos), 2, &cfg.ensemble)?;

    Ok(PairModel { a, b, sal, full, cropped, ensemble })
}

/// Trains one model per confusion set; pair jobs run in parallel.
pub fn train_pair_models(
    images: &[ImageTensor],
    labels: &[usize],
    sets: &[ConfusionSet],
    cfg: &Stage2Config,
) -> Result<Vec<PairModel>> {
    sets.par_iter()
        .map(|s| train_pair_model(images, labels, s.a, s.b, cfg))
        .collect()
}

/// Per-strategy soft decisions of one pair model (columns: class `a`,
/// class `b`).
pub struct PairDecisions {
    pub full: Array2<f32>,
    pub attention: Array2<f32>,
    pub ensemble: Array2<f32>,
}

impl PairModel {
    pub fn predict_branches(
        &self,
        images: &[ImageTensor],
        batch_size: usize,
    ) -> Result<PairDecisions> {
        let crops = crop_with(&self.sal, images)?;
        let (full, _) = predict_stage1(&self.full, images, batch_size)?;
        let (attention, _) = predict_stage1(&self.cropped, &crops, batch_size)?;
        let x = branch_features(&full, &attention);
        let ensemble = self.ensemble.predict_proba(x.view())?;
        Ok(PairDecisions { full, attention, ensemble })
    }

    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        p.put_i64(&format!("{prefix}/meta"), vec![2], vec![self.a as i64, self.b as i64])?;
        self.sal.write_blobs(&format!("{prefix}/sal"), p)?;
        self.full.write_blobs(&format!("{prefix}/full"), p)?;
        self.cropped.write_blobs(&format!("{prefix}/cropped"), p)?;
        self.ensemble.write_blobs(&format!("{prefix}/ensemble"), p)?;
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, meta) = p.get_i64(&format!("{prefix}/meta"))?;
        if meta.len() != 2 {
            return Err(SalError::CorruptFormat(format!("{prefix}/meta length")));
        }
        Ok(Self {
            a: meta[0] as usize,
            b: meta[1] as usize,
            sal: SalPipeline::read_blobs(&format!("{prefix}/sal"), p)?,
            full: Stage1Model::read_blobs(&format!("{prefix}/full"), p)?,
            cropped: Stage1Model::read_blobs(&format!("{prefix}/cropped"), p)?,
            ensemble: LogisticRegression::read_blobs(&format!("{prefix}/ensemble"), p)?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut p = TrainedPipeline::new();
        self.write_blobs("pair", &mut p)?;
        crate::data_io::persist::save_pipeline(&p, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p = crate::data_io::persist::load_pipeline(path)?;
        Self::read_blobs("pair", &p)
    }
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub accuracy: f64,
    pub preds: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SetReport {
    pub a: usize,
    pub b: usize,
    /// Test images routed to this pair model.
    pub routed: usize,
    pub stage1_correct: usize,
    pub full_correct: usize,
    pub attention_correct: usize,
    pub ensemble_correct: usize,
}

#[derive(Debug, Clone)]
pub struct TwoStageReport {
    pub stage1_accuracy: f64,
    pub full: StrategyOutcome,
    pub attention: StrategyOutcome,
    pub ensemble: StrategyOutcome,
    pub per_set: Vec<SetReport>,
}

/// Routes each image by its stage-1 top-two pair; wherever a pair model
/// exists, its decision replaces the stage-1 label. All three strategies
/// (full frame, attention, ensemble) are reported side by side.
pub fn two_stage_evaluate(
    stage1_probs: ArrayView2<f32>,
    labels: &[usize],
    images: &[ImageTensor],
    pairs: &[PairModel],
    batch_size: usize,
) -> Result<TwoStageReport> {
    let n = stage1_probs.nrows();
    if labels.len() != n || images.len() != n {
        return Err(SalError::InvalidInput("probs, labels and images must align".into()));
    }
    let k = stage1_probs.ncols();
    let max_pairs = k * (k - 1) / 2;
    if pairs.len() > max_pairs {
        return Err(SalError::InvalidConfig(format!(
            "{} pair models for {max_pairs} class pairs",
            pairs.len()
        )));
    }

    let mut stage1_preds: Vec<usize> = Vec::with_capacity(n);
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); pairs.len()];
    for i in 0..n {
        let row = stage1_probs.row(i);
        let r = row.to_slice().expect("contiguous");
        let (x, y) = top_two(r);
        stage1_preds.push(x);
        let (pa, pb) = (x.min(y), x.max(y));
        if let Some(m) = pairs.iter().position(|p| p.a == pa && p.b == pb) {
            routed[m].push(i);
        }
    }

    let mut full_preds = stage1_preds.clone();
    let mut att_preds = stage1_preds.clone();
    let mut ens_preds = stage1_preds.clone();
    let mut per_set = Vec::with_capacity(pairs.len());
    for (m, pair) in pairs.iter().enumerate() {
        let idx = &routed[m];
        let mut report = SetReport {
            a: pair.a,
            b: pair.b,
            routed: idx.len(),
            stage1_correct: idx.iter().filter(|&&i| stage1_preds[i] == labels[i]).count(),
            full_correct: 0,
            attention_correct: 0,
            ensemble_correct: 0,
        };
        if !idx.is_empty() {
            let d = pair.predict_branches(&gather(images, idx), batch_size)?;
            let assign = |probs: &Array2<f32>, out: &mut [usize]| {
                for (r, &i) in idx.iter().enumerate() {
                    out[i] = if probs[(r, 1)] > probs[(r, 0)] { pair.b } else { pair.a };
                }
            };
            assign(&d.full, &mut full_preds);
            assign(&d.attention, &mut att_preds);
            assign(&d.ensemble, &mut ens_preds);
            report.full_correct = idx.iter().filter(|&&i| full_preds[i] == labels[i]).count();
            report.attention_correct =
                idx.iter().filter(|&&i| att_preds[i] == labels[i]).count();
            report.ensemble_correct =
                idx.iter().filter(|&&i| ens_preds[i] == labels[i]).count();
        }
        per_set.push(report);
    }

    let acc = |preds: &[usize]| -> f64 {
        preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n as f64
    };
    Ok(TwoStageReport {
        stage1_accuracy: acc(&stage1_preds),
        full: StrategyOutcome { accuracy: acc(&full_preds), preds: full_preds },
        attention: StrategyOutcome { accuracy: acc(&att_preds), preds: att_preds },
        ensemble: StrategyOutcome { accuracy: acc(&ens_preds), preds: ens_preds },
        per_set,
    })
}
