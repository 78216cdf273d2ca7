//! Gradient-boosted decision trees over quantile-binned features.
//!
//! Training quantizes each feature into at most 256 bins and finds splits
//! with per-node histograms, deriving the larger sibling's histogram as
//! parent minus smaller sibling. Trees are grown depth-wise with
//! second-order (gradient/hessian) gain, softmax objective for multiclass
//! and logistic for binary. Splits store the raw feature threshold, so
//! inference never touches the binner.
//!
//! Everything is deterministic: no row or column subsampling, histogram
//! accumulation runs in sample order per feature, and split ties resolve to
//! the lowest feature index then the lowest bin.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::data_io::persist::TrainedPipeline;
use crate::error::{Result, SalError};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights.
    pub l2: f64,
    pub min_child_samples: usize,
    pub max_bins: usize,
    pub min_gain: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            rounds: 300,
            max_depth: 3,
            learning_rate: 0.1,
            l2: 1.0,
            min_child_samples: 5,
            max_bins: 256,
            min_gain: 1e-12,
        }
    }
}

/// One boosted tree with nodes in a flat array; `feature == -1` marks a
/// leaf and `value` then holds the learning-rate-scaled weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f32>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f32>,
}

impl Tree {
    fn num_nodes(&self) -> usize {
        self.feature.len()
    }

    #[inline]
    pub fn predict_row(&self, row: &[f32]) -> f32 {
        let mut i = 0usize;
        loop {
            let f = self.feature[i];
            if f < 0 {
                return self.value[i];
            }
            i = if row[f as usize] <= self.threshold[i] {
                self.left[i] as usize
            } else {
                self.right[i] as usize
            };
        }
    }

    fn has_split(&self) -> bool {
        self.feature.iter().any(|&f| f >= 0)
    }
}

/// Per-feature quantile bin edges; bin(x) ≤ t exactly when x ≤ edges[t].
struct Binner {
    edges: Vec<Vec<f32>>,
}

impl Binner {
    fn fit(features: ArrayView2<f32>, max_bins: usize) -> Self {
        let n = features.nrows();
        let edges: Vec<Vec<f32>> = (0..features.ncols())
            .into_par_iter()
            .map(|f| {
                let mut col: Vec<f32> = features.column(f).iter().copied().collect();
                col.sort_by(f32::total_cmp);
                let mut e = Vec::new();
                for k in 1..max_bins {
                    let pos = (k * n) / max_bins;
                    if pos == 0 || pos >= n {
                        continue;
                    }
                    let cut = col[pos - 1];
                    // skip zero-width bins and cuts beyond the last distinct value
                    if cut < col[pos] && e.last().is_none_or(|&p| cut > p) {
                        e.push(cut);
                    }
                }
                e
            })
            .collect();
        Binner { edges }
    }

    /// Column-major binned matrix: feature f occupies rows [f·n, (f+1)·n).
    fn transform(&self, features: ArrayView2<f32>) -> Vec<u8> {
        let n = features.nrows();
        let d = features.ncols();
        let mut out = vec![0u8; n * d];
        out.par_chunks_mut(n).enumerate().for_each(|(f, chunk)| {
            let edges = &self.edges[f];
            for (i, slot) in chunk.iter_mut().enumerate() {
                let x = features[(i, f)];
                *slot = edges.partition_point(|&e| e < x) as u8;
            }
        });
        out
    }
}

#[derive(Clone, Copy, Default)]
struct HistBin {
    grad: f64,
    hess: f64,
    count: u32,
}

/// Histograms for every feature of one node, flattened feature-major.
struct NodeHist {
    bins_per_feature: usize,
    data: Vec<HistBin>,
}

impl NodeHist {
    fn build(
        binned: &[u8],
        n_total: usize,
        num_features: usize,
        bins_per_feature: usize,
        samples: &[u32],
        grad: &[f32],
        hess: &[f32],
    ) -> Self {
        let data: Vec<HistBin> = (0..num_features)
            .into_par_iter()
            .flat_map_iter(|f| {
                let col = &binned[f * n_total..(f + 1) * n_total];
                let mut h = vec![HistBin::default(); bins_per_feature];
                for &s in samples {
                    let b = col[s as usize] as usize;
                    let cell = &mut h[b];
                    cell.grad += grad[s as usize] as f64;
                    cell.hess += hess[s as usize] as f64;
                    cell.count += 1;
                }
                h
            })
            .collect();
        NodeHist { bins_per_feature, data }
    }

    fn subtract_from(parent: &NodeHist, child: &NodeHist) -> NodeHist {
        let data = parent
            .data
            .iter()
            .zip(&child.data)
            .map(|(p, c)| HistBin {
                grad: p.grad - c.grad,
                hess: p.hess - c.hess,
                count: p.count - c.count,
            })
            .collect();
        NodeHist { bins_per_feature: parent.bins_per_feature, data }
    }

    fn totals(&self) -> (f64, f64, u32) {
        let mut g = 0.0;
        let mut h = 0.0;
        let mut c = 0u32;
        for bin in &self.data[..self.bins_per_feature] {
            g += bin.grad;
            h += bin.hess;
            c += bin.count;
        }
        (g, h, c)
    }
}

struct Split {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn find_best_split(hist: &NodeHist, num_features: usize, cfg: &GbdtConfig) -> Option<Split> {
    let (gp, hp, cp) = hist.totals();
    let parent_score = gp * gp / (hp + cfg.l2);
    let mut best: Option<Split> = None;
    for f in 0..num_features {
        let row = &hist.data[f * hist.bins_per_feature..(f + 1) * hist.bins_per_feature];
        let mut gl = 0.0;
        let mut hl = 0.0;
        let mut cl = 0u32;
        // splitting at bin b sends bins ≤ b left; the last bin can never split
        for (b, cell) in row.iter().enumerate().take(hist.bins_per_feature - 1) {
            gl += cell.grad;
            hl += cell.hess;
            cl += cell.count;
            let cr = cp - cl;
            if (cl as usize) < cfg.min_child_samples || (cr as usize) < cfg.min_child_samples {
                continue;
            }
            let gr = gp - gl;
            let hr = hp - hl;
            let gain = gl * gl / (hl + cfg.l2) + gr * gr / (hr + cfg.l2) - parent_score;
            if gain > cfg.min_gain && best.as_ref().is_none_or(|s| gain > s.gain) {
                best = Some(Split { feature: f, bin: b, gain });
            }
        }
    }
    best
}

struct TreeFitCtx<'a> {
    binned: &'a [u8],
    n_total: usize,
    num_features: usize,
    bins_per_feature: usize,
    edges: &'a [Vec<f32>],
    grad: &'a [f32],
    hess: &'a [f32],
    cfg: &'a GbdtConfig,
}

/// Fits one tree and returns it plus each training sample's leaf value
/// (already scaled by the learning rate) for incremental logit updates.
fn fit_tree(ctx: &TreeFitCtx, samples: &mut [u32]) -> (Tree, Vec<(u32, f32)>) {
    let mut tree = Tree {
        feature: Vec::new(),
        threshold: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        value: Vec::new(),
    };
    let mut assignments: Vec<(u32, f32)> = Vec::with_capacity(samples.len());

    struct Work {
        node: usize,
        start: usize,
        end: usize,
        depth: usize,
        hist: NodeHist,
    }

    let push_node = |tree: &mut Tree| -> usize {
        tree.feature.push(-1);
        tree.threshold.push(0.0);
        tree.left.push(0);
        tree.right.push(0);
        tree.value.push(0.0);
        tree.num_nodes() - 1
    };

    let root_hist = NodeHist::build(
        ctx.binned,
        ctx.n_total,
        ctx.num_features,
        ctx.bins_per_feature,
        samples,
        ctx.grad,
        ctx.hess,
    );
    let root = push_node(&mut tree);
    let mut stack = vec![Work { node: root, start: 0, end: samples.len(), depth: 0, hist: root_hist }];

    while let Some(w) = stack.pop() {
        let split = if w.depth < ctx.cfg.max_depth {
            find_best_split(&w.hist, ctx.num_features, ctx.cfg)
        } else {
            None
        };
        match split {
            None => {
                let (g, h, _) = w.hist.totals();
                let value = (-g / (h + ctx.cfg.l2) * ctx.cfg.learning_rate) as f32;
                tree.feature[w.node] = -1;
                tree.value[w.node] = value;
                for &s in &samples[w.start..w.end] {
                    assignments.push((s, value));
                }
            }
            Some(split) => {
                let col = &ctx.binned[split.feature * ctx.n_total..(split.feature + 1) * ctx.n_total];
                let bin = split.bin as u8;
                // stable partition keeps sample order deterministic
                let node_samples = &mut samples[w.start..w.end];
                let mut left: Vec<u32> = Vec::with_capacity(node_samples.len());
                let mut right: Vec<u32> = Vec::with_capacity(node_samples.len());
                for &s in node_samples.iter() {
                    if col[s as usize] <= bin {
                        left.push(s);
                    } else {
                        right.push(s);
                    }
                }
                let mid = w.start + left.len();
                node_samples[..left.len()].copy_from_slice(&left);
                node_samples[left.len()..].copy_from_slice(&right);

                let (small_range, small_is_left) = if left.len() <= right.len() {
                    (w.start..mid, true)
                } else {
                    (mid..w.end, false)
                };
                let small_hist = NodeHist::build(
                    ctx.binned,
                    ctx.n_total,
                    ctx.num_features,
                    ctx.bins_per_feature,
                    &samples[small_range],
                    ctx.grad,
                    ctx.hess,
                );
                let large_hist = NodeHist::subtract_from(&w.hist, &small_hist);
                let (left_hist, right_hist) = if small_is_left {
                    (small_hist, large_hist)
                } else {
                    (large_hist, small_hist)
                };

                let l = push_node(&mut tree);
                let r = push_node(&mut tree);
                tree.feature[w.node] = split.feature as i32;
                tree.threshold[w.node] = ctx.edges[split.feature][split.bin];
                tree.left[w.node] = l as u32;
                tree.right[w.node] = r as u32;
                stack.push(Work { node: r, start: mid, end: w.end, depth: w.depth + 1, hist: right_hist });
                stack.push(Work { node: l, start: w.start, end: mid, depth: w.depth + 1, hist: left_hist });
            }
        }
    }
    (tree, assignments)
}

/// Boosted-tree classifier; multiclass uses one tree per class per round
/// with a softmax objective, binary uses one tree per round.
#[derive(Debug, Clone)]
pub struct GbdtClassifier {
    num_classes: usize,
    num_features: usize,
    /// Round-major, class-minor for multiclass; one per round for binary.
    trees: Vec<Tree>,
    trees_per_round: usize,
}

impl GbdtClassifier {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn fit(
        features: ArrayView2<f32>,
        labels: &[usize],
        num_classes: usize,
        cfg: &GbdtConfig,
    ) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        if n == 0 || d == 0 {
            return Err(SalError::DegenerateInput("empty training matrix".into()));
        }
        if labels.len() != n {
            return Err(SalError::InvalidInput(format!(
                "{} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if num_classes < 2 {
            return Err(SalError::InvalidConfig("need at least two classes".into()));
        }
        if cfg.max_bins < 2 || cfg.max_bins > 256 {
            return Err(SalError::InvalidConfig("max_bins must be in [2, 256]".into()));
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

        let binner = Binner::fit(features, cfg.max_bins);
        let binned = binner.transform(features);
        let bins_per_feature = cfg.max_bins;

        let binary = num_classes == 2;
        let trees_per_round = if binary { 1 } else { num_classes };
        let mut logits = vec![0.0f32; n * trees_per_round];
        let mut trees: Vec<Tree> = Vec::with_capacity(cfg.rounds * trees_per_round);
        let mut grad = vec![0.0f32; n];
        let mut hess = vec![0.0f32; n];
        let mut samples: Vec<u32> = (0..n as u32).collect();
        let mut proba = vec![0.0f64; trees_per_round];

        for _round in 0..cfg.rounds {
            let mut any_split = false;
            if binary {
                for i in 0..n {
                    let p = 1.0 / (1.0 + (-(logits[i] as f64)).exp());
                    let y = labels[i] as f64;
                    grad[i] = (p - y) as f32;
                    hess[i] = (p * (1.0 - p)) as f32;
                }
                let ctx = TreeFitCtx {
                    binned: &binned,
                    n_total: n,
                    num_features: d,
                    bins_per_feature,
                    edges: &binner.edges,
                    grad: &grad,
                    hess: &hess,
                    cfg,
                };
                let (tree, assign) = fit_tree(&ctx, &mut samples);
                any_split |= tree.has_split();
                for (s, v) in assign {
                    logits[s as usize] += v;
                }
                trees.push(tree);
            } else {
                // softmax gradients from the current logits, then one tree per class
                let mut round_trees = Vec::with_capacity(num_classes);
                let mut probs = vec![0.0f32; n * num_classes];
                for i in 0..n {
                    let row = &logits[i * num_classes..(i + 1) * num_classes];
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let mut z = 0.0f64;
                    for (k, &l) in row.iter().enumerate() {
                        let e = ((l as f64) - m).exp();
                        proba[k] = e;
                        z += e;
                    }
                    for k in 0..num_classes {
                        probs[i * num_classes + k] = (proba[k] / z) as f32;
                    }
                }
                for k in 0..num_classes {
                    for i in 0..n {
                        let p = probs[i * num_classes + k] as f64;
                        let y = (labels[i] == k) as usize as f64;
                        grad[i] = (p - y) as f32;
                        hess[i] = (p * (1.0 - p)).max(1e-16) as f32;
                    }
                    let ctx = TreeFitCtx {
                        binned: &binned,
                        n_total: n,
                        num_features: d,
                        bins_per_feature,
                        edges: &binner.edges,
                        grad: &grad,
                        hess: &hess,
                        cfg,
                    };
                    let (tree, assign) = fit_tree(&ctx, &mut samples);
                    any_split |= tree.has_split();
                    for (s, v) in assign {
                        logits[s as usize * num_classes + k] += v;
                    }
                    round_trees.push(tree);
                }
                trees.extend(round_trees);
            }
            if !any_split {
                break;
            }
        }

        Ok(Self { num_classes, num_features: d, trees, trees_per_round })
    }

    /// Raw additive scores: one column for binary, `num_classes` otherwise.
    pub fn predict_logits(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        if features.ncols() != self.num_features {
            return Err(SalError::InvalidInput(format!(
                "expected {} features, got {}",
                self.num_features,
                features.ncols()
            )));
        }
        let n = features.nrows();
        let k = self.trees_per_round;
        let mut out = Array2::<f32>::zeros((n, k));
        let rows: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let row: Vec<f32> = features.row(i).iter().copied().collect();
                let mut acc = vec![0.0f32; k];
                for (t, tree) in self.trees.iter().enumerate() {
                    acc[t % k] += tree.predict_row(&row);
                }
                acc
            })
            .collect();
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// Class probabilities, always `num_classes` columns.
    pub fn predict_proba(&self, features: ArrayView2<f32>) -> Result<Array2<f32>> {
        let logits = self.predict_logits(features)?;
        let n = logits.nrows();
        let mut out = Array2::<f32>::zeros((n, self.num_classes));
        if self.trees_per_round == 1 {
            for i in 0..n {
                let p = 1.0 / (1.0 + (-(logits[(i, 0)] as f64)).exp());
                out[(i, 0)] = (1.0 - p) as f32;
                out[(i, 1)] = p as f32;
            }
        } else {
            for i in 0..n {
                let row = logits.row(i);
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut z = 0.0f64;
                let mut e = vec![0.0f64; self.num_classes];
                for (k, &l) in row.iter().enumerate() {
                    e[k] = ((l as f64) - m).exp();
                    z += e[k];
                }
                for k in 0..self.num_classes {
                    out[(i, k)] = (e[k] / z) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Top class per row; ties go to the lowest class index.
    pub fn predict(&self, features: ArrayView2<f32>) -> Result<Vec<usize>> {
        let proba = self.predict_proba(features)?;
        Ok(argmax_rows(&proba))
    }

    pub fn write_blobs(&self, prefix: &str, p: &mut TrainedPipeline) -> Result<()> {
        let mut offsets: Vec<i64> = Vec::with_capacity(self.trees.len() + 1);
        let mut feature: Vec<i64> = Vec::new();
        let mut threshold: Vec<f32> = Vec::new();
        let mut children: Vec<i64> = Vec::new();
        let mut value: Vec<f32> = Vec::new();
        offsets.push(0);
        for tree in &self.trees {
            for i in 0..tree.num_nodes() {
                feature.push(tree.feature[i] as i64);
                threshold.push(tree.threshold[i]);
                children.push(tree.left[i] as i64);
                children.push(tree.right[i] as i64);
                value.push(tree.value[i]);
            }
            offsets.push(feature.len() as i64);
        }
        p.put_i64(
            &format!("{prefix}/meta"),
            vec![3],
            vec![
                self.num_classes as i64,
                self.num_features as i64,
                self.trees_per_round as i64,
            ],
        )?;
        p.put_i64(&format!("{prefix}/offsets"), vec![offsets.len()], offsets)?;
        p.put_i64(&format!("{prefix}/feature"), vec![feature.len()], feature)?;
        p.put_f32(&format!("{prefix}/threshold"), vec![threshold.len()], threshold)?;
        let nc = children.len();
        p.put_i64(&format!("{prefix}/children"), vec![nc / 2, 2], children)?;
        p.put_f32(&format!("{prefix}/value"), vec![value.len()], value)?;
        Ok(())
    }

    pub fn read_blobs(prefix: &str, p: &TrainedPipeline) -> Result<Self> {
        let (_, meta) = p.get_i64(&format!("{prefix}/meta"))?;
        if meta.len() != 3 {
            return Err(SalError::CorruptFormat(format!("{prefix}/meta length")));
        }
        let num_classes = meta[0] as usize;
        let num_features = meta[1] as usize;
        let trees_per_round = meta[2] as usize;
        let (_, offsets) = p.get_i64(&format!("{prefix}/offsets"))?;
        let (_, feature) = p.get_i64(&format!("{prefix}/feature"))?;
        let (_, threshold) = p.get_f32(&format!("{prefix}/threshold"))?;
        let (_, children) = p.get_i64(&format!("{prefix}/children"))?;
        let (_, value) = p.get_f32(&format!("{prefix}/value"))?;
        if offsets.is_empty() || *offsets.last().unwrap() as usize != feature.len() {
            return Err(SalError::CorruptFormat(format!("{prefix}/offsets inconsistent")));
        }
        let mut trees = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            let (a, b) = (w[0] as usize, w[1] as usize);
            if b < a || b > feature.len() {
                return Err(SalError::CorruptFormat(format!("{prefix}/offsets out of order")));
            }
            trees.push(Tree {
                feature: feature[a..b].iter().map(|&f| f as i32).collect(),
                threshold: threshold[a..b].to_vec(),
                left: children[2 * a..2 * b].iter().step_by(2).map(|&c| c as u32).collect(),
                right: children[2 * a + 1..2 * b].iter().step_by(2).map(|&c| c as u32).collect(),
                value: value[a..b].to_vec(),
            });
        }
        Ok(Self { num_classes, num_features, trees, trees_per_round })
    }
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows(proba: &Array2<f32>) -> Vec<usize> {
    proba
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        })
        .collect()
}
