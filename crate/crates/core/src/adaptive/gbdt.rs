//! Histogram gradient-boosted trees with logistic loss.

use crate::error::{Error, Result};

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f32,
    /// L2 penalty on leaf weights.
    pub lambda: f32,
    pub min_child_weight: f32,
    pub max_bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 4,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1e-3,
            max_bins: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Node {
    pub(crate) feature: u32,
    pub(crate) threshold: f32,
    pub(crate) left: u32,
    pub(crate) right: u32,
    pub(crate) value: f32,
}

impl Node {
    fn leaf(value: f32) -> Self {
        Self {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tree {
    pub(crate) nodes: Vec<Node>,
}

impl Tree {
    #[inline]
    fn eval(&self, x: &[f32]) -> f32 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.feature == LEAF {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

/// Additive ensemble of trees over a logistic link.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbModel {
    pub(crate) n_features: usize,
    pub(crate) base: f32,
    pub(crate) trees: Vec<Tree>,
    pub(crate) params: GbdtParams,
    pub(crate) seed: u64,
    pub(crate) degenerate: bool,
}

impl ProbModel {
    /// Predictor that always returns `p`.
    pub fn constant(n_features: usize, p: f32) -> Self {
        Self {
            n_features,
            base: logit(p),
            trees: Vec::new(),
            params: GbdtParams::default(),
            seed: 0,
            degenerate: true,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn params(&self) -> &GbdtParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True when training saw a single class and fell back to a constant.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn margin(&self, x: &[f32]) -> f32 {
        self.base + self.trees.iter().map(|t| t.eval(x)).sum::<f32>()
    }

    /// Probability of the positive class.
    pub fn predict(&self, x: &[f32]) -> Result<f32> {
        if x.len() != self.n_features {
            return Err(Error::SchemaMismatch {
                expected: self.n_features,
                actual: x.len(),
            });
        }
        Ok(sigmoid(self.margin(x)))
    }
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Bin edges per feature: a value `v` falls in the first bin whose edge is `>= v`.
fn bin_edges(column: &mut [f32], max_bins: usize) -> Vec<f32> {
    column.sort_unstable_by(f32::total_cmp);
    let mut uniq: Vec<f32> = Vec::new();
    for &v in column.iter() {
        if uniq.last() != Some(&v) {
            uniq.push(v);
        }
    }
    if uniq.len() <= max_bins {
        // Midpoints split between consecutive distinct values.
        let mut edges: Vec<f32> = uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) * 0.5).collect();
        edges.push(f32::INFINITY);
        return edges;
    }
    let n = column.len();
    let mut edges = Vec::with_capacity(max_bins);
    for b in 1..max_bins {
        let v = column[(b * n / max_bins).min(n - 1)];
        if edges.last().is_none_or(|&e| v > e) {
            edges.push(v);
        }
    }
    edges.push(f32::INFINITY);
    edges
}

struct Binned {
    n: usize,
    n_features: usize,
    edges: Vec<Vec<f32>>,
    /// Row-major bin ids.
    bins: Vec<u16>,
}

fn bin_features(x: &[f32], n_features: usize, max_bins: usize) -> Binned {
    let n = x.len() / n_features;
    let mut edges = Vec::with_capacity(n_features);
    let mut bins = vec![0u16; x.len()];
    for f in 0..n_features {
        let mut col: Vec<f32> = x[f..].iter().step_by(n_features).copied().collect();
        let e = bin_edges(&mut col, max_bins.clamp(2, u16::MAX as usize));
        for i in 0..n {
            bins[i * n_features + f] = e.partition_point(|&edge| edge < x[i * n_features + f]) as u16;
        }
        edges.push(e);
    }
    Binned {
        n,
        n_features,
        edges,
        bins,
    }
}

struct Split {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn best_split(data: &Binned, rows: &[u32], g: &[f64], h: &[f64], params: &GbdtParams) -> Option<Split> {
    let lambda = params.lambda as f64;
    let (gt, ht) = rows
        .iter()
        .fold((0.0, 0.0), |(a, b), &r| (a + g[r as usize], b + h[r as usize]));
    let parent = gt * gt / (ht + lambda);
    let mut best: Option<Split> = None;
    let mut hist_g = Vec::new();
    let mut hist_h = Vec::new();
    for f in 0..data.n_features {
        let nb = data.edges[f].len();
        if nb < 2 {
            continue;
        }
        hist_g.clear();
        hist_g.resize(nb, 0.0);
        hist_h.clear();
        hist_h.resize(nb, 0.0);
        for &r in rows {
            let b = data.bins[r as usize * data.n_features + f] as usize;
            hist_g[b] += g[r as usize];
            hist_h[b] += h[r as usize];
        }
        let (mut gl, mut hl) = (0.0, 0.0);
        for b in 0..nb - 1 {
            gl += hist_g[b];
            hl += hist_h[b];
            let (gr, hr) = (gt - gl, ht - hl);
            if hl < params.min_child_weight as f64 || hr < params.min_child_weight as f64 {
                continue;
            }
            let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
            if gain > 1e-12 && best.as_ref().is_none_or(|s| gain > s.gain) {
                best = Some(Split {
                    feature: f,
                    bin: b,
                    gain,
                });
            }
        }
    }
    best
}

fn grow(
    data: &Binned,
    rows: Vec<u32>,
    depth: usize,
    g: &[f64],
    h: &[f64],
    params: &GbdtParams,
    nodes: &mut Vec<Node>,
) -> u32 {
    let id = nodes.len() as u32;
    let (gs, hs) = rows
        .iter()
        .fold((0.0, 0.0), |(a, b), &r| (a + g[r as usize], b + h[r as usize]));
    let value = (-gs / (hs + params.lambda as f64)) as f32 * params.learning_rate;
    nodes.push(Node::leaf(value));
    if depth >= params.max_depth || rows.len() < 2 {
        return id;
    }
    let Some(split) = best_split(data, &rows, g, h, params) else {
        return id;
    };
    let (left, right): (Vec<u32>, Vec<u32>) = rows
        .into_iter()
        .partition(|&r| data.bins[r as usize * data.n_features + split.feature] as usize <= split.bin);
    let l = grow(data, left, depth + 1, g, h, params, nodes);
    let r = grow(data, right, depth + 1, g, h, params, nodes);
    nodes[id as usize] = Node {
        feature: split.feature as u32,
        threshold: data.edges[split.feature][split.bin],
        left: l,
        right: r,
        value,
    };
    id
}

/// Fits a binary classifier on row-major `features` (`labels.len()` rows).
///
/// Training is deterministic; `seed` is recorded with the model. A
/// single-class label set yields a flagged constant predictor.
pub fn train_prob_model(features: &[f32], labels: &[bool], params: &GbdtParams, seed: u64) -> Result<ProbModel> {
    let n = labels.len();
    if n < 50 {
        return Err(Error::NotEnoughPoints {
            requested: 50,
            available: n,
        });
    }
    if !features.len().is_multiple_of(n) || features.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} feature values for {n} labels",
            features.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite training feature".into()));
    }
    let n_features = features.len() / n;
    let positives = labels.iter().filter(|&&y| y).count();
    let rate = positives as f32 / n as f32;
    if positives == 0 || positives == n {
        let mut m = ProbModel::constant(n_features, rate);
        m.params = params.clone();
        m.seed = seed;
        return Ok(m);
    }
    let data = bin_features(features, n_features, params.max_bins);
    let base = logit(rate);
    let mut margin = vec![base; n];
    let mut g = vec![0f64; n];
    let mut h = vec![0f64; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for i in 0..n {
            let p = sigmoid(margin[i]) as f64;
            g[i] = p - labels[i] as u8 as f64;
            h[i] = (p * (1.0 - p)).max(1e-12);
        }
        let mut nodes = Vec::new();
        grow(&data, (0..n as u32).collect(), 0, &g, &h, params, &mut nodes);
        let tree = Tree { nodes };
        for (i, m) in margin.iter_mut().enumerate() {
            *m += tree.eval(&features[i * n_features..(i + 1) * n_features]);
        }
        trees.push(tree);
    }
    debug_assert_eq!(data.n, n);
    Ok(ProbModel {
        n_features,
        base,
        trees,
        params: params.clone(),
        seed,
        degenerate: false,
    })
}

/// Mean binary cross-entropy of `model` on the given rows.
pub fn log_loss(model: &ProbModel, features: &[f32], labels: &[bool]) -> f64 {
    let nf = model.n_features;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = (sigmoid(model.margin(&features[i * nf..(i + 1) * nf])) as f64).clamp(1e-12, 1.0 - 1e-12);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / labels.len().max(1) as f64
}

/// Area under the ROC curve for scores against binary labels (ties count half).
pub fn auc(scores: &[f32], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}
