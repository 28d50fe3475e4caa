//! Balanced binary class tree with a sparse GP classifier at every internal
//! node, and the training loop that fits all nodes.
//!
//! A class's probability is the product of branch probabilities along its
//! unique root-to-leaf path. Going left is branch bit 1 with probability
//! `σ(f_v)`; going right has probability `1 - σ(f_v)`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{denoise, DenoiseMethod, DenoiseResult};
use crate::error::{check_dim, Error, Result};
use crate::kernels::KernelSpec;
use crate::kmeans::kmeanspp_seeds;
use crate::linalg::{rows, sq_dist};
use crate::pg_node::{HyperOptimizer, LatentPrediction, NodePredictor, NoiseModel, PGNode};

/// Version tag of the serialized [`TrainedModel`].
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Rows used for the median-distance lengthscale heuristic.
const LENGTHSCALE_SAMPLE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Inducing points per node.
    pub inducing: usize,
    pub kernel: KernelSpec,
    /// Inflate predictive variances with the estimated input noise.
    pub noisy: bool,
    pub sweeps_per_epoch: usize,
    pub seed: u64,
    /// Lloyd iterations when placing inducing points.
    pub kmeans_iters: usize,
    /// Fit the nodes on the denoised features rather than the raw ones.
    pub train_on_denoised: bool,
    pub denoiser: DenoiseMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            inducing: 2,
            kernel: KernelSpec::default(),
            noisy: true,
            sweeps_per_epoch: 5,
            seed: 0,
            kmeans_iters: 20,
            train_on_denoised: true,
            denoiser: DenoiseMethod::SvdThreshold,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.inducing == 0 {
            return Err(Error::InvalidParameter("inducing count must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.sweeps_per_epoch == 0 {
            return Err(Error::InvalidParameter("sweeps per epoch must be at least 1".into()));
        }
        self.kernel.validate()
    }
}

/// Either a class leaf or another internal node (index into the node list).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Child {
    Leaf(usize),
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InternalNode {
    pub left_classes: Vec<usize>,
    pub right_classes: Vec<usize>,
    pub left: Child,
    pub right: Child,
    pub gp: PGNode,
}

impl InternalNode {
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.left_classes.iter().chain(&self.right_classes).copied()
    }

    /// `Some(true)` if `class` goes left here, `Some(false)` if right.
    pub fn branch(&self, class: usize) -> Option<bool> {
        if self.left_classes.contains(&class) {
            Some(true)
        } else if self.right_classes.contains(&class) {
            Some(false)
        } else {
            None
        }
    }
}

/// One step of a class path: internal node index and branch bit.
pub type PathStep = (usize, bool);

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    num_classes: usize,
    nodes: Vec<InternalNode>,
}

/// Node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct ClassTree {
    num_classes: usize,
    nodes: Vec<InternalNode>,
    paths: Vec<Vec<PathStep>>,
}

impl TryFrom<TreeRepr> for ClassTree {
    type Error = Error;

    fn try_from(r: TreeRepr) -> Result<Self> {
        ClassTree::from_nodes(r.num_classes, r.nodes)
    }
}

impl From<ClassTree> for TreeRepr {
    fn from(t: ClassTree) -> Self {
        TreeRepr { num_classes: t.num_classes, nodes: t.nodes }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

impl ClassTree {
    /// Checks the structural invariants and derives the class paths.
    pub fn from_nodes(num_classes: usize, nodes: Vec<InternalNode>) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid(format!("a class tree needs at least 2 classes, got {num_classes}")));
        }
        if nodes.len() != num_classes - 1 {
            return Err(invalid(format!(
                "{num_classes} classes need {} internal nodes, found {}",
                num_classes - 1,
                nodes.len()
            )));
        }
        let dim = nodes[0].gp.dim();
        let mut paths: Vec<Option<Vec<PathStep>>> = vec![None; num_classes];
        let mut visited = vec![false; nodes.len()];
        let mut stack = vec![(0usize, Vec::<PathStep>::new(), None::<Vec<usize>>)];
        while let Some((v, prefix, expected)) = stack.pop() {
            if visited[v] {
                return Err(invalid(format!("node {v} is reachable twice")));
            }
            visited[v] = true;
            let node = &nodes[v];
            node.gp.validate()?;
            check_dim(dim, node.gp.dim())?;
            if node.left_classes.is_empty() || node.right_classes.is_empty() {
                return Err(invalid(format!("node {v} has an empty side")));
            }
            let own: BTreeSet<usize> = node.classes().collect();
            if own.len() != node.left_classes.len() + node.right_classes.len() {
                return Err(invalid(format!("node {v} lists a class twice")));
            }
            if let Some(exp) = expected {
                if own != exp.into_iter().collect() {
                    return Err(invalid(format!("node {v} disagrees with its parent's partition")));
                }
            }
            for (child, side, bit) in [(node.left, &node.left_classes, true), (node.right, &node.right_classes, false)]
            {
                let mut path = prefix.clone();
                path.push((v, bit));
                match child {
                    Child::Leaf(c) => {
                        if side.as_slice() != [c] {
                            return Err(invalid(format!("leaf {c} under node {v} does not match its class set")));
                        }
                        if c >= num_classes || paths[c].is_some() {
                            return Err(invalid(format!("class {c} is missing or appears twice")));
                        }
                        paths[c] = Some(path);
                    }
                    Child::Node(w) => {
                        if w >= nodes.len() {
                            return Err(invalid(format!("node {v} points at missing node {w}")));
                        }
                        stack.push((w, path, Some(side.clone())));
                    }
                }
            }
        }
        if let Some(v) = visited.iter().position(|s| !s) {
            return Err(invalid(format!("node {v} is unreachable")));
        }
        let paths: Vec<Vec<PathStep>> = paths
            .into_iter()
            .enumerate()
            .map(|(c, p)| p.ok_or_else(|| invalid(format!("class {c} has no leaf"))))
            .collect::<Result<_>>()?;
        Ok(ClassTree { num_classes, nodes, paths })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].gp.dim()
    }

    pub fn nodes(&self) -> &[InternalNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> impl Iterator<Item = &mut PGNode> {
        self.nodes.iter_mut().map(|n| &mut n.gp)
    }

    /// Root-to-leaf path of `class`.
    pub fn path(&self, class: usize) -> &[PathStep] {
        &self.paths[class]
    }

    /// Number of internal nodes on the longest path.
    pub fn depth(&self) -> usize {
        self.paths.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn predictor(&self) -> Result<TreePredictor<'_>> {
        let nodes = self.nodes.iter().map(|n| n.gp.predictor()).collect::<Result<_>>()?;
        Ok(TreePredictor { tree: self, nodes })
    }

    /// Probability of every class at `x_star`.
    pub fn class_probabilities(&self, x_star: &[f64], noise: Option<&NoiseModel>) -> Result<Vec<f64>> {
        self.predictor()?.probabilities(x_star, noise)
    }

    /// Argmax class of every row.
    pub fn predict(&self, x: &DMatrix<f64>, noise: Option<&NoiseModel>) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x, noise)?.iter().map(|p| argmax(p)).collect())
    }

    /// Class probabilities of every row.
    pub fn predict_proba(&self, x: &DMatrix<f64>, noise: Option<&NoiseModel>) -> Result<Vec<Vec<f64>>> {
        check_dim(self.dim(), x.ncols())?;
        let pred = self.predictor()?;
        rows(x).par_iter().map(|r| pred.probabilities(r, noise)).collect()
    }
}

/// `E[σ(f)]` for `f ~ N(mean, variance)` by the probit-matched approximation
/// `σ(mean / sqrt(1 + π·variance/8))`.
pub fn branch_probability(lp: LatentPrediction) -> f64 {
    sigmoid(lp.mean / (1.0 + std::f64::consts::PI * lp.variance / 8.0).sqrt())
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// A tree with every node's predictor prepared.
pub struct TreePredictor<'a> {
    tree: &'a ClassTree,
    nodes: Vec<NodePredictor<'a>>,
}

impl TreePredictor<'_> {
    /// Pushes probability mass from the root down to the leaves.
    pub fn probabilities(&self, x_star: &[f64], noise: Option<&NoiseModel>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.tree.num_classes];
        let mut stack = vec![(0usize, 1.0f64)];
        while let Some((v, mass)) = stack.pop() {
            let p = branch_probability(self.nodes[v].latent_with(x_star, noise)?);
            let node = &self.tree.nodes[v];
            for (child, share) in [(node.left, mass * p), (node.right, mass * (1.0 - p))] {
                match child {
                    Child::Leaf(c) => out[c] = share,
                    Child::Node(w) => stack.push((w, share)),
                }
            }
        }
        Ok(out)
    }
}

/// Mean feature vector of every class.
fn class_centroids(x: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; x.ncols()]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x.row(i).iter()) {
            *s += v;
        }
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *n as f64);
    }
    sums
}

fn mean_of(points: &[&Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for p in points {
        for (a, b) in m.iter_mut().zip(p.iter()) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= points.len() as f64);
    m
}

/// 2-means over `points` with k-means++ seeding, constrained so the two
/// sides differ in size by at most one. Returns `true` for members of the
/// side holding the first point.
fn balanced_two_means(points: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let k = points.len();
    if k == 2 {
        return Ok(vec![true, false]);
    }
    let seeds = kmeanspp_seeds(points, 2, rng)?;
    let mut centers = [points[seeds[0]].clone(), points[seeds[1]].clone()];
    let mut assign: Vec<bool> = Vec::new();
    for _ in 0..100 {
        let d0: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
        let d1: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[1])).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| (d0[a] - d1[a]).total_cmp(&(d0[b] - d1[b])).then(a.cmp(&b)));
        let cost = |h: usize| -> f64 {
            order[..h].iter().map(|&i| d0[i]).sum::<f64>() + order[h..].iter().map(|&i| d1[i]).sum::<f64>()
        };
        let h = if cost(k / 2) <= cost(k.div_ceil(2)) { k / 2 } else { k.div_ceil(2) };
        let mut next = vec![false; k];
        for &i in &order[..h] {
            next[i] = true;
        }
        if next == assign {
            break;
        }
        assign = next;
        for (side, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assign).filter(|(_, a)| **a == (side == 0)).map(|(p, _)| p).collect();
            *center = mean_of(&members);
        }
    }
    if !assign[0] {
        assign.iter_mut().for_each(|a| *a = !*a);
    }
    Ok(assign)
}

struct Split {
    left_classes: Vec<usize>,
    right_classes: Vec<usize>,
    left: Child,
    right: Child,
}

/// Recursively partitions `classes`, appending splits in preorder.
fn partition(
    classes: Vec<usize>,
    centroids: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Option<Split>>,
) -> Result<Child> {
    if classes.len() == 1 {
        return Ok(Child::Leaf(classes[0]));
    }
    let v = out.len();
    out.push(None);
    let pts: Vec<Vec<f64>> = classes.iter().map(|&c| centroids[c].clone()).collect();
    let side = balanced_two_means(&pts, rng)?;
    let (l, r): (Vec<_>, Vec<_>) = classes.iter().zip(&side).partition(|(_, s)| **s);
    let left_classes: Vec<usize> = l.into_iter().map(|(c, _)| *c).collect();
    let right_classes: Vec<usize> = r.into_iter().map(|(c, _)| *c).collect();
    let left = partition(left_classes.clone(), centroids, rng, out)?;
    let right = partition(right_classes.clone(), centroids, rng, out)?;
    out[v] = Some(Split { left_classes, right_classes, left, right });
    Ok(Child::Node(v))
}

/// Rows whose class passes through the node, labelled with the branch bit.
fn route(x: &DMatrix<f64>, labels: &[usize], node: &Split) -> (DMatrix<f64>, Vec<bool>) {
    let mut idx = Vec::new();
    let mut bits = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if node.left_classes.contains(l) {
            idx.push(i);
            bits.push(true);
        } else if node.right_classes.contains(l) {
            idx.push(i);
            bits.push(false);
        }
    }
    (x.select_rows(&idx), bits)
}

/// Median pairwise distance over an evenly strided subsample of the rows;
/// 1 if all sampled rows coincide.
fn median_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let step = n.div_ceil(LENGTHSCALE_SAMPLE).max(1);
    let sample: Vec<Vec<f64>> = (0..n).step_by(step).map(|i| x.row(i).iter().copied().collect()).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..sample.len() {
        for j in (i + 1)..sample.len() {
            d.push(sq_dist(&sample[i], &sample[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn node_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        counts[l] += 1;
    }
    let missing: Vec<usize> = (0..num_classes).filter(|&c| counts[c] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(invalid(format!("class {c} has a single instance; every class needs at least two")));
    }
    Ok(())
}

/// Builds the class tree and initializes every node on its routed data.
pub fn build_tree(x: &DMatrix<f64>, labels: &[usize], num_classes: usize, config: &TrainConfig) -> Result<ClassTree> {
    config.validate()?;
    check_dim(x.nrows(), labels.len())?;
    check_labels(labels, num_classes)?;
    if x.ncols() == 0 {
        return Err(invalid("features have no columns"));
    }
    let centroids = class_centroids(x, labels, num_classes);
    let mut rng = node_rng(config.seed, 0);
    let mut splits = Vec::new();
    partition((0..num_classes).collect(), &centroids, &mut rng, &mut splits)?;
    let splits: Vec<Split> = splits.into_iter().map(|s| s.expect("every split is filled")).collect();

    let nodes: Vec<InternalNode> = splits
        .into_par_iter()
        .enumerate()
        .map(|(v, s)| {
            let (xv, yv) = route(x, labels, &s);
            let mut rng = node_rng(config.seed, 1 + v as u64);
            let kernel = config.kernel.build(x.ncols(), median_distance(&xv), &mut rng)?;
            let gp = PGNode::init(&xv, &yv, kernel, config.inducing, config.kmeans_iters, &mut rng)?;
            Ok(InternalNode {
                left_classes: s.left_classes,
                right_classes: s.right_classes,
                left: s.left,
                right: s.right,
                gp,
            })
        })
        .collect::<Result<_>>()?;
    ClassTree::from_nodes(num_classes, nodes)
}

/// A fitted tree with what prediction needs besides it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub format_version: u32,
    pub class_names: Vec<String>,
    /// Input noise used to inflate predictive variances, if enabled.
    pub noise: Option<NoiseModel>,
    pub config: TrainConfig,
    pub tree: ClassTree,
}

impl TrainedModel {
    pub fn dim(&self) -> usize {
        self.tree.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.tree.num_classes()
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        self.tree.predict_proba(x, self.noise.as_ref())
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        self.tree.predict(x, self.noise.as_ref())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(s)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(invalid(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        if model.class_names.len() != model.num_classes() {
            return Err(Error::DimensionMismatch { expected: model.num_classes(), found: model.class_names.len() });
        }
        if let Some(noise) = &model.noise {
            NoiseModel::new(noise.sigma_x().to_vec())?;
            check_dim(model.dim(), noise.dim())?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of the node bounds after the epoch's updates.
    pub elbo: f64,
    pub train_accuracy: f64,
}

pub struct TrainOutput {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// Denoising of the raw features, with the noise estimate.
    pub denoised: DenoiseResult,
    /// Features the nodes were fitted on.
    pub features: DMatrix<f64>,
}

/// Denoise, build the tree, then per epoch run coordinate-ascent sweeps and
/// one hyperparameter step on every node. Nodes only see the instances whose
/// class path passes through them.
pub fn train(
    s: &DMatrix<f64>,
    labels: &[usize],
    class_names: Vec<String>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let num_classes = class_names.len();
    check_dim(s.nrows(), labels.len())?;
    check_labels(labels, num_classes)?;
    let denoised = denoise(s, config.denoiser)?;
    if config.train_on_denoised && denoised.clean.iter().all(|v| *v == 0.0) {
        return Err(invalid(format!(
            "denoiser `{}` removed every component of the features; use another denoiser or train on the raw features",
            config.denoiser
        )));
    }
    let x = if config.train_on_denoised { denoised.clean.clone() } else { s.clone() };
    let noise = if config.noisy { Some(NoiseModel::new(denoised.sigma_x.clone())?) } else { None };

    let mut tree = build_tree(&x, labels, num_classes, config)?;
    let routed: Vec<(DMatrix<f64>, Vec<bool>)> = tree
        .nodes
        .iter()
        .map(|n| {
            let split = Split {
                left_classes: n.left_classes.clone(),
                right_classes: n.right_classes.clone(),
                left: n.left,
                right: n.right,
            };
            route(&x, labels, &split)
        })
        .collect();
    let mut opts = vec![HyperOptimizer::new(); tree.nodes.len()];
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let bounds: Vec<f64> = tree
            .nodes
            .par_iter_mut()
            .zip(opts.par_iter_mut())
            .zip(routed.par_iter())
            .map(|((node, opt), (xv, yv))| {
                for _ in 0..config.sweeps_per_epoch {
                    node.gp.update_variational(xv, yv)?;
                }
                node.gp.hyper_step(xv, yv, opt, config.learning_rate)
            })
            .collect::<Result<_>>()?;
        let elbo: f64 = bounds.iter().sum();
        if !elbo.is_finite() {
            return Err(Error::NonFinite(format!("total bound at epoch {epoch} (node bounds {bounds:?})")));
        }
        let pred = tree.predict(&x, noise.as_ref())?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        history.push(EpochRecord { epoch, elbo, train_accuracy: hits as f64 / labels.len() as f64 });
    }

    let model = TrainedModel { format_version: MODEL_FORMAT_VERSION, class_names, noise, config: config.clone(), tree };
    Ok(TrainOutput { model, history, denoised, features: x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobSpec};
    use crate::kernels::KernelFamily;
    use rand::Rng;

    fn quick_config() -> TrainConfig {
        TrainConfig { epochs: 3, ..TrainConfig::default() }
    }

    fn blob_data(c: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let ds = synth_blobs(&BlobSpec {
            classes: c,
            per_class: 12,
            dim: (2 * c).max(8),
            separation: 6.0,
            noise_sigma: 0.1,
            seed,
        })
        .unwrap();
        (ds.features, ds.labels)
    }

    #[test]
    fn two_classes_one_node() {
        let (x, y) = blob_data(2, 1);
        let t = build_tree(&x, &y, 2, &quick_config()).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn nearest_pair_shares_a_subtree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = DMatrix::zeros(30, 2);
        let mut y = Vec::new();
        let centres = [[0.0, 0.0], [20.0, 0.0], [21.0, 0.5]];
        for i in 0..30 {
            let c = i % 3;
            x[(i, 0)] = centres[c][0] + rng.random::<f64>() * 0.1;
            x[(i, 1)] = centres[c][1] + rng.random::<f64>() * 0.1;
            y.push(c);
        }
        for seed in 0..20 {
            let t = build_tree(&x, &y, 3, &TrainConfig { seed, ..quick_config() }).unwrap();
            let root = &t.nodes()[0];
            let mut sides = [root.left_classes.clone(), root.right_classes.clone()];
            sides.sort();
            assert_eq!(sides, [vec![0], vec![1, 2]], "seed {seed}");
        }
    }

    #[test]
    fn missing_classes_are_listed() {
        let (x, mut y) = blob_data(3, 2);
        y.iter_mut().for_each(|l| *l = if *l == 1 { 0 } else { *l });
        match build_tree(&x, &y, 4, &quick_config()) {
            Err(Error::MissingClasses(m)) => assert_eq!(m, vec![1, 3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structure_invariants_hold() {
        for c in 2..=16 {
            let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
            let n = 4 * c;
            let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 10.0);
            let y: Vec<usize> = (0..n).map(|i| i % c).collect();
            let t = build_tree(&x, &y, c, &TrainConfig { seed: c as u64, ..quick_config() }).unwrap();
            assert_eq!(t.nodes().len(), c - 1);
            let bound = (c as f64).log2().ceil() as usize + 1;
            assert!(t.depth() <= bound, "C={c} depth {}", t.depth());
            for class in 0..c {
                for &(v, bit) in t.path(class) {
                    assert_eq!(t.nodes()[v].branch(class), Some(bit));
                }
            }
        }
    }

    #[test]
    fn fresh_tree_is_uniform_and_predicts_zero() {
        let (x, y) = blob_data(4, 5);
        let t = build_tree(&x, &y, 4, &quick_config()).unwrap();
        let p = t.class_probabilities(&[0.3; 8], None).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(t.predict(&x, None).unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn training_separates_blobs() {
        let (x, y) = blob_data(3, 6);
        let out = train(&x, &y, vec!["a".into(), "b".into(), "c".into()], &TrainConfig::default()).unwrap();
        let pred = out.model.predict(&x).unwrap();
        let hits = pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        assert!(hits as f64 >= 0.95 * y.len() as f64, "{pred:?}");
        for w in out.history.windows(2) {
            assert!(w[1].elbo >= w[0].elbo - 1e-8);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = blob_data(3, 7);
        let cfg = TrainConfig {
            kernel: KernelSpec { family: KernelFamily::Powrbf, alpha: Some(1.3), ..KernelSpec::default() },
            ..quick_config()
        };
        let out = train(&x, &y, vec!["a".into(), "b".into(), "c".into()], &cfg).unwrap();
        let json = out.model.to_json().unwrap();
        let back = TrainedModel::from_json(&json).unwrap();
        assert_eq!(back.predict_proba(&x).unwrap(), out.model.predict_proba(&x).unwrap());
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn corrupt_topology_is_rejected() {
        let (x, y) = blob_data(3, 8);
        let t = build_tree(&x, &y, 3, &quick_config()).unwrap();
        let mut nodes = t.nodes().to_vec();
        let dup = nodes[0].right_classes[0];
        nodes[0].left_classes.push(dup);
        assert!(ClassTree::from_nodes(3, nodes).is_err());
    }
}
