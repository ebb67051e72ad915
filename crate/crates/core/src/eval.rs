//! Downstream evaluation: few-shot classification and spectral clustering of
//! graph vectors.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{apply_rotation, max_density_align, mean_vector};
use crate::encoder::GraphBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset};
use crate::kernel::{cross_embed_test, multi_scale_embed, stacked_node_features, ScaleConfig};
use crate::linalg::symmetric_eigen;
use crate::model::Model;
use crate::train::Checkpoint;

/// Graphs per forward pass when only vectors are needed.
const VECTOR_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Downstream embedding

/// Graph vectors of a downstream train/test split, with the rotations fitted
/// per kernel scale.
#[derive(Debug, Clone)]
pub struct DownstreamVectors {
    pub train: Array2<f64>,
    pub test: Array2<f64>,
    pub train_rotations: Vec<Array2<f64>>,
    pub test_rotations: Vec<Array2<f64>>,
}

fn attribute_signature(g: &Graph) -> Option<usize> {
    g.attributes().map(|x| x.ncols())
}

/// Embeds a downstream split into the pre-trained space.
///
/// The training graphs are kernel-embedded on their own, then rotated
/// towards the frozen pre-training means. Test graphs are projected through
/// the training factors and rotated towards the frozen pre-training and
/// training means.
pub fn fewshot_embed(ck: &Checkpoint, train: &[Graph], test: &[Graph]) -> Result<DownstreamVectors> {
    if train.is_empty() {
        return Err(Error::Contract("few-shot training split is empty".into()));
    }
    let sig = attribute_signature(&train[0]);
    if train.iter().chain(test).any(|g| attribute_signature(g) != sig) {
        return Err(Error::Contract(
            "downstream graphs disagree on attribute dimensionality".into(),
        ));
    }
    let scale = ScaleConfig {
        block_size: None,
        nystrom_landmarks: None,
        ..ck.scale.clone()
    };
    let ds = GraphDataset::new("downstream", train.to_vec())?;
    let mut train_emb = multi_scale_embed(&ds, &scale)?;
    let (x_test, test_offsets) = stacked_node_features(test, scale.embed_dim);
    let q_count = train_emb.num_scales();
    if ck.alignment.num_scales() != q_count {
        return Err(Error::Parameter("checkpoint alignment has a different scale count".into()));
    }

    let mut test_z = Vec::with_capacity(q_count);
    let (mut train_rot, mut test_rot) = (Vec::new(), Vec::new());
    for q in 0..q_count {
        let pre = &ck.alignment.scales[q];
        let mut means: Vec<Array1<f64>> = pre.iter().map(|a| a.mean.clone()).collect();
        let mut init: Vec<Array2<f64>> = pre.iter().map(|a| a.rotation.clone()).collect();
        let mut frozen = vec![true; pre.len()];
        let d = scale.embed_dim;

        means.push(mean_vector(train_emb.scales[q].z.view())?);
        init.push(Array2::eye(d));
        frozen.push(false);
        let r_train = max_density_align(&means, Some(&init), &frozen, &ck.align)?
            .rotations
            .pop()
            .expect("one rotation per mean");

        let z_test = cross_embed_test(x_test.view(), &train_emb, q)?;
        let r_test = if z_test.nrows() == 0 {
            Array2::eye(d)
        } else {
            *init.last_mut().unwrap() = r_train.clone();
            *frozen.last_mut().unwrap() = true;
            means.push(mean_vector(z_test.view())?);
            init.push(Array2::eye(d));
            frozen.push(false);
            max_density_align(&means, Some(&init), &frozen, &ck.align)?
                .rotations
                .pop()
                .expect("one rotation per mean")
        };
        test_z.push(apply_rotation(z_test.view(), r_test.view())?);
        train_rot.push(r_train);
        test_rot.push(r_test);
    }
    for (s, r) in train_emb.scales.iter_mut().zip(&train_rot) {
        s.z = apply_rotation(s.z.view(), r.view())?;
    }

    let train_inputs: Vec<Vec<Array2<f64>>> = (0..train.len()).map(|i| train_emb.graph_inputs(i)).collect();
    let test_inputs: Vec<Vec<Array2<f64>>> = (0..test.len())
        .map(|i| {
            let (a, b) = (test_offsets[i], test_offsets[i + 1]);
            test_z.iter().map(|z| z.slice(s![a..b, ..]).to_owned()).collect()
        })
        .collect();
    Ok(DownstreamVectors {
        train: graph_vectors(&ck.model, train, &train_inputs)?,
        test: graph_vectors(&ck.model, test, &test_inputs)?,
        train_rotations: train_rot,
        test_rotations: test_rot,
    })
}

/// Vectors of many graphs, computed in fixed-size chunks.
pub fn graph_vectors(model: &Model, graphs: &[Graph], inputs: &[Vec<Array2<f64>>]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((graphs.len(), model.vector_width()));
    for start in (0..graphs.len()).step_by(VECTOR_CHUNK) {
        let end = (start + VECTOR_CHUNK).min(graphs.len());
        let refs: Vec<&Graph> = graphs[start..end].iter().collect();
        let batch = GraphBatch::new(&refs, &inputs[start..end], model.config.encoder.epsilon)?;
        out.slice_mut(s![start..end, ..]).assign(&model.graph_vectors(&batch)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Few-shot classification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    /// Labelled training graphs per class.
    pub shots: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            shots: 10,
            epochs: 500,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws `shots` graphs per class for training; the rest are test graphs.
pub fn fewshot_split(labels: &[usize], shots: usize, seed: u64) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::Parameter("shots must be at least 1".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < shots {
            return Err(Error::Parameter(format!(
                "class {c} has {} graphs, fewer than {shots} shots",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..shots]);
    }
    train.sort_unstable();
    let test = (0..labels.len()).filter(|i| train.binary_search(i).is_err()).collect();
    Ok(FewShotSplit { train, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl SoftmaxClassifier {
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Multinomial logistic regression by full-batch gradient descent on the
/// mean cross-entropy, from zero weights.
pub fn fit_softmax(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<SoftmaxClassifier> {
    let n = x.nrows();
    if n == 0 || n != y.len() {
        return Err(Error::Contract(format!("{n} rows with {} labels", y.len())));
    }
    if y.iter().any(|&c| c >= classes) {
        return Err(Error::Contract("label outside the class range".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Parameter("learning rate must be positive".into()));
    }
    let mut clf = SoftmaxClassifier {
        weights: Array2::zeros((x.ncols(), classes)),
        bias: Array1::zeros(classes),
    };
    for _ in 0..epochs {
        let mut p = clf.logits(x);
        softmax_rows(&mut p);
        for (i, &c) in y.iter().enumerate() {
            p[[i, c]] -= 1.0;
        }
        p /= n as f64;
        clf.weights.scaled_add(-lr, &x.t().dot(&p));
        clf.bias.scaled_add(-lr, &p.sum_axis(Axis(0)));
    }
    if clf.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            node: "softmax classifier".into(),
        });
    }
    Ok(clf)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Test accuracy of one few-shot episode.
pub fn fewshot_accuracy(ck: &Checkpoint, ds: &GraphDataset, cfg: &FewShotConfig, seed: u64) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Contract(format!("few-shot evaluation needs labels on `{}`", ds.name)))?;
    let split = fewshot_split(&labels, cfg.shots, seed)?;
    if split.test.is_empty() {
        return Err(Error::Contract("few-shot test split is empty".into()));
    }
    let pick = |idx: &[usize]| -> Vec<Graph> { idx.iter().map(|&i| ds.graphs()[i].clone()).collect() };
    let v = fewshot_embed(ck, &pick(&split.train), &pick(&split.test))?;
    let ytr: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let clf = fit_softmax(v.train.view(), &ytr, ds.num_classes(), cfg.epochs, cfg.lr)?;
    accuracy(&clf.predict(v.test.view()), &yte)
}

/// One accuracy per seed.
pub fn fewshot_eval(ck: &Checkpoint, ds: &GraphDataset, cfg: &FewShotConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds.iter().map(|&s| fewshot_accuracy(ck, ds, cfg, s)).collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Clustering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub neighbors: usize,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            neighbors: 10,
            restarts: 10,
            max_iters: 300,
        }
    }
}

/// Relabels clusters by order of first appearance.
fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding plus Lloyd iterations; the restart with the lowest
/// inertia wins.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, cfg: &ClusterConfig, seed: u64) -> Result<Vec<usize>> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let mut centers = Array2::zeros((k, x.ncols()));
        centers.row_mut(0).assign(&x.row(rng.random_range(0..n)));
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut t = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if t < w {
                        chosen = i;
                        break;
                    }
                    t -= w;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            centers.row_mut(c).assign(&x.row(pick));
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(x.row(i), centers.row(c)));
            }
        }

        let mut assign = vec![usize::MAX; n];
        for _ in 0..cfg.max_iters {
            let mut changed = false;
            for i in 0..n {
                let c = (0..k)
                    .map(|c| (c, sq_dist(x.row(i), centers.row(c))))
                    .fold((0, f64::INFINITY), |b, (c, d)| if d < b.1 { (c, d) } else { b })
                    .0;
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Array2::<f64>::zeros(centers.dim());
            let mut counts = vec![0usize; k];
            for (i, &c) in assign.iter().enumerate() {
                sums.row_mut(c).scaled_add(1.0, &x.row(i));
                counts[c] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
                }
            }
        }
        let inertia: f64 = assign.iter().enumerate().map(|(i, &c)| sq_dist(x.row(i), centers.row(c))).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(canonical_labels(&best.expect("at least one restart").1))
}

/// Symmetric mutual-kNN affinity over cosine similarity, with weights
/// `(1 + cos) / 2`. A point without mutual neighbours is linked to its
/// nearest neighbour.
pub fn knn_affinity(x: ArrayView2<'_, f64>, neighbors: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut xn = x.to_owned();
    for mut row in xn.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let cos = xn.dot(&xn.t());
    let k = neighbors.min(n.saturating_sub(1));
    let knn: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| cos[[i, b]].total_cmp(&cos[[i, a]]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect();
    let weight = |i: usize, j: usize| (1.0 + cos[[i, j]]) / 2.0;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for &j in &knn[i] {
            if knn[j].contains(&i) {
                w[[i, j]] = weight(i, j);
            }
        }
    }
    for i in 0..n {
        if let Some(&j) = knn[i].first() {
            if w.row(i).iter().all(|&v| v == 0.0) {
                let v = weight(i, j).max(f64::MIN_POSITIVE);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
    }
    w
}

/// Spectral clustering of the rows of `x` into `k` clusters.
pub fn spectral_cluster(x: ArrayView2<'_, f64>, k: usize, cfg: &ClusterConfig, seed: u64) -> Result<Vec<usize>> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("cannot form {k} clusters from {n} points")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("clustering input contains a non-finite value".into()));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let w = knn_affinity(x, cfg.neighbors);
    let deg: Vec<f64> = w.rows().into_iter().map(|r| r.sum()).collect();
    let inv: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let norm = Array2::from_shape_fn((n, n), |(i, j)| inv[i] * w[[i, j]] * inv[j]);
    // Largest eigenvectors of D^-1/2 W D^-1/2 span the bottom of the
    // normalized Laplacian.
    let (_, vecs) = symmetric_eigen(norm.view());
    let mut u = vecs.slice(s![.., ..k]).to_owned();
    for mut row in u.rows_mut() {
        let r = row.dot(&row).sqrt();
        if r > 0.0 {
            row /= r;
        }
    }
    kmeans(u.view(), k, cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

fn contingency(pred: &[usize], truth: &[usize]) -> Array2<f64> {
    let a = canonical_labels(pred);
    let b = canonical_labels(truth);
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut c = Array2::zeros((ka, kb));
    for (&i, &j) in a.iter().zip(&b) {
        c[[i, j]] += 1.0;
    }
    c
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts.filter(|&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Hungarian-matched accuracy, arithmetic-normalized mutual information and
/// adjusted Rand index.
pub fn cluster_metrics(pred: &[usize], truth: &[usize]) -> Result<ClusterMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "{} cluster labels for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let c = contingency(pred, truth);
    let (ka, kb) = c.dim();

    let size = ka.max(kb);
    let mut cells = vec![0i64; size * size];
    for ((i, j), &v) in c.indexed_iter() {
        cells[i * size + j] = v as i64;
    }
    let (matched, _) = kuhn_munkres(&Matrix::from_vec(size, size, cells).expect("square matrix"));
    let acc = matched as f64 / n;

    let rows = c.sum_axis(Axis(1));
    let cols = c.sum_axis(Axis(0));
    let (ha, hb) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    let mut mi = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if v > 0.0 {
            mi += v / n * (v * n / (rows[i] * cols[j])).ln();
        }
    }
    let nmi = if ha + hb == 0.0 { 1.0 } else { (2.0 * mi / (ha + hb)).clamp(0.0, 1.0) };

    let index: f64 = c.iter().map(|&v| choose2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| choose2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(n);
    let max = (sa + sb) / 2.0;
    let ari = if max == expected { 1.0 } else { (index - expected) / (max - expected) };
    Ok(ClusterMetrics { acc, nmi, ari })
}

// ---------------------------------------------------------------------------
// Result records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_results(records: &[ResultRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::StandardNormal;

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels = [0, 0, 0, 1, 1, 1, 1];
        let s = fewshot_split(&labels, 2, 4).unwrap();
        assert_eq!(s.train.len(), 4);
        assert_eq!(s.test.len(), 3);
        assert_eq!(s, fewshot_split(&labels, 2, 4).unwrap());
        assert_eq!(fewshot_split(&labels, 3, 0).unwrap().test.len(), 1);
        assert!(fewshot_split(&[0, 0, 1, 1], 2, 0).unwrap().test.is_empty());
        assert!(fewshot_split(&labels, 4, 0).is_err());
    }

    #[test]
    fn softmax_separates_and_degrades_gracefully() {
        let x = array![[1.0, 0.0], [0.9, 0.2], [0.0, 1.0], [0.1, 0.8]];
        let y = [0, 0, 1, 1];
        let clf = fit_softmax(x.view(), &y, 2, 500, 0.1).unwrap();
        assert_eq!(clf.predict(x.view()), y.to_vec());
        // Zero training leaves the uniform tie, broken towards class 0.
        let clf = fit_softmax(x.view(), &y, 2, 0, 0.1).unwrap();
        assert_eq!(clf.predict(x.view()), vec![0; 4]);
        assert!(fit_softmax(x.view(), &[0, 0, 1], 2, 5, 0.1).is_err());
    }

    #[test]
    fn metric_edge_cases() {
        let m = cluster_metrics(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!((m.acc, m.ari), (1.0, 1.0));
        assert!((m.nmi - 1.0).abs() < 1e-12);
        let m = cluster_metrics(&[0, 0, 0, 0], &[0, 0, 0, 0]).unwrap();
        assert_eq!((m.acc, m.nmi, m.ari), (1.0, 1.0, 1.0));
        let m = cluster_metrics(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert!(m.ari < 0.0 && m.nmi.abs() < 1e-12 && m.acc == 0.5);
        assert!(cluster_metrics(&[0], &[0, 1]).is_err());
        // Over-segmentation: 3 predicted clusters for 2 classes.
        let m = cluster_metrics(&[0, 0, 1, 2], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.acc, 0.75);
    }

    #[test]
    fn ari_reference_value() {
        // Three points agree, one is moved.
        let m = cluster_metrics(&[0, 0, 1, 1, 1, 1], &[0, 0, 0, 1, 1, 1]).unwrap();
        // index = 1 + 3 = 4 (0,1 ; 3,4,5 pairs) ... sa = 1 + 6, sb = 3 + 3, C(6,2) = 15.
        let (index, sa, sb) = (1.0 + 3.0, 7.0, 6.0);
        let exp = sa * sb / 15.0;
        let want = (index - exp) / ((sa + sb) / 2.0 - exp);
        assert!((m.ari - want).abs() < 1e-12);
    }

    #[test]
    fn spectral_recovers_direction_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = [array![5.0, 0.0, 0.0], array![0.0, 5.0, 0.0], array![0.0, 0.0, 5.0]];
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..30 {
                rows.push(mu.mapv(|m| m + 0.3 * rng.sample::<f64, _>(StandardNormal)));
                truth.push(c);
            }
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let x = ndarray::stack(Axis(0), &views).unwrap();
        let pred = spectral_cluster(x.view(), 3, &ClusterConfig::default(), 0).unwrap();
        assert_eq!(cluster_metrics(&pred, &truth).unwrap().ari, 1.0);
    }

    #[test]
    fn spectral_edge_counts() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let cfg = ClusterConfig::default();
        assert_eq!(spectral_cluster(x.view(), 1, &cfg, 0).unwrap(), vec![0, 0, 0]);
        assert_eq!(spectral_cluster(x.view(), 3, &cfg, 0).unwrap(), vec![0, 1, 2]);
        assert!(spectral_cluster(x.view(), 4, &cfg, 0).is_err());
    }

    #[test]
    fn isolated_point_gets_a_neighbour() {
        // Point 3 is nobody's nearest neighbour.
        let x = array![[1.0, 0.0], [0.99, 0.1], [0.98, 0.15], [0.0, 1.0]];
        let w = knn_affinity(x.view(), 1);
        assert!(w.row(3).sum() > 0.0);
        assert_eq!(w, w.t());
    }

    #[test]
    fn single_class_and_slow_rate() {
        let x = array![[0.3, -1.0], [2.0, 0.5], [-0.4, 0.1]];
        let clf = fit_softmax(x.view(), &[2, 2, 2], 3, 50, 1e-3).unwrap();
        assert_eq!(clf.predict(x.view()), vec![2; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Array2::zeros((40, 2));
        let mut y = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let sign = if c == 0 { 1.0 } else { -1.0 };
            x[[i, 0]] = sign * (1.0 + rng.random::<f64>());
            x[[i, 1]] = rng.random::<f64>() - 0.5;
            y.push(c);
        }
        let clf = fit_softmax(x.view(), &y, 2, 500, 1e-3).unwrap();
        assert_eq!(accuracy(&clf.predict(x.view()), &y).unwrap(), 1.0);
    }

    #[test]
    fn spectral_ignores_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((40, 3), |(i, j)| {
            let center = if j == i % 2 { 3.0 } else { 0.0 };
            center + 0.4 * rng.sample::<f64, _>(StandardNormal)
        });
        let (c, s) = (0.6f64, 0.8f64);
        let r = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let cfg = ClusterConfig::default();
        let a = spectral_cluster(x.view(), 2, &cfg, 1).unwrap();
        let b = spectral_cluster(x.dot(&r).view(), 2, &cfg, 1).unwrap();
        assert_eq!(cluster_metrics(&a, &b).unwrap().ari, 1.0);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
