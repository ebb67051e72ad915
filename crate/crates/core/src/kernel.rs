//! Global multi-graph construction and spectral node embeddings.
//!
//! For every dataset, all node attribute rows are stacked and compared
//! through Gaussian kernels at several bandwidths. Each gram matrix is then
//! factored and truncated to give `embed_dim`-wide node embeddings that do
//! not depend on the meaning or width of the original attributes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset};
use crate::linalg::{canonicalize_sign, symmetric_eigen};

pub const DEFAULT_LAMBDAS: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0];

/// Eigenvalues below this fraction of the largest are treated as zero
/// whenever a factor has to be inverted.
pub const EIGEN_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleConfig {
    pub lambdas: Vec<f64>,
    pub embed_dim: usize,
    /// Graphs per independently embedded block.
    pub block_size: Option<usize>,
    pub nystrom_landmarks: Option<usize>,
    /// Seed for landmark sampling.
    pub seed: u64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            embed_dim: 32,
            block_size: Some(128),
            nystrom_landmarks: None,
            seed: 0,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Parameter("bandwidths must be non-empty and positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Parameter("embedding width must be at least 1".into()));
        }
        if self.block_size == Some(0) {
            return Err(Error::Parameter("block size must be at least 1".into()));
        }
        if self.nystrom_landmarks == Some(0) {
            return Err(Error::Parameter("landmark count must be at least 1".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(x: ArrayView2<'_, f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericInput("attribute matrix contains a non-finite value".into()))
    }
}

/// Mean Euclidean distance over all unordered pairs of distinct rows.
pub fn pairwise_mean_distance(x: ArrayView2<'_, f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Degenerate("mean distance needs at least two points".into()));
    }
    check_finite(x)?;
    let mut total = 0.0;
    for u in 0..n {
        let xu = x.row(u);
        for v in u + 1..n {
            total += sq_dist(xu, x.row(v)).sqrt();
        }
    }
    let mu = total / (n * (n - 1) / 2) as f64;
    if mu <= 0.0 {
        return Err(Error::Degenerate("all points coincide; kernel bandwidth undefined".into()));
    }
    Ok(mu)
}

fn check_bandwidth(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("bandwidth {lambda} must be positive")));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Parameter(format!("mean distance {mu} must be positive")));
    }
    Ok(())
}

/// `K[u, v] = exp(-‖x_u - x_v‖² / (2 λ μ²))`, exactly symmetric with a unit
/// diagonal.
pub fn gaussian_gram(x: ArrayView2<'_, f64>, lambda: f64, mu: f64) -> Result<Array2<f64>> {
    check_bandwidth(lambda, mu)?;
    check_finite(x)?;
    let n = x.nrows();
    let scale = 1.0 / (2.0 * lambda * mu * mu);
    let mut k = Array2::zeros((n, n));
    for u in 0..n {
        k[[u, u]] = 1.0;
        let xu = x.row(u);
        for v in u + 1..n {
            let val = (-sq_dist(xu, x.row(v)) * scale).exp();
            k[[u, v]] = val;
            k[[v, u]] = val;
        }
    }
    Ok(k)
}

/// Kernel between the rows of `a` and the rows of `b` with the same
/// bandwidth rule as [`gaussian_gram`].
pub fn cross_gram(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    lambda: f64,
    mu: f64,
) -> Result<Array2<f64>> {
    check_bandwidth(lambda, mu)?;
    check_finite(a)?;
    check_finite(b)?;
    if a.ncols() != b.ncols() {
        return Err(Error::Contract(format!(
            "attribute widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let scale = 1.0 / (2.0 * lambda * mu * mu);
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(u, v)| {
        (-sq_dist(a.row(u), b.row(v)) * scale).exp()
    }))
}

/// A rank-`dim` spectral factorization `K ≈ Z Zᵀ` with `Z = U Σ^{1/2}`.
///
/// `basis` holds the right singular vectors `V` (equal to `U` for the
/// symmetric PSD matrices used here).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFactors {
    pub z: Array2<f64>,
    pub basis: Array2<f64>,
    pub singular_values: Array1<f64>,
}

impl SpectralFactors {
    /// Appends zero columns up to `dim`.
    fn padded(self, dim: usize) -> Self {
        let have = self.z.ncols();
        if have >= dim {
            return self;
        }
        let pad = |m: Array2<f64>| {
            let mut out = Array2::zeros((m.nrows(), dim));
            out.slice_mut(s![.., ..have]).assign(&m);
            out
        };
        let mut sv = Array1::zeros(dim);
        sv.slice_mut(s![..have]).assign(&self.singular_values);
        SpectralFactors {
            z: pad(self.z),
            basis: pad(self.basis),
            singular_values: sv,
        }
    }
}

/// Truncated factorization of a symmetric PSD matrix.
///
/// Singular values are sorted descending; each singular vector is flipped so
/// its largest-magnitude entry is positive (lowest index on ties). Tiny
/// negative eigenvalues from round-off are clamped to zero.
pub fn truncated_svd_embed(k: ArrayView2<'_, f64>, dim: usize) -> Result<SpectralFactors> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Parameter("kernel matrix must be square".into()));
    }
    if dim > n {
        return Err(Error::Parameter(format!(
            "embedding width {dim} exceeds matrix size {n}"
        )));
    }
    let (values, vectors) = symmetric_eigen(k);
    let sv = values.slice(s![..dim]).mapv(|v| v.max(0.0));
    let basis = vectors.slice(s![.., ..dim]).to_owned();
    let z = &basis * &sv.mapv(f64::sqrt).insert_axis(Axis(0));
    Ok(SpectralFactors {
        z,
        basis,
        singular_values: sv,
    })
}

/// Structural attributes for a featureless graph: the top-`dim` left singular
/// vectors of `A + I`, without singular-value scaling. Columns beyond the node
/// count are zero.
pub fn synthesize_attributes(adjacency: ArrayView2<'_, f64>, dim: usize) -> Array2<f64> {
    let n = adjacency.nrows();
    let mut a = adjacency.to_owned();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let (values, vectors) = symmetric_eigen(a.view());
    // Singular values of a symmetric matrix are |λ|; keep the eigenvector
    // order for exact ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .partial_cmp(&values[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = Array2::zeros((n, dim));
    for (col, &src) in order.iter().take(dim).enumerate() {
        out.column_mut(col).assign(&vectors.column(src));
    }
    out
}

/// Node attributes of `g`, synthesized from structure when absent.
pub fn node_features(g: &Graph, embed_dim: usize) -> Array2<f64> {
    match g.attributes() {
        Some(x) => x.clone(),
        None => synthesize_attributes(g.adjacency().view(), embed_dim),
    }
}

/// Nyström factorization from `landmarks` uniformly sampled rows.
///
/// The landmark gram is pseudo-inverted through its eigendecomposition
/// (discarding eigenvalues below [`EIGEN_CUTOFF`] relative to the largest),
/// which yields `F` with `F Fᵀ = K_nm K_mm⁺ K_mn`. `F` is then rotated onto
/// the eigenbasis of `Fᵀ F` and truncated, so `Z Zᵀ` is the best rank-`dim`
/// approximation of the Nyström matrix and `Z = U Σ^{1/2}` with orthonormal
/// `U`.
pub fn nystrom_embed(
    x: ArrayView2<'_, f64>,
    lambda: f64,
    mu: f64,
    dim: usize,
    landmarks: usize,
    seed: u64,
) -> Result<SpectralFactors> {
    let n = x.nrows();
    if landmarks > n {
        return Err(Error::Parameter(format!(
            "{landmarks} landmarks requested from {n} rows"
        )));
    }
    if dim > landmarks {
        return Err(Error::Parameter(format!(
            "embedding width {dim} exceeds landmark count {landmarks}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, landmarks).into_vec();
    idx.sort_unstable();
    let k_nm = cross_gram(x, x.select(Axis(0), &idx).view(), lambda, mu)?;
    let k_mm = k_nm.select(Axis(0), &idx);
    let (vals, vecs) = symmetric_eigen(k_mm.view());
    let top = vals[0].max(0.0);
    let kept = vals.iter().take_while(|&&v| v > EIGEN_CUTOFF * top).count();
    let inv_sqrt = vals.slice(s![..kept]).mapv(|v| 1.0 / v.sqrt());
    let f = k_nm.dot(&vecs.slice(s![.., ..kept])) * &inv_sqrt.insert_axis(Axis(0));
    let (svals, w) = symmetric_eigen(f.t().dot(&f).view());
    let rank = dim.min(kept);
    let mut z = f.dot(&w.slice(s![.., ..rank]));
    for mut col in z.columns_mut() {
        canonicalize_sign(col.view_mut());
    }
    let sv = svals.slice(s![..rank]).mapv(|v| v.max(0.0));
    let inv = sv.mapv(|v| if v > EIGEN_CUTOFF * top { 1.0 / v.sqrt() } else { 0.0 });
    let basis = &z * &inv.insert_axis(Axis(0));
    Ok(SpectralFactors {
        z,
        basis,
        singular_values: sv,
    }
    .padded(dim))
}

/// Factors of one independently embedded block of consecutive graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFactors {
    /// Row range `[start, end)` in the stacked node matrix.
    pub rows: (usize, usize),
    pub mu: f64,
    pub basis: Array2<f64>,
    pub singular_values: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEmbedding {
    pub lambda: f64,
    /// Node embeddings, one row per node of the dataset.
    pub z: Array2<f64>,
    pub blocks: Vec<BlockFactors>,
}

/// Per-bandwidth node embeddings for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleEmbedding {
    pub embed_dim: usize,
    /// Row offset of each graph, plus a final entry equal to the row count.
    pub offsets: Vec<usize>,
    /// Stacked node attributes the kernels were built from.
    pub attributes: Array2<f64>,
    pub scales: Vec<ScaleEmbedding>,
}

impl MultiScaleEmbedding {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// All scales side by side: `N̄ × (Q · embed_dim)`.
    pub fn concatenated(&self) -> Array2<f64> {
        let views: Vec<_> = self.scales.iter().map(|s| s.z.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("scales share row count")
    }

    /// Per-scale node embeddings of graph `i`.
    pub fn graph_inputs(&self, i: usize) -> Vec<Array2<f64>> {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.scales
            .iter()
            .map(|s| s.z.slice(s![a..b, ..]).to_owned())
            .collect()
    }

    pub fn means(&self) -> Vec<Array1<f64>> {
        self.scales
            .iter()
            .map(|s| crate::linalg::column_means(s.z.view()))
            .collect()
    }
}

fn stacked_features(graphs: &[Graph], embed_dim: usize) -> (Array2<f64>, Vec<usize>) {
    let feats: Vec<Array2<f64>> = graphs.iter().map(|g| node_features(g, embed_dim)).collect();
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    offsets.push(0);
    for f in &feats {
        offsets.push(offsets.last().unwrap() + f.nrows());
    }
    if feats.is_empty() {
        return (Array2::zeros((0, 0)), offsets);
    }
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("equal attribute widths");
    (x, offsets)
}

/// Embeds a dataset at every configured bandwidth.
///
/// Featureless datasets are first given structural attributes per graph.
/// With `block_size` set, consecutive groups of that many graphs are
/// embedded independently and the results are stacked. Blocks with fewer
/// nodes than `embed_dim` are zero-padded to full width.
pub fn multi_scale_embed(ds: &GraphDataset, cfg: &ScaleConfig) -> Result<MultiScaleEmbedding> {
    cfg.validate()?;
    let (x, offsets) = stacked_features(ds.graphs(), cfg.embed_dim);
    let block = cfg.block_size.unwrap_or(ds.len()).max(1);
    let ranges: Vec<(usize, usize)> = (0..ds.len())
        .step_by(block)
        .map(|g0| (offsets[g0], offsets[(g0 + block).min(ds.len())]))
        .collect();
    let mus = ranges
        .iter()
        .map(|&(a, b)| pairwise_mean_distance(x.slice(s![a..b, ..])))
        .collect::<Result<Vec<_>>>()?;

    let embed_block = |q: usize, b: usize| -> Result<SpectralFactors> {
        let (start, end) = ranges[b];
        let xb = x.slice(s![start..end, ..]);
        let rows = end - start;
        let lambda = cfg.lambdas[q];
        match cfg.nystrom_landmarks {
            Some(m) => {
                let m = m.min(rows);
                let seed = cfg
                    .seed
                    .wrapping_add((q as u64) << 32)
                    .wrapping_add(b as u64);
                nystrom_embed(xb, lambda, mus[b], cfg.embed_dim.min(m), m, seed)
                    .map(|f| f.padded(cfg.embed_dim))
            }
            None => {
                let k = gaussian_gram(xb, lambda, mus[b])?;
                truncated_svd_embed(k.view(), cfg.embed_dim.min(rows)).map(|f| f.padded(cfg.embed_dim))
            }
        }
    };

    let scales = (0..cfg.lambdas.len())
        .into_par_iter()
        .map(|q| -> Result<ScaleEmbedding> {
            let mut z = Array2::zeros((x.nrows(), cfg.embed_dim));
            let mut blocks = Vec::with_capacity(ranges.len());
            for (b, &(start, end)) in ranges.iter().enumerate() {
                let f = embed_block(q, b)?;
                z.slice_mut(s![start..end, ..]).assign(&f.z);
                blocks.push(BlockFactors {
                    rows: (start, end),
                    mu: mus[b],
                    basis: f.basis,
                    singular_values: f.singular_values,
                });
            }
            Ok(ScaleEmbedding {
                lambda: cfg.lambdas[q],
                z,
                blocks,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MultiScaleEmbedding {
        embed_dim: cfg.embed_dim,
        offsets,
        attributes: x,
        scales,
    })
}

/// Embeds unseen nodes into the space of a training embedding at scale `q`:
/// `Z_test = K_test V Σ^{-1/2}`, with the kernel bandwidth taken from the
/// training set's mean distance. Requires a single-block training embedding.
pub fn cross_embed_test(
    x_test: ArrayView2<'_, f64>,
    train: &MultiScaleEmbedding,
    q: usize,
) -> Result<Array2<f64>> {
    let scale = train
        .scales
        .get(q)
        .ok_or_else(|| Error::Parameter(format!("scale index {q} out of range")))?;
    if x_test.nrows() == 0 {
        return Ok(Array2::zeros((0, train.embed_dim)));
    }
    if x_test.ncols() != train.attributes.ncols() {
        return Err(Error::Contract(format!(
            "test attribute width {} != training width {}",
            x_test.ncols(),
            train.attributes.ncols()
        )));
    }
    let [block] = scale.blocks.as_slice() else {
        return Err(Error::Parameter(
            "cross embedding needs a single-block training embedding".into(),
        ));
    };
    let k = cross_gram(x_test, train.attributes.view(), scale.lambda, block.mu)?;
    let top = block.singular_values.iter().fold(0.0f64, |m, &v| m.max(v));
    let inv = block
        .singular_values
        .mapv(|v| if v > EIGEN_CUTOFF * top { 1.0 / v.sqrt() } else { 0.0 });
    Ok(k.dot(&block.basis) * &inv.insert_axis(Axis(0)))
}

/// Node features for graphs that will be cross-embedded: same synthesis rule
/// as training.
pub fn stacked_node_features(graphs: &[Graph], embed_dim: usize) -> (Array2<f64>, Vec<usize>) {
    stacked_features(graphs, embed_dim)
}

#[derive(Serialize, Deserialize)]
struct EmbeddingMeta {
    rows: usize,
    scales: usize,
    embed_dim: usize,
    lambdas: Vec<f64>,
    offsets: Vec<usize>,
    /// Per scale, per block: (start, end, μ).
    blocks: Vec<Vec<(usize, usize, f64)>>,
}

impl MultiScaleEmbedding {
    /// Container layout: `x` (stacked attributes), then per scale `q`:
    /// `z.q`, and per block `b`: `basis.q.b`, `sigma.q.b`.
    pub fn to_container(&self) -> Result<Container> {
        let meta = EmbeddingMeta {
            rows: self.total_rows(),
            scales: self.num_scales(),
            embed_dim: self.embed_dim,
            lambdas: self.scales.iter().map(|s| s.lambda).collect(),
            offsets: self.offsets.clone(),
            blocks: self
                .scales
                .iter()
                .map(|s| s.blocks.iter().map(|b| (b.rows.0, b.rows.1, b.mu)).collect())
                .collect(),
        };
        let mut c = Container::new("embedding", &meta)?;
        c.push_matrix("x", &self.attributes);
        for (q, s) in self.scales.iter().enumerate() {
            c.push_matrix(format!("z.{q}"), &s.z);
            for (b, blk) in s.blocks.iter().enumerate() {
                c.push_matrix(format!("basis.{q}.{b}"), &blk.basis);
                c.push_vector(format!("sigma.{q}.{b}"), blk.singular_values.as_slice().unwrap());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("embedding")?;
        let meta: EmbeddingMeta = c.meta()?;
        let mut scales = Vec::with_capacity(meta.scales);
        for q in 0..meta.scales {
            let blocks = meta.blocks[q]
                .iter()
                .enumerate()
                .map(|(b, &(start, end, mu))| {
                    Ok(BlockFactors {
                        rows: (start, end),
                        mu,
                        basis: c.matrix(&format!("basis.{q}.{b}"))?,
                        singular_values: c.vector(&format!("sigma.{q}.{b}"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            scales.push(ScaleEmbedding {
                lambda: meta.lambdas[q],
                z: c.matrix(&format!("z.{q}"))?,
                blocks,
            });
        }
        Ok(MultiScaleEmbedding {
            embed_dim: meta.embed_dim,
            offsets: meta.offsets,
            attributes: c.matrix("x")?,
            scales,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic, SyntheticKind};
    use crate::linalg::frobenius;
    use ndarray::array;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Best rank-`d` approximation from a full eigendecomposition.
    fn rank_truncation(k: &Array2<f64>, d: usize) -> Array2<f64> {
        let (vals, vecs) = symmetric_eigen(k.view());
        let u = vecs.slice(s![.., ..d]);
        let lam = vals.slice(s![..d]).mapv(|v| v.max(0.0));
        (&u * &lam.insert_axis(Axis(0))).dot(&u.t())
    }

    #[test]
    fn mean_distance_cases() {
        assert_eq!(pairwise_mean_distance(array![[0.0, 0.0], [0.0, 2.0]].view()).unwrap(), 2.0);
        let mu = pairwise_mean_distance(array![[0.0], [1.0], [2.0]].view()).unwrap();
        assert!((mu - 4.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            pairwise_mean_distance(array![[1.0, 2.0]].view()),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            pairwise_mean_distance(array![[1.0], [1.0]].view()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn gram_entries() {
        let (lambda, mu) = (0.5, 1.5);
        // Squared distance 2 λ μ² along one axis.
        let d = (2.0 * lambda * mu * mu as f64).sqrt();
        let k = gaussian_gram(array![[0.0, 0.0], [d, 0.0]].view(), lambda, mu).unwrap();
        assert_eq!(k[[0, 0]], 1.0);
        assert_eq!(k[[1, 1]], 1.0);
        assert!((k[[0, 1]] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(gaussian_gram(array![[f64::NAN]].view(), 1.0, 1.0).is_err());
    }

    #[test]
    fn gram_is_psd() {
        let x = random_points(10, 3, 5);
        let mu = pairwise_mean_distance(x.view()).unwrap();
        let k = gaussian_gram(x.view(), 1.0, mu).unwrap();
        let (vals, _) = symmetric_eigen(k.view());
        assert!(vals.iter().all(|&v| v >= -1e-10));
        assert_eq!(k, k.t());
    }

    #[test]
    fn svd_embed_of_ones() {
        let k = Array2::ones((3, 3));
        let f = truncated_svd_embed(k.view(), 1).unwrap();
        assert!((f.singular_values[0] - 3.0).abs() < 1e-12);
        for v in f.z.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_embed_identity_and_bounds() {
        let k = Array2::eye(2);
        let f = truncated_svd_embed(k.view(), 2).unwrap();
        assert!(frobenius((f.z.dot(&f.z.t()) - &k).view()) < 1e-12);
        assert!(matches!(truncated_svd_embed(k.view(), 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn svd_embed_reconstructs_truncation() {
        let x = random_points(40, 4, 9);
        let mu = pairwise_mean_distance(x.view()).unwrap();
        let k = gaussian_gram(x.view(), 0.5, mu).unwrap();
        let f = truncated_svd_embed(k.view(), 6).unwrap();
        let target = rank_truncation(&k, 6);
        let err = frobenius((f.z.dot(&f.z.t()) - &target).view()) / frobenius(target.view());
        assert!(err < 1e-6, "{err}");
        assert!(f.singular_values.windows(2).into_iter().all(|w| w[0] >= w[1]));
    }

    #[test]
    fn synthesized_attributes_of_single_edge() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let x = synthesize_attributes(a.view(), 1);
        let h = 1.0 / 2f64.sqrt();
        assert!((x[[0, 0]] - h).abs() < 1e-12 && (x[[1, 0]] - h).abs() < 1e-12);
        let wide = synthesize_attributes(a.view(), 3);
        assert_eq!(wide.dim(), (2, 3));
        assert!(wide.column(2).iter().all(|&v| v == 0.0));
        assert_eq!(wide, synthesize_attributes(a.view(), 3));
    }

    #[test]
    fn multi_scale_shapes_and_blocking() {
        let ds = generate_synthetic(SyntheticKind::Er { p: 0.5 }, 6, (4, 7), 3).unwrap();
        let cfg = ScaleConfig {
            lambdas: vec![0.5, 2.0],
            embed_dim: 2,
            block_size: None,
            ..Default::default()
        };
        let e = multi_scale_embed(&ds, &cfg).unwrap();
        assert_eq!(e.concatenated().dim(), (ds.total_nodes(), 4));
        let blocked = multi_scale_embed(
            &ds,
            &ScaleConfig {
                block_size: Some(100),
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(blocked, e);
        let split = multi_scale_embed(
            &ds,
            &ScaleConfig {
                block_size: Some(2),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(split.scales[0].blocks.len(), 3);
        assert_eq!(split.concatenated().dim(), (ds.total_nodes(), 4));
    }

    #[test]
    fn five_node_dataset_shape() {
        let g1 = Graph::new(2, [(0, 1)], Some(array![[0.0], [1.0]]), Some(0)).unwrap();
        let g2 = Graph::new(3, [(0, 1), (1, 2)], Some(array![[2.0], [3.5], [5.0]]), Some(1)).unwrap();
        let ds = GraphDataset::new("five", vec![g1, g2]).unwrap();
        let cfg = ScaleConfig {
            lambdas: vec![1.0, 2.0],
            embed_dim: 2,
            ..Default::default()
        };
        assert_eq!(multi_scale_embed(&ds, &cfg).unwrap().concatenated().dim(), (5, 4));
    }

    #[test]
    fn nystrom_full_landmarks_is_exact() {
        let x = random_points(30, 3, 1);
        let mu = pairwise_mean_distance(x.view()).unwrap();
        let k = gaussian_gram(x.view(), 1.0, mu).unwrap();
        let f = nystrom_embed(x.view(), 1.0, mu, 5, 30, 0).unwrap();
        let target = rank_truncation(&k, 5);
        let err = frobenius((f.z.dot(&f.z.t()) - &target).view()) / frobenius(target.view());
        assert!(err < 1e-6, "{err}");
        assert!(matches!(nystrom_embed(x.view(), 1.0, mu, 5, 31, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn cross_embedding_reproduces_training_rows() {
        let ds = generate_synthetic(SyntheticKind::Ba { m: 2 }, 5, (5, 8), 1).unwrap();
        let cfg = ScaleConfig {
            lambdas: vec![1.0],
            embed_dim: 4,
            ..Default::default()
        };
        let e = multi_scale_embed(&ds, &cfg).unwrap();
        let z = cross_embed_test(e.attributes.view(), &e, 0).unwrap();
        assert!(frobenius((&z - &e.scales[0].z).view()) < 1e-8 * z.nrows() as f64);
        let one = cross_embed_test(e.attributes.slice(s![3..4, ..]), &e, 0).unwrap();
        for j in 0..4 {
            assert!((one[[0, j]] - e.scales[0].z[[3, j]]).abs() < 1e-8);
        }
        let empty = cross_embed_test(Array2::zeros((0, 4)).view(), &e, 0).unwrap();
        assert_eq!(empty.dim(), (0, 4));
        assert!(matches!(
            cross_embed_test(Array2::zeros((1, 3)).view(), &e, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn embedding_dump_round_trip() {
        let ds = generate_synthetic(SyntheticKind::Cycle, 4, (4, 6), 0).unwrap();
        let cfg = ScaleConfig {
            lambdas: vec![1.0, 5.0],
            embed_dim: 3,
            block_size: Some(2),
            ..Default::default()
        };
        let e = multi_scale_embed(&ds, &cfg).unwrap();
        let bytes = e.to_container().unwrap().to_bytes().unwrap();
        let back = MultiScaleEmbedding::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, e);
    }
}
