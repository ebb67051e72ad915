//! Density-maximization mean alignment.
//!
//! Each dataset's spectral embedding is only defined up to an orthonormal
//! transform. We pick one rotation per dataset (and per kernel scale) so that
//! the rotated dataset means sit as densely as possible under a Gaussian
//! kernel density, using an iterated orthogonal Procrustes update with a
//! proximal term.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::kernel::MultiScaleEmbedding;
use crate::linalg::{column_means, frobenius, orthonormality_defect, polar_rotation};

/// Initial rotations further than this from orthonormal are rejected.
const INIT_ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Kernel precision, `1 / (2h)` for density bandwidth `h`.
    pub gamma: f64,
    /// Proximal weight; larger values take smaller steps.
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once no rotation moves by more than this (Frobenius norm).
    pub tol: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            gamma: 1.0,
            eta: 0.1,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.eta > 0.0) || !(self.tol > 0.0) {
            return Err(Error::Parameter("gamma, eta and tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Parameter("at least one iteration is required".into()));
        }
        Ok(())
    }
}

/// Column means of an embedding matrix.
pub fn mean_vector(z: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if z.nrows() == 0 {
        return Err(Error::Degenerate("mean of an empty embedding".into()));
    }
    Ok(column_means(z))
}

/// `(1/M) Σ_i Σ_j exp(-γ ‖R_i μ_i − R_j μ_j‖²)`, diagonal terms included.
pub fn density_objective(means: &[Array1<f64>], rotations: &[Array2<f64>], gamma: f64) -> f64 {
    let rotated: Vec<Array1<f64>> = rotations.iter().zip(means).map(|(r, m)| r.dot(m)).collect();
    let m = rotated.len();
    let mut total = 0.0;
    for a in &rotated {
        for b in &rotated {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += (-gamma * d2).exp();
        }
    }
    total / m as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutcome {
    pub rotations: Vec<Array2<f64>>,
    /// Objective before the first update, then after every iteration.
    pub trace: Vec<f64>,
    /// Largest rotation change per iteration.
    pub deltas: Vec<f64>,
    pub converged: bool,
}

/// Iterated Procrustes maximization of [`density_objective`].
///
/// Every iteration updates all non-frozen rotations from the previous
/// iterate: `H_i = Σ_j w_ij k_ij R_j μ_j μ_iᵀ + η R_i` and `R_i ← U Vᵀ` for
/// `H_i = U S Vᵀ`, where `w_ij = exp(-γ(‖μ_i‖² + ‖μ_j‖²))` and
/// `k_ij = exp(2γ ⟨R_i μ_i, R_j μ_j⟩)`. Frozen rotations never change but
/// still attract the others. `init` defaults to identities.
pub fn max_density_align(
    means: &[Array1<f64>],
    init: Option<&[Array2<f64>]>,
    frozen: &[bool],
    cfg: &AlignmentConfig,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    let m = means.len();
    if m == 0 {
        return Err(Error::Parameter("no mean vectors to align".into()));
    }
    if frozen.len() != m {
        return Err(Error::Parameter(format!("{} frozen flags for {m} means", frozen.len())));
    }
    let d = means[0].len();
    if means.iter().any(|mu| mu.len() != d) {
        return Err(Error::Parameter("mean vectors differ in width".into()));
    }
    if means.iter().any(|mu| mu.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericInput("non-finite mean vector".into()));
    }
    let mut rotations: Vec<Array2<f64>> = match init {
        Some(rs) => {
            if rs.len() != m {
                return Err(Error::Parameter(format!("{} rotations for {m} means", rs.len())));
            }
            for (j, r) in rs.iter().enumerate() {
                if r.dim() != (d, d) {
                    return Err(Error::Parameter(format!("rotation {j} is not {d}×{d}")));
                }
                if orthonormality_defect(r.view()) > INIT_ORTHO_TOL {
                    return Err(Error::Parameter(format!("rotation {j} is not orthonormal")));
                }
            }
            rs.to_vec()
        }
        None => vec![Array2::eye(d); m],
    };

    let gamma = cfg.gamma;
    let sq_norms: Vec<f64> = means.iter().map(|mu| mu.dot(mu)).collect();
    let mut trace = vec![density_objective(means, &rotations, gamma)];
    let mut deltas = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let rotated: Vec<Array1<f64>> = rotations.iter().zip(means).map(|(r, mu)| r.dot(mu)).collect();
        let updated: Vec<Array2<f64>> = (0..m)
            .map(|i| {
                if frozen[i] {
                    return rotations[i].clone();
                }
                // w_ij k_ij, evaluated as a single exponent to avoid overflow.
                let mut pull = Array1::<f64>::zeros(d);
                for j in 0..m {
                    let c = (-gamma * (sq_norms[i] + sq_norms[j])
                        + 2.0 * gamma * rotated[i].dot(&rotated[j]))
                    .exp();
                    pull.scaled_add(c, &rotated[j]);
                }
                let mut h = outer(&pull, &means[i]);
                h.scaled_add(cfg.eta, &rotations[i]);
                polar_rotation(h.view())
            })
            .collect();
        let delta = updated
            .iter()
            .zip(&rotations)
            .map(|(a, b)| frobenius((a - b).view()))
            .fold(0.0, f64::max);
        rotations = updated;
        trace.push(density_objective(means, &rotations, gamma));
        deltas.push(delta);
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(AlignOutcome {
        rotations,
        trace,
        deltas,
        converged,
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// `Z Rᵀ`.
pub fn apply_rotation(z: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if r.nrows() != r.ncols() || r.ncols() != z.ncols() {
        return Err(Error::Parameter(format!(
            "rotation {:?} does not fit embedding width {}",
            r.dim(),
            z.ncols()
        )));
    }
    if orthonormality_defect(r) > INIT_ORTHO_TOL {
        return Err(Error::Parameter("rotation is not orthonormal".into()));
    }
    Ok(z.dot(&r.t()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMean {
    pub mean: Array1<f64>,
    pub rotation: Array2<f64>,
    pub frozen: bool,
}

/// Means and rotations per kernel scale (outer index) and dataset (inner).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub embed_dim: usize,
    pub scales: Vec<Vec<AlignedMean>>,
}

impl AlignmentState {
    pub fn num_datasets(&self) -> usize {
        self.scales.first().map_or(0, Vec::len)
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }
}

#[derive(Debug, Clone)]
pub struct ScaleAlignment {
    pub state: AlignmentState,
    /// Input embeddings with every scale rotated.
    pub rotated: Vec<MultiScaleEmbedding>,
    /// One objective trace per scale.
    pub traces: Vec<Vec<f64>>,
}

/// Aligns `M` datasets independently at every kernel scale and rotates their
/// embeddings.
pub fn align_dataset_scales(
    embeddings: &[MultiScaleEmbedding],
    cfg: &AlignmentConfig,
) -> Result<ScaleAlignment> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Parameter("no embeddings to align".into()))?;
    let (q, d) = (first.num_scales(), first.embed_dim);
    if embeddings.iter().any(|e| e.num_scales() != q || e.embed_dim != d) {
        return Err(Error::Parameter("datasets disagree on scale count or width".into()));
    }
    let m = embeddings.len();
    let per_scale = (0..q)
        .into_par_iter()
        .map(|s| -> Result<(Vec<Array1<f64>>, AlignOutcome)> {
            let means = embeddings
                .iter()
                .map(|e| mean_vector(e.scales[s].z.view()))
                .collect::<Result<Vec<_>>>()?;
            let out = max_density_align(&means, None, &vec![false; m], cfg)?;
            Ok((means, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rotated = embeddings.to_vec();
    for (s, (_, out)) in per_scale.iter().enumerate() {
        for (j, e) in rotated.iter_mut().enumerate() {
            e.scales[s].z = apply_rotation(e.scales[s].z.view(), out.rotations[j].view())?;
        }
    }
    let traces = per_scale.iter().map(|(_, o)| o.trace.clone()).collect();
    let scales = per_scale
        .into_iter()
        .map(|(means, out)| {
            means
                .into_iter()
                .zip(out.rotations)
                .map(|(mean, rotation)| AlignedMean {
                    mean,
                    rotation,
                    frozen: false,
                })
                .collect()
        })
        .collect();
    Ok(ScaleAlignment {
        state: AlignmentState {
            embed_dim: d,
            scales,
        },
        rotated,
        traces,
    })
}

#[derive(Serialize, Deserialize)]
struct AlignmentMeta {
    datasets: usize,
    scales: usize,
    embed_dim: usize,
    frozen: Vec<Vec<bool>>,
}

impl AlignmentState {
    /// Container layout: meta with frozen flags, then `mean.q.j` and
    /// `rotation.q.j` blocks.
    pub fn to_container(&self) -> Result<Container> {
        let meta = AlignmentMeta {
            datasets: self.num_datasets(),
            scales: self.num_scales(),
            embed_dim: self.embed_dim,
            frozen: self
                .scales
                .iter()
                .map(|s| s.iter().map(|a| a.frozen).collect())
                .collect(),
        };
        let mut c = Container::new("alignment", &meta)?;
        self.write_blocks(&mut c, "");
        Ok(c)
    }

    pub(crate) fn write_blocks(&self, c: &mut Container, prefix: &str) {
        for (q, scale) in self.scales.iter().enumerate() {
            for (j, a) in scale.iter().enumerate() {
                c.push_vector(format!("{prefix}mean.{q}.{j}"), a.mean.as_slice().unwrap());
                c.push_matrix(format!("{prefix}rotation.{q}.{j}"), &a.rotation);
            }
        }
    }

    pub(crate) fn read_blocks(
        c: &Container,
        prefix: &str,
        embed_dim: usize,
        frozen: &[Vec<bool>],
    ) -> Result<Self> {
        let scales = frozen
            .iter()
            .enumerate()
            .map(|(q, flags)| {
                flags
                    .iter()
                    .enumerate()
                    .map(|(j, &f)| {
                        Ok(AlignedMean {
                            mean: c.vector(&format!("{prefix}mean.{q}.{j}"))?,
                            rotation: c.matrix(&format!("{prefix}rotation.{q}.{j}"))?,
                            frozen: f,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AlignmentState { embed_dim, scales })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("alignment")?;
        let meta: AlignmentMeta = c.meta()?;
        Self::read_blocks(c, "", meta.embed_dim, &meta.frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planar(t: f64) -> Array2<f64> {
        array![[t.cos(), -t.sin()], [t.sin(), t.cos()]]
    }

    /// Random orthonormal matrix via the polar factor of a Gaussian matrix.
    fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let g = Array2::from_shape_fn((d, d), |_| rng.random::<f64>() - 0.5);
        polar_rotation(g.view())
    }

    #[test]
    fn mean_vector_cases() {
        assert_eq!(mean_vector(array![[1.0, 0.0], [3.0, 0.0]].view()).unwrap(), array![2.0, 0.0]);
        assert_eq!(mean_vector(array![[4.0, -1.0]].view()).unwrap(), array![4.0, -1.0]);
        assert!(mean_vector(Array2::<f64>::zeros((0, 2)).view()).is_err());
    }

    #[test]
    fn mean_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Array2::from_shape_fn((9, 4), |_| rng.random::<f64>());
        let r = random_rotation(4, &mut rng);
        let lhs = mean_vector(apply_rotation(z.view(), r.view()).unwrap().view()).unwrap();
        let rhs = r.dot(&mean_vector(z.view()).unwrap());
        assert!((lhs - rhs).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn objective_values() {
        let means = vec![array![1.0, 0.0], array![0.5, 0.5]];
        let ids = vec![Array2::eye(2); 2];
        // Coinciding rotated means give M.
        let same = vec![array![1.0, 0.0], array![1.0, 0.0]];
        assert!((density_objective(&same, &ids, 3.0) - 2.0).abs() < 1e-15);
        let opposite = vec![array![1.0, 0.0], array![-1.0, 0.0]];
        let v = density_objective(&opposite, &ids, 1.0);
        assert!((v - (1.0 + (-4.0f64).exp())).abs() < 1e-12);
        assert!((v - 1.018316).abs() < 1e-6);
        let q = planar(0.7);
        let turned: Vec<_> = ids.iter().map(|r| q.dot(r)).collect();
        assert!(
            (density_objective(&means, &ids, 1.0) - density_objective(&means, &turned, 1.0)).abs()
                < 1e-12
        );
    }

    #[test]
    fn single_dataset_trace_is_flat() {
        let out = max_density_align(&[array![0.3, -0.2, 0.9]], None, &[false], &Default::default()).unwrap();
        assert!(out.trace.iter().all(|&v| (v - out.trace[0]).abs() < 1e-12));
        assert!(orthonormality_defect(out.rotations[0].view()) < 1e-8);
    }

    #[test]
    fn two_means_reach_grid_optimum() {
        let means = vec![array![1.0, 0.0], array![0.0, 1.0]];
        let cfg = AlignmentConfig {
            gamma: 1.0,
            eta: 0.1,
            max_iters: 500,
            tol: 1e-9,
        };
        let out = max_density_align(&means, None, &[false, false], &cfg).unwrap();
        let best = (0..6284)
            .map(|k| {
                let rs = vec![Array2::eye(2), planar(k as f64 * 1e-3)];
                density_objective(&means, &rs, 1.0)
            })
            .fold(f64::MIN, f64::max);
        assert!((best - 2.0).abs() < 1e-5);
        assert!((out.trace.last().unwrap() - best).abs() < 1e-3);
    }

    #[test]
    fn all_frozen_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means: Vec<_> = (0..3).map(|_| Array1::from_shape_fn(3, |_| rng.random::<f64>())).collect();
        let init: Vec<_> = (0..3).map(|_| random_rotation(3, &mut rng)).collect();
        let out = max_density_align(&means, Some(&init), &[true; 3], &Default::default()).unwrap();
        assert_eq!(out.rotations, init);
    }

    #[test]
    fn rejects_non_orthonormal_init() {
        let means = vec![array![1.0, 0.0]];
        let bad = vec![array![[1.0, 0.1], [0.0, 1.0]]];
        assert!(matches!(
            max_density_align(&means, Some(&bad), &[false], &Default::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn zero_mean_leaves_rotation_fixed() {
        let means = vec![Array1::<f64>::zeros(2), Array1::zeros(2)];
        let out = max_density_align(&means, None, &[false, false], &Default::default()).unwrap();
        assert!(out.rotations.iter().all(|r| frobenius((r - &Array2::<f64>::eye(2)).view()) < 1e-12));
    }

    #[test]
    fn rotation_preserves_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array2::from_shape_fn((7, 5), |_| rng.random::<f64>());
        let r = random_rotation(5, &mut rng);
        let zr = apply_rotation(z.view(), r.view()).unwrap();
        assert!(frobenius((zr.dot(&zr.t()) - z.dot(&z.t())).view()) < 1e-10);
        assert_eq!(apply_rotation(z.view(), Array2::eye(5).view()).unwrap(), z);
        assert!(apply_rotation(z.view(), Array2::eye(4).view()).is_err());
    }

    #[test]
    fn alignment_reduces_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let means: Vec<Array1<f64>> = (0..5)
                .map(|_| Array1::from_shape_fn(8, |_| rng.random::<f64>() - 0.5))
                .collect();
            let spread = |rs: &[Array2<f64>]| {
                let y: Vec<_> = rs.iter().zip(&means).map(|(r, m)| r.dot(m)).collect();
                let mut s = 0.0;
                for i in 0..y.len() {
                    for j in i + 1..y.len() {
                        s += (&y[i] - &y[j]).mapv(|v| v * v).sum();
                    }
                }
                s
            };
            let out = max_density_align(&means, None, &[false; 5], &Default::default()).unwrap();
            assert!(spread(&out.rotations) <= spread(&vec![Array2::eye(8); 5]));
        }
    }
}
