//! Reference-distribution readout.
//!
//! Every tapped layer owns `R` learnable sets of `m` virtual nodes. A graph's
//! node states at that layer are compared with each set by Gaussian-kernel
//! MMD; the negated distances form the similarity vector `s`, which is
//! concatenated with a mean readout `p` of the final node representation.

use std::sync::Arc;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerStates;
use crate::error::{Error, Result};
use crate::tensor::{mmd_radicand, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    /// References per tapped layer.
    pub refs: usize,
    /// Virtual nodes per reference.
    pub virtual_nodes: usize,
    pub gamma_init: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            refs: 16,
            virtual_nodes: 8,
            gamma_init: 1.0,
        }
    }
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refs == 0 || self.virtual_nodes == 0 {
            return Err(Error::Parameter("reference counts must be positive".into()));
        }
        if !(self.gamma_init > 0.0) || !self.gamma_init.is_finite() {
            return Err(Error::Parameter("gamma_init must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter layout of the reference banks inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub config: ReferenceConfig,
    pub widths: Vec<usize>,
    /// Per layer, a `(refs · virtual_nodes) × width` matrix; reference `b`
    /// occupies rows `b·m .. (b+1)·m`.
    pub banks: Vec<usize>,
    /// 1×1 holding `ln γ`, so that γ stays positive.
    pub log_gamma: usize,
}

impl ReferenceSet {
    pub fn init(
        config: ReferenceConfig,
        widths: &[usize],
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Parameter("reference layer needs positive tap widths".into()));
        }
        let rows = config.refs * config.virtual_nodes;
        let banks = widths
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                let scale = 1.0 / (d as f64).sqrt();
                let v = Array2::from_shape_simple_fn((rows, d), || rng.sample::<f64, _>(StandardNormal) * scale);
                store.push(format!("ref.{l}"), v)
            })
            .collect();
        let log_gamma = store.push("ref.log_gamma", Array2::from_elem((1, 1), config.gamma_init.ln()));
        Ok(ReferenceSet {
            config,
            widths: widths.to_vec(),
            banks,
            log_gamma,
        })
    }

    pub fn gamma(&self, store: &ParamStore) -> f64 {
        store.get(self.log_gamma)[[0, 0]].exp()
    }

    pub fn num_layers(&self) -> usize {
        self.banks.len()
    }

    pub fn similarity_len(&self) -> usize {
        self.banks.len() * self.config.refs
    }

    /// `graphs × (L·R)` negated MMDs, layer-major.
    pub fn similarity_vars(
        &self,
        tape: &mut Tape,
        p: &[Var],
        taps: &[Var],
        offsets: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        if taps.len() != self.banks.len() {
            return Err(Error::Parameter(format!(
                "{} tapped states for {} reference layers",
                taps.len(),
                self.banks.len()
            )));
        }
        for (l, (&t, &w)) in taps.iter().zip(&self.widths).enumerate() {
            if tape.value(t).ncols() != w {
                return Err(Error::Parameter(format!(
                    "layer {l} state width {} does not match reference width {w}",
                    tape.value(t).ncols()
                )));
            }
        }
        let gamma = tape.exp(p[self.log_gamma])?;
        let blocks = taps
            .iter()
            .zip(&self.banks)
            .map(|(&t, &bank)| {
                let d = tape.segment_mmd(t, p[bank], gamma, offsets.clone(), self.config.virtual_nodes)?;
                tape.scale(d, -1.0)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&blocks)
    }

    /// `s` for one graph's states.
    pub fn reference_similarities(&self, store: &ParamStore, states: &LayerStates) -> Result<Array1<f64>> {
        let n = states.final_h.nrows();
        if states.states.iter().any(|s| s.nrows() != n) || n == 0 {
            return Err(Error::Parameter("layer states disagree on node count".into()));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let taps: Vec<Var> = states.states.iter().map(|s| tape.constant(s.clone())).collect();
        let s = self.similarity_vars(&mut tape, &p, &taps, &Arc::new(vec![0, n]))?;
        Ok(tape.value(s).row(0).to_owned())
    }

    pub fn graph_vector(&self, store: &ParamStore, states: &LayerStates) -> Result<GraphVector> {
        let s = self.reference_similarities(store, states)?;
        let p = states.final_h.mean_axis(Axis(0)).unwrap();
        Ok(GraphVector { s, p })
    }
}

/// Gaussian-kernel MMD between the rows of `h` and `v`.
pub fn mmd(h: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, gamma: f64) -> Result<f64> {
    if h.nrows() == 0 || v.nrows() == 0 || h.ncols() != v.ncols() {
        return Err(Error::Contract(format!(
            "mmd needs non-empty sets of equal width, got {:?} and {:?}",
            h.dim(),
            v.dim()
        )));
    }
    let r = mmd_radicand(h, v, gamma, &[0, h.nrows()], v.nrows());
    Ok(r[[0, 0]].max(0.0).sqrt())
}

/// Final representation of a graph: similarities `s` and readout `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphVector {
    pub s: Array1<f64>,
    pub p: Array1<f64>,
}

impl GraphVector {
    /// `s ∥ p`.
    pub fn to_vec(&self) -> Array1<f64> {
        concatenate![Axis(0), self.s, self.p]
    }
}
