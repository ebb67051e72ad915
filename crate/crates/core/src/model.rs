//! Encoder and reference layer sharing one parameter store.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, GraphBatch};
use crate::error::Result;
use crate::reference::{ReferenceConfig, ReferenceSet};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub reference: ReferenceConfig,
    /// Seeds parameter initialization.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub reference: ReferenceSet,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::init(config.encoder.clone(), &mut params, &mut rng)?;
        let reference = ReferenceSet::init(
            config.reference.clone(),
            &config.encoder.tap_widths(),
            &mut params,
            &mut rng,
        )?;
        Ok(Model {
            config,
            encoder,
            reference,
            params,
        })
    }

    /// Length of a graph vector, `L·R + final width`.
    pub fn vector_width(&self) -> usize {
        self.reference.similarity_len() + self.config.encoder.final_width()
    }

    /// One graph vector per row, `s ∥ p`.
    pub fn graph_vector_vars(&self, tape: &mut Tape, p: &[Var], batch: &GraphBatch) -> Result<Var> {
        let enc = self.encoder.forward(tape, p, batch)?;
        let s = self.reference.similarity_vars(tape, p, &enc.taps, &batch.offsets)?;
        let readout = tape.segment_mean(enc.final_h, batch.offsets.clone())?;
        tape.concat_cols(&[s, readout])
    }

    pub fn graph_vectors(&self, batch: &GraphBatch) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let g = self.graph_vector_vars(&mut tape, &p, batch)?;
        Ok(tape.value(g).clone())
    }
}
