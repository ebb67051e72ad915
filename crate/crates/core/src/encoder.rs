//! GIN + graph-transformer backbone.
//!
//! One GIN stack per kernel scale reads that scale's node embedding. The
//! final GIN outputs are concatenated, projected to the transformer width and
//! passed through the transformer blocks. Six states are exposed for the
//! reference layer: each GIN depth (concatenated across scales) and each
//! transformer block output.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernel::MultiScaleEmbedding;
use crate::tensor::{ParamStore, Sparse, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Number of kernel scales, one GIN stack each.
    pub scales: usize,
    pub embed_dim: usize,
    pub gin_layers: usize,
    pub gin_hidden: usize,
    pub model_width: usize,
    pub heads: usize,
    pub gt_blocks: usize,
    pub epsilon: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            scales: 6,
            embed_dim: 32,
            gin_layers: 3,
            gin_hidden: 128,
            model_width: 192,
            heads: 4,
            gt_blocks: 3,
            epsilon: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.scales,
            self.embed_dim,
            self.gin_layers,
            self.gin_hidden,
            self.model_width,
            self.heads,
            self.gt_blocks,
        ];
        if sizes.contains(&0) {
            return Err(Error::Parameter("encoder sizes must be positive".into()));
        }
        if self.model_width % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "model width {} is not divisible by {} heads",
                self.model_width, self.heads
            )));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::Parameter("epsilon must be finite".into()));
        }
        Ok(())
    }

    /// Width of the final node representation.
    pub fn final_width(&self) -> usize {
        self.model_width + self.scales * self.gin_hidden
    }

    /// Widths of the states tapped by the reference layer, in tap order.
    pub fn tap_widths(&self) -> Vec<usize> {
        let mut w = vec![self.scales * self.gin_hidden; self.gin_layers];
        w.extend(std::iter::repeat_n(self.model_width, self.gt_blocks));
        w
    }
}

/// Store indices of a weight matrix and its 1×out bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GinLayer {
    pub lin1: Linear,
    pub lin2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

/// Heads use consecutive column blocks of `wq`, `wk`, `wv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBlock {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm1: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: Norm,
}

/// Parameter layout of the encoder inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub gin: Vec<Vec<GinLayer>>,
    pub projector: Linear,
    pub gt: Vec<GtBlock>,
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || u.sample(rng))
}

fn linear_param(store: &mut ParamStore, rng: &mut impl Rng, name: &str, i: usize, o: usize) -> Linear {
    Linear {
        weight: store.push(format!("{name}.w"), xavier(rng, i, o)),
        bias: store.push(format!("{name}.b"), Array2::zeros((1, o))),
    }
}

fn norm_param(store: &mut ParamStore, name: &str, w: usize) -> Norm {
    Norm {
        gain: store.push(format!("{name}.gain"), Array2::ones((1, w))),
        bias: store.push(format!("{name}.bias"), Array2::zeros((1, w))),
    }
}

impl Encoder {
    /// Registers freshly initialized parameters in `store`.
    pub fn init(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let gin = (0..c.scales)
            .map(|q| {
                (0..c.gin_layers)
                    .map(|l| {
                        let input = if l == 0 { c.embed_dim } else { c.gin_hidden };
                        GinLayer {
                            lin1: linear_param(store, rng, &format!("gin.{q}.{l}.lin1"), input, c.gin_hidden),
                            lin2: linear_param(store, rng, &format!("gin.{q}.{l}.lin2"), c.gin_hidden, c.gin_hidden),
                        }
                    })
                    .collect()
            })
            .collect();
        let projector = linear_param(store, rng, "projector", c.scales * c.gin_hidden, c.model_width);
        let d = c.model_width;
        let gt = (0..c.gt_blocks)
            .map(|b| {
                let name = |s: &str| format!("gt.{b}.{s}");
                GtBlock {
                    wq: store.push(name("wq"), xavier(rng, d, d)),
                    wk: store.push(name("wk"), xavier(rng, d, d)),
                    wv: store.push(name("wv"), xavier(rng, d, d)),
                    wo: store.push(name("wo"), xavier(rng, d, d)),
                    norm1: norm_param(store, &name("norm1"), d),
                    ffn1: linear_param(store, rng, &name("ffn1"), d, d),
                    ffn2: linear_param(store, rng, &name("ffn2"), d, d),
                    norm2: norm_param(store, &name("norm2"), d),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            gin,
            projector,
            gt,
        })
    }

    /// GIN stack `scale` on stacked rows; returns every layer's output.
    pub fn gin_vars(
        &self,
        tape: &mut Tape,
        p: &[Var],
        aggregation: &Arc<Sparse>,
        z: Var,
        scale: usize,
    ) -> Result<Vec<Var>> {
        let mut h = z;
        let mut states = Vec::with_capacity(self.config.gin_layers);
        for layer in &self.gin[scale] {
            let a = tape.spmm(aggregation.clone(), h)?;
            let x = linear(tape, p, a, layer.lin1)?;
            let x = tape.relu(x)?;
            h = linear(tape, p, x, layer.lin2)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Transformer blocks with attention confined to each row segment.
    pub fn gt_vars(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h0: Var,
        offsets: &Arc<Vec<usize>>,
    ) -> Result<Vec<Var>> {
        let mut x = h0;
        let mut states = Vec::with_capacity(self.gt.len());
        for b in &self.gt {
            let q = tape.matmul(x, p[b.wq])?;
            let k = tape.matmul(x, p[b.wk])?;
            let v = tape.matmul(x, p[b.wv])?;
            let a = tape.attention(q, k, v, offsets.clone(), self.config.heads)?;
            let a = tape.matmul(a, p[b.wo])?;
            let r = tape.add(x, a)?;
            let hat = norm(tape, p, r, b.norm1)?;
            let f = linear(tape, p, hat, b.ffn1)?;
            let f = tape.relu(f)?;
            let f = linear(tape, p, f, b.ffn2)?;
            let r = tape.add(hat, f)?;
            x = norm(tape, p, r, b.norm2)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Full forward pass over a batch.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], batch: &GraphBatch) -> Result<EncodedVars> {
        let c = &self.config;
        if batch.inputs.len() != c.scales {
            return Err(Error::Parameter(format!(
                "encoder expects {} scales, batch has {}",
                c.scales,
                batch.inputs.len()
            )));
        }
        let mut per_scale = Vec::with_capacity(c.scales);
        for (q, z) in batch.inputs.iter().enumerate() {
            if z.ncols() != c.embed_dim {
                return Err(Error::shape(
                    format!("gin.{q} input"),
                    format!("width {} but encoder expects {}", z.ncols(), c.embed_dim),
                ));
            }
            let zv = tape.constant(z.clone());
            per_scale.push(self.gin_vars(tape, p, &batch.aggregation, zv, q)?);
        }
        let mut taps = Vec::with_capacity(c.gin_layers + c.gt_blocks);
        for l in 0..c.gin_layers {
            let depth: Vec<Var> = per_scale.iter().map(|s| s[l]).collect();
            taps.push(tape.concat_cols(&depth)?);
        }
        let gin_out = *taps.last().unwrap();
        let h0 = linear(tape, p, gin_out, self.projector)?;
        let gt = self.gt_vars(tape, p, h0, &batch.offsets)?;
        let final_h = tape.concat_cols(&[*gt.last().unwrap(), gin_out])?;
        taps.extend(gt);
        Ok(EncodedVars { taps, final_h })
    }

    /// Array-level forward; one [`LayerStates`] per graph in the batch.
    pub fn encode_batch(&self, store: &ParamStore, batch: &GraphBatch) -> Result<Vec<LayerStates>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let enc = self.forward(&mut tape, &p, batch)?;
        Ok(batch
            .offsets
            .windows(2)
            .map(|w| {
                let rows = |v: Var| tape.value(v).slice(ndarray::s![w[0]..w[1], ..]).to_owned();
                LayerStates {
                    states: enc.taps.iter().map(|&v| rows(v)).collect(),
                    final_h: rows(enc.final_h),
                }
            })
            .collect())
    }

    pub fn encode_graph(&self, store: &ParamStore, g: &Graph, zs: &[Array2<f64>]) -> Result<LayerStates> {
        let batch = GraphBatch::new(&[g], &[zs.to_vec()], self.config.epsilon)?;
        Ok(self.encode_batch(store, &batch)?.pop().unwrap())
    }

    /// Per-layer outputs of one GIN stack on a single graph.
    pub fn gin_forward(&self, store: &ParamStore, g: &Graph, scale: usize, z: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        if scale >= self.config.scales {
            return Err(Error::Parameter(format!("no GIN stack for scale {scale}")));
        }
        if z.nrows() != g.num_nodes() || z.ncols() != self.config.embed_dim {
            return Err(Error::shape(
                format!("gin.{scale} input"),
                format!("{}×{} for {} nodes", z.nrows(), z.ncols(), g.num_nodes()),
            ));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let agg = Arc::new(aggregation(&[g], self.config.epsilon));
        let zv = tape.constant(z.to_owned());
        let states = self.gin_vars(&mut tape, &p, &agg, zv, scale)?;
        Ok(states.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Transformer block outputs for a single graph's `n × model_width` input.
    pub fn gt_forward(&self, store: &ParamStore, h0: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        if h0.ncols() != self.config.model_width || h0.nrows() == 0 {
            return Err(Error::shape(
                "gt input",
                format!("{}×{} but width {} expected", h0.nrows(), h0.ncols(), self.config.model_width),
            ));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(h0.to_owned());
        let offsets = Arc::new(vec![0, h0.nrows()]);
        let states = self.gt_vars(&mut tape, &p, x, &offsets)?;
        Ok(states.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

fn linear(tape: &mut Tape, p: &[Var], x: Var, l: Linear) -> Result<Var> {
    let y = tape.matmul(x, p[l.weight])?;
    tape.add_row(y, p[l.bias])
}

fn norm(tape: &mut Tape, p: &[Var], x: Var, n: Norm) -> Result<Var> {
    let y = tape.layer_norm_rows(x)?;
    let y = tape.mul_row(y, p[n.gain])?;
    tape.add_row(y, p[n.bias])
}

/// Tape handles for the tapped states and the final representation.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub taps: Vec<Var>,
    pub final_h: Var,
}

/// Node states of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub states: Vec<Array2<f64>>,
    pub final_h: Array2<f64>,
}

/// Block-diagonal `A + (1 + ε) I` over stacked graphs.
pub fn aggregation(graphs: &[&Graph], epsilon: f64) -> Sparse {
    let n: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let mut triplets = Vec::new();
    let mut offset = 0;
    for g in graphs {
        for i in 0..g.num_nodes() {
            triplets.push((offset + i, offset + i, 1.0 + epsilon));
        }
        for &(u, v) in g.edges() {
            triplets.push((offset + u, offset + v, 1.0));
            triplets.push((offset + v, offset + u, 1.0));
        }
        offset += g.num_nodes();
    }
    Sparse::from_triplets(n, n, triplets)
}

/// Several graphs stacked row-wise for one forward pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub offsets: Arc<Vec<usize>>,
    pub aggregation: Arc<Sparse>,
    /// Per scale, the stacked node embeddings.
    pub inputs: Vec<Array2<f64>>,
}

impl GraphBatch {
    /// `inputs[i][q]` is graph `i`'s embedding at scale `q`.
    pub fn new(graphs: &[&Graph], inputs: &[Vec<Array2<f64>>], epsilon: f64) -> Result<Self> {
        if graphs.is_empty() || graphs.len() != inputs.len() {
            return Err(Error::Parameter(format!(
                "{} graphs with {} input sets",
                graphs.len(),
                inputs.len()
            )));
        }
        let scales = inputs[0].len();
        if scales == 0 || inputs.iter().any(|x| x.len() != scales) {
            return Err(Error::Parameter("graphs disagree on scale count".into()));
        }
        let mut offsets = vec![0];
        for (g, x) in graphs.iter().zip(inputs) {
            if x.iter().any(|z| z.nrows() != g.num_nodes()) {
                return Err(Error::shape(
                    "batch input",
                    format!("embedding rows do not match {} nodes", g.num_nodes()),
                ));
            }
            offsets.push(offsets.last().unwrap() + g.num_nodes());
        }
        let stacked = (0..scales)
            .map(|q| {
                let views: Vec<_> = inputs.iter().map(|x| x[q].view()).collect();
                ndarray::concatenate(ndarray::Axis(0), &views)
                    .map_err(|e| Error::shape("batch input", e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphBatch {
            offsets: Arc::new(offsets),
            aggregation: Arc::new(aggregation(graphs, epsilon)),
            inputs: stacked,
        })
    }

    /// Graphs `indices` of a dataset with their rows from `emb`.
    pub fn from_embedding(
        graphs: &[Graph],
        emb: &MultiScaleEmbedding,
        indices: &[usize],
        epsilon: f64,
    ) -> Result<Self> {
        let gs: Vec<&Graph> = indices.iter().map(|&i| &graphs[i]).collect();
        let inputs: Vec<_> = indices.iter().map(|&i| emb.graph_inputs(i)).collect();
        Self::new(&gs, &inputs, epsilon)
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}
