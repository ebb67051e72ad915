//! Contrastive pre-training over several aligned source datasets.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{align_dataset_scales, AlignmentConfig, AlignmentState};
use crate::container::Container;
use crate::encoder::GraphBatch;
use crate::error::{Error, Result};
use crate::graph::{augment, AugmentKind, Augmentation, Graph, GraphDataset};
use crate::kernel::{multi_scale_embed, MultiScaleEmbedding, ScaleConfig};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tape, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Views generated per graph in unsupervised mode, with their ratios.
pub const AUGMENTATIONS: [(AugmentKind, f64); 3] = [
    (AugmentKind::NodeDrop, 0.1),
    (AugmentKind::EdgePerturb, 0.1),
    (AugmentKind::Subgraph, 0.2),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate of the reference kernel width.
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Graph vectors per step. In unsupervised mode this counts views.
    pub batch_size: usize,
    pub temperature: f64,
    pub mode: TrainMode,
    /// Seeds batch order and augmentations.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            lr_gamma: 0.1,
            weight_decay: 1e-5,
            epochs: 50,
            batch_size: 64,
            temperature: 0.5,
            mode: TrainMode::Supervised,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.lr) || !positive(self.lr_gamma) {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Parameter("weight decay must be non-negative".into()));
        }
        if !positive(self.temperature) {
            return Err(Error::Parameter("temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Parameter("batch size must be at least 2".into()));
        }
        if self.mode == TrainMode::Unsupervised && self.batch_size < AUGMENTATIONS.len() + 1 {
            return Err(Error::Parameter(format!(
                "unsupervised batches need room for {} views of a graph",
                AUGMENTATIONS.len() + 1
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses

fn check_positives(n: usize, positives: &[Vec<usize>]) -> Result<()> {
    if n < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 vectors, got {n}")));
    }
    if positives.len() != n {
        return Err(Error::Contract(format!("{} positive sets for {n} vectors", positives.len())));
    }
    for (i, p) in positives.iter().enumerate() {
        if p.iter().any(|&u| u >= n || u == i) {
            return Err(Error::Contract(format!("anchor {i} has an invalid positive index")));
        }
    }
    Ok(())
}

/// Cosine-similarity InfoNCE averaged over anchors that have positives.
/// The anchor itself is excluded from the denominator.
pub fn contrastive_loss_var(
    tape: &mut Tape,
    g: Var,
    positives: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    let n = tape.value(g).nrows();
    check_positives(n, positives)?;
    if !(temperature > 0.0) {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    if anchors == 0 {
        log::warn!("no anchor in the batch has a positive; loss is 0");
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    let gn = tape.normalize_rows(g)?;
    let gt = tape.transpose(gn)?;
    let sim = tape.matmul(gn, gt)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;
    let mask = Array2::from_shape_fn((n, n), |(i, j)| i != j);
    let logp = tape.masked_log_softmax(sim, Arc::new(mask))?;
    let mut w = Array2::zeros((n, n));
    for (i, p) in positives.iter().enumerate() {
        for &u in p {
            w[[i, u]] -= 1.0 / (p.len() * anchors) as f64;
        }
    }
    let w = tape.constant(w);
    let terms = tape.mul(logp, w)?;
    tape.sum(terms)
}

/// Positives sharing a class label.
pub fn label_positives(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| (0..labels.len()).filter(|&u| u != i && labels[u] == labels[i]).collect())
        .collect()
}

/// Positives sharing a group id; every vector must have at least one.
pub fn group_positives(groups: &[usize]) -> Result<Vec<Vec<usize>>> {
    let p = label_positives(groups);
    if let Some(i) = p.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("anchor {i} has no augmented view in the batch")));
    }
    Ok(p)
}

pub fn scl_loss_var(tape: &mut Tape, g: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    if labels.len() != tape.value(g).nrows() {
        return Err(Error::Contract(format!(
            "{} labels for {} vectors",
            labels.len(),
            tape.value(g).nrows()
        )));
    }
    if labels.len() < 2 {
        return Err(Error::Contract("contrastive loss needs at least 2 vectors".into()));
    }
    contrastive_loss_var(tape, g, &label_positives(labels), temperature)
}

pub fn ucl_loss_var(tape: &mut Tape, g: Var, groups: &[usize], temperature: f64) -> Result<Var> {
    if groups.len() != tape.value(g).nrows() {
        return Err(Error::Contract(format!(
            "{} group ids for {} vectors",
            groups.len(),
            tape.value(g).nrows()
        )));
    }
    if groups.len() < 2 {
        return Err(Error::Contract("contrastive loss needs at least 2 vectors".into()));
    }
    contrastive_loss_var(tape, g, &group_positives(groups)?, temperature)
}

/// Supervised contrastive loss of fixed vectors.
pub fn scl_loss(vectors: &Array2<f64>, labels: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let g = tape.constant(vectors.clone());
    let l = scl_loss_var(&mut tape, g, labels, temperature)?;
    Ok(tape.scalar(l))
}

/// Unsupervised contrastive loss; `groups[i]` names the source graph of view `i`.
pub fn ucl_loss(vectors: &Array2<f64>, groups: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let g = tape.constant(vectors.clone());
    let l = ucl_loss_var(&mut tape, g, groups, temperature)?;
    Ok(tape.scalar(l))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<_> = (0..params.len()).map(|i| Array2::zeros(params.get(i).dim())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam step with decoupled weight decay; `lrs[i]` is the rate of
/// parameter `i`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Array2<f64>],
    state: &mut AdamState,
    lrs: &[f64],
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || lrs.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Contract("optimizer inputs disagree on parameter count".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..n {
        let g = &grads[i];
        if g.dim() != params.get(i).dim() {
            return Err(Error::shape(params.name(i).to_string(), "gradient shape differs"));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        let lr = lrs[i];
        let p = params.get_mut(i);
        p.mapv_inplace(|x| x * (1.0 - lr * weight_decay));
        ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pre-training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub dataset: String,
    pub mean_loss: f64,
}

/// Everything needed to embed new data with a pre-trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub alignment: AlignmentState,
    pub scale: ScaleConfig,
    pub align: AlignmentConfig,
    pub train: TrainConfig,
    pub datasets: Vec<String>,
    pub optimizer: AdamState,
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Alignment objective trace per kernel scale.
    pub align_traces: Vec<Vec<f64>>,
}

/// A source dataset prepared for training: its graphs (with augmented views
/// interleaved in unsupervised mode), the rotated embedding and, per training
/// unit, the graph indices it covers.
struct Prepared {
    name: String,
    graphs: Vec<Graph>,
    targets: Vec<usize>,
    units: Vec<Vec<usize>>,
}

fn view_seed(seed: u64, dataset: usize, graph: usize, view: usize) -> u64 {
    let mut h = Sha256::new();
    for x in [seed, dataset as u64, graph as u64, view as u64] {
        h.update(x.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn prepare(ds: &GraphDataset, j: usize, cfg: &TrainConfig) -> Result<Prepared> {
    match cfg.mode {
        TrainMode::Supervised => {
            let labels = ds.labels().ok_or_else(|| {
                Error::Contract(format!("supervised pre-training needs labels on `{}`", ds.name))
            })?;
            Ok(Prepared {
                name: ds.name.clone(),
                graphs: ds.graphs().to_vec(),
                targets: labels,
                units: (0..ds.len()).map(|i| vec![i]).collect(),
            })
        }
        TrainMode::Unsupervised => {
            let views = AUGMENTATIONS.len() + 1;
            let mut graphs = Vec::with_capacity(ds.len() * views);
            for (i, g) in ds.graphs().iter().enumerate() {
                graphs.push(g.clone());
                for (k, &(kind, ratio)) in AUGMENTATIONS.iter().enumerate() {
                    let a = Augmentation::new(kind, ratio, view_seed(cfg.seed, j, i, k))?;
                    match augment(g, &a) {
                        Ok(v) => graphs.push(v),
                        Err(Error::Degenerate(why)) => {
                            log::debug!("graph {i} of `{}` kept unaugmented: {why}", ds.name);
                            graphs.push(g.clone());
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(Prepared {
                name: ds.name.clone(),
                graphs,
                targets: (0..ds.len()).flat_map(|i| std::iter::repeat_n(i, views)).collect(),
                units: (0..ds.len()).map(|i| (i * views..(i + 1) * views).collect()).collect(),
            })
        }
    }
}

fn check_compat(scale: &ScaleConfig, model: &ModelConfig) -> Result<()> {
    if model.encoder.scales != scale.lambdas.len() || model.encoder.embed_dim != scale.embed_dim {
        return Err(Error::Parameter(format!(
            "encoder expects {} scales of width {}, kernel config gives {} of width {}",
            model.encoder.scales,
            model.encoder.embed_dim,
            scale.lambdas.len(),
            scale.embed_dim
        )));
    }
    Ok(())
}

/// Per-parameter learning rates: the kernel width gets its own.
fn learning_rates(model: &Model, cfg: &TrainConfig) -> Vec<f64> {
    (0..model.params.len())
        .map(|i| if i == model.reference.log_gamma { cfg.lr_gamma } else { cfg.lr })
        .collect()
}

/// One optimizer step on the given graphs; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamState,
    batch: &GraphBatch,
    targets: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let g = model.graph_vector_vars(&mut tape, &p, batch)?;
    let loss = match cfg.mode {
        TrainMode::Supervised => scl_loss_var(&mut tape, g, targets, cfg.temperature)?,
        TrainMode::Unsupervised => ucl_loss_var(&mut tape, g, targets, cfg.temperature)?,
    };
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let grads: Vec<_> = p
        .iter()
        .enumerate()
        .map(|(i, &v)| grads.take_or_zeros(v, model.params.get(i).dim()))
        .collect();
    let lrs = learning_rates(model, cfg);
    adam_step(&mut model.params, &grads, optimizer, &lrs, cfg.weight_decay)?;
    Ok(value)
}

/// Embeds and aligns the source datasets, then trains the encoder and
/// reference layer with the contrastive objective. Each epoch walks the
/// datasets in order and each dataset in shuffled batches; a trailing batch
/// holding a single graph is skipped.
pub fn pretrain(
    datasets: &[GraphDataset],
    scale: &ScaleConfig,
    align: &AlignmentConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<PretrainOutput> {
    scale.validate()?;
    align.validate()?;
    cfg.validate()?;
    model_cfg.encoder.validate()?;
    model_cfg.reference.validate()?;
    check_compat(scale, model_cfg)?;
    if datasets.is_empty() {
        return Err(Error::Parameter("no pre-training datasets".into()));
    }

    let prepared = datasets
        .iter()
        .enumerate()
        .map(|(j, ds)| prepare(ds, j, cfg))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = prepared
        .iter()
        .map(|p| multi_scale_embed(&GraphDataset::new(p.name.clone(), p.graphs.clone())?, scale))
        .collect::<Result<Vec<MultiScaleEmbedding>>>()?;
    let aligned = align_dataset_scales(&embeddings, align)?;

    let mut model = Model::new(model_cfg.clone())?;
    let mut optimizer = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit_len = match cfg.mode {
        TrainMode::Supervised => 1,
        TrainMode::Unsupervised => AUGMENTATIONS.len() + 1,
    };
    let units_per_batch = (cfg.batch_size / unit_len).max(1);
    let eps = model_cfg.encoder.epsilon;
    let mut log = Vec::new();

    for epoch in 1..=cfg.epochs {
        for (data, emb) in prepared.iter().zip(&aligned.rotated) {
            let mut order: Vec<usize> = (0..data.units.len()).collect();
            order.shuffle(&mut rng);
            let (mut total, mut steps) = (0.0, 0usize);
            for chunk in order.chunks(units_per_batch) {
                let idx: Vec<usize> = chunk.iter().flat_map(|&u| data.units[u].iter().copied()).collect();
                if idx.len() < 2 {
                    continue;
                }
                let batch = GraphBatch::from_embedding(&data.graphs, emb, &idx, eps)?;
                let targets: Vec<usize> = idx.iter().map(|&i| data.targets[i]).collect();
                total += train_step(&mut model, &mut optimizer, &batch, &targets, cfg)?;
                steps += 1;
            }
            let rec = LogRecord {
                epoch,
                dataset: data.name.clone(),
                mean_loss: if steps == 0 { 0.0 } else { total / steps as f64 },
            };
            log::info!("epoch {epoch} {}: loss {:.6}", rec.dataset, rec.mean_loss);
            on_record(&rec);
            log.push(rec);
        }
    }

    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            model,
            alignment: aligned.state,
            scale: scale.clone(),
            align: align.clone(),
            train: cfg.clone(),
            datasets: datasets.iter().map(|d| d.name.clone()).collect(),
            optimizer,
        },
        log,
        align_traces: aligned.traces,
    })
}

/// Writes records as JSON lines.
pub fn write_log(records: &[LogRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct Configs {
    model: ModelConfig,
    scale: ScaleConfig,
    align: AlignmentConfig,
    train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    configs: Configs,
    fingerprint: String,
    datasets: Vec<String>,
    params: Vec<String>,
    adam_step: u64,
    alignment_frozen: Vec<Vec<bool>>,
    embed_dim: usize,
}

impl Checkpoint {
    fn configs(&self) -> Configs {
        Configs {
            model: self.model.config.clone(),
            scale: self.scale.clone(),
            align: self.align.clone(),
            train: self.train.clone(),
        }
    }

    /// SHA-256 of the serialized configurations.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&self.configs())?)))
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            configs: self.configs(),
            fingerprint: self.fingerprint()?,
            datasets: self.datasets.clone(),
            params: self.model.params.names().to_vec(),
            adam_step: self.optimizer.step,
            alignment_frozen: self
                .alignment
                .scales
                .iter()
                .map(|s| s.iter().map(|a| a.frozen).collect())
                .collect(),
            embed_dim: self.alignment.embed_dim,
        };
        let mut c = Container::new("checkpoint", &meta)?;
        let p = &self.model.params;
        for i in 0..p.len() {
            c.push_matrix(format!("param.{}", p.name(i)), p.get(i));
        }
        for i in 0..p.len() {
            c.push_matrix(format!("adam.m.{}", p.name(i)), &self.optimizer.m[i]);
            c.push_matrix(format!("adam.v.{}", p.name(i)), &self.optimizer.v[i]);
        }
        self.alignment.write_blocks(&mut c, "align.");
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let meta: CheckpointMeta = c.meta()?;
        let Configs {
            model: model_cfg,
            scale,
            align,
            train,
        } = meta.configs;
        let mut model = Model::new(model_cfg)?;
        if model.params.names() != meta.params.as_slice() {
            return Err(Error::Format("checkpoint parameters do not match the model layout".into()));
        }
        let mut optimizer = AdamState::new(&model.params);
        optimizer.step = meta.adam_step;
        for (i, name) in meta.params.iter().enumerate() {
            let load = |key: String, want: (usize, usize)| -> Result<Array2<f64>> {
                let m = c.matrix(&key)?;
                if m.dim() != want {
                    return Err(Error::Format(format!("block `{key}` has shape {:?}, expected {want:?}", m.dim())));
                }
                Ok(m)
            };
            let dim = model.params.get(i).dim();
            model.params.set(i, load(format!("param.{name}"), dim)?)?;
            optimizer.m[i] = load(format!("adam.m.{name}"), dim)?;
            optimizer.v[i] = load(format!("adam.v.{name}"), dim)?;
        }
        let alignment = AlignmentState::read_blocks(c, "align.", meta.embed_dim, &meta.alignment_frozen)?;
        let ck = Checkpoint {
            model,
            alignment,
            scale,
            align,
            train,
            datasets: meta.datasets,
            optimizer,
        };
        if ck.fingerprint()? != meta.fingerprint {
            return Err(Error::Format("configuration fingerprint mismatch".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
