//! Graphs, datasets, TUDataset ingestion, synthetic generators and the
//! augmentations used for unsupervised pre-training.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

/// An undirected simple graph with optional node attributes and class label.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted; the dense
/// adjacency is derived on demand and is always symmetric with a zero
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    attributes: Option<Array2<f64>>,
    label: Option<usize>,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list. Both directions and
    /// duplicates collapse; self-loops are dropped.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        attributes: Option<Array2<f64>>,
        label: Option<usize>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Degenerate("a graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Malformed(format!(
                    "edge ({u}, {v}) outside node range 0..{num_nodes}"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        if let Some(x) = &attributes {
            if x.nrows() != num_nodes {
                return Err(Error::Malformed(format!(
                    "attribute rows {} != node count {num_nodes}",
                    x.nrows()
                )));
            }
        }
        Ok(Graph {
            num_nodes,
            edges: set.into_iter().collect(),
            attributes,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn attributes(&self) -> Option<&Array2<f64>> {
        self.attributes.as_ref()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_attributes(mut self, attributes: Option<Array2<f64>>) -> Result<Self> {
        if let Some(x) = &attributes {
            if x.nrows() != self.num_nodes {
                return Err(Error::Malformed("attribute rows must match node count".into()));
            }
        }
        self.attributes = attributes;
        Ok(self)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.num_nodes, self.num_nodes));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    /// The subgraph induced by `keep`, whose order defines the new node ids.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Graph> {
        let mut remap = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self.edges.iter().filter_map(|&(u, v)| {
            let (a, b) = (remap[u], remap[v]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b))
        });
        let attributes = self.attributes.as_ref().map(|x| x.select(Axis(0), keep));
        Graph::new(keep.len(), edges.collect::<Vec<_>>(), attributes, self.label)
    }

    /// Number of nodes reachable from `start` (including it).
    pub fn component_size(&self, start: usize) -> usize {
        let adj = self.neighbors();
        let mut seen = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 0;
        while let Some(u) = queue.pop_front() {
            count += 1;
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.component_size(0) == self.num_nodes
    }
}

/// An ordered collection of graphs from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    graphs: Vec<Graph>,
    has_attributes: bool,
    attribute_dim: usize,
}

impl GraphDataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self> {
        let name = name.into();
        if graphs.is_empty() {
            return Err(Error::Degenerate(format!("dataset `{name}` has no graphs")));
        }
        let has_attributes = graphs[0].attributes.is_some();
        let attribute_dim = graphs[0].attributes.as_ref().map_or(0, |x| x.ncols());
        for (i, g) in graphs.iter().enumerate() {
            let dim = g.attributes.as_ref().map(|x| x.ncols());
            if dim.is_some() != has_attributes || dim.unwrap_or(0) != attribute_dim {
                return Err(Error::Malformed(format!(
                    "graph {i} of `{name}` has inconsistent attribute dimensionality"
                )));
            }
        }
        Ok(GraphDataset {
            name,
            graphs,
            has_attributes,
            attribute_dim,
        })
    }

    /// Concatenates datasets, overriding every graph's label with the label
    /// paired with its part.
    pub fn from_labeled_parts(
        name: impl Into<String>,
        parts: impl IntoIterator<Item = (GraphDataset, usize)>,
    ) -> Result<Self> {
        let graphs = parts
            .into_iter()
            .flat_map(|(ds, label)| ds.graphs.into_iter().map(move |g| g.with_label(Some(label))))
            .collect();
        GraphDataset::new(name, graphs)
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn has_attributes(&self) -> bool {
        self.has_attributes
    }

    pub fn attribute_dim(&self) -> usize {
        self.attribute_dim
    }

    pub fn total_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::num_nodes).sum()
    }

    /// Labels of every graph, or `None` if any graph is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.graphs.iter().map(Graph::label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.graphs
            .iter()
            .filter_map(Graph::label)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// A new dataset holding the graphs at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        GraphDataset::new(name, indices.iter().map(|&i| self.graphs[i].clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// TUDataset ingestion

fn tu_path(dir: &Path, prefix: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{prefix}_{suffix}.txt"))
}

fn read_required(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    if path.exists() {
        read_required(path).map(Some)
    } else {
        Ok(None)
    }
}

fn fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
}

fn parse_num<T: std::str::FromStr>(tok: &str, file: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Malformed(format!("{file}:{line}: cannot parse `{tok}`")))
}

/// Maps arbitrary integer label values onto `0..k` in ascending value order.
fn dense_labels(raw: &[i64]) -> (Vec<usize>, usize) {
    let values: BTreeSet<i64> = raw.iter().copied().collect();
    let index: BTreeMap<i64, usize> = values.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (raw.iter().map(|v| index[v]).collect(), values.len())
}

/// Reads a dataset in the TUDataset plain-text layout.
///
/// Node attributes, when present, are the continuous attributes followed by
/// a one-hot encoding of the node labels (ordered by label value).
pub fn parse_tudataset(dir: impl AsRef<Path>, prefix: &str) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let a_path = tu_path(dir, prefix, "A");
    let ind_path = tu_path(dir, prefix, "graph_indicator");
    let lab_path = tu_path(dir, prefix, "graph_labels");
    let a_text = read_required(&a_path)?;
    let ind_text = read_required(&ind_path)?;
    let lab_text = read_required(&lab_path)?;
    let attr_text = read_optional(&tu_path(dir, prefix, "node_attributes"))?;
    let nlab_text = read_optional(&tu_path(dir, prefix, "node_labels"))?;

    let mut indicator = Vec::new();
    for (ln, line) in data_lines(&ind_text) {
        let tok = fields(line)
            .next()
            .ok_or_else(|| Error::Malformed(format!("graph_indicator:{ln}: empty")))?;
        indicator.push(parse_num::<usize>(tok, "graph_indicator", ln)?);
    }
    let total = indicator.len();
    if total == 0 {
        return Err(Error::Malformed("graph_indicator lists no nodes".into()));
    }
    let ids: BTreeSet<usize> = indicator.iter().copied().collect();
    let num_graphs = ids.len();
    if ids.first() != Some(&1) || ids.last() != Some(&num_graphs) {
        return Err(Error::Malformed(
            "graph ids must be contiguous and start at 1".into(),
        ));
    }

    // Local index of each node inside its graph.
    let mut counts = vec![0usize; num_graphs];
    let mut local = Vec::with_capacity(total);
    for &g in &indicator {
        local.push(counts[g - 1]);
        counts[g - 1] += 1;
    }

    let mut edge_lists = vec![Vec::new(); num_graphs];
    for (ln, line) in data_lines(&a_text) {
        let mut it = fields(line);
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            return Err(Error::Malformed(format!("A:{ln}: expected two node ids")));
        };
        let (u, v): (usize, usize) = (parse_num(a, "A", ln)?, parse_num(b, "A", ln)?);
        if u == 0 || v == 0 || u > total || v > total {
            return Err(Error::Malformed(format!(
                "A:{ln}: edge ({u}, {v}) outside node range 1..={total}"
            )));
        }
        let (gu, gv) = (indicator[u - 1], indicator[v - 1]);
        if gu != gv {
            return Err(Error::Malformed(format!(
                "A:{ln}: edge ({u}, {v}) crosses graphs {gu} and {gv}"
            )));
        }
        edge_lists[gu - 1].push((local[u - 1], local[v - 1]));
    }

    let mut raw_labels = Vec::new();
    for (ln, line) in data_lines(&lab_text) {
        let tok = fields(line)
            .next()
            .ok_or_else(|| Error::Malformed(format!("graph_labels:{ln}: empty")))?;
        raw_labels.push(parse_num::<i64>(tok, "graph_labels", ln)?);
    }
    if raw_labels.len() != num_graphs {
        return Err(Error::Malformed(format!(
            "graph_labels has {} entries for {num_graphs} graphs",
            raw_labels.len()
        )));
    }
    let (labels, _) = dense_labels(&raw_labels);

    let mut columns: Vec<Array2<f64>> = Vec::new();
    if let Some(text) = attr_text {
        let rows: Vec<Vec<f64>> = data_lines(&text)
            .map(|(ln, line)| {
                fields(line)
                    .map(|t| parse_num::<f64>(t, "node_attributes", ln))
                    .collect()
            })
            .collect::<Result<_>>()?;
        if rows.len() != total {
            return Err(Error::Malformed(format!(
                "node_attributes has {} rows for {total} nodes",
                rows.len()
            )));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Malformed("ragged node_attributes".into()));
        }
        columns.push(Array2::from_shape_fn((total, width), |(i, j)| rows[i][j]));
    }
    if let Some(text) = nlab_text {
        let raw: Vec<i64> = data_lines(&text)
            .map(|(ln, line)| {
                let tok = fields(line)
                    .next()
                    .ok_or_else(|| Error::Malformed(format!("node_labels:{ln}: empty")))?;
                parse_num::<i64>(tok, "node_labels", ln)
            })
            .collect::<Result<_>>()?;
        if raw.len() != total {
            return Err(Error::Malformed(format!(
                "node_labels has {} rows for {total} nodes",
                raw.len()
            )));
        }
        let (dense, k) = dense_labels(&raw);
        let mut onehot = Array2::zeros((total, k));
        for (i, &l) in dense.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        columns.push(onehot);
    }
    let node_features = match columns.len() {
        0 => None,
        _ => Some(ndarray::concatenate(
            Axis(1),
            &columns.iter().map(|c| c.view()).collect::<Vec<_>>(),
        )
        .expect("row counts checked above")),
    };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    for (node, &g) in indicator.iter().enumerate() {
        members[g - 1].push(node);
    }
    let graphs = members
        .iter()
        .zip(edge_lists)
        .zip(labels)
        .map(|((nodes, edges), label)| {
            let attrs = node_features.as_ref().map(|x| x.select(Axis(0), nodes));
            Graph::new(nodes.len(), edges, attrs, Some(label))
        })
        .collect::<Result<Vec<_>>>()?;
    GraphDataset::new(prefix, graphs)
}

/// Writes `ds` in the TUDataset layout. Attributes (including any one-hot
/// node-label block folded in at parse time) go to `node_attributes`.
pub fn write_tudataset(ds: &GraphDataset, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
    use std::fmt::Write as _;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Contract("TUDataset output requires graph labels".into()))?;
    let (mut a, mut ind, mut lab, mut attr) = (String::new(), String::new(), String::new(), String::new());
    let mut offset = 0;
    for (gi, g) in ds.graphs().iter().enumerate() {
        for _ in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1).unwrap();
        }
        for &(u, v) in g.edges() {
            writeln!(a, "{}, {}", offset + u + 1, offset + v + 1).unwrap();
            writeln!(a, "{}, {}", offset + v + 1, offset + u + 1).unwrap();
        }
        if let Some(x) = g.attributes() {
            for row in x.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(attr, "{}", cells.join(", ")).unwrap();
            }
        }
        writeln!(lab, "{}", labels[gi]).unwrap();
        offset += g.num_nodes();
    }
    fs::write(tu_path(dir, prefix, "A"), a)?;
    fs::write(tu_path(dir, prefix, "graph_indicator"), ind)?;
    fs::write(tu_path(dir, prefix, "graph_labels"), lab)?;
    if ds.has_attributes() {
        fs::write(tu_path(dir, prefix, "node_attributes"), attr)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Internal dump format

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    num_graphs: usize,
    total_nodes: usize,
    has_attributes: bool,
    attribute_dim: usize,
    node_counts: Vec<usize>,
    edge_counts: Vec<usize>,
    labels: Vec<Option<usize>>,
}

impl GraphDataset {
    /// Packs the dataset into a container: JSON meta, an `attributes` f64
    /// block (total_nodes × attribute_dim) and an `edges` i32 block of
    /// graph-local endpoints.
    pub fn to_container(&self) -> Result<Container> {
        let meta = DatasetMeta {
            name: self.name.clone(),
            num_graphs: self.len(),
            total_nodes: self.total_nodes(),
            has_attributes: self.has_attributes,
            attribute_dim: self.attribute_dim,
            node_counts: self.graphs.iter().map(Graph::num_nodes).collect(),
            edge_counts: self.graphs.iter().map(Graph::num_edges).collect(),
            labels: self.graphs.iter().map(Graph::label).collect(),
        };
        let mut c = Container::new("dataset", &meta)?;
        let mut attrs = Array2::zeros((self.total_nodes(), self.attribute_dim));
        let mut row = 0;
        let mut edges = Vec::new();
        for g in &self.graphs {
            if let Some(x) = g.attributes() {
                attrs
                    .slice_mut(ndarray::s![row..row + g.num_nodes(), ..])
                    .assign(x);
            }
            row += g.num_nodes();
            for &(u, v) in g.edges() {
                edges.push(u as i32);
                edges.push(v as i32);
            }
        }
        c.push_matrix("attributes", &attrs);
        c.push_i32("edges", edges.len() / 2, 2, edges);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        let meta: DatasetMeta = c.meta()?;
        let attrs = c.matrix("attributes")?;
        let (_, _, edges) = c.i32s("edges")?;
        let mut graphs = Vec::with_capacity(meta.num_graphs);
        let (mut row, mut e) = (0, 0);
        for gi in 0..meta.num_graphs {
            let n = meta.node_counts[gi];
            let m = meta.edge_counts[gi];
            let list: Vec<(usize, usize)> = (e..e + m)
                .map(|k| (edges[2 * k] as usize, edges[2 * k + 1] as usize))
                .collect();
            let x = meta
                .has_attributes
                .then(|| attrs.slice(ndarray::s![row..row + n, ..]).to_owned());
            graphs.push(Graph::new(n, list, x, meta.labels[gi])?);
            row += n;
            e += m;
        }
        GraphDataset::new(meta.name, graphs)
    }
}

// ---------------------------------------------------------------------------
// Synthetic generators

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SyntheticKind {
    Cycle,
    Star,
    /// Erdős–Rényi G(n, p).
    Er { p: f64 },
    /// Barabási–Albert preferential attachment with `m` edges per new node.
    Ba { m: usize },
}

impl SyntheticKind {
    /// Default class id, one per generator family.
    pub fn label_id(&self) -> usize {
        match self {
            SyntheticKind::Cycle => 0,
            SyntheticKind::Star => 1,
            SyntheticKind::Er { .. } => 2,
            SyntheticKind::Ba { .. } => 3,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SyntheticKind::Cycle => "cycle",
            SyntheticKind::Star => "star",
            SyntheticKind::Er { .. } => "er",
            SyntheticKind::Ba { .. } => "ba",
        }
    }
}

fn generate_one(kind: SyntheticKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match kind {
        SyntheticKind::Cycle => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        SyntheticKind::Star => (1..n).map(|i| (0, i)).collect(),
        SyntheticKind::Er { p } => {
            let mut e = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < p {
                        e.push((u, v));
                    }
                }
            }
            e
        }
        SyntheticKind::Ba { m } => {
            let m = m.clamp(1, n - 1);
            let mut e = Vec::new();
            // Seed clique on m + 1 nodes, then attach proportionally to degree.
            let mut targets: Vec<usize> = Vec::new();
            for u in 0..=m {
                for v in u + 1..=m {
                    e.push((u, v));
                    targets.push(u);
                    targets.push(v);
                }
            }
            if m == 0 {
                targets.push(0);
            }
            for new in m + 1..n {
                let mut chosen = BTreeSet::new();
                while chosen.len() < m {
                    chosen.insert(targets[rng.random_range(0..targets.len())]);
                }
                for t in chosen {
                    e.push((t, new));
                    targets.push(t);
                    targets.push(new);
                }
            }
            e
        }
    }
}

/// Generates `count` featureless graphs of one family with node counts drawn
/// uniformly from `node_range` (inclusive). Every graph carries
/// `kind.label_id()` as its label.
pub fn generate_synthetic(
    kind: SyntheticKind,
    count: usize,
    node_range: (usize, usize),
    seed: u64,
) -> Result<GraphDataset> {
    let (lo, hi) = node_range;
    if count == 0 {
        return Err(Error::Parameter("count must be at least 1".into()));
    }
    if lo < 3 {
        return Err(Error::Parameter("graphs need at least 3 nodes".into()));
    }
    if lo > hi {
        return Err(Error::Parameter(format!("node range ({lo}, {hi}) is empty")));
    }
    if let SyntheticKind::Er { p } = kind {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..count)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            let edges = generate_one(kind, n, &mut rng);
            Graph::new(n, edges, None, Some(kind.label_id()))
        })
        .collect::<Result<Vec<_>>>()?;
    GraphDataset::new(kind.name(), graphs)
}

// ---------------------------------------------------------------------------
// Augmentations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    NodeDrop,
    EdgePerturb,
    Subgraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub kind: AugmentKind,
    pub ratio: f64,
    pub seed: u64,
}

impl Augmentation {
    pub fn new(kind: AugmentKind, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Parameter(format!("augmentation ratio {ratio} outside [0, 1)")));
        }
        Ok(Augmentation { kind, ratio, seed })
    }
}

/// Applies one augmentation; a pure function of `(g, a)`.
pub fn augment(g: &Graph, a: &Augmentation) -> Result<Graph> {
    if !(0.0..1.0).contains(&a.ratio) {
        return Err(Error::Parameter(format!("augmentation ratio {} outside [0, 1)", a.ratio)));
    }
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    match a.kind {
        AugmentKind::NodeDrop => {
            if n < 2 {
                return Err(Error::Degenerate("node drop needs at least 2 nodes".into()));
            }
            let drop = (a.ratio * n as f64).floor() as usize;
            if drop >= n {
                return Err(Error::Degenerate("node drop would remove every node".into()));
            }
            let mut dropped = vec![false; n];
            for i in sample(&mut rng, n, drop) {
                dropped[i] = true;
            }
            let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
            g.induced_subgraph(&keep)
        }
        AugmentKind::EdgePerturb => {
            let m = g.num_edges();
            let k = (a.ratio * m as f64).floor() as usize;
            if k == 0 {
                return Ok(g.clone());
            }
            let removed: BTreeSet<usize> = sample(&mut rng, m, k).into_iter().collect();
            let non_edges: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                .filter(|&(u, v)| !g.has_edge(u, v))
                .collect();
            let add = k.min(non_edges.len());
            let mut edges: Vec<(usize, usize)> = g
                .edges()
                .iter()
                .enumerate()
                .filter(|(i, _)| !removed.contains(i))
                .map(|(_, &e)| e)
                .collect();
            edges.extend(sample(&mut rng, non_edges.len(), add).into_iter().map(|i| non_edges[i]));
            Graph::new(n, edges, g.attributes.clone(), g.label)
        }
        AugmentKind::Subgraph => {
            if n < 2 {
                return Err(Error::Degenerate("subgraph extraction needs at least 2 nodes".into()));
            }
            let target = ((1.0 - a.ratio) * n as f64).ceil() as usize;
            let start = rng.random_range(0..n);
            let target = target.min(g.component_size(start)).max(1);
            let adj = g.neighbors();
            let mut visited = vec![false; n];
            visited[start] = true;
            let mut count = 1;
            let mut current = start;
            let mut steps = 0usize;
            let budget = 64 * n * n;
            while count < target && steps < budget {
                let nb = &adj[current];
                current = nb[rng.random_range(0..nb.len())];
                if !visited[current] {
                    visited[current] = true;
                    count += 1;
                }
                steps += 1;
            }
            // Extremely unlucky walks finish by breadth-first growth, which
            // keeps the node set connected.
            if count < target {
                let mut queue: VecDeque<usize> = (0..n).filter(|&i| visited[i]).collect();
                while let Some(u) = queue.pop_front() {
                    for &w in &adj[u] {
                        if count < target && !visited[w] {
                            visited[w] = true;
                            count += 1;
                            queue.push_back(w);
                        }
                    }
                }
            }
            let keep: Vec<usize> = (0..n).filter(|&i| visited[i]).collect();
            if keep.is_empty() {
                return Err(Error::Degenerate("subgraph would be empty".into()));
            }
            g.induced_subgraph(&keep)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_fixture(dir: &Path, files: &[(&str, &str)]) {
        for (suffix, body) in files {
            fs::write(tu_path(dir, "T", suffix), body).unwrap();
        }
    }

    fn base_fixture(dir: &Path) {
        write_fixture(
            dir,
            &[
                ("A", "1, 2\n2, 1\n3, 4\n4, 5\n5, 4\n"),
                ("graph_indicator", "1\n1\n2\n2\n2\n"),
                ("graph_labels", "0\n1\n"),
            ],
        );
    }

    #[test]
    fn parses_basic_fixture() {
        let tmp = tempfile::tempdir().unwrap();
        base_fixture(tmp.path());
        let ds = parse_tudataset(tmp.path(), "T").unwrap();
        assert_eq!(ds.len(), 2);
        let nodes: Vec<_> = ds.graphs().iter().map(Graph::num_nodes).collect();
        let edges: Vec<_> = ds.graphs().iter().map(Graph::num_edges).collect();
        assert_eq!(nodes, vec![2, 3]);
        assert_eq!(edges, vec![1, 2]);
        assert!(!ds.has_attributes());
        assert_eq!(ds.attribute_dim(), 0);
        assert_eq!(ds.labels(), Some(vec![0, 1]));
    }

    #[test]
    fn attributes_then_onehot_node_labels() {
        let tmp = tempfile::tempdir().unwrap();
        base_fixture(tmp.path());
        write_fixture(
            tmp.path(),
            &[
                ("node_attributes", "0.5, 1\n1,2\n3 4\n5,6\n7,8\n"),
                ("node_labels", "2\n0\n2\n2\n0\n"),
            ],
        );
        let ds = parse_tudataset(tmp.path(), "T").unwrap();
        assert_eq!(ds.attribute_dim(), 4);
        let x = ds.graphs()[0].attributes().unwrap();
        assert_eq!(x.row(0).to_vec(), vec![0.5, 1.0, 0.0, 1.0]);
        assert_eq!(x.row(1).to_vec(), vec![1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_out_of_range_edge() {
        let tmp = tempfile::tempdir().unwrap();
        base_fixture(tmp.path());
        write_fixture(tmp.path(), &[("A", "1, 2\n1, 6\n")]);
        assert!(matches!(parse_tudataset(tmp.path(), "T"), Err(Error::Malformed(_))));
    }

    #[test]
    fn rejects_bad_indicator_ids() {
        let tmp = tempfile::tempdir().unwrap();
        base_fixture(tmp.path());
        write_fixture(tmp.path(), &[("graph_indicator", "1\n1\n3\n3\n3\n")]);
        assert!(matches!(parse_tudataset(tmp.path(), "T"), Err(Error::Malformed(_))));
        write_fixture(tmp.path(), &[("graph_indicator", "2\n2\n3\n3\n3\n")]);
        assert!(matches!(parse_tudataset(tmp.path(), "T"), Err(Error::Malformed(_))));
    }

    #[test]
    fn missing_file_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        base_fixture(tmp.path());
        fs::remove_file(tu_path(tmp.path(), "T", "graph_labels")).unwrap();
        match parse_tudataset(tmp.path(), "T") {
            Err(Error::Ingestion { path, .. }) => {
                assert!(path.to_string_lossy().ends_with("T_graph_labels.txt"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tudataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        base_fixture(tmp.path());
        write_fixture(tmp.path(), &[("node_attributes", "0.1\n0.2\n-3e-7\n4\n5.5\n")]);
        let ds = parse_tudataset(tmp.path(), "T").unwrap();
        let out = tmp.path().join("out");
        write_tudataset(&ds, &out, "T").unwrap();
        assert_eq!(parse_tudataset(&out, "T").unwrap(), ds);
    }

    #[test]
    fn cycle_and_star_shapes() {
        let c = generate_synthetic(SyntheticKind::Cycle, 1, (4, 4), 0).unwrap();
        let g = &c.graphs()[0];
        assert_eq!(g.num_edges(), 4);
        assert!(g.degrees().iter().all(|&d| d == 2));
        let s = generate_synthetic(SyntheticKind::Star, 1, (4, 4), 0).unwrap();
        let mut d = s.graphs()[0].degrees();
        d.sort();
        assert_eq!(d, vec![1, 1, 1, 3]);
    }

    #[test]
    fn generator_is_deterministic_and_validates() {
        let k = SyntheticKind::Ba { m: 2 };
        assert_eq!(
            generate_synthetic(k, 5, (5, 9), 7).unwrap(),
            generate_synthetic(k, 5, (5, 9), 7).unwrap()
        );
        assert!(generate_synthetic(k, 5, (9, 5), 7).is_err());
        assert!(generate_synthetic(k, 0, (5, 9), 7).is_err());
        assert!(generate_synthetic(k, 1, (2, 9), 7).is_err());
    }

    #[test]
    fn edge_perturb_zero_ratio_is_identity() {
        let g = &generate_synthetic(SyntheticKind::Er { p: 0.4 }, 1, (8, 8), 1).unwrap().graphs()[0].clone();
        let a = Augmentation::new(AugmentKind::EdgePerturb, 0.0, 3).unwrap();
        assert_eq!(&augment(g, &a).unwrap(), g);
    }

    #[test]
    fn node_drop_restricts_edges_to_survivors() {
        let g = &generate_synthetic(SyntheticKind::Er { p: 0.5 }, 1, (10, 10), 4).unwrap().graphs()[0].clone();
        let a = Augmentation::new(AugmentKind::NodeDrop, 0.1, 11).unwrap();
        let out = augment(g, &a).unwrap();
        assert_eq!(out.num_nodes(), 9);
        // Recover the survivor set by replaying the same seeded draw.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dropped = sample(&mut rng, 10, 1).index(0);
        let keep: Vec<usize> = (0..10).filter(|&i| i != dropped).collect();
        let expected: BTreeSet<(usize, usize)> = g
            .edges()
            .iter()
            .filter(|(u, v)| *u != dropped && *v != dropped)
            .map(|&(u, v)| {
                let pos = |x| keep.iter().position(|&k| k == x).unwrap();
                (pos(u), pos(v))
            })
            .collect();
        assert_eq!(out.edges().iter().copied().collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn subgraph_of_connected_graph_is_connected() {
        let g = &generate_synthetic(SyntheticKind::Cycle, 1, (5, 5), 0).unwrap().graphs()[0].clone();
        for seed in 0..20 {
            let a = Augmentation::new(AugmentKind::Subgraph, 0.4, seed).unwrap();
            let out = augment(g, &a).unwrap();
            assert_eq!(out.num_nodes(), 3);
            assert!(out.is_connected());
        }
    }

    #[test]
    fn degenerate_augmentations_error() {
        let g = Graph::new(1, [], None, None).unwrap();
        let a = Augmentation::new(AugmentKind::NodeDrop, 0.5, 0).unwrap();
        assert!(matches!(augment(&g, &a), Err(Error::Degenerate(_))));
        assert!(Augmentation::new(AugmentKind::NodeDrop, 1.0, 0).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let ds = generate_synthetic(SyntheticKind::Ba { m: 2 }, 4, (5, 8), 2).unwrap();
        let back = GraphDataset::from_container(
            &Container::from_bytes(&ds.to_container().unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn augmentations_preserve_invariants(
            n in 3usize..14, p in 0.1f64..0.9, gseed in 0u64..1000,
            kind in prop_oneof![Just(AugmentKind::NodeDrop), Just(AugmentKind::EdgePerturb), Just(AugmentKind::Subgraph)],
            ratio in 0.0f64..0.6, aseed in 0u64..1000,
        ) {
            let g = &generate_synthetic(SyntheticKind::Er { p }, 1, (n, n), gseed).unwrap().graphs()[0].clone();
            let a = Augmentation::new(kind, ratio, aseed).unwrap();
            let out = augment(g, &a).unwrap();
            let adj = out.adjacency();
            prop_assert_eq!(&adj, &adj.t());
            prop_assert!((0..out.num_nodes()).all(|i| adj[[i, i]] == 0.0));
            prop_assert_eq!(augment(g, &a).unwrap(), out);
        }
    }
}
