//! From-scratch random-forest classifier: seeded bootstrap ensemble of
//! binary decision trees grown with Gini-impurity splits, majority-vote
//! prediction, and a versioned binary persistence format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("cannot compute impurity of an empty node")]
    EmptyNode,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature vector has dimension {actual}, forest expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("forest file format version {found} is unsupported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("forest file is corrupt: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training rows: feature vectors of one shared dimension with binary
/// labels (1 = transitioned).
#[derive(Debug, Clone, PartialEq)]
pub struct RFDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
    dim: usize,
}

impl RFDataset {
    pub fn new(rows: Vec<(Vec<f64>, u8)>) -> Result<Self, ForestError> {
        let mut features = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (values, label) in rows {
            features.push(values);
            labels.push(label);
        }
        Self::from_parts(features, labels)
    }

    pub fn from_parts(features: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, ForestError> {
        if features.len() != labels.len() {
            return Err(ForestError::InvalidParams(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        for row in &features {
            if row.len() != dim {
                return Err(ForestError::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
        }
        for &label in &labels {
            if label > 1 {
                return Err(ForestError::InvalidParams(format!(
                    "label {label} is not binary"
                )));
            }
        }
        Ok(RFDataset {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_row(&self, row: usize) -> &[f64] {
        &self.features[row]
    }

    pub fn label(&self, row: usize) -> u8 {
        self.labels[row]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Ensemble hyperparameters. `None` fields fall back to the standard
/// choices: bootstrap samples of the full training size and
/// `ceil(sqrt(p))` candidate features per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub tree_count: usize,
    pub seed: u64,
    pub bootstrap_size: Option<usize>,
    pub feature_subset_size: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            tree_count: 100,
            seed: 0,
            bootstrap_size: None,
            feature_subset_size: None,
            max_depth: None,
            min_leaf: 1,
        }
    }
}

impl ForestParams {
    fn effective_subset(&self, dim: usize) -> usize {
        self.feature_subset_size
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim.max(1))
    }

    fn validate(&self, dim: usize) -> Result<(), ForestError> {
        if self.tree_count == 0 {
            return Err(ForestError::InvalidParams("tree_count must be >= 1".into()));
        }
        if self.bootstrap_size == Some(0) {
            return Err(ForestError::InvalidParams(
                "bootstrap_size must be >= 1".into(),
            ));
        }
        if let Some(k) = self.feature_subset_size {
            if k == 0 || k > dim {
                return Err(ForestError::InvalidParams(format!(
                    "feature_subset_size {k} out of range 1..={dim}"
                )));
            }
        }
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidParams("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gini impurity of a binary class-count pair: `1 - p0^2 - p1^2`.
pub fn gini(class_counts: (usize, usize)) -> Result<f64, ForestError> {
    let (n0, n1) = class_counts;
    let total = n0 + n1;
    if total == 0 {
        return Err(ForestError::EmptyNode);
    }
    let p0 = n0 as f64 / total as f64;
    let p1 = n1 as f64 / total as f64;
    Ok(1.0 - (p0 * p0 + p1 * p1))
}

fn gini_unchecked(n0: usize, n1: usize) -> f64 {
    let total = (n0 + n1) as f64;
    let p0 = n0 as f64 / total;
    let p1 = n1 as f64 / total;
    1.0 - (p0 * p0 + p1 * p1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        class: u8,
        counts: (u32, u32),
    },
}

/// One decision tree; the root is node 0. Rows with feature value
/// `<= threshold` descend left.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, values: &[f64]) -> u8 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class, .. } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if values[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

struct TreeBuilder<'a> {
    data: &'a RFDataset,
    params: &'a ForestParams,
    subset_size: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn counts(&self, rows: &[usize]) -> (usize, usize) {
        let ones = rows.iter().filter(|&&r| self.data.label(r) == 1).count();
        (rows.len() - ones, ones)
    }

    fn leaf(&mut self, counts: (usize, usize)) -> u32 {
        // Majority class; ties predict 0.
        let class = u8::from(counts.1 > counts.0);
        let index = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            class,
            counts: (counts.0 as u32, counts.1 as u32),
        });
        index
    }

    /// Best (feature, threshold) among the sampled candidates by
    /// size-weighted child Gini. Candidates are scanned in ascending
    /// (feature, threshold) order and only strict improvements are taken,
    /// so equal-impurity ties resolve to the lowest pair.
    fn best_split(
        &self,
        rows: &[usize],
        counts: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Option<(usize, f64, f64)> {
        let dim = self.data.dim();
        let mut candidates: Vec<usize> = rand::seq::index::sample(rng, dim, self.subset_size)
            .iter()
            .collect();
        candidates.sort_unstable();

        let total = rows.len();
        let total_ones = counts.1;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut column: Vec<(f64, u8)> = Vec::with_capacity(total);
        for feature in candidates {
            column.clear();
            column.extend(
                rows.iter()
                    .map(|&r| (self.data.feature_row(r)[feature], self.data.label(r))),
            );
            column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

            let mut left_ones = 0usize;
            for split_at in 1..total {
                left_ones += usize::from(column[split_at - 1].1);
                if column[split_at].0 == column[split_at - 1].0 {
                    continue;
                }
                let left_total = split_at;
                let right_total = total - split_at;
                if left_total < self.params.min_leaf || right_total < self.params.min_leaf {
                    continue;
                }
                let right_ones = total_ones - left_ones;
                let weighted = (left_total as f64
                    * gini_unchecked(left_total - left_ones, left_ones)
                    + right_total as f64 * gini_unchecked(right_total - right_ones, right_ones))
                    / total as f64;
                if best.is_none_or(|(_, _, w)| weighted < w) {
                    let threshold = (column[split_at - 1].0 + column[split_at].0) / 2.0;
                    best = Some((feature, threshold, weighted));
                }
            }
        }
        best
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let counts = self.counts(&rows);
        if counts.0 == 0 || counts.1 == 0 {
            return self.leaf(counts);
        }
        if self.params.max_depth.is_some_and(|limit| depth >= limit) {
            return self.leaf(counts);
        }
        let parent_gini = gini_unchecked(counts.0, counts.1);
        let Some((feature, threshold, weighted)) = self.best_split(&rows, counts, rng) else {
            return self.leaf(counts);
        };
        if weighted >= parent_gini {
            return self.leaf(counts);
        }

        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| self.data.feature_row(r)[feature] <= threshold);
        let index = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            class: 0,
            counts: (0, 0),
        }); // placeholder, patched below
        let left = self.build(left_rows, depth + 1, rng);
        let right = self.build(right_rows, depth + 1, rng);
        self.nodes[index as usize] = Node::Split {
            feature: feature as u32,
            threshold,
            left,
            right,
        };
        index
    }
}

fn grow_tree_on_rows(
    data: &RFDataset,
    rows: Vec<usize>,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let mut builder = TreeBuilder {
        data,
        params,
        subset_size: params.effective_subset(data.dim()),
        nodes: Vec::new(),
    };
    builder.build(rows, 0, rng);
    Tree {
        nodes: builder.nodes,
    }
}

/// Grow a single decision tree on the whole sample. At each node a fresh
/// subset of candidate features is drawn from `rng`; growth stops on pure
/// nodes, the depth cap, or when no sampled split improves the weighted
/// Gini impurity.
pub fn grow_tree(
    sample: &RFDataset,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tree, ForestError> {
    if sample.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    params.validate(sample.dim())?;
    Ok(grow_tree_on_rows(
        sample,
        (0..sample.len()).collect(),
        params,
        rng,
    ))
}

/// Trained ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub params: ForestParams,
    pub dim: usize,
}

fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-tree RNG stream, derived deterministically from the forest seed and
/// the tree index so training order and parallelism cannot change results.
pub fn tree_rng(seed: u64, tree_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tree_index as u64))
}

/// Train a forest of `params.tree_count` trees, each on its own bootstrap
/// sample (with replacement) drawn from its per-tree stream. Trees train
/// in parallel; results are bit-reproducible for a fixed seed.
pub fn train(data: &RFDataset, params: &ForestParams) -> Result<Forest, ForestError> {
    if data.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    params.validate(data.dim())?;
    let ones = data.labels().iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == data.len() {
        log::warn!("training data contains a single class; forest will be degenerate");
    }
    let sample_size = params.bootstrap_size.unwrap_or(data.len());
    let trees: Vec<Tree> = (0..params.tree_count)
        .into_par_iter()
        .map(|tree_index| {
            let mut rng = tree_rng(params.seed, tree_index);
            let rows: Vec<usize> = (0..sample_size)
                .map(|_| rng.random_range(0..data.len()))
                .collect();
            grow_tree_on_rows(data, rows, params, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        params: *params,
        dim: data.dim(),
    })
}

/// Majority-vote prediction: class 1 iff strictly more than half the trees
/// vote 1 (ties predict 0), plus the fraction of trees voting 1.
pub fn predict(forest: &Forest, values: &[f64]) -> Result<(u8, f64), ForestError> {
    if values.len() != forest.dim {
        return Err(ForestError::DimensionMismatch {
            expected: forest.dim,
            actual: values.len(),
        });
    }
    let votes = forest
        .trees
        .iter()
        .filter(|tree| tree.predict(values) == 1)
        .count();
    let y = u8::from(2 * votes > forest.trees.len());
    Ok((y, votes as f64 / forest.trees.len() as f64))
}

const FOREST_MAGIC: &[u8; 4] = b"CTPF";
const FOREST_VERSION: u32 = 1;
const TAG_LEAF: u8 = 0;
const TAG_SPLIT: u8 = 1;

/// Write a forest to its versioned binary format (layout in
/// `docs/FORMATS.md`). `meta` is an arbitrary UTF-8 string stored in the
/// header.
pub fn save(forest: &Forest, path: &Path, meta: &str) -> Result<(), ForestError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FOREST_MAGIC)?;
    w.write_all(&FOREST_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(forest.dim as u32).to_le_bytes())?;
    w.write_all(&(forest.trees.len() as u32).to_le_bytes())?;
    let p = &forest.params;
    w.write_all(&p.seed.to_le_bytes())?;
    w.write_all(&(p.bootstrap_size.unwrap_or(0) as u64).to_le_bytes())?;
    w.write_all(&(p.feature_subset_size.unwrap_or(0) as u32).to_le_bytes())?;
    w.write_all(&(p.max_depth.unwrap_or(0) as u32).to_le_bytes())?;
    w.write_all(&(p.min_leaf as u32).to_le_bytes())?;
    for tree in &forest.trees {
        w.write_all(&(tree.nodes.len() as u32).to_le_bytes())?;
        for node in &tree.nodes {
            match node {
                Node::Leaf { class, counts } => {
                    w.write_all(&[TAG_LEAF, *class])?;
                    w.write_all(&counts.0.to_le_bytes())?;
                    w.write_all(&counts.1.to_le_bytes())?;
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    w.write_all(&[TAG_SPLIT])?;
                    w.write_all(&feature.to_le_bytes())?;
                    w.write_all(&threshold.to_le_bytes())?;
                    w.write_all(&left.to_le_bytes())?;
                    w.write_all(&right.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a forest saved by [`save`], validating the header and all node
/// references.
pub fn load(path: &Path) -> Result<Forest, ForestError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let corrupt = |what: &str| ForestError::CorruptFile(what.to_string());

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != FOREST_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FOREST_VERSION {
        return Err(ForestError::FormatVersionMismatch {
            found: version,
            expected: FOREST_VERSION,
        });
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta)?;
    let dim = read_u32(&mut r)? as usize;
    let tree_count = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let bootstrap_size = match read_u64(&mut r)? as usize {
        0 => None,
        m => Some(m),
    };
    let feature_subset_size = match read_u32(&mut r)? as usize {
        0 => None,
        k => Some(k),
    };
    let max_depth = match read_u32(&mut r)? as usize {
        0 => None,
        d => Some(d),
    };
    let min_leaf = read_u32(&mut r)? as usize;
    let params = ForestParams {
        tree_count,
        seed,
        bootstrap_size,
        feature_subset_size,
        max_depth,
        min_leaf,
    };

    let mut trees = Vec::with_capacity(tree_count);
    for _ in 0..tree_count {
        let node_count = read_u32(&mut r)? as usize;
        let mut nodes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            match tag[0] {
                TAG_LEAF => {
                    let mut class = [0u8; 1];
                    read_exact(&mut r, &mut class)?;
                    if class[0] > 1 {
                        return Err(corrupt("leaf class out of range"));
                    }
                    let n0 = read_u32(&mut r)?;
                    let n1 = read_u32(&mut r)?;
                    nodes.push(Node::Leaf {
                        class: class[0],
                        counts: (n0, n1),
                    });
                }
                TAG_SPLIT => {
                    let feature = read_u32(&mut r)?;
                    let mut threshold_bytes = [0u8; 8];
                    read_exact(&mut r, &mut threshold_bytes)?;
                    let left = read_u32(&mut r)?;
                    let right = read_u32(&mut r)?;
                    if feature as usize >= dim {
                        return Err(corrupt("split feature out of range"));
                    }
                    if left as usize >= node_count || right as usize >= node_count {
                        return Err(corrupt("child index out of range"));
                    }
                    nodes.push(Node::Split {
                        feature,
                        threshold: f64::from_le_bytes(threshold_bytes),
                        left,
                        right,
                    });
                }
                other => return Err(corrupt(&format!("unknown node tag {other}"))),
            }
        }
        if nodes.is_empty() {
            return Err(corrupt("tree without nodes"));
        }
        trees.push(Tree { nodes });
    }
    // Trailing garbage means the file is not what we wrote.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(corrupt("trailing bytes after last tree"));
    }
    Ok(Forest { trees, params, dim })
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), ForestError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ForestError::CorruptFile("unexpected end of file".to_string())
        } else {
            ForestError::Io(e)
        }
    })
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, ForestError> {
    let mut bytes = [0u8; 4];
    read_exact(reader, &mut bytes)?;
    Ok(u32::from_le_bytes(bytes))
}

fn read_u64<R: Read>(reader: &mut R) -> Result<u64, ForestError> {
    let mut bytes = [0u8; 8];
    read_exact(reader, &mut bytes)?;
    Ok(u64::from_le_bytes(bytes))
}
