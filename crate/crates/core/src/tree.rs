//! Computational sparse Merkle tree.
//!
//! Only nodes above occupied leaves are stored. Any other node at level `k`
//! is the `k`-th entry of the default chain, the fold of an all-default
//! subtree of height `k`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{index_to_path, BinaryPath, CodecError, Digest256, LeafIndex};
use crate::transforms::{aggregate_pair, default_element, AggregatorSpec, LeafValue, NodeValue, Registry, TransformError, TransformSpec};

pub const MAX_TREE_HEIGHT: u16 = 32;
pub const DEFAULT_TREE_HEIGHT: u16 = 16;
const TREE_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree height {0} outside 1..={MAX_TREE_HEIGHT}")]
    InvalidHeight(u16),
    #[error("node ({level}, {position}) outside a tree of height {height}")]
    OutOfRange { level: u16, position: u64, height: u16 },
    #[error("leaf index {index} receives two different values")]
    LeafCollision { index: u64 },
    #[error("scale {tree} does not match transform scale {transform}")]
    ScaleMismatch { tree: u8, transform: u8 },
    #[error("leaf payload has {actual} entries, transform emits {expected}")]
    PayloadShape { expected: usize, actual: usize },
    #[error("stored root {stored} does not match rebuilt root {rebuilt}")]
    RootMismatch { stored: Digest256, rebuilt: Digest256 },
    #[error("tree file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub height: u16,
    pub transform_id: String,
    pub aggregator_id: String,
    pub scale: u8,
}

impl TreeConfig {
    pub fn new(height: u16, transform: &TransformSpec, aggregator: &AggregatorSpec) -> Self {
        TreeConfig { height, transform_id: transform.id.clone(), aggregator_id: aggregator.id.clone(), scale: transform.scale }
    }
}

#[derive(Clone, Debug)]
pub struct TreeHandle {
    config: TreeConfig,
    transform: TransformSpec,
    aggregator: AggregatorSpec,
    occupied: BTreeMap<u64, LeafValue>,
    // levels[k] maps position -> materialized node at level k
    levels: Vec<HashMap<u64, NodeValue>>,
    default_chain: Vec<NodeValue>,
}

pub fn default_chain(transform: &TransformSpec, aggregator: &AggregatorSpec, height: u16) -> Result<Vec<NodeValue>, TransformError> {
    let mut chain = Vec::with_capacity(height as usize + 1);
    chain.push(NodeValue::from_leaf(&default_element(transform)));
    for k in 0..height as usize {
        let next = aggregate_pair(aggregator, &chain[k], &chain[k])?;
        chain.push(next);
    }
    Ok(chain)
}

pub fn build_smt(
    leaves: impl IntoIterator<Item = (LeafIndex, LeafValue)>,
    config: TreeConfig,
    registry: &Registry,
) -> Result<TreeHandle, TreeError> {
    let transform = registry.transform(&config.transform_id)?.clone();
    let aggregator = registry.aggregator(&config.aggregator_id)?.clone();
    build_with_specs(leaves, config, transform, aggregator)
}

pub fn build_with_specs(
    leaves: impl IntoIterator<Item = (LeafIndex, LeafValue)>,
    config: TreeConfig,
    transform: TransformSpec,
    aggregator: AggregatorSpec,
) -> Result<TreeHandle, TreeError> {
    let k_max = config.height;
    if k_max == 0 || k_max > MAX_TREE_HEIGHT {
        return Err(TreeError::InvalidHeight(k_max));
    }
    if config.scale != transform.scale {
        return Err(TreeError::ScaleMismatch { tree: config.scale, transform: transform.scale });
    }
    let width = transform.output_dim();

    let mut occupied = BTreeMap::new();
    for (index, leaf) in leaves {
        let pos = index.as_u64().filter(|&p| p >> k_max == 0).ok_or(TreeError::OutOfRange {
            level: 0,
            position: index.as_u64().unwrap_or(u64::MAX),
            height: k_max,
        })?;
        if leaf.payload.len() != width {
            return Err(TreeError::PayloadShape { expected: width, actual: leaf.payload.len() });
        }
        if leaf.payload.iter().any(|f| f.scale != config.scale) {
            let bad = leaf.payload.iter().find(|f| f.scale != config.scale).map(|f| f.scale).unwrap_or_default();
            return Err(TreeError::ScaleMismatch { tree: config.scale, transform: bad });
        }
        match occupied.get(&pos) {
            Some(existing) if existing != &leaf => return Err(TreeError::LeafCollision { index: pos }),
            Some(_) => {}
            None => {
                occupied.insert(pos, leaf);
            }
        }
    }

    let default_chain = default_chain(&transform, &aggregator, k_max)?;
    let mut levels: Vec<HashMap<u64, NodeValue>> = Vec::with_capacity(k_max as usize + 1);
    levels.push(occupied.iter().map(|(&p, leaf)| (p, NodeValue::from_leaf(leaf))).collect());
    for k in 0..k_max as usize {
        let below = &levels[k];
        let mut parents: Vec<u64> = below.keys().map(|p| p >> 1).collect();
        parents.sort_unstable();
        parents.dedup();
        let mut level = HashMap::with_capacity(parents.len());
        for p in parents {
            let left = below.get(&(2 * p)).unwrap_or(&default_chain[k]);
            let right = below.get(&(2 * p + 1)).unwrap_or(&default_chain[k]);
            level.insert(p, aggregate_pair(&aggregator, left, right)?);
        }
        levels.push(level);
    }

    Ok(TreeHandle { config, transform, aggregator, occupied, levels, default_chain })
}

impl TreeHandle {
    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn height(&self) -> u16 {
        self.config.height
    }

    pub fn transform(&self) -> &TransformSpec {
        &self.transform
    }

    pub fn aggregator(&self) -> &AggregatorSpec {
        &self.aggregator
    }

    pub fn default_chain(&self) -> &[NodeValue] {
        &self.default_chain
    }

    pub fn occupied(&self) -> impl Iterator<Item = (u64, &LeafValue)> {
        self.occupied.iter().map(|(&p, l)| (p, l))
    }

    pub fn leaf_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn root(&self) -> &NodeValue {
        self.levels[self.config.height as usize].get(&0).unwrap_or(&self.default_chain[self.config.height as usize])
    }

    /// Stored nodes at `level`, unordered.
    pub fn materialized(&self, level: u16) -> impl Iterator<Item = (u64, &NodeValue)> {
        self.levels.get(level as usize).into_iter().flat_map(|m| m.iter().map(|(&p, n)| (p, n)))
    }

    pub fn node_at(&self, level: u16, position: u64) -> Result<&NodeValue, TreeError> {
        let k_max = self.config.height;
        if level > k_max || position >> (k_max - level) != 0 {
            return Err(TreeError::OutOfRange { level, position, height: k_max });
        }
        Ok(self.levels[level as usize].get(&position).unwrap_or(&self.default_chain[level as usize]))
    }

    fn position_of(&self, index: &LeafIndex) -> Result<u64, TreeError> {
        let k_max = self.config.height;
        index.as_u64().filter(|&p| p >> k_max == 0).ok_or(TreeError::OutOfRange {
            level: 0,
            position: index.as_u64().unwrap_or(u64::MAX),
            height: k_max,
        })
    }

    /// Siblings of the path nodes, leaf level first.
    pub fn siblings_along_path(&self, index: &LeafIndex) -> Result<Vec<NodeValue>, TreeError> {
        let pos = self.position_of(index)?;
        (0..self.config.height).map(|k| self.node_at(k, (pos >> k) ^ 1).cloned()).collect()
    }

    /// Nodes on the path from the leaf slot up to the root, `K + 1` entries.
    pub fn path_nodes(&self, index: &LeafIndex) -> Result<Vec<NodeValue>, TreeError> {
        let pos = self.position_of(index)?;
        (0..=self.config.height).map(|k| self.node_at(k, pos >> k).cloned()).collect()
    }

    pub fn path(&self, index: &LeafIndex) -> Result<BinaryPath, TreeError> {
        Ok(index_to_path(index, self.config.height)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        let file = TreeFile {
            format_version: TREE_FILE_VERSION,
            config: self.config.clone(),
            transform: self.transform.clone(),
            aggregator: self.aggregator.clone(),
            leaves: self.occupied.iter().map(|(&index, leaf)| StoredLeaf { index, leaf: leaf.clone() }).collect(),
            root: self.root().digest(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| TreeError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TreeHandle, TreeError> {
        let text = std::fs::read_to_string(path)?;
        let file: TreeFile = serde_json::from_str(&text).map_err(|e| TreeError::Format(e.to_string()))?;
        if file.format_version != TREE_FILE_VERSION {
            return Err(TreeError::Format(format!("unsupported version {}", file.format_version)));
        }
        file.transform.validate()?;
        let height = file.config.height;
        let leaves =
            file.leaves.into_iter().map(|s| Ok((LeafIndex::from_u64(s.index, height)?, s.leaf))).collect::<Result<Vec<_>, CodecError>>()?;
        let tree = build_with_specs(leaves, file.config, file.transform, file.aggregator)?;
        if tree.root().digest() != file.root {
            return Err(TreeError::RootMismatch { stored: file.root, rebuilt: tree.root().digest() });
        }
        Ok(tree)
    }
}

#[derive(Serialize, Deserialize)]
struct TreeFile {
    format_version: u32,
    config: TreeConfig,
    transform: TransformSpec,
    aggregator: AggregatorSpec,
    leaves: Vec<StoredLeaf>,
    root: Digest256,
}

#[derive(Serialize, Deserialize)]
struct StoredLeaf {
    index: u64,
    leaf: LeafValue,
}

/// Fold a leaf-level node with its siblings along `path` to the root.
pub fn fold_path(
    aggregator: &AggregatorSpec,
    leaf: &NodeValue,
    siblings: &[NodeValue],
    path: &BinaryPath,
) -> Result<NodeValue, TransformError> {
    let mut cur = leaf.clone();
    for (k, sib) in siblings.iter().enumerate() {
        cur = if path.bit_at_level(k) == 1 { aggregate_pair(aggregator, sib, &cur)? } else { aggregate_pair(aggregator, &cur, sib)? };
    }
    Ok(cur)
}
