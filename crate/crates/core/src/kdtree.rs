//! Balanced K-d tree construction and the top-tree / sub-tree split.
//!
//! Nodes hold one point each and are stored in a flat array in level order
//! (breadth-first, left to right), so node ids ascend with level and a
//! sub-tree's nodes, taken in id order, are its own breadth-first layout.
//! The node id doubles as the tree-buffer address fed to the bank mapper.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{CapacityRule, Error, Result};
use crate::geometry::{Point3, PointCloud};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct KdNode {
    pub point_index: u32,
    /// Copy of the housed point; keeps traversal reads on one record.
    pub point: Point3,
    pub split_axis: u8,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
    /// Root is level 1.
    pub level: u32,
}

impl KdNode {
    #[inline]
    pub fn split_value(&self) -> f32 {
        self.point[self.split_axis as usize]
    }

    pub fn is_leaf(&self) -> bool {
        self.left.is_none() && self.right.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdTree {
    nodes: Vec<KdNode>,
    height: u32,
}

/// Axis used at a given level: x, y, z, x, ...
#[inline]
pub fn axis_for_level(level: u32) -> u8 {
    ((level - 1) % 3) as u8
}

/// Sorted-median rank for `m` points.
#[inline]
pub fn median_rank(m: usize) -> usize {
    (m - 1) / 2
}

/// Height of the balanced tree over `n` points: `ceil(log2(n + 1))`.
pub fn balanced_height(n: usize) -> u32 {
    usize::BITS - n.leading_zeros()
}

pub fn build_kdtree(cloud: &PointCloud) -> KdTree {
    let n = cloud.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut nodes: Vec<KdNode> = Vec::with_capacity(n);

    struct Pending {
        start: usize,
        end: usize,
        level: u32,
        parent: Option<(NodeId, bool)>,
    }

    let mut queue = VecDeque::new();
    queue.push_back(Pending {
        start: 0,
        end: n,
        level: 1,
        parent: None,
    });
    let mut height = 0;
    while let Some(Pending {
        start,
        end,
        level,
        parent,
    }) = queue.pop_front()
    {
        let axis = axis_for_level(level);
        let slice = &mut order[start..end];
        slice.sort_unstable_by(|&a, &b| {
            let (pa, pb) = (cloud.point(a)[axis as usize], cloud.point(b)[axis as usize]);
            pa.total_cmp(&pb).then(a.cmp(&b))
        });
        let mid = start + median_rank(end - start);
        let point_index = order[mid];
        let id = nodes.len() as NodeId;
        nodes.push(KdNode {
            point_index,
            point: *cloud.point(point_index),
            split_axis: axis,
            left: None,
            right: None,
            level,
        });
        height = height.max(level);
        if let Some((p, is_left)) = parent {
            let pn = &mut nodes[p as usize];
            if is_left {
                pn.left = Some(id);
            } else {
                pn.right = Some(id);
            }
        }
        if mid > start {
            queue.push_back(Pending {
                start,
                end: mid,
                level: level + 1,
                parent: Some((id, true)),
            });
        }
        if mid + 1 < end {
            queue.push_back(Pending {
                start: mid + 1,
                end,
                level: level + 1,
                parent: Some((id, false)),
            });
        }
    }
    KdTree { nodes, height }
}

impl KdTree {
    pub const ROOT: NodeId = 0;

    pub fn root(&self) -> NodeId {
        Self::ROOT
    }

    /// `H`: the deepest node level.
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[KdNode] {
        &self.nodes
    }

    #[inline]
    pub fn node(&self, id: NodeId) -> &KdNode {
        &self.nodes[id as usize]
    }

    pub fn node_level(&self, id: NodeId) -> Result<u32> {
        self.nodes
            .get(id as usize)
            .map(|n| n.level)
            .ok_or_else(|| Error::invalid(format!("node id {id} out of range 0..{}", self.size())))
    }

    /// Node ids of the subtree rooted at `id`, in level order.
    pub fn subtree_ids(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            let n = self.node(out[i]);
            out.extend(n.left);
            out.extend(n.right);
            i += 1;
        }
        out
    }

    pub fn to_dump(&self) -> TreeDump {
        TreeDump {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeDump {
                    id: id as NodeId,
                    point_index: n.point_index,
                    axis: n.split_axis,
                    level: n.level,
                    left: n.left,
                    right: n.right,
                })
                .collect(),
            root: Self::ROOT,
            height: self.height,
        }
    }

    /// Rebuild from a dump, checking it against `cloud` (completeness, level
    /// links, axis policy and the half-space partition).
    pub fn from_dump(dump: &TreeDump, cloud: &PointCloud) -> Result<Self> {
        let bad = |m: String| Error::Validation(format!("tree dump: {m}"));
        if dump.nodes.len() != cloud.len() {
            return Err(bad(format!(
                "{} nodes for a cloud of {} points",
                dump.nodes.len(),
                cloud.len()
            )));
        }
        if dump.root != Self::ROOT {
            return Err(bad(format!("root must be node 0, found {}", dump.root)));
        }
        let n = dump.nodes.len();
        let mut seen = vec![false; n];
        let mut nodes = Vec::with_capacity(n);
        for (i, d) in dump.nodes.iter().enumerate() {
            if d.id as usize != i {
                return Err(bad(format!("node at position {i} has id {}", d.id)));
            }
            let pi = d.point_index as usize;
            if pi >= n || std::mem::replace(&mut seen[pi], true) {
                return Err(bad(format!("point index {pi} missing or repeated")));
            }
            if d.level == 0 || d.axis != axis_for_level(d.level) {
                return Err(bad(format!("node {i} has level {} axis {}", d.level, d.axis)));
            }
            for c in [d.left, d.right].into_iter().flatten() {
                if c as usize >= n || c as usize <= i {
                    return Err(bad(format!("node {i} has invalid child {c}")));
                }
            }
            nodes.push(KdNode {
                point_index: d.point_index,
                point: *cloud.point(d.point_index),
                split_axis: d.axis,
                left: d.left,
                right: d.right,
                level: d.level,
            });
        }
        if nodes[0].level != 1 {
            return Err(bad("root level must be 1".into()));
        }
        let mut parents = vec![0u32; n];
        for (i, node) in nodes.iter().enumerate() {
            for c in [node.left, node.right].into_iter().flatten() {
                parents[c as usize] += 1;
                if nodes[c as usize].level != node.level + 1 {
                    return Err(bad(format!("child {c} of node {i} has inconsistent level")));
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(bad("nodes do not form a single tree".into()));
        }
        let height = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        if height != dump.height {
            return Err(bad(format!("height {} != recorded {}", height, dump.height)));
        }
        let tree = KdTree { nodes, height };
        tree.check_partition().map_err(bad)?;
        Ok(tree)
    }

    /// Every left-subtree point is `<=` and every right-subtree point `>=`
    /// the node's split value on its axis.
    pub fn check_partition(&self) -> std::result::Result<(), String> {
        for (id, node) in self.nodes.iter().enumerate() {
            let axis = node.split_axis as usize;
            let split = node.split_value();
            for (child, is_left) in [(node.left, true), (node.right, false)] {
                let Some(c) = child else { continue };
                for d in self.subtree_ids(c) {
                    let v = self.node(d).point[axis];
                    if (is_left && v > split) || (!is_left && v < split) {
                        return Err(format!("node {d} violates the split plane of node {id}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub id: NodeId,
    pub point_index: u32,
    pub axis: u8,
    pub level: u32,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
}

/// Debug/interchange form of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub nodes: Vec<NodeDump>,
    pub root: NodeId,
    pub height: u32,
}

#[inline]
fn fits(levels: u32, buffer_words: u64) -> bool {
    levels >= 128 || (1u128 << levels) - 1 <= buffer_words as u128
}

/// Levels in each sub-tree for a given top-tree height, counting the shared root.
pub fn subtree_levels(height: u32, h_t: u32) -> u32 {
    height - h_t.max(1) + 1
}

/// `(min, max)` top-tree heights admitted by both sizing inequalities; `min > max`
/// when no height fits.
pub fn permissible_ht_range(height: u32, buffer_words: u64) -> (u32, u32) {
    let max_ht = (0..=height)
        .rev()
        .find(|&h| h == 0 || fits(h, buffer_words))
        .unwrap_or(0);
    let min_ht = (0..=height)
        .find(|&h| fits(subtree_levels(height, h), buffer_words))
        .unwrap_or(height + 1);
    (min_ht, max_ht)
}

/// Check both sizing inequalities for a top-tree height.
pub fn check_capacity(height: u32, h_t: u32, buffer_words: u64) -> Result<()> {
    if h_t > height {
        return Err(Error::invalid(format!(
            "top-tree height {h_t} exceeds tree height {height}"
        )));
    }
    let rule = if h_t > 0 && !fits(h_t, buffer_words) {
        Some(CapacityRule::TopTree)
    } else if !fits(subtree_levels(height, h_t), buffer_words) {
        Some(CapacityRule::SubTree)
    } else {
        None
    };
    match rule {
        None => Ok(()),
        Some(rule) => {
            let (min_ht, max_ht) = permissible_ht_range(height, buffer_words);
            Err(Error::Capacity {
                rule,
                h_t,
                height,
                buffer_words,
                min_ht,
                max_ht,
            })
        }
    }
}

/// Marker for nodes that live only in the top-tree.
pub const TOP_ONLY: u32 = u32::MAX;

/// A K-d tree partitioned into a routing top-tree (levels `1..=h_t`) and the
/// sub-trees hanging from its leaves. A top-tree leaf is also its sub-tree's
/// root.
#[derive(Debug, Clone)]
pub struct SplitTree {
    tree: KdTree,
    h_t: u32,
    buffer_words: u64,
    subtree_roots: Vec<NodeId>,
    subtree_of: Vec<u32>,
    subtree_nodes: Vec<Vec<NodeId>>,
}

pub fn split_tree(tree: KdTree, h_t: u32, buffer_words: u64) -> Result<SplitTree> {
    check_capacity(tree.height(), h_t, buffer_words)?;
    let n = tree.size();
    // Sub-tree roots: level-h_t nodes, plus any leaf above that level (only
    // possible on the ragged last level), so every root-to-leaf path meets
    // exactly one root.
    let subtree_roots: Vec<NodeId> = if h_t == 0 {
        vec![KdTree::ROOT]
    } else {
        (0..n as NodeId)
            .filter(|&id| {
                let node = tree.node(id);
                node.level == h_t || (node.level < h_t && node.is_leaf())
            })
            .collect()
    };
    let mut subtree_of = vec![TOP_ONLY; n];
    for (s, &root) in subtree_roots.iter().enumerate() {
        for id in tree.subtree_ids(root) {
            subtree_of[id as usize] = s as u32;
        }
    }
    let mut subtree_nodes = vec![Vec::new(); subtree_roots.len()];
    for (id, &s) in subtree_of.iter().enumerate() {
        if s != TOP_ONLY {
            subtree_nodes[s as usize].push(id as NodeId);
        }
    }
    Ok(SplitTree {
        tree,
        h_t,
        buffer_words,
        subtree_roots,
        subtree_of,
        subtree_nodes,
    })
}

impl SplitTree {
    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn into_tree(self) -> KdTree {
        self.tree
    }

    pub fn h_t(&self) -> u32 {
        self.h_t
    }

    pub fn height(&self) -> u32 {
        self.tree.height()
    }

    pub fn buffer_words(&self) -> u64 {
        self.buffer_words
    }

    pub fn subtree_roots(&self) -> &[NodeId] {
        &self.subtree_roots
    }

    pub fn subtree_count(&self) -> usize {
        self.subtree_roots.len()
    }

    /// Sub-tree index housing `node`, or `None` for top-tree-only nodes.
    pub fn subtree_of(&self, node: NodeId) -> Option<usize> {
        match self.subtree_of[node as usize] {
            TOP_ONLY => None,
            s => Some(s as usize),
        }
    }

    /// The sub-tree's nodes in streaming (level) order.
    pub fn subtree_nodes(&self, subtree: usize) -> &[NodeId] {
        &self.subtree_nodes[subtree]
    }

    /// Nodes that exist only in the top-tree (strictly above the sub-tree roots).
    pub fn top_tree_nodes(&self) -> usize {
        self.subtree_of.iter().filter(|&&s| s == TOP_ONLY).count()
    }
}
