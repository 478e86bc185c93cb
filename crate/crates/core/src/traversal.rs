//! Per-query traversal state machines shared by the functional searches and
//! the cycle model. Each machine exposes the next tree node it wants to
//! fetch; the caller decides whether that fetch is granted or elided.

use crate::exact_search::Candidates;
use crate::geometry::Point3;
use crate::kdtree::{KdTree, NodeId, SplitTree};

/// A query's walk over tree nodes, one fetch at a time.
pub trait Job {
    /// Next node to fetch, or `None` when the walk is finished.
    /// Repeated calls without a grant/elide return the same node.
    fn next_target(&mut self, tree: &KdTree) -> Option<NodeId>;
    /// The fetch of `node` succeeded: distance-test it and advance.
    fn on_grant(&mut self, tree: &KdTree, node: NodeId);
    /// The fetch of `node` was dropped: abandon everything beneath it.
    fn on_elide(&mut self, node: NodeId);
    fn visits(&self) -> u64;
}

#[derive(Debug, Clone, Copy)]
struct StackItem {
    node: NodeId,
    /// Squared lower bound on the distance from the query to this subtree.
    bound2: f64,
}

/// Depth-first K-d search with backtracking confined to the subtree of the
/// starting node.
#[derive(Debug, Clone)]
pub struct KdWalk {
    query: Point3,
    cands: Candidates,
    stack: Vec<StackItem>,
    pending: Option<NodeId>,
    visits: u64,
    pruned: Option<Vec<NodeId>>,
}

impl KdWalk {
    pub fn new(query: Point3, cands: Candidates, start: NodeId) -> Self {
        let mut stack = Vec::with_capacity(64);
        stack.push(StackItem {
            node: start,
            bound2: 0.0,
        });
        KdWalk {
            query,
            cands,
            stack,
            pending: None,
            visits: 0,
            pruned: None,
        }
    }

    /// A walk with nothing left to visit (its start node was lost upstream).
    pub fn empty(query: Point3, cands: Candidates) -> Self {
        KdWalk {
            query,
            cands,
            stack: Vec::new(),
            pending: None,
            visits: 0,
            pruned: None,
        }
    }

    pub fn record_pruned(&mut self) {
        self.pruned = Some(Vec::new());
    }

    pub fn take_pruned(&mut self) -> Vec<NodeId> {
        self.pruned.take().unwrap_or_default()
    }

    pub fn candidates(&self) -> &Candidates {
        &self.cands
    }

    pub fn into_candidates(self) -> Candidates {
        self.cands
    }
}

impl Job for KdWalk {
    fn next_target(&mut self, _tree: &KdTree) -> Option<NodeId> {
        if self.pending.is_some() {
            return self.pending;
        }
        while let Some(item) = self.stack.pop() {
            if item.bound2 > self.cands.bound2() {
                if let Some(p) = self.pruned.as_mut() {
                    p.push(item.node);
                }
                continue;
            }
            self.pending = Some(item.node);
            // keep the bound for the children
            self.stack.push(item);
            return self.pending;
        }
        None
    }

    fn on_grant(&mut self, tree: &KdTree, node: NodeId) {
        debug_assert_eq!(self.pending, Some(node));
        self.pending = None;
        let item = self.stack.pop().expect("pending item on stack");
        self.visits += 1;
        let n = tree.node(node);
        self.cands.offer(n.point_index, self.query.dist2(&n.point));

        let diff = self.query[n.split_axis as usize] as f64 - n.split_value() as f64;
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(f) = far {
            let bound2 = item.bound2.max(diff * diff);
            if bound2 <= self.cands.bound2() {
                self.stack.push(StackItem { node: f, bound2 });
            } else if let Some(p) = self.pruned.as_mut() {
                p.push(f);
            }
        }
        if let Some(c) = near {
            self.stack.push(StackItem {
                node: c,
                bound2: item.bound2,
            });
        }
    }

    fn on_elide(&mut self, node: NodeId) {
        debug_assert_eq!(self.pending, Some(node));
        self.pending = None;
        self.stack.pop();
    }

    fn visits(&self) -> u64 {
        self.visits
    }
}

/// Root-to-sub-tree descent through the top-tree. No backtracking; every
/// visited top-tree node is distance-tested as a seed candidate.
#[derive(Debug, Clone)]
pub struct DescentWalk<'a> {
    split: &'a SplitTree,
    query: Point3,
    cands: Candidates,
    current: NodeId,
    route: Option<usize>,
    abandoned: bool,
    seed: bool,
    visits: u64,
}

impl<'a> DescentWalk<'a> {
    pub fn new(split: &'a SplitTree, query: Point3, cands: Candidates, seed: bool) -> Self {
        DescentWalk {
            split,
            query,
            cands,
            current: split.tree().root(),
            route: None,
            abandoned: false,
            seed,
            visits: 0,
        }
    }

    /// Sub-tree index this query was assigned to, once the descent is done.
    pub fn route(&self) -> Option<usize> {
        self.route
    }

    /// True if a top-tree fetch was elided, which abandons the query's entire
    /// sub-tree as well.
    pub fn abandoned(&self) -> bool {
        self.abandoned
    }

    pub fn into_candidates(self) -> Candidates {
        self.cands
    }
}

/// Child taken by a routing step: `<=` goes left; a missing child defers to
/// the one that exists.
#[inline]
pub fn route_child(tree: &KdTree, node: NodeId, query: &Point3) -> Option<NodeId> {
    let n = tree.node(node);
    let go_left = query[n.split_axis as usize] <= n.split_value();
    if go_left {
        n.left.or(n.right)
    } else {
        n.right.or(n.left)
    }
}

/// Sub-tree a query is routed to by the top-tree.
pub fn route_query(split: &SplitTree, query: &Point3) -> usize {
    let tree = split.tree();
    let mut node = tree.root();
    loop {
        if let Some(s) = split.subtree_of(node) {
            return s;
        }
        node = route_child(tree, node, query).expect("top-tree node above a sub-tree root has a child");
    }
}

impl Job for DescentWalk<'_> {
    fn next_target(&mut self, _tree: &KdTree) -> Option<NodeId> {
        if self.route.is_some() {
            return None;
        }
        match self.split.subtree_of(self.current) {
            Some(s) => {
                self.route = Some(s);
                None
            }
            None => Some(self.current),
        }
    }

    fn on_grant(&mut self, tree: &KdTree, node: NodeId) {
        debug_assert_eq!(node, self.current);
        self.visits += 1;
        if self.seed {
            let n = tree.node(node);
            self.cands.offer(n.point_index, self.query.dist2(&n.point));
        }
        self.current = route_child(tree, node, &self.query)
            .expect("top-tree node above a sub-tree root has a child");
    }

    fn on_elide(&mut self, _node: NodeId) {
        // The queue assignment is still recorded so DRAM staging is unchanged;
        // the query simply has nothing left to search.
        self.abandoned = true;
        self.route = Some(route_query(self.split, &self.query));
    }

    fn visits(&self) -> u64 {
        self.visits
    }
}

/// Linear scan over a fixed node list (prior-accelerator exhaustive sub-tree search).
#[derive(Debug, Clone)]
pub struct ScanWalk<'a> {
    query: Point3,
    cands: Candidates,
    nodes: &'a [NodeId],
    cursor: usize,
    visits: u64,
}

impl<'a> ScanWalk<'a> {
    pub fn new(query: Point3, cands: Candidates, nodes: &'a [NodeId]) -> Self {
        ScanWalk {
            query,
            cands,
            nodes,
            cursor: 0,
            visits: 0,
        }
    }

    pub fn into_candidates(self) -> Candidates {
        self.cands
    }
}

impl Job for ScanWalk<'_> {
    fn next_target(&mut self, _tree: &KdTree) -> Option<NodeId> {
        self.nodes.get(self.cursor).copied()
    }

    fn on_grant(&mut self, tree: &KdTree, node: NodeId) {
        let n = tree.node(node);
        self.cands.offer(n.point_index, self.query.dist2(&n.point));
        self.cursor += 1;
        self.visits += 1;
    }

    fn on_elide(&mut self, _node: NodeId) {
        self.cursor += 1;
    }

    fn visits(&self) -> u64 {
        self.visits
    }
}
