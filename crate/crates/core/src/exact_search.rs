//! Ground-truth neighbor search: exhaustive scan and exact K-d traversal.
//!
//! Both answer the same radius-limited k-nearest query: the `k_max` closest
//! points within Euclidean distance `r`, ordered by `(distance, index)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::{Point3, PointCloud};
use crate::kdtree::{KdTree, NodeId};
use crate::traversal::{Job, KdWalk};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub dist2: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.dist2.sqrt()
    }
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of one query, sorted ascending by `(distance, index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|n| n.index)
    }
}

/// Bounded best-k set used by every search path. The pruning bound is the
/// radius until the set is full, then the current k-th squared distance.
#[derive(Debug, Clone)]
pub struct Candidates {
    k_max: usize,
    r2: f64,
    exclude: Option<u32>,
    heap: BinaryHeap<Neighbor>,
}

impl Candidates {
    pub fn new(radius: f64, k_max: usize, exclude: Option<u32>) -> Self {
        Candidates {
            k_max,
            r2: radius * radius,
            exclude,
            heap: BinaryHeap::with_capacity(k_max.min(1024) + 1),
        }
    }

    #[inline]
    pub fn offer(&mut self, index: u32, dist2: f64) {
        if dist2 > self.r2 || self.exclude == Some(index) || self.k_max == 0 {
            return;
        }
        let cand = Neighbor { index, dist2 };
        if self.heap.len() < self.k_max {
            self.heap.push(cand);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if cand < *top {
                *top = cand;
            }
        }
    }

    /// Anything whose squared lower bound exceeds this cannot enter the set.
    #[inline]
    pub fn bound2(&self) -> f64 {
        if self.heap.len() >= self.k_max {
            self.heap.peek().map_or(self.r2, |n| n.dist2)
        } else {
            self.r2
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn into_list(self) -> NeighborList {
        NeighborList {
            entries: self.heap.into_sorted_vec(),
        }
    }
}

/// Exhaustive reference search.
pub fn brute_force_search(
    cloud: &PointCloud,
    query: &Point3,
    r: f64,
    k_max: usize,
    exclude: Option<u32>,
) -> NeighborList {
    let mut all: Vec<Neighbor> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| Neighbor {
            index: i as u32,
            dist2: query.dist2(p),
        })
        .filter(|n| n.dist2 <= r * r && Some(n.index) != exclude)
        .collect();
    all.sort_unstable();
    all.truncate(k_max);
    NeighborList { entries: all }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchTrace {
    pub visits: u64,
    /// Roots of subtrees skipped by the half-space test.
    pub pruned: Vec<NodeId>,
}

/// Exact K-d search with unrestricted backtracking.
pub fn kdtree_search(
    tree: &KdTree,
    query: &Point3,
    r: f64,
    k_max: usize,
    exclude: Option<u32>,
) -> NeighborList {
    kdtree_search_traced(tree, query, r, k_max, exclude, false).0
}

pub fn kdtree_search_traced(
    tree: &KdTree,
    query: &Point3,
    r: f64,
    k_max: usize,
    exclude: Option<u32>,
    record_pruned: bool,
) -> (NeighborList, SearchTrace) {
    let mut walk = KdWalk::new(*query, Candidates::new(r, k_max, exclude), tree.root());
    if record_pruned {
        walk.record_pruned();
    }
    while let Some(node) = walk.next_target(tree) {
        walk.on_grant(tree, node);
    }
    let trace = SearchTrace {
        visits: walk.visits(),
        pruned: walk.take_pruned(),
    };
    (walk.into_candidates().into_list(), trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_cloud, CloudKind, QueryBatch};
    use crate::kdtree::build_kdtree;

    fn corners() -> PointCloud {
        generate_cloud(CloudKind::Grid, 8, 0).unwrap()
    }

    #[test]
    fn self_match_at_distance_zero() {
        let c = corners();
        let q = *c.point(5);
        let l = brute_force_search(&c, &q, 0.1, 1, None);
        assert_eq!(l.entries, vec![Neighbor { index: 5, dist2: 0.0 }]);
        assert_eq!(kdtree_search(&build_kdtree(&c), &q, 0.1, 1, None), l);
    }

    #[test]
    fn cube_corners_from_origin() {
        // hand enumeration: distances from the origin to the 8 corners, grid
        // order (0,0,0),(0,0,1),(0,1,0),(0,1,1),(1,0,0),(1,0,1),(1,1,0),(1,1,1)
        // are 0,1,1,sqrt2,1,sqrt2,sqrt2,sqrt3; within 1.5 the 4 closest are
        // indices 0 | 1,2,4 (ties by index)
        let c = corners();
        let q = Point3::new(0., 0., 0.);
        let l = brute_force_search(&c, &q, 1.5, 4, None);
        assert_eq!(l.indices().collect::<Vec<_>>(), vec![0, 1, 2, 4]);
        let d: Vec<f64> = l.entries.iter().map(|n| n.distance()).collect();
        assert_eq!(d, vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(kdtree_search(&build_kdtree(&c), &q, 1.5, 4, None), l);
    }

    #[test]
    fn radius_excludes_everything() {
        let c = corners();
        let q = Point3::new(0.5, 0.5, 0.5);
        assert!(brute_force_search(&c, &q, 0.1, 8, None).is_empty());
        assert!(kdtree_search(&build_kdtree(&c), &q, 0.1, 8, None).is_empty());
    }

    #[test]
    fn single_node_tree() {
        let c = PointCloud::new("one", vec![Point3::new(1., 1., 1.)]).unwrap();
        let t = build_kdtree(&c);
        let l = kdtree_search(&t, &Point3::new(1.1, 1., 1.), 0.5, 3, None);
        assert_eq!(l.indices().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn exclusion_drops_only_that_index() {
        let c = PointCloud::new("dup", vec![Point3::new(0., 0., 0.); 3]).unwrap();
        let l = brute_force_search(&c, c.point(1), 1.0, 5, Some(1));
        assert_eq!(l.indices().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(kdtree_search(&build_kdtree(&c), c.point(1), 1.0, 5, Some(1)), l);
    }

    #[test]
    fn full_radius_returns_everything_sorted() {
        let c = generate_cloud(CloudKind::UniformCube, 500, 3).unwrap();
        let t = build_kdtree(&c);
        let q = Point3::new(0.3, 0.6, 0.2);
        let l = kdtree_search(&t, &q, c.diameter(), c.len(), None);
        // full-sort oracle
        let mut all: Vec<(f64, u32)> =
            c.points().iter().enumerate().map(|(i, p)| (q.dist2(p), i as u32)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(l.indices().collect::<Vec<_>>(), all.iter().map(|a| a.1).collect::<Vec<_>>());
    }

    #[test]
    fn kd_matches_brute_force_on_10k_cloud() {
        let c = generate_cloud(CloudKind::UniformCube, 10_000, 21).unwrap();
        let t = build_kdtree(&c);
        let q = QueryBatch::sample_from_cloud(&c, 1000, 4).unwrap();
        for (i, p) in q.queries().iter().enumerate() {
            let r = 0.02 + (i % 7) as f64 * 0.01;
            let k = 1 + i % 40;
            assert_eq!(
                kdtree_search(&t, p, r, k, None),
                brute_force_search(&c, p, r, k, None),
                "query {i}"
            );
        }
    }

    #[test]
    fn visits_bounded_and_pruned_on_small_radius() {
        let c = generate_cloud(CloudKind::UniformCube, 4096, 8).unwrap();
        let t = build_kdtree(&c);
        let q = QueryBatch::sample_from_cloud(&c, 200, 1).unwrap();
        for p in q.queries() {
            // ball of radius 0.1 covers ~0.4% of the unit cube
            let (_, trace) = kdtree_search_traced(&t, p, 0.1, 4096, None, false);
            assert!(trace.visits < c.len() as u64, "visits {}", trace.visits);
            let (_, trace) = kdtree_search_traced(&t, p, 10.0, 4096, None, false);
            assert!(trace.visits <= c.len() as u64);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (PointCloud, Point3, f64, usize)> {
            (1usize..2048, any::<u64>(), 0u8..3).prop_flat_map(|(n, seed, kind)| {
                let kind = [CloudKind::UniformCube, CloudKind::GaussianClusters, CloudKind::Grid][kind as usize];
                let cloud = generate_cloud(kind, n, seed).unwrap();
                (
                    Just(cloud),
                    prop::array::uniform3(-0.1f32..1.1).prop_map(Point3),
                    0.001f64..0.6,
                    1usize..64,
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn kd_equals_brute_force((cloud, q, r, k) in instance()) {
                let t = build_kdtree(&cloud);
                prop_assert_eq!(kdtree_search(&t, &q, r, k, None), brute_force_search(&cloud, &q, r, k, None));
            }

            #[test]
            fn pruned_subtrees_hold_no_missed_neighbor((cloud, q, r, k) in instance()) {
                let t = build_kdtree(&cloud);
                let (list, trace) = kdtree_search_traced(&t, &q, r, k, None, true);
                prop_assert!(trace.visits <= cloud.len() as u64);
                let worst = list.entries.last().copied();
                for &root in &trace.pruned {
                    for id in t.subtree_ids(root) {
                        let n = t.node(id);
                        let cand = Neighbor { index: n.point_index, dist2: q.dist2(&n.point) };
                        if cand.dist2 <= r * r {
                            // only allowed when the list is full and ranks ahead of it
                            prop_assert_eq!(list.len(), k);
                            prop_assert!(cand > worst.unwrap());
                        }
                    }
                }
            }
        }
    }
}
