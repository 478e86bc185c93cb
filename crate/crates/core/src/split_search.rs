//! Timing-free semantics of the two-stage approximate search.
//!
//! Stage one routes every query down the top-tree into one sub-tree queue;
//! stage two searches each sub-tree for its queued queries, backtracking only
//! inside that sub-tree. The stages run strictly one after the other.

use std::collections::HashSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_search::{Candidates, NeighborList};
use crate::geometry::QueryBatch;
use crate::kdtree::SplitTree;
use crate::traversal::{DescentWalk, Job, KdWalk};

/// Approximation knobs plus the query shape. `(h_t, h_e)` is the
/// approximation vector sampled per batch by approximation-aware training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Top-tree height; 0 disables the split.
    pub h_t: u32,
    /// Elision height on global tree levels; fetches strictly below it may be
    /// elided. `h_e = H` disables elision.
    pub h_e: u32,
    pub radius: f64,
    pub k_max: usize,
    /// Keep a self-query's own point in its result.
    pub include_self: bool,
    /// Distance-test top-tree nodes on the routing path and merge hits.
    pub seed_top_path: bool,
}

impl SearchConfig {
    pub fn new(h_t: u32, h_e: u32, radius: f64, k_max: usize) -> Self {
        SearchConfig {
            h_t,
            h_e,
            radius,
            k_max,
            include_self: true,
            seed_top_path: true,
        }
    }

    /// Exact configuration for a tree of height `height`.
    pub fn exact(height: u32, radius: f64, k_max: usize) -> Self {
        Self::new(0, height, radius, k_max)
    }

    pub fn validate(&self, split: &SplitTree) -> Result<()> {
        let height = split.height();
        if self.h_t != split.h_t() {
            return Err(Error::invalid(format!(
                "config h_t = {} but the tree was split at h_t = {}",
                self.h_t,
                split.h_t()
            )));
        }
        if self.h_e < 1 || self.h_e > height {
            return Err(Error::invalid(format!(
                "h_e = {} outside permissible range [1, {height}]",
                self.h_e
            )));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::invalid(format!("radius must be positive and finite, got {}", self.radius)));
        }
        if self.k_max == 0 {
            return Err(Error::invalid("k_max must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn candidates(&self, batch: &QueryBatch, qid: usize) -> Candidates {
        let exclude = if self.include_self {
            None
        } else {
            batch.self_index(qid)
        };
        Candidates::new(self.radius, self.k_max, exclude)
    }
}

/// Output of the routing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedQueries {
    /// Query ids queued per sub-tree, in arrival order.
    pub lists: Vec<Vec<u32>>,
    /// Per-query hits among the top-tree nodes visited on the way down.
    pub seeds: Vec<NeighborList>,
    /// Per-query sub-tree assignment.
    pub assignment: Vec<u32>,
    /// Per-query top-tree node visits.
    pub top_visits: Vec<u64>,
    /// Top-tree node visits summed over queries.
    pub visits: u64,
}

pub fn route_queries(split: &SplitTree, batch: &QueryBatch, cfg: &SearchConfig) -> RoutedQueries {
    let tree = split.tree();
    let mut lists = vec![Vec::new(); split.subtree_count()];
    let mut seeds = Vec::with_capacity(batch.len());
    let mut assignment = Vec::with_capacity(batch.len());
    let mut top_visits = Vec::with_capacity(batch.len());
    for (qid, q) in batch.queries().iter().enumerate() {
        let mut walk = DescentWalk::new(split, *q, cfg.candidates(batch, qid), cfg.seed_top_path);
        while let Some(node) = walk.next_target(tree) {
            walk.on_grant(tree, node);
        }
        top_visits.push(walk.visits());
        let s = walk.route().expect("descent finished");
        lists[s].push(qid as u32);
        assignment.push(s as u32);
        seeds.push(walk.into_candidates().into_list());
    }
    RoutedQueries {
        lists,
        seeds,
        assignment,
        visits: top_visits.iter().sum(),
        top_visits,
    }
}

/// Candidate set for a query entering its sub-tree, pre-loaded with its seeds.
pub(crate) fn seeded_candidates(
    batch: &QueryBatch,
    cfg: &SearchConfig,
    qid: usize,
    seeds: &NeighborList,
) -> Candidates {
    let mut c = cfg.candidates(batch, qid);
    for n in &seeds.entries {
        c.offer(n.index, n.dist2);
    }
    c
}

/// Per-query result of searching one sub-tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtreeResult {
    pub qid: u32,
    pub list: NeighborList,
    pub visits: u64,
}

pub fn subtree_search(
    split: &SplitTree,
    subtree: usize,
    routed: &RoutedQueries,
    batch: &QueryBatch,
    cfg: &SearchConfig,
) -> Vec<SubtreeResult> {
    let tree = split.tree();
    let root = split.subtree_roots()[subtree];
    routed.lists[subtree]
        .iter()
        .map(|&qid| {
            let q = batch.queries()[qid as usize];
            let cands = seeded_candidates(batch, cfg, qid as usize, &routed.seeds[qid as usize]);
            let mut walk = KdWalk::new(q, cands, root);
            while let Some(node) = walk.next_target(tree) {
                walk.on_grant(tree, node);
            }
            SubtreeResult {
                qid,
                visits: walk.visits(),
                list: walk.into_candidates().into_list(),
            }
        })
        .collect()
}

/// Fixed-width neighbor index matrix. Short rows are padded by replicating a
/// donor index: the nearest hit, else the query's own index in self-query
/// mode, else the routed sub-tree root's point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMatrix {
    k_max: usize,
    rows: Vec<u32>,
    valid_counts: Vec<u32>,
    replicated: Vec<u32>,
}

pub const NEIGHBORS_CSV_VERSION: u32 = 1;

impl NeighborMatrix {
    /// `fallback[i]` is the donor for row `i` when it has no hits.
    pub fn from_lists(lists: &[NeighborList], fallback: &[u32], k_max: usize) -> Self {
        assert_eq!(lists.len(), fallback.len());
        let mut rows = Vec::with_capacity(lists.len() * k_max);
        let mut valid_counts = Vec::with_capacity(lists.len());
        let mut replicated = Vec::with_capacity(lists.len());
        for (list, &fb) in lists.iter().zip(fallback) {
            let valid = list.len().min(k_max);
            rows.extend(list.indices().take(valid));
            let donor = list.entries.first().map_or(fb, |n| n.index);
            rows.extend(std::iter::repeat_n(donor, k_max - valid));
            valid_counts.push(valid as u32);
            replicated.push((k_max - valid) as u32);
        }
        NeighborMatrix {
            k_max,
            rows,
            valid_counts,
            replicated,
        }
    }

    /// Build directly from full rows; used by the bindings boundary and tests.
    pub fn from_rows(rows: Vec<Vec<u32>>, valid_counts: Vec<u32>, k_max: usize) -> Result<Self> {
        if rows.len() != valid_counts.len() {
            return Err(Error::invalid("rows and valid_counts differ in length"));
        }
        let mut flat = Vec::with_capacity(rows.len() * k_max);
        let mut replicated = Vec::with_capacity(rows.len());
        for (i, (row, &v)) in rows.iter().zip(&valid_counts).enumerate() {
            if row.len() != k_max || v as usize > k_max {
                return Err(Error::invalid(format!("row {i} does not have {k_max} entries")));
            }
            flat.extend_from_slice(row);
            replicated.push(k_max as u32 - v);
        }
        Ok(NeighborMatrix {
            k_max,
            rows: flat,
            valid_counts,
            replicated,
        })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn query_count(&self) -> usize {
        self.valid_counts.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i * self.k_max..(i + 1) * self.k_max]
    }

    /// Entries found by the search, without replication padding.
    pub fn valid_row(&self, i: usize) -> &[u32] {
        &self.row(i)[..self.valid_counts[i] as usize]
    }

    pub fn valid_counts(&self) -> &[u32] {
        &self.valid_counts
    }

    pub fn replicated(&self) -> &[u32] {
        &self.replicated
    }

    /// `qid,n1..nk,valid,replicated`
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "qid")?;
        for j in 1..=self.k_max {
            write!(w, ",n{j}")?;
        }
        writeln!(w, ",valid,replicated")?;
        for i in 0..self.query_count() {
            write!(w, "{i}")?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", self.valid_counts[i], self.replicated[i])?;
        }
        Ok(())
    }
}

/// Everything the functional search learned, beyond the matrix.
#[derive(Debug, Clone)]
pub struct ApproxResult {
    pub matrix: NeighborMatrix,
    pub lists: Vec<NeighborList>,
    pub per_query_visits: Vec<u64>,
    pub routed: RoutedQueries,
    /// Times each sub-tree was processed (each must be exactly once).
    pub subtree_passes: Vec<u32>,
}

impl ApproxResult {
    pub fn total_visits(&self) -> u64 {
        self.per_query_visits.iter().sum()
    }
}

/// Replication donor for rows without hits.
pub(crate) fn fallback_donors(split: &SplitTree, batch: &QueryBatch, assignment: &[u32]) -> Vec<u32> {
    (0..batch.len())
        .map(|qid| {
            batch.self_index(qid).unwrap_or_else(|| {
                let root = split.subtree_roots()[assignment[qid] as usize];
                split.tree().node(root).point_index
            })
        })
        .collect()
}

pub fn approximate_search_detailed(
    split: &SplitTree,
    batch: &QueryBatch,
    cfg: &SearchConfig,
) -> Result<ApproxResult> {
    cfg.validate(split)?;
    let routed = route_queries(split, batch, cfg);
    let mut lists = vec![NeighborList::default(); batch.len()];
    let mut per_query_visits = routed.top_visits.clone();
    let mut subtree_passes = vec![0u32; split.subtree_count()];
    for (s, passes) in subtree_passes.iter_mut().enumerate() {
        *passes += 1;
        for r in subtree_search(split, s, &routed, batch, cfg) {
            per_query_visits[r.qid as usize] += r.visits;
            lists[r.qid as usize] = r.list;
        }
    }
    let donors = fallback_donors(split, batch, &routed.assignment);
    Ok(ApproxResult {
        matrix: NeighborMatrix::from_lists(&lists, &donors, cfg.k_max),
        lists,
        per_query_visits,
        routed,
        subtree_passes,
    })
}

pub fn approximate_search(split: &SplitTree, batch: &QueryBatch, cfg: &SearchConfig) -> Result<NeighborMatrix> {
    Ok(approximate_search_detailed(split, batch, cfg)?.matrix)
}

/// Mean over queries of `|found ∩ exact| / |exact|`, counting only searched
/// (non-replicated) entries. Rows with an empty exact set score 1.
pub fn recall(approx: &NeighborMatrix, exact: &[NeighborList]) -> Result<f64> {
    Ok(per_query_recall(approx, exact)?.iter().sum::<f64>() / exact.len().max(1) as f64)
}

pub fn per_query_recall(approx: &NeighborMatrix, exact: &[NeighborList]) -> Result<Vec<f64>> {
    if approx.query_count() != exact.len() {
        return Err(Error::invalid(format!(
            "recall shape mismatch: {} approximate rows vs {} exact rows",
            approx.query_count(),
            exact.len()
        )));
    }
    Ok(exact
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            if ex.is_empty() {
                return 1.0;
            }
            let found: HashSet<u32> = approx.valid_row(i).iter().copied().collect();
            ex.indices().filter(|x| found.contains(x)).count() as f64 / ex.len() as f64
        })
        .collect())
}
