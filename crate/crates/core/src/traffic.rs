//! DRAM traffic classification, energy accounting and the prior-accelerator
//! baselines.

use std::io::{self, Write};
use std::num::NonZeroUsize;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::QueryBatch;
use crate::kdtree::{NodeId, SplitTree};
use crate::memsim::{SimStats, SramAccesses};

pub const NODE_BYTES: u64 = 16;
pub const QUERY_BYTES: u64 = 16;
pub const INDEX_BYTES: u64 = 4;
pub const WORD_BYTES: u64 = 4;

/// Per-access energies in integer units of `1 / scale`, so every sum is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub scale: u64,
    pub e_sram: u64,
    pub e_dram_stream: u64,
    pub e_dram_random: u64,
}

impl Default for EnergyModel {
    /// SRAM 1, streaming DRAM 25/3, random DRAM 25.
    fn default() -> Self {
        EnergyModel {
            scale: 3,
            e_sram: 3,
            e_dram_stream: 25,
            e_dram_random: 75,
        }
    }
}

impl EnergyModel {
    /// Build from unscaled per-access energies. Each value times `scale` must
    /// be a whole number.
    pub fn from_units(scale: u64, e_sram: f64, e_dram_stream: f64, e_dram_random: f64) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("energy scale must be at least 1"));
        }
        let conv = |name: &str, v: f64| -> Result<u64> {
            let scaled = v * scale as f64;
            let r = scaled.round();
            if !(v.is_finite() && v >= 0.0) || (scaled - r).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "{name} = {v} is not a non-negative multiple of 1/{scale}"
                )));
            }
            Ok(r as u64)
        };
        Ok(EnergyModel {
            scale,
            e_sram: conv("e_sram", e_sram)?,
            e_dram_stream: conv("e_dram_stream", e_dram_stream)?,
            e_dram_random: conv("e_dram_random", e_dram_random)?,
        })
    }

    pub fn to_units(&self, scaled: i128) -> f64 {
        scaled as f64 / self.scale as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueConfig {
    /// Queries a sub-tree's result-buffer queue holds before it is flushed.
    pub capacity: u32,
}

impl Default for QueueConfig {
    /// 1.5 KB of 16-byte query records.
    fn default() -> Self {
        QueueConfig { capacity: 96 }
    }
}

impl QueueConfig {
    pub fn new(capacity: u32) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("queue capacity must be at least 1"));
        }
        Ok(QueueConfig { capacity })
    }

    /// Flush bursts for `queries` arrivals: full bursts plus a final partial one.
    pub fn flushes(&self, queries: u32) -> u64 {
        u64::from(queries.div_ceil(self.capacity))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrafficReport {
    pub queries_in: u64,
    pub top_tree_in: u64,
    pub queue_flush_out: u64,
    pub subtree_stream_in: u64,
    pub subtree_queries_in: u64,
    pub results_out: u64,
    /// Tree-node fetches that missed on-chip storage (monolithic search only).
    pub tree_random_in: u64,
    pub streaming_bytes: u64,
    pub random_bytes: u64,
    pub flush_bursts: u64,
    pub subtree_loads: u64,
    pub sram: SramAccesses,
}

impl TrafficReport {
    pub fn total_bytes(&self) -> u64 {
        self.streaming_bytes + self.random_bytes
    }

    fn finish(mut self) -> Self {
        self.streaming_bytes = self.queries_in
            + self.top_tree_in
            + self.queue_flush_out
            + self.subtree_stream_in
            + self.subtree_queries_in
            + self.results_out;
        self.random_bytes = self.tree_random_in;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

fn subtree_bytes(split: &SplitTree, s: usize) -> u64 {
    split.subtree_nodes(s).len() as u64 * NODE_BYTES
}

fn account(split: &SplitTree, stats: &SimStats, queue: &QueueConfig, loads: impl Fn(usize, u32) -> u64) -> TrafficReport {
    let q = stats.queries as u64;
    let has_top = split.top_tree_nodes() > 0;
    let mut r = TrafficReport {
        sram: stats.sram,
        subtree_queries_in: q * QUERY_BYTES,
        results_out: q * stats.k_max as u64 * INDEX_BYTES,
        ..Default::default()
    };
    if has_top {
        r.queries_in = q * QUERY_BYTES;
        r.top_tree_in = split.top_tree_nodes() as u64 * NODE_BYTES;
        r.queue_flush_out = q * QUERY_BYTES;
        r.flush_bursts = stats.subtree_queries.iter().map(|&n| queue.flushes(n)).sum();
    }
    for (s, &n) in stats.subtree_queries.iter().enumerate() {
        let l = loads(s, n);
        r.subtree_loads += l;
        r.subtree_stream_in += l * subtree_bytes(split, s);
    }
    r.finish()
}

/// Split-tree DRAM traffic: everything streams, and each sub-tree with routed
/// queries is loaded exactly once.
pub fn account_split_tree(split: &SplitTree, batch: &QueryBatch, stats: &SimStats, queue: &QueueConfig) -> TrafficReport {
    debug_assert_eq!(batch.len(), stats.queries);
    account(split, stats, queue, |s, _| u64::from(stats.subtree_loads[s]))
}

/// Reload-per-flush baseline: a sub-tree is streamed again for every queue
/// flush, i.e. `ceil(routed / capacity)` times. A tree with a single
/// sub-tree never has to evict it, so it loads once.
pub fn baseline_reload(split: &SplitTree, batch: &QueryBatch, stats: &SimStats, queue: &QueueConfig) -> TrafficReport {
    debug_assert_eq!(batch.len(), stats.queries);
    let resident = split.subtree_count() == 1;
    account(split, stats, queue, |_, n| {
        if resident {
            u64::from(n > 0)
        } else {
            queue.flushes(n)
        }
    })
}

/// Monolithic search with the tree resident in DRAM behind an LRU node cache.
/// `accesses` is the tree-buffer address trace of an unsplit run.
pub fn baseline_monolithic(accesses: &[NodeId], stats: &SimStats, cache_bytes: u64) -> TrafficReport {
    let q = stats.queries as u64;
    let lines = (cache_bytes / NODE_BYTES) as usize;
    let mut misses = 0u64;
    if let Some(cap) = NonZeroUsize::new(lines) {
        let mut cache = LruCache::new(cap);
        for &a in accesses {
            if cache.get(&a).is_none() {
                misses += 1;
                cache.put(a, ());
            }
        }
    } else {
        misses = accesses.len() as u64;
    }
    TrafficReport {
        queries_in: q * QUERY_BYTES,
        results_out: q * stats.k_max as u64 * INDEX_BYTES,
        tree_random_in: misses * NODE_BYTES,
        sram: stats.sram,
        ..Default::default()
    }
    .finish()
}

pub const DEFAULT_CACHE_BYTES: u64 = 6 * 1024;

/// Energy in scaled units, by class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EnergyReport {
    pub scale: u64,
    pub dram_streaming: i128,
    pub dram_random: i128,
    pub sram_search: i128,
    pub sram_aggregation: i128,
    pub total: i128,
}

impl EnergyReport {
    pub fn total_units(&self) -> f64 {
        self.total as f64 / self.scale as f64
    }
}

pub fn energy_report(report: &TrafficReport, model: &EnergyModel) -> EnergyReport {
    let words = |b: u64| i128::from(b / WORD_BYTES);
    let dram_streaming = words(report.streaming_bytes) * i128::from(model.e_dram_stream);
    let dram_random = words(report.random_bytes) * i128::from(model.e_dram_random);
    let s = &report.sram;
    let sram_search = i128::from(s.tree_buffer + s.query_buffer + s.result_buffer) * i128::from(model.e_sram);
    let sram_aggregation = i128::from(s.point_buffer) * i128::from(model.e_sram);
    EnergyReport {
        scale: model.scale,
        dram_streaming,
        dram_random,
        sram_search,
        sram_aggregation,
        total: dram_streaming + dram_random + sram_search + sram_aggregation,
    }
}

/// Baseline energy minus ours, split four ways. Components are signed and
/// sum exactly to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Savings {
    pub scale: u64,
    pub random_to_streaming: i128,
    pub dram_traffic: i128,
    pub sram_search: i128,
    pub sram_aggregation: i128,
    pub total: i128,
}

impl Savings {
    pub fn components(&self) -> [(&'static str, i128); 4] {
        [
            ("random_to_streaming", self.random_to_streaming),
            ("dram_traffic_reduction", self.dram_traffic),
            ("sram_search_reduction", self.sram_search),
            ("sram_aggregation_reduction", self.sram_aggregation),
        ]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SAVINGS_CSV_HEADER}")?;
        for (name, v) in self.components() {
            writeln!(w, "{SAVINGS_CSV_VERSION},{name},{v},{}", v as f64 / self.scale as f64)?;
        }
        Ok(())
    }
}

pub const SAVINGS_CSV_VERSION: u32 = 1;
pub const SAVINGS_CSV_HEADER: &str = "version,component,scaled_units,energy";

pub fn savings(baseline: &TrafficReport, ours: &TrafficReport, model: &EnergyModel) -> Savings {
    let w = |b: u64| i128::from(b / WORD_BYTES);
    let (es, er, esram) = (
        i128::from(model.e_dram_stream),
        i128::from(model.e_dram_random),
        i128::from(model.e_sram),
    );
    let random_to_streaming = (w(baseline.random_bytes) - w(ours.random_bytes)) * (er - es);
    let dram_traffic = (w(baseline.total_bytes()) - w(ours.total_bytes())) * es;
    let search = |s: &SramAccesses| i128::from(s.tree_buffer + s.query_buffer + s.result_buffer);
    let sram_search = (search(&baseline.sram) - search(&ours.sram)) * esram;
    let sram_aggregation = (i128::from(baseline.sram.point_buffer) - i128::from(ours.sram.point_buffer)) * esram;
    Savings {
        scale: model.scale,
        random_to_streaming,
        dram_traffic,
        sram_search,
        sram_aggregation,
        total: energy_report(baseline, model).total - energy_report(ours, model).total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_cloud, CloudKind, Point3, PointCloud};
    use crate::kdtree::{build_kdtree, split_tree};
    use crate::memsim::{simulate, BankConfig, PEConfig, SimOptions};
    use crate::split_search::SearchConfig;

    fn run(split: &SplitTree, batch: &QueryBatch) -> SimStats {
        let pes = PEConfig::new(4).unwrap();
        let banks = BankConfig::tree_buffer(4, pes).unwrap();
        let cfg = SearchConfig::new(split.h_t(), split.height(), 0.05, 8);
        simulate(split, batch, &cfg, &banks, &pes, SimOptions::default()).unwrap().stats
    }

    /// 2047 points, H = 11, h_t = 2: two sub-trees of 1023 nodes.
    fn two_subtrees() -> (PointCloud, SplitTree) {
        let c = generate_cloud(CloudKind::UniformCube, 2047, 1).unwrap();
        let s = split_tree(build_kdtree(&c), 2, 1 << 11).unwrap();
        assert_eq!(s.subtree_count(), 2);
        assert!(s.subtree_nodes(0).len() == 1023 && s.subtree_nodes(1).len() == 1023);
        (c, s)
    }

    /// `n` queries all routed into the root's left sub-tree.
    fn left_queries(s: &SplitTree, n: usize) -> QueryBatch {
        let root = s.tree().node(0);
        let x = root.split_value() - 0.01;
        QueryBatch::new((0..n).map(|i| Point3::new(x, i as f32 / n as f32, 0.5)).collect()).unwrap()
    }

    #[test]
    fn one_subtree_streamed_once() {
        let (_, s) = two_subtrees();
        let b = left_queries(&s, 100);
        let stats = run(&s, &b);
        let r = account_split_tree(&s, &b, &stats, &QueueConfig::default());
        assert_eq!(r.subtree_stream_in, 16_368);
        assert_eq!(r.subtree_loads, 1);
        assert_eq!(r.random_bytes, 0);
        assert_eq!(r.flush_bursts, 2);
        assert_eq!(r.queries_in, 1600);
        assert_eq!(r.top_tree_in, 16);
        assert_eq!(r.results_out, 100 * 8 * 4);
        assert_eq!(r.total_bytes(), 1600 + 16 + 1600 + 16_368 + 1600 + 3200);
    }

    #[test]
    fn flush_burst_arithmetic() {
        let q = QueueConfig::default();
        assert_eq!(q.flushes(100), 2);
        assert_eq!(q.flushes(96), 1);
        assert_eq!(q.flushes(0), 0);
        assert!(QueueConfig::new(0).is_err());
    }

    #[test]
    fn reload_matches_when_nothing_overflows_and_triples_at_three_flushes() {
        let (_, s) = two_subtrees();
        let b = left_queries(&s, 24);
        let stats = run(&s, &b);
        let ours = account_split_tree(&s, &b, &stats, &QueueConfig::new(24).unwrap());
        assert_eq!(baseline_reload(&s, &b, &stats, &QueueConfig::new(24).unwrap()), ours);
        let three = baseline_reload(&s, &b, &stats, &QueueConfig::new(8).unwrap());
        assert_eq!(three.subtree_stream_in, 3 * ours.subtree_stream_in);
        assert_eq!(three.total_bytes() - ours.total_bytes(), 2 * 16_368);
    }

    #[test]
    fn no_split_has_no_top_traffic() {
        let c = generate_cloud(CloudKind::UniformCube, 500, 2).unwrap();
        let s = split_tree(build_kdtree(&c), 0, 1 << 9).unwrap();
        let b = QueryBatch::sample_from_cloud(&c, 50, 3).unwrap();
        let stats = run(&s, &b);
        let r = account_split_tree(&s, &b, &stats, &QueueConfig::default());
        assert_eq!(r.queries_in + r.queue_flush_out + r.top_tree_in + r.flush_bursts, 0);
        assert_eq!(r.subtree_stream_in, 500 * 16);
        // a lone sub-tree stays resident across flushes
        assert_eq!(baseline_reload(&s, &b, &stats, &QueueConfig::new(10).unwrap()), r);
    }

    #[test]
    fn default_energy_ratios() {
        let m = EnergyModel::default();
        assert_eq!(m.e_dram_random, 3 * m.e_dram_stream);
        assert_eq!(m.e_dram_random, 25 * m.e_sram);
        assert_eq!(EnergyModel::from_units(3, 1.0, 25.0 / 3.0, 25.0).unwrap(), m);
        assert!(EnergyModel::from_units(3, 0.5, 1.0, 1.0).is_err());
        assert_eq!(m.to_units(i128::from(m.e_dram_stream)), 25.0 / 3.0);
    }

    #[test]
    fn identical_reports_save_nothing() {
        let r = TrafficReport {
            queries_in: 64,
            tree_random_in: 32,
            sram: SramAccesses {
                tree_buffer: 7,
                point_buffer: 3,
                ..Default::default()
            },
            ..Default::default()
        }
        .finish();
        let s = savings(&r, &r, &EnergyModel::default());
        assert_eq!(s.components().map(|c| c.1), [0; 4]);
        assert_eq!(s.total, 0);
    }

    #[test]
    fn conversion_component_for_pure_reclassification() {
        let bytes = 4096;
        let random = TrafficReport {
            tree_random_in: bytes,
            ..Default::default()
        }
        .finish();
        let stream = TrafficReport {
            subtree_stream_in: bytes,
            ..Default::default()
        }
        .finish();
        let m = EnergyModel::default();
        let s = savings(&random, &stream, &m);
        // bytes/4 * (25 - 25/3) units, i.e. bytes/4 * 50 in thirds
        assert_eq!(s.random_to_streaming, i128::from(bytes / 4) * 50);
        assert!((m.to_units(s.random_to_streaming) - (bytes / 4) as f64 * (25.0 - 25.0 / 3.0)).abs() < 1e-9);
        assert_eq!(s.dram_traffic, 0);
        assert_eq!(s.total, s.random_to_streaming);
    }

    #[test]
    fn energy_total_formula() {
        let r = TrafficReport {
            queries_in: 40,
            tree_random_in: 8,
            sram: SramAccesses {
                tree_buffer: 5,
                query_buffer: 1,
                result_buffer: 1,
                point_buffer: 2,
            },
            ..Default::default()
        }
        .finish();
        let e = energy_report(&r, &EnergyModel::default());
        // 10 streaming words * 25/3 + 2 random words * 25 + 9 SRAM * 1, all times 3
        assert_eq!(e.total, 10 * 25 + 2 * 75 + 9 * 3);
        assert!((e.total_units() - (250.0 / 3.0 + 50.0 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn savings_csv() {
        let a = TrafficReport {
            tree_random_in: 16,
            ..Default::default()
        }
        .finish();
        let b = TrafficReport::default().finish();
        let mut out = Vec::new();
        savings(&a, &b, &EnergyModel::default()).write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], SAVINGS_CSV_HEADER);
        assert_eq!(lines[1], "1,random_to_streaming,200,66.66666666666667");
        assert_eq!(lines[2], "1,dram_traffic_reduction,100,33.333333333333336");
    }

    /// Straightforward LRU over a recency list.
    fn naive_misses(trace: &[NodeId], lines: usize) -> u64 {
        let mut recent: Vec<NodeId> = Vec::new();
        let mut misses = 0;
        for &a in trace {
            if let Some(p) = recent.iter().position(|&x| x == a) {
                recent.remove(p);
            } else {
                misses += 1;
                if recent.len() == lines && lines > 0 {
                    recent.remove(0);
                }
            }
            if lines > 0 {
                recent.push(a);
            }
        }
        misses
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_report() -> impl Strategy<Value = TrafficReport> {
            (
                prop::array::uniform6(0u64..1 << 30),
                0u64..1 << 30,
                prop::array::uniform4(0u64..1 << 30),
            )
                .prop_map(|(s, rnd, sr)| {
                    TrafficReport {
                        queries_in: s[0] * 4,
                        top_tree_in: s[1] * 4,
                        queue_flush_out: s[2] * 4,
                        subtree_stream_in: s[3] * 4,
                        subtree_queries_in: s[4] * 4,
                        results_out: s[5] * 4,
                        tree_random_in: rnd * 4,
                        sram: SramAccesses {
                            tree_buffer: sr[0],
                            query_buffer: sr[1],
                            result_buffer: sr[2],
                            point_buffer: sr[3],
                        },
                        ..Default::default()
                    }
                    .finish()
                })
        }

        proptest! {
            #[test]
            fn savings_conserve_exactly(a in arb_report(), b in arb_report(),
                                        s in 1u64..10, es in 0u64..100, ed in 0u64..100, er in 0u64..400) {
                let m = EnergyModel { scale: s, e_sram: es, e_dram_stream: ed, e_dram_random: er };
                let sv = savings(&a, &b, &m);
                let sum: i128 = sv.components().iter().map(|c| c.1).sum();
                prop_assert_eq!(sum, sv.total);
                prop_assert_eq!(sv.total, energy_report(&a, &m).total - energy_report(&b, &m).total);
            }

            #[test]
            fn lru_matches_naive(trace in prop::collection::vec(0u32..40, 0..300), lines in 0usize..12) {
                let stats = {
                    let c = generate_cloud(CloudKind::UniformCube, 10, 1).unwrap();
                    let s = split_tree(build_kdtree(&c), 0, 16).unwrap();
                    let b = QueryBatch::from_cloud(&c);
                    run(&s, &b)
                };
                let r = baseline_monolithic(&trace, &stats, lines as u64 * NODE_BYTES);
                prop_assert_eq!(r.tree_random_in, naive_misses(&trace, lines) * NODE_BYTES);
                prop_assert_eq!(r.random_bytes, r.tree_random_in);
            }

            #[test]
            fn reload_dominates(n in 100usize..3000, seed in any::<u64>(), h_t in 1u32..7, cap in 1u32..40,
                                clustered in any::<bool>()) {
                let kind = if clustered { CloudKind::GaussianClusters } else { CloudKind::UniformCube };
                let c = generate_cloud(kind, n, seed).unwrap();
                let t = build_kdtree(&c);
                let h = t.height();
                let s = split_tree(t, h_t.min(h), 1 << h).unwrap();
                let b = QueryBatch::sample_from_cloud(&c, 120, seed ^ 9).unwrap();
                let stats = run(&s, &b);
                let q = QueueConfig::new(cap).unwrap();
                let ours = account_split_tree(&s, &b, &stats, &q);
                let reload = baseline_reload(&s, &b, &stats, &q);
                prop_assert!(reload.total_bytes() >= ours.total_bytes());
                let overflow = s.subtree_count() > 1 && stats.subtree_queries.iter().any(|&x| x > cap);
                prop_assert_eq!(reload.total_bytes() > ours.total_bytes(), overflow);
                prop_assert_eq!(ours.random_bytes, 0);
            }
        }
    }
}
