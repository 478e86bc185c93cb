//! Cycle model of the PE array sharing a banked tree buffer.
//!
//! Every cycle each busy PE issues one tree-buffer read. Requests to the same
//! bank conflict: the lowest PE wins, the rest stall and retry, unless
//! elision is on and the target sits strictly below the elision height, in
//! which case the loser drops the node (and everything beneath it) and moves
//! on to the next item on its stack.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_search::{Candidates, NeighborList};
use crate::geometry::QueryBatch;
use crate::kdtree::{KdTree, NodeId, SplitTree};
use crate::split_search::{fallback_donors, NeighborMatrix, SearchConfig};
use crate::traffic::{self, QueueConfig};
use crate::traversal::{DescentWalk, Job, KdWalk, ScanWalk};

pub const SUPPORTED_BANKS: [u32; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankConfig {
    pub num_banks: u32,
    /// Simultaneous requesters per cycle.
    pub concurrency: u32,
    pub word_bytes: u32,
}

impl BankConfig {
    pub fn new(num_banks: u32, concurrency: u32) -> Result<Self> {
        let cfg = BankConfig {
            num_banks,
            concurrency,
            word_bytes: 4,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Tree buffer shared by `pes` processing elements.
    pub fn tree_buffer(num_banks: u32, pes: PEConfig) -> Result<Self> {
        Self::new(num_banks, pes.num_pes)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BANKS.contains(&self.num_banks) {
            return Err(Error::invalid(format!(
                "num_banks = {} must be one of {SUPPORTED_BANKS:?}",
                self.num_banks
            )));
        }
        if self.concurrency == 0 {
            return Err(Error::invalid("bank concurrency must be at least 1"));
        }
        if self.word_bytes == 0 {
            return Err(Error::invalid("word_bytes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PEConfig {
    pub num_pes: u32,
}

impl PEConfig {
    /// RS, FN, CD, SR, US: read stack, fetch node, compute distance, sort
    /// result, update stack. The model charges one cycle per FN issue.
    pub const STAGES: [&'static str; 5] = ["RS", "FN", "CD", "SR", "US"];

    pub fn new(num_pes: u32) -> Result<Self> {
        if num_pes == 0 {
            return Err(Error::invalid("num_pes must be at least 1"));
        }
        Ok(PEConfig { num_pes })
    }
}

impl Default for PEConfig {
    fn default() -> Self {
        PEConfig { num_pes: 4 }
    }
}

/// Low-order interleaving: the address's low bits pick the bank.
#[inline]
pub fn bank_of(address: u32, cfg: &BankConfig) -> u32 {
    address % cfg.num_banks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub bank: u32,
    pub node: NodeId,
    pub level: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Granted,
    Stalled,
    Elided,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Granted => "granted",
            Outcome::Stalled => "stalled",
            Outcome::Elided => "elided",
        })
    }
}

/// Resolve one cycle's requests (indexed by PE). Per bank the lowest PE is
/// granted; losers stall, or are elided when `elide` is set and their target
/// level exceeds `h_e`.
pub fn arbitrate(requests: &[Option<Request>], h_e: u32, elide: bool) -> Vec<Option<Outcome>> {
    let mut taken = [false; 32];
    requests
        .iter()
        .map(|r| {
            r.map(|req| {
                let slot = &mut taken[req.bank as usize];
                if !*slot {
                    *slot = true;
                    Outcome::Granted
                } else if elide && req.level > h_e {
                    Outcome::Elided
                } else {
                    Outcome::Stalled
                }
            })
        })
        .collect()
}

/// Counters for one phase of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub cycles: u64,
    /// Buffer reads issued, retries included.
    pub requests: u64,
    pub node_visits: u64,
    /// Lost arbitration rounds.
    pub conflicts_total: u64,
    pub conflicts_elided: u64,
    /// Cycles in which at least one request lost arbitration.
    pub conflicted_cycles: u64,
    pub stall_cycles: u64,
    pub elided_accesses: u64,
    pub sram_accesses: u64,
}

impl PhaseStats {
    fn add(&mut self, o: &PhaseStats) {
        self.cycles += o.cycles;
        self.requests += o.requests;
        self.node_visits += o.node_visits;
        self.conflicts_total += o.conflicts_total;
        self.conflicts_elided += o.conflicts_elided;
        self.conflicted_cycles += o.conflicted_cycles;
        self.stall_cycles += o.stall_cycles;
        self.elided_accesses += o.elided_accesses;
        self.sram_accesses += o.sram_accesses;
    }
}

/// SRAM accesses by buffer, one per record read or written.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SramAccesses {
    pub tree_buffer: u64,
    pub query_buffer: u64,
    pub result_buffer: u64,
    pub point_buffer: u64,
}

impl SramAccesses {
    pub fn total(&self) -> u64 {
        self.tree_buffer + self.query_buffer + self.result_buffer + self.point_buffer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub cycles: u64,
    pub requests: u64,
    pub node_visits: u64,
    pub conflicts_total: u64,
    pub conflicts_elided: u64,
    pub conflicted_cycles: u64,
    pub stall_cycles: u64,
    pub elided_accesses: u64,
    /// Cheap proxy for skipped work: elided accesses in this run.
    pub skipped_nodes_proxy: u64,
    /// Counterfactual skipped fraction from a paired replay, when measured.
    pub skipped_fraction: Option<f64>,
    pub sram_accesses: u64,
    pub sram: SramAccesses,
    pub dram_bytes_streaming: u64,
    pub dram_bytes_random: u64,
    /// Lost rounds over requests in the search phases.
    pub conflict_rate: f64,
    /// Conflicted cycles over cycles in the search phases.
    pub conflicted_cycle_rate: f64,
    pub top_tree: PhaseStats,
    pub sub_tree: PhaseStats,
    pub aggregation: PhaseStats,
    pub k_max: usize,
    pub queries: usize,
    /// Queries routed to each sub-tree.
    pub subtree_queries: Vec<u32>,
    /// DRAM loads of each sub-tree during the run.
    pub subtree_loads: Vec<u32>,
}

impl SimStats {
    fn new(
        top_tree: PhaseStats,
        sub_tree: PhaseStats,
        sram: SramAccesses,
        k_max: usize,
        queries: usize,
        subtree_queries: Vec<u32>,
        subtree_loads: Vec<u32>,
    ) -> Self {
        let mut s = SimStats {
            cycles: 0,
            requests: 0,
            node_visits: 0,
            conflicts_total: 0,
            conflicts_elided: 0,
            conflicted_cycles: 0,
            stall_cycles: 0,
            elided_accesses: 0,
            skipped_nodes_proxy: 0,
            skipped_fraction: None,
            sram_accesses: 0,
            sram,
            dram_bytes_streaming: 0,
            dram_bytes_random: 0,
            conflict_rate: 0.0,
            conflicted_cycle_rate: 0.0,
            top_tree,
            sub_tree,
            aggregation: PhaseStats::default(),
            k_max,
            queries,
            subtree_queries,
            subtree_loads,
        };
        s.refresh_totals();
        s
    }

    fn refresh_totals(&mut self) {
        let mut t = self.top_tree;
        t.add(&self.sub_tree);
        let search = t;
        t.add(&self.aggregation);
        self.cycles = t.cycles;
        self.requests = t.requests;
        self.node_visits = t.node_visits;
        self.conflicts_total = t.conflicts_total;
        self.conflicts_elided = t.conflicts_elided;
        self.conflicted_cycles = t.conflicted_cycles;
        self.stall_cycles = t.stall_cycles;
        self.elided_accesses = t.elided_accesses;
        self.skipped_nodes_proxy = search.elided_accesses;
        self.sram_accesses = t.sram_accesses;
        self.conflict_rate = ratio(search.conflicts_total, search.requests);
        self.conflicted_cycle_rate = ratio(search.conflicted_cycles, search.cycles);
    }

    /// Search-phase counters only (top-tree plus sub-tree).
    pub fn search(&self) -> PhaseStats {
        let mut t = self.top_tree;
        t.add(&self.sub_tree);
        t
    }

    /// Fold in a feature-gather phase.
    pub fn attach_aggregation(&mut self, agg: PhaseStats) {
        self.aggregation = agg;
        self.sram.point_buffer = agg.sram_accesses;
        self.refresh_totals();
    }

    /// Check the cross-field invariants; returns the first violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut t = self.search();
        t.add(&self.aggregation);
        if t.cycles != self.cycles || t.node_visits != self.node_visits || t.conflicts_total != self.conflicts_total {
            return Err("totals differ from the sum of phases".into());
        }
        if self.conflicts_elided > self.conflicts_total {
            return Err("conflicts_elided exceeds conflicts_total".into());
        }
        if self.sram.total() != self.sram_accesses {
            return Err("per-buffer SRAM accesses do not sum to the total".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Which confined search each PE runs inside a sub-tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtreeMode {
    #[default]
    KdTree,
    /// Distance-test every sub-tree node in streaming order, no pruning.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub elide: bool,
    pub mode: SubtreeMode,
    pub trace: bool,
    /// Keep the granted tree-buffer addresses in issue order.
    pub record_accesses: bool,
}

impl SimOptions {
    pub fn elide(elide: bool) -> Self {
        SimOptions {
            elide,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEvent {
    TopFetch,
    SubFetch,
    Idle,
}

impl fmt::Display for StageEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageEvent::TopFetch => "top_fn",
            StageEvent::SubFetch => "sub_fn",
            StageEvent::Idle => "idle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub cycle: u64,
    pub pe: u32,
    pub event: StageEvent,
    pub request: Option<(Request, Outcome)>,
}

pub const TRACE_CSV_HEADER: &str = "cycle,pe,stage_event,node,bank,outcome";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{TRACE_CSV_HEADER}")?;
    for r in rows {
        match r.request {
            Some((req, out)) => writeln!(w, "{},{},{},{},{},{}", r.cycle, r.pe, r.event, req.node, req.bank, out)?,
            None => writeln!(w, "{},{},{},,,", r.cycle, r.pe, r.event)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub matrix: NeighborMatrix,
    pub lists: Vec<NeighborList>,
    pub stats: SimStats,
    /// Granted node visits per query, top-tree included.
    pub per_query_visits: Vec<u64>,
    /// Per sub-tree queue contents in arrival order.
    pub routed: Vec<Vec<u32>>,
    pub assignment: Vec<u32>,
    /// Queries whose top-tree descent lost a fetch to elision.
    pub abandoned: Vec<bool>,
    pub trace: Vec<TraceRow>,
    pub accesses: Vec<NodeId>,
}

struct Engine<'t> {
    tree: &'t KdTree,
    banks: BankConfig,
    num_pes: usize,
    h_e: u32,
    elide: bool,
    clock: u64,
    trace: Option<Vec<TraceRow>>,
    accesses: Option<Vec<NodeId>>,
}

impl Engine<'_> {
    /// Run jobs to completion on the PE array, dispatching to idle PEs
    /// (lowest first) in the given order. Finished jobs go to `done`.
    fn run<J, I, F>(&mut self, jobs: I, event: StageEvent, stats: &mut PhaseStats, mut done: F)
    where
        J: Job,
        I: IntoIterator<Item = (u32, J)>,
        F: FnMut(u32, J),
    {
        let tree = self.tree;
        let mut jobs = jobs.into_iter();
        let mut pes: Vec<Option<(u32, J)>> = (0..self.num_pes).map(|_| None).collect();
        let mut requests: Vec<Option<Request>> = vec![None; self.num_pes];
        loop {
            for (pe, req) in pes.iter_mut().zip(requests.iter_mut()) {
                *req = None;
                loop {
                    if let Some((_, job)) = pe.as_mut() {
                        if let Some(node) = job.next_target(tree) {
                            *req = Some(Request {
                                bank: bank_of(node, &self.banks),
                                node,
                                level: tree.node(node).level,
                            });
                            break;
                        }
                        let (qid, job) = pe.take().expect("busy PE");
                        done(qid, job);
                    }
                    match jobs.next() {
                        Some(j) => *pe = Some(j),
                        None => break,
                    }
                }
            }
            if requests.iter().all(Option::is_none) {
                return;
            }
            let outcomes = arbitrate(&requests, self.h_e, self.elide);
            let mut lost = false;
            for (p, (pe, (req, out))) in pes.iter_mut().zip(requests.iter().zip(&outcomes)).enumerate() {
                if let Some(trace) = self.trace.as_mut() {
                    trace.push(TraceRow {
                        cycle: self.clock,
                        pe: p as u32,
                        event: if req.is_some() { event } else { StageEvent::Idle },
                        request: req.zip(*out),
                    });
                }
                let (Some(req), Some(out)) = (req, out) else {
                    continue;
                };
                let (_, job) = pe.as_mut().expect("requesting PE is busy");
                stats.requests += 1;
                match out {
                    Outcome::Granted => {
                        job.on_grant(tree, req.node);
                        stats.node_visits += 1;
                        stats.sram_accesses += 1;
                        if let Some(a) = self.accesses.as_mut() {
                            a.push(req.node);
                        }
                    }
                    Outcome::Stalled => {
                        stats.conflicts_total += 1;
                        stats.stall_cycles += 1;
                        lost = true;
                    }
                    Outcome::Elided => {
                        job.on_elide(req.node);
                        stats.conflicts_total += 1;
                        stats.conflicts_elided += 1;
                        stats.elided_accesses += 1;
                        lost = true;
                    }
                }
            }
            stats.conflicted_cycles += lost as u64;
            stats.cycles += 1;
            self.clock += 1;
        }
    }
}

enum SubJob<'a> {
    Kd(KdWalk),
    Scan(ScanWalk<'a>),
}

impl SubJob<'_> {
    fn into_candidates(self) -> Candidates {
        match self {
            SubJob::Kd(w) => w.into_candidates(),
            SubJob::Scan(w) => w.into_candidates(),
        }
    }
}

impl Job for SubJob<'_> {
    fn next_target(&mut self, tree: &KdTree) -> Option<NodeId> {
        match self {
            SubJob::Kd(w) => w.next_target(tree),
            SubJob::Scan(w) => w.next_target(tree),
        }
    }
    fn on_grant(&mut self, tree: &KdTree, node: NodeId) {
        match self {
            SubJob::Kd(w) => w.on_grant(tree, node),
            SubJob::Scan(w) => w.on_grant(tree, node),
        }
    }
    fn on_elide(&mut self, node: NodeId) {
        match self {
            SubJob::Kd(w) => w.on_elide(node),
            SubJob::Scan(w) => w.on_elide(node),
        }
    }
    fn visits(&self) -> u64 {
        match self {
            SubJob::Kd(w) => w.visits(),
            SubJob::Scan(w) => w.visits(),
        }
    }
}

/// Full simulation: top-tree routing phase, then each non-empty sub-tree in
/// turn (streamed in once, searched by its queued queries, barrier).
pub fn simulate(
    split: &SplitTree,
    batch: &QueryBatch,
    cfg: &SearchConfig,
    banks: &BankConfig,
    pes: &PEConfig,
    opts: SimOptions,
) -> Result<SimOutput> {
    cfg.validate(split)?;
    banks.validate()?;
    if banks.concurrency != pes.num_pes {
        return Err(Error::invalid(format!(
            "tree-buffer concurrency {} differs from the PE count {}",
            banks.concurrency, pes.num_pes
        )));
    }
    let tree = split.tree();
    let q = batch.len();
    let mut engine = Engine {
        tree,
        banks: *banks,
        num_pes: pes.num_pes as usize,
        h_e: cfg.h_e,
        elide: opts.elide,
        clock: 0,
        trace: opts.trace.then(Vec::new),
        accesses: opts.record_accesses.then(Vec::new),
    };
    let mut sram = SramAccesses::default();

    // Top-tree phase. With h_t <= 1 the top-tree is just the (shared) root
    // and routing is free.
    let has_top = split.top_tree_nodes() > 0;
    let mut top = PhaseStats::default();
    let mut seeds: Vec<Option<Candidates>> = vec![None; q];
    let mut assignment = vec![0u32; q];
    let mut abandoned = vec![false; q];
    let mut per_query_visits = vec![0u64; q];
    let mut routed = vec![Vec::new(); split.subtree_count()];
    let descents = (0..q).map(|qid| {
        let walk = DescentWalk::new(split, batch.queries()[qid], cfg.candidates(batch, qid), cfg.seed_top_path);
        (qid as u32, walk)
    });
    engine.run(descents, StageEvent::TopFetch, &mut top, |qid, walk| {
        let i = qid as usize;
        let s = walk.route().expect("descent finished");
        routed[s].push(qid);
        assignment[i] = s as u32;
        abandoned[i] = walk.abandoned();
        per_query_visits[i] = walk.visits();
        seeds[i] = Some(walk.into_candidates());
    });
    if has_top {
        // each query is read from the query buffer and written to its queue
        top.sram_accesses += 2 * q as u64;
        sram.query_buffer += q as u64;
        sram.result_buffer += q as u64;
    }
    sram.tree_buffer += top.node_visits;

    // Sub-tree phase.
    let mut sub = PhaseStats::default();
    let mut lists = vec![NeighborList::default(); q];
    let mut loads = vec![0u32; split.subtree_count()];
    for (s, queue) in routed.iter().enumerate() {
        if queue.is_empty() {
            continue;
        }
        loads[s] += 1;
        let root = split.subtree_roots()[s];
        let nodes = split.subtree_nodes(s);
        let jobs = queue.iter().map(|&qid| {
            let i = qid as usize;
            let query = batch.queries()[i];
            let cands = seeds[i].take().expect("seed per query");
            let job = if abandoned[i] {
                SubJob::Kd(KdWalk::empty(query, cands))
            } else {
                match opts.mode {
                    SubtreeMode::KdTree => SubJob::Kd(KdWalk::new(query, cands, root)),
                    SubtreeMode::Exhaustive => SubJob::Scan(ScanWalk::new(query, cands, nodes)),
                }
            };
            (qid, job)
        });
        engine.run(jobs, StageEvent::SubFetch, &mut sub, |qid, job| {
            per_query_visits[qid as usize] += job.visits();
            lists[qid as usize] = job.into_candidates().into_list();
        });
    }
    sram.tree_buffer += sub.node_visits;
    // query read plus one result-row write per query
    sub.sram_accesses += 2 * q as u64;
    sram.query_buffer += q as u64;
    sram.result_buffer += q as u64;

    let donors = fallback_donors(split, batch, &assignment);
    let subtree_queries = routed.iter().map(|l| l.len() as u32).collect();
    let mut stats = SimStats::new(top, sub, sram, cfg.k_max, q, subtree_queries, loads);
    let report = traffic::account_split_tree(split, batch, &stats, &QueueConfig::default());
    stats.dram_bytes_streaming = report.streaming_bytes;
    stats.dram_bytes_random = report.random_bytes;
    Ok(SimOutput {
        matrix: NeighborMatrix::from_lists(&lists, &donors, cfg.k_max),
        lists,
        stats,
        per_query_visits,
        routed,
        assignment,
        abandoned,
        trace: engine.trace.unwrap_or_default(),
        accesses: engine.accesses.unwrap_or_default(),
    })
}

pub fn simulate_search(
    split: &SplitTree,
    batch: &QueryBatch,
    cfg: &SearchConfig,
    banks: &BankConfig,
    pes: &PEConfig,
    elide: bool,
) -> Result<(NeighborMatrix, SimStats)> {
    let out = simulate(split, batch, cfg, banks, pes, SimOptions::elide(elide))?;
    Ok((out.matrix, out.stats))
}

/// Elide-off and elide-on runs on identical inputs.
pub fn paired_replay(
    split: &SplitTree,
    batch: &QueryBatch,
    cfg: &SearchConfig,
    banks: &BankConfig,
    pes: &PEConfig,
) -> Result<(SimOutput, SimOutput)> {
    let off = simulate(split, batch, cfg, banks, pes, SimOptions::elide(false))?;
    let mut on = simulate(split, batch, cfg, banks, pes, SimOptions::elide(true))?;
    on.stats.skipped_fraction = Some(skipped_between(&off, &on));
    Ok((off, on))
}

/// Per-query mean of `1 - visits_on / visits_off`.
pub fn skipped_between(off: &SimOutput, on: &SimOutput) -> f64 {
    let n = off.per_query_visits.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = off
        .per_query_visits
        .iter()
        .zip(&on.per_query_visits)
        .map(|(&a, &b)| if a == 0 { 0.0 } else { 1.0 - b as f64 / a as f64 })
        .sum();
    sum / n as f64
}

pub fn skipped_fraction(
    split: &SplitTree,
    batch: &QueryBatch,
    cfg: &SearchConfig,
    banks: &BankConfig,
    pes: &PEConfig,
) -> Result<f64> {
    let (off, on) = paired_replay(split, batch, cfg, banks, pes)?;
    Ok(skipped_between(&off, &on))
}

/// Fraction of baseline conflicts that no longer cost a stall once elision
/// is on: `1 - stalled_on / conflicts_off`.
pub fn conflicts_removed(off: &SimStats, on: &SimStats) -> f64 {
    let off_c = off.search().conflicts_total;
    let on_s = on.search();
    if off_c == 0 {
        return 0.0;
    }
    1.0 - (on_s.conflicts_total - on_s.conflicts_elided) as f64 / off_c as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_search::brute_force_search;
    use crate::geometry::{generate_cloud, CloudKind};
    use crate::kdtree::{build_kdtree, split_tree};
    use crate::split_search::approximate_search_detailed;
    use std::collections::HashSet;

    fn req(bank: u32, node: NodeId, level: u32) -> Option<Request> {
        Some(Request { bank, node, level })
    }

    fn setup(n: usize, h_t: u32, seed: u64, queries: usize) -> (SplitTree, QueryBatch) {
        let c = generate_cloud(CloudKind::UniformCube, n, seed).unwrap();
        let t = build_kdtree(&c);
        let h = t.height();
        let b = QueryBatch::sample_from_cloud(&c, queries, seed + 1).unwrap();
        (split_tree(t, h_t, 1 << h).unwrap(), b)
    }

    fn hw(banks: u32, pes: u32) -> (BankConfig, PEConfig) {
        let p = PEConfig::new(pes).unwrap();
        (BankConfig::tree_buffer(banks, p).unwrap(), p)
    }

    #[test]
    fn bank_of_low_bits() {
        assert_eq!(bank_of(5, &BankConfig::new(4, 1).unwrap()), 1);
        assert_eq!(bank_of(7, &BankConfig::new(4, 1).unwrap()), 3);
        assert_eq!(bank_of(8, &BankConfig::new(8, 1).unwrap()), 0);
    }

    #[test]
    fn config_validation() {
        for bad in [0, 3, 5, 64] {
            assert!(BankConfig::new(bad, 4).is_err());
        }
        assert!(BankConfig::new(4, 0).is_err());
        assert!(PEConfig::new(0).is_err());
        let (s, b) = setup(300, 2, 1, 10);
        let cfg = SearchConfig::new(2, s.height(), 0.1, 4);
        let mismatched = BankConfig::new(4, 2).unwrap();
        assert!(simulate_search(&s, &b, &cfg, &mismatched, &PEConfig::new(4).unwrap(), false).is_err());
    }

    #[test]
    fn arbitration_cases() {
        assert_eq!(
            arbitrate(&[req(0, 4, 3), req(1, 5, 3)], 1, false),
            vec![Some(Outcome::Granted), Some(Outcome::Granted)]
        );
        assert_eq!(
            arbitrate(&[req(2, 6, 3), req(2, 10, 3)], 1, false),
            vec![Some(Outcome::Granted), Some(Outcome::Stalled)]
        );
        assert_eq!(
            arbitrate(&[req(2, 6, 3), req(2, 10, 5)], 4, true),
            vec![Some(Outcome::Granted), Some(Outcome::Elided)]
        );
        // at or above the elision height the loser still stalls
        assert_eq!(
            arbitrate(&[req(2, 6, 3), req(2, 10, 4)], 4, true),
            vec![Some(Outcome::Granted), Some(Outcome::Stalled)]
        );
        // idle PEs keep their slot empty and do not take priority
        assert_eq!(
            arbitrate(&[None, req(0, 1, 2), req(0, 2, 2)], 0, true),
            vec![None, Some(Outcome::Granted), Some(Outcome::Elided)]
        );
    }

    #[test]
    fn single_pe_never_conflicts() {
        let (s, b) = setup(2000, 3, 2, 200);
        let cfg = SearchConfig::new(3, s.height(), 0.08, 16);
        let (banks, pes) = hw(1, 1);
        for elide in [false, true] {
            let out = simulate(&s, &b, &cfg, &banks, &pes, SimOptions::elide(elide)).unwrap();
            assert_eq!(out.stats.conflicts_total, 0);
            assert_eq!(out.stats.stall_cycles, 0);
            let func = approximate_search_detailed(&s, &b, &cfg).unwrap();
            assert_eq!(out.matrix, func.matrix);
            assert_eq!(out.stats.cycles, func.total_visits());
        }
    }

    #[test]
    fn elision_height_at_tree_height_changes_nothing() {
        let (s, b) = setup(3000, 4, 3, 300);
        let cfg = SearchConfig::new(4, s.height(), 0.07, 16);
        let (banks, pes) = hw(2, 4);
        let off = simulate(&s, &b, &cfg, &banks, &pes, SimOptions::elide(false)).unwrap();
        let on = simulate(&s, &b, &cfg, &banks, &pes, SimOptions::elide(true)).unwrap();
        assert!(off.stats.conflicts_total > 0);
        assert_eq!(on.stats.conflicts_elided, 0);
        assert_eq!(on.matrix, off.matrix);
        assert_eq!(on.stats, off.stats);
        assert_eq!(skipped_fraction(&s, &b, &cfg, &banks, &pes).unwrap(), 0.0);
    }

    #[test]
    fn stats_invariants_and_streaming() {
        let (s, b) = setup(4000, 5, 4, 500);
        let cfg = SearchConfig::new(5, s.height() - 3, 0.06, 16);
        let (banks, pes) = hw(4, 4);
        for elide in [false, true] {
            let out = simulate(&s, &b, &cfg, &banks, &pes, SimOptions::elide(elide)).unwrap();
            let st = &out.stats;
            st.check().unwrap();
            assert_eq!(st.dram_bytes_random, 0);
            assert!(st.dram_bytes_streaming > 0);
            assert_eq!(st.node_visits, out.per_query_visits.iter().sum::<u64>());
            assert_eq!(st.sram.tree_buffer, st.node_visits);
            for (q, l) in st.subtree_queries.iter().zip(&st.subtree_loads) {
                assert_eq!(*l, u32::from(*q > 0));
            }
            assert_eq!(st.subtree_queries.iter().sum::<u32>() as usize, b.len());
            if !elide {
                assert_eq!(st.conflicts_elided, 0);
            }
            assert_eq!(st.skipped_nodes_proxy, st.elided_accesses);
        }
    }

    #[test]
    fn trace_has_one_row_per_pe_per_cycle() {
        let (s, b) = setup(500, 2, 5, 40);
        let cfg = SearchConfig::new(2, s.height() - 1, 0.1, 8);
        let (banks, pes) = hw(2, 3);
        let opts = SimOptions {
            elide: true,
            trace: true,
            record_accesses: true,
            ..Default::default()
        };
        let out = simulate(&s, &b, &cfg, &banks, &pes, opts).unwrap();
        assert_eq!(out.trace.len() as u64, out.stats.cycles * 3);
        let granted = out
            .trace
            .iter()
            .filter(|r| matches!(r.request, Some((_, Outcome::Granted))))
            .count() as u64;
        assert_eq!(granted, out.stats.node_visits);
        assert_eq!(out.accesses.len() as u64, out.stats.node_visits);
        let mut csv = Vec::new();
        write_trace_csv(&out.trace[..2], &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("cycle,pe,stage_event,node,bank,outcome\n0,0,top_fn,0,0,granted\n"));
    }

    #[test]
    fn forced_conflicts_at_elision_height_one_skip_almost_everything() {
        let (s, b) = setup(8000, 4, 6, 400);
        let cfg = SearchConfig::new(4, 1, 0.06, 32);
        let (banks, pes) = hw(1, 4);
        let f = skipped_fraction(&s, &b, &cfg, &banks, &pes).unwrap();
        assert!(f > 0.9, "{f}");
    }

    #[test]
    fn exhaustive_mode_visits_every_subtree_node() {
        let (s, b) = setup(2000, 3, 7, 150);
        let cfg = SearchConfig::new(3, s.height(), 0.08, 16);
        let (banks, pes) = hw(4, 4);
        let opts = SimOptions {
            mode: SubtreeMode::Exhaustive,
            ..Default::default()
        };
        let out = simulate(&s, &b, &cfg, &banks, &pes, opts).unwrap();
        let want: u64 = out
            .routed
            .iter()
            .enumerate()
            .map(|(i, qs)| (qs.len() * s.subtree_nodes(i).len()) as u64)
            .sum();
        assert_eq!(out.stats.sub_tree.node_visits, want);
        let kd = simulate(&s, &b, &cfg, &banks, &pes, SimOptions::default()).unwrap();
        assert_eq!(out.matrix, kd.matrix);
        assert!(kd.stats.sub_tree.node_visits <= want);
    }

    #[test]
    fn conflicts_fall_with_more_banks() {
        let (s, b) = setup(8000, 4, 8, 800);
        let cfg = SearchConfig::new(4, s.height(), 0.05, 32);
        let mut last = u64::MAX;
        for nb in SUPPORTED_BANKS {
            let (banks, pes) = hw(nb, 8);
            let (_, st) = simulate_search(&s, &b, &cfg, &banks, &pes, false).unwrap();
            assert!(st.conflicts_total <= last, "{nb} banks");
            last = st.conflicts_total;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn grant_uniqueness(
                reqs in prop::collection::vec(prop::option::of((0u32..8, 0u32..100, 1u32..10)), 0..12),
                h_e in 1u32..10,
                elide in any::<bool>(),
            ) {
                let requests: Vec<Option<Request>> =
                    reqs.iter().map(|r| r.map(|(bank, node, level)| Request { bank, node, level })).collect();
                let out = arbitrate(&requests, h_e, elide);
                prop_assert_eq!(out.len(), requests.len());
                for bank in 0..8 {
                    let mine: Vec<usize> = (0..requests.len())
                        .filter(|&i| requests[i].is_some_and(|r| r.bank == bank))
                        .collect();
                    let grants = mine.iter().filter(|&&i| out[i] == Some(Outcome::Granted)).count();
                    prop_assert_eq!(grants, usize::from(!mine.is_empty()));
                    if let Some(&first) = mine.first() {
                        prop_assert_eq!(out[first], Some(Outcome::Granted));
                    }
                    for &i in mine.iter().skip(1) {
                        let lvl = requests[i].unwrap().level;
                        let want = if elide && lvl > h_e { Outcome::Elided } else { Outcome::Stalled };
                        prop_assert_eq!(out[i], Some(want));
                    }
                }
                for (r, o) in requests.iter().zip(&out) {
                    prop_assert_eq!(r.is_none(), o.is_none());
                }
            }

            #[test]
            fn elide_off_matches_functional_search(
                n in 50usize..1500,
                seed in any::<u64>(),
                h_t_frac in 0.0f64..1.0,
                banks in prop::sample::select(SUPPORTED_BANKS.to_vec()),
                pes in 1u32..9,
                r in 0.03f64..0.25,
                k in 1usize..24,
            ) {
                let c = generate_cloud(CloudKind::UniformCube, n, seed).unwrap();
                let t = build_kdtree(&c);
                let h = t.height();
                let h_t = (h_t_frac * h as f64) as u32;
                let s = split_tree(t, h_t, 1 << h).unwrap();
                let b = QueryBatch::sample_from_cloud(&c, 40, seed ^ 3).unwrap();
                let cfg = SearchConfig::new(h_t, h, r, k);
                let (bc, pc) = hw(banks, pes);
                let out = simulate(&s, &b, &cfg, &bc, &pc, SimOptions::elide(false)).unwrap();
                let func = approximate_search_detailed(&s, &b, &cfg).unwrap();
                prop_assert_eq!(&out.matrix, &func.matrix);
                prop_assert_eq!(&out.per_query_visits, &func.per_query_visits);
                prop_assert_eq!(out.stats.dram_bytes_random, 0);
                prop_assert!(out.stats.subtree_loads.iter().all(|&l| l <= 1));
                out.stats.check().unwrap();
            }

            #[test]
            fn elision_only_removes_work_in_radius_mode(
                n in 50usize..1500,
                seed in any::<u64>(),
                h_t in 0u32..5,
                h_e_back in 0u32..6,
                banks in prop::sample::select(vec![1u32, 2, 4]),
                pes in 2u32..6,
                r in 0.05f64..0.3,
            ) {
                let c = generate_cloud(CloudKind::UniformCube, n, seed).unwrap();
                let t = build_kdtree(&c);
                let h = t.height();
                let h_t = h_t.min(h - 1);
                let h_e = h.saturating_sub(h_e_back).max(1);
                let s = split_tree(t, h_t, 1 << h).unwrap();
                let b = QueryBatch::sample_from_cloud(&c, 30, seed ^ 5).unwrap();
                // k_max >= N: pure radius search, no k-th-distance tightening
                let cfg = SearchConfig::new(h_t, h_e, r, n);
                let (bc, pc) = hw(banks, pes);
                let (off, on) = paired_replay(&s, &b, &cfg, &bc, &pc).unwrap();
                for q in 0..b.len() {
                    prop_assert!(on.per_query_visits[q] <= off.per_query_visits[q]);
                    let full: HashSet<u32> = off.matrix.valid_row(q).iter().copied().collect();
                    for i in on.matrix.valid_row(q) {
                        prop_assert!(full.contains(i));
                    }
                    // and the off run is the functional result, itself a subset of brute force
                    let exact = brute_force_search(&c, &b.queries()[q], r, n, None);
                    let all: HashSet<u32> = exact.indices().collect();
                    prop_assert!(full.iter().all(|i| all.contains(i)));
                }
                let f = on.stats.skipped_fraction.unwrap();
                prop_assert!((0.0..=1.0).contains(&f));
                prop_assert!(on.stats.conflicts_elided <= on.stats.conflicts_total);
            }
        }
    }
}
