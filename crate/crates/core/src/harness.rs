//! Experiment plumbing: configuration, workload preparation, single runs,
//! sweeps, baseline comparisons and report files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::gather;
use crate::error::{Error, Result};
use crate::exact_search::{kdtree_search, NeighborList};
use crate::geometry::{generate_cloud, load_cloud, CloudFormat, CloudKind, PointCloud, QueryBatch};
use crate::kdtree::{build_kdtree, check_capacity, split_tree, KdTree, SplitTree, TreeDump};
use crate::memsim::{simulate, BankConfig, PEConfig, SimOptions, SimOutput, SimStats, SubtreeMode};
use crate::split_search::{recall, SearchConfig};
use crate::traffic::{
    account_split_tree, baseline_monolithic, baseline_reload, energy_report, savings, EnergyModel,
    EnergyReport, QueueConfig, Savings, TrafficReport, DEFAULT_CACHE_BYTES,
};

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
pub const SWEEP_CSV_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Generated { kind: CloudKind, n: usize, seed: u64 },
    File { path: PathBuf, format: Option<CloudFormat> },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Generated {
            kind: CloudKind::UniformCube,
            n: 65_536,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<PointCloud> {
        match self {
            DatasetSpec::Generated { kind, n, seed } => generate_cloud(*kind, *n, *seed),
            DatasetSpec::File { path, format } => {
                load_cloud(path, format.unwrap_or_else(|| CloudFormat::from_path(path)))
            }
        }
    }
}

/// A list of tree heights written against the tree height `H`, e.g. `4`,
/// `0..8`, `4..H`, `H-2`, `2,4,6`. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeightList(pub String);

impl HeightList {
    pub fn new(s: impl Into<String>) -> Self {
        HeightList(s.into())
    }

    pub fn resolve(&self, height: u32) -> Result<Vec<u32>> {
        let term = |t: &str| -> Result<u32> {
            let t = t.trim();
            let bad = || Error::invalid(format!("bad height '{t}' in '{}'", self.0));
            if let Some(rest) = t.strip_prefix('H') {
                let rest = rest.trim();
                if rest.is_empty() {
                    return Ok(height);
                }
                let d: u32 = rest.strip_prefix('-').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
                height.checked_sub(d).ok_or_else(bad)
            } else {
                t.parse().map_err(|_| bad())
            }
        };
        let mut out = Vec::new();
        for part in self.0.split(',') {
            match part.split_once("..") {
                Some((a, b)) => {
                    let (a, b) = (term(a)?, term(b)?);
                    if a > b {
                        return Err(Error::invalid(format!("empty height range '{part}'")));
                    }
                    out.extend(a..=b);
                }
                None => out.push(term(part)?),
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("empty height list"));
        }
        Ok(out)
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// Everything needed to reproduce a sweep or comparison. Missing fields take
/// the defaults below; CLI flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dataset: DatasetSpec,
    /// Self-queries sampled from the cloud; 0 means every point.
    pub queries: usize,
    pub query_seed: u64,
    /// External query points instead of self-queries.
    pub query_file: Option<PathBuf>,
    /// Fixed radius; when absent it is tuned to `target_neighbors`.
    pub radius: Option<f64>,
    pub target_neighbors: f64,
    pub k_max: usize,
    pub h_t: HeightList,
    pub h_e: HeightList,
    /// Tree-buffer words; defaults to `2^H`, which admits every h_t.
    pub buffer_words: Option<u64>,
    pub banks: u32,
    pub pes: u32,
    pub queue_capacity: u32,
    pub elide: bool,
    pub agg_banks: u32,
    pub agg_concurrency: u32,
    pub agg_elide: bool,
    pub energy: EnergyModel,
    pub include_self: bool,
    pub seed_top_path: bool,
    pub exact_oracle: bool,
    pub cache_bytes: u64,
    /// Top-tree height for the baseline rows; defaults to the first grid h_t.
    pub baseline_ht: Option<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            dataset: DatasetSpec::default(),
            queries: 4096,
            query_seed: 7,
            query_file: None,
            radius: None,
            target_neighbors: 32.0,
            k_max: 32,
            h_t: HeightList::new("4"),
            h_e: HeightList::new("H"),
            buffer_words: None,
            banks: 4,
            pes: 4,
            queue_capacity: QueueConfig::default().capacity,
            elide: false,
            agg_banks: 16,
            agg_concurrency: 16,
            agg_elide: false,
            energy: EnergyModel::default(),
            include_self: true,
            seed_top_path: true,
            exact_oracle: true,
            cache_bytes: DEFAULT_CACHE_BYTES,
            baseline_ht: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Validation(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialize")
    }

    pub fn pe_config(&self) -> Result<PEConfig> {
        PEConfig::new(self.pes)
    }

    pub fn bank_config(&self) -> Result<BankConfig> {
        BankConfig::tree_buffer(self.banks, self.pe_config()?)
    }

    pub fn agg_bank_config(&self) -> Result<BankConfig> {
        BankConfig::new(self.agg_banks, self.agg_concurrency)
    }

    pub fn queue_config(&self) -> Result<QueueConfig> {
        QueueConfig::new(self.queue_capacity)
    }

    /// Hardware and shape checks that do not need the tree.
    pub fn validate_static(&self) -> Result<()> {
        self.bank_config()?;
        self.agg_bank_config()?;
        self.queue_config()?;
        if self.k_max == 0 {
            return Err(Error::invalid("k_max must be at least 1"));
        }
        if let Some(r) = self.radius {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::invalid(format!("radius must be positive and finite, got {r}")));
            }
        }
        if !(self.target_neighbors.is_finite() && self.target_neighbors > 0.0) {
            return Err(Error::invalid("target_neighbors must be positive"));
        }
        if self.energy.scale == 0 {
            return Err(Error::invalid("energy scale must be at least 1"));
        }
        Ok(())
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Smallest top-tree buffer that admits every h_t for a tree of this height.
pub fn auto_buffer_words(height: u32) -> u64 {
    1u64 << height.min(63)
}

/// Radius whose mean in-radius count over the batch is `target`, found by
/// doubling then bisection. Counts include the query's own point when
/// `include_self` is set.
pub fn tune_radius(tree: &KdTree, batch: &QueryBatch, target: f64, include_self: bool) -> f64 {
    let n = tree.size();
    let mean_count = |r: f64| -> f64 {
        let total: usize = (0..batch.len())
            .into_par_iter()
            .map(|qid| {
                let exclude = if include_self { None } else { batch.self_index(qid) };
                kdtree_search(tree, &batch.queries()[qid], r, n, exclude).len()
            })
            .sum();
        total as f64 / batch.len() as f64
    };
    let mut hi = 1e-3;
    while mean_count(hi) < target && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Cloud, tree, queries and (optionally) exact reference results, shared by
/// every cell of an experiment.
#[derive(Debug, Clone)]
pub struct Workload {
    pub cloud: PointCloud,
    pub tree: KdTree,
    pub batch: QueryBatch,
    pub radius: f64,
    pub exact: Option<Vec<NeighborList>>,
}

impl Workload {
    pub fn height(&self) -> u32 {
        self.tree.height()
    }
}

pub fn load_queries(cfg: &ExperimentConfig, cloud: &PointCloud) -> Result<QueryBatch> {
    match &cfg.query_file {
        Some(path) => {
            let q = load_cloud(path, CloudFormat::from_path(path))?;
            QueryBatch::new(q.points().to_vec())
        }
        None if cfg.queries == 0 => Ok(QueryBatch::from_cloud(cloud)),
        None => QueryBatch::sample_from_cloud(cloud, cfg.queries, cfg.query_seed),
    }
}

pub fn exact_results(tree: &KdTree, batch: &QueryBatch, radius: f64, k_max: usize, include_self: bool) -> Vec<NeighborList> {
    (0..batch.len())
        .into_par_iter()
        .map(|qid| {
            let exclude = if include_self { None } else { batch.self_index(qid) };
            kdtree_search(tree, &batch.queries()[qid], radius, k_max, exclude)
        })
        .collect()
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Workload> {
    cfg.validate_static()?;
    let cloud = cfg.dataset.load()?;
    let batch = load_queries(cfg, &cloud)?;
    prepare_with(cfg, cloud, batch)
}

pub fn prepare_with(cfg: &ExperimentConfig, cloud: PointCloud, batch: QueryBatch) -> Result<Workload> {
    let tree = build_kdtree(&cloud);
    let radius = match cfg.radius {
        Some(r) => r,
        None => {
            let r = tune_radius(&tree, &batch, cfg.target_neighbors, cfg.include_self);
            info!("tuned radius {r} for a mean of {} neighbors", cfg.target_neighbors);
            r
        }
    };
    let exact = cfg
        .exact_oracle
        .then(|| exact_results(&tree, &batch, radius, cfg.k_max, cfg.include_self));
    info!(
        "workload: {} points, H = {}, {} queries",
        cloud.len(),
        tree.height(),
        batch.len()
    );
    Ok(Workload {
        cloud,
        tree,
        batch,
        radius,
        exact,
    })
}

/// Configuration of one simulated run, as recorded in its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub h_t: u32,
    pub h_e: u32,
    pub height: u32,
    pub points: usize,
    pub queries: usize,
    pub radius: f64,
    pub k_max: usize,
    pub buffer_words: u64,
    pub banks: u32,
    pub pes: u32,
    pub queue_capacity: u32,
    pub elide: bool,
    pub agg_banks: u32,
    pub agg_concurrency: u32,
    pub agg_elide: bool,
    pub include_self: bool,
    pub seed_top_path: bool,
    pub mode: SubtreeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub config: CellConfig,
    pub stats: SimStats,
    pub traffic: TrafficReport,
    pub recall: Option<f64>,
    pub energy: EnergyReport,
    /// Host time, logged only; excluded from files so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialize")
    }
}

/// A finished cell together with the raw simulation output.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub record: RunRecord,
    pub sim: SimOutput,
    pub split: SplitTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub h_t: u32,
    pub h_e: u32,
    pub elide: bool,
    pub mode: SubtreeMode,
}

pub fn buffer_words_for(cfg: &ExperimentConfig, height: u32) -> u64 {
    cfg.buffer_words.unwrap_or_else(|| auto_buffer_words(height))
}

pub fn search_config(cfg: &ExperimentConfig, w: &Workload, h_t: u32, h_e: u32) -> SearchConfig {
    SearchConfig {
        h_t,
        h_e,
        radius: w.radius,
        k_max: cfg.k_max,
        include_self: cfg.include_self,
        seed_top_path: cfg.seed_top_path,
    }
}

/// Check a cell against the tree before any simulation starts.
pub fn validate_cell(cfg: &ExperimentConfig, height: u32, h_t: u32, h_e: u32) -> Result<()> {
    check_capacity(height, h_t, buffer_words_for(cfg, height))?;
    if h_e < 1 || h_e > height {
        return Err(Error::invalid(format!("h_e = {h_e} outside permissible range [1, {height}]")));
    }
    Ok(())
}

pub fn run_cell(cfg: &ExperimentConfig, w: &Workload, cell: CellSpec, record_accesses: bool) -> Result<CellRun> {
    let start = Instant::now();
    let height = w.height();
    let buffer_words = buffer_words_for(cfg, height);
    let split = split_tree(w.tree.clone(), cell.h_t, buffer_words)?;
    let search = search_config(cfg, w, cell.h_t, cell.h_e);
    let opts = SimOptions {
        elide: cell.elide,
        mode: cell.mode,
        trace: false,
        record_accesses,
    };
    let mut sim = simulate(&split, &w.batch, &search, &cfg.bank_config()?, &cfg.pe_config()?, opts)?;
    let g = gather(&sim.matrix, &cfg.agg_bank_config()?, cfg.agg_elide);
    sim.stats.attach_aggregation(g.stats);
    let traffic = account_split_tree(&split, &w.batch, &sim.stats, &cfg.queue_config()?);
    let recall = match &w.exact {
        Some(ex) => Some(recall(&sim.matrix, ex)?),
        None => None,
    };
    let energy = energy_report(&traffic, &cfg.energy);
    let record = RunRecord {
        version: REPORT_VERSION,
        config: CellConfig {
            h_t: cell.h_t,
            h_e: cell.h_e,
            height,
            points: w.cloud.len(),
            queries: w.batch.len(),
            radius: w.radius,
            k_max: cfg.k_max,
            buffer_words,
            banks: cfg.banks,
            pes: cfg.pes,
            queue_capacity: cfg.queue_capacity,
            elide: cell.elide,
            agg_banks: cfg.agg_banks,
            agg_concurrency: cfg.agg_concurrency,
            agg_elide: cfg.agg_elide,
            include_self: cfg.include_self,
            seed_top_path: cfg.seed_top_path,
            mode: cell.mode,
        },
        stats: sim.stats.clone(),
        traffic,
        recall,
        energy,
        wall_time: start.elapsed(),
    };
    debug!(
        "cell h_t={} h_e={} elide={} {:?}: {} cycles in {:?}",
        cell.h_t, cell.h_e, cell.elide, cell.mode, record.stats.cycles, record.wall_time
    );
    Ok(CellRun { record, sim, split })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Split,
    BaselineExhaustive,
    BaselineReload,
}

impl RowKind {
    fn as_str(&self) -> &'static str {
        match self {
            RowKind::Split => "split",
            RowKind::BaselineExhaustive => "baseline_exhaustive",
            RowKind::BaselineReload => "baseline_reload",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: RowKind,
    pub record: RunRecord,
    /// DRAM traffic used for this row (differs from the record's for reload rows).
    pub traffic: TrafficReport,
    pub energy: EnergyReport,
}

pub const SWEEP_CSV_HEADER: &str = "version,kind,h_t,h_e,elide,recall,cycles,node_visits,conflicts_total,\
conflicts_elided,stall_cycles,conflict_rate,elided_accesses,dram_bytes_streaming,dram_bytes_random,\
sram_accesses,energy_scaled,energy";

impl SweepRow {
    fn csv_line(&self) -> String {
        let r = &self.record;
        let s = &r.stats;
        let search = s.search();
        format!(
            "{SWEEP_CSV_VERSION},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.kind.as_str(),
            r.config.h_t,
            r.config.h_e,
            r.config.elide as u8,
            r.recall.map(|x| x.to_string()).unwrap_or_default(),
            s.cycles,
            s.node_visits,
            search.conflicts_total,
            search.conflicts_elided,
            search.stall_cycles,
            s.conflict_rate,
            search.elided_accesses,
            self.traffic.streaming_bytes,
            self.traffic.random_bytes,
            s.sram_accesses,
            self.energy.total,
            self.energy.total_units(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub height: u32,
    pub radius: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SWEEP_CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(w, "{}", row.csv_line())?;
        }
        Ok(())
    }

    pub fn split_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.kind == RowKind::Split)
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// The (h_t x h_e) grid in row-major order, validated up front.
pub fn sweep_cells(cfg: &ExperimentConfig, height: u32) -> Result<Vec<(u32, u32)>> {
    let hts = cfg.h_t.resolve(height)?;
    let hes = cfg.h_e.resolve(height)?;
    let mut cells = Vec::with_capacity(hts.len() * hes.len());
    for &h_t in &hts {
        for &h_e in &hes {
            validate_cell(cfg, height, h_t, h_e)
                .map_err(|e| Error::Validation(format!("sweep cell (h_t = {h_t}, h_e = {h_e}): {e}")))?;
            cells.push((h_t, h_e));
        }
    }
    Ok(cells)
}

pub fn sweep_on(cfg: &ExperimentConfig, w: &Workload, jobs: usize) -> Result<SweepResult> {
    let height = w.height();
    let cells = sweep_cells(cfg, height)?;
    let base_ht = cfg.baseline_ht.unwrap_or(cells[0].0);
    validate_cell(cfg, height, base_ht, height)?;
    let queue = cfg.queue_config()?;

    let mut specs: Vec<CellSpec> = cells
        .iter()
        .map(|&(h_t, h_e)| CellSpec {
            h_t,
            h_e,
            elide: cfg.elide,
            mode: SubtreeMode::KdTree,
        })
        .collect();
    // baselines: no elision, full elision height
    specs.push(CellSpec {
        h_t: base_ht,
        h_e: height,
        elide: false,
        mode: SubtreeMode::Exhaustive,
    });
    specs.push(CellSpec {
        h_t: base_ht,
        h_e: height,
        elide: false,
        mode: SubtreeMode::KdTree,
    });
    let runs: Vec<CellRun> = pool(jobs)?.install(|| {
        specs
            .par_iter()
            .map(|&c| {
                run_cell(cfg, w, c, false)
                    .map_err(|e| Error::Validation(format!("sweep cell (h_t = {}, h_e = {}): {e}", c.h_t, c.h_e)))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut rows = Vec::with_capacity(runs.len());
    let n = cells.len();
    for run in &runs[..n] {
        rows.push(SweepRow {
            kind: RowKind::Split,
            record: run.record.clone(),
            traffic: run.record.traffic.clone(),
            energy: run.record.energy,
        });
    }
    let exh = &runs[n];
    rows.push(SweepRow {
        kind: RowKind::BaselineExhaustive,
        record: exh.record.clone(),
        traffic: exh.record.traffic.clone(),
        energy: exh.record.energy,
    });
    let base = &runs[n + 1];
    let reload = baseline_reload(&base.split, &w.batch, &base.sim.stats, &queue);
    rows.push(SweepRow {
        kind: RowKind::BaselineReload,
        record: base.record.clone(),
        energy: energy_report(&reload, &cfg.energy),
        traffic: reload,
    });
    for r in &rows {
        info!(
            "{} h_t={} h_e={}: recall {:?}, {} cycles ({:?})",
            r.kind.as_str(),
            r.record.config.h_t,
            r.record.config.h_e,
            r.record.recall,
            r.record.stats.cycles,
            r.record.wall_time
        );
    }
    Ok(SweepResult {
        height,
        radius: w.radius,
        rows,
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize, out: &Path) -> Result<SweepResult> {
    let w = prepare(cfg)?;
    // fail on a bad grid before doing any work beyond loading
    sweep_cells(cfg, w.height())?;
    let result = sweep_on(cfg, &w, jobs)?;
    ensure_dir(out)?;
    let mut csv = Vec::new();
    result.write_csv(&mut csv).expect("write to memory");
    write_file(&out.join("sweep.csv"), &csv)?;
    write_file(&out.join("config.json"), resolved_config(cfg, &w).to_json().as_bytes())?;
    Ok(result)
}

/// The config with the tuned radius filled in, so a rerun skips tuning.
pub fn resolved_config(cfg: &ExperimentConfig, w: &Workload) -> ExperimentConfig {
    ExperimentConfig {
        radius: Some(w.radius),
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub ours: u64,
    pub baseline: u64,
    /// `1 - ours / baseline`, negative if ours is larger.
    pub reduction: f64,
}

impl Reduction {
    pub fn new(ours: u64, baseline: u64) -> Self {
        let reduction = if baseline == 0 {
            0.0
        } else {
            1.0 - ours as f64 / baseline as f64
        };
        Reduction {
            ours,
            baseline,
            reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub version: u32,
    pub h_t: u32,
    pub h_e: u32,
    pub elide: bool,
    pub height: u32,
    pub subtrees: usize,
    pub recall: Option<f64>,
    /// Total node visits vs the exhaustive sub-tree scan.
    pub visits_vs_exhaustive: Reduction,
    /// Sub-tree node visits only.
    pub subtree_visits_vs_exhaustive: Reduction,
    /// DRAM bytes vs reloading a sub-tree per queue flush.
    pub dram_vs_reload: Reduction,
    /// DRAM bytes vs a monolithic exact search behind an LRU node cache.
    pub dram_vs_monolithic: Reduction,
    pub monolithic_random_bytes: u64,
    pub energy_ours: EnergyReport,
    pub energy_reload: EnergyReport,
    pub energy_monolithic: EnergyReport,
    pub savings_vs_monolithic: Savings,
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

pub fn compare_on(cfg: &ExperimentConfig, w: &Workload) -> Result<CompareReport> {
    let height = w.height();
    let h_t = cfg.h_t.resolve(height)?[0];
    let h_e = cfg.h_e.resolve(height)?[0];
    validate_cell(cfg, height, h_t, h_e)?;
    let queue = cfg.queue_config()?;
    let ours = run_cell(
        cfg,
        w,
        CellSpec {
            h_t,
            h_e,
            elide: cfg.elide,
            mode: SubtreeMode::KdTree,
        },
        false,
    )?;
    let exh = run_cell(
        cfg,
        w,
        CellSpec {
            h_t,
            h_e,
            elide: cfg.elide,
            mode: SubtreeMode::Exhaustive,
        },
        false,
    )?;
    let reload = baseline_reload(&ours.split, &w.batch, &ours.sim.stats, &queue);
    // The monolithic baseline keeps the tree in DRAM, so the buffer size
    // does not constrain it.
    let mono_cfg = ExperimentConfig {
        buffer_words: Some(auto_buffer_words(height)),
        agg_elide: false,
        ..cfg.clone()
    };
    let mono = run_cell(
        &mono_cfg,
        w,
        CellSpec {
            h_t: 0,
            h_e: height,
            elide: false,
            mode: SubtreeMode::KdTree,
        },
        true,
    )?;
    let mono_traffic = baseline_monolithic(&mono.sim.accesses, &mono.sim.stats, cfg.cache_bytes);
    let o = &ours.record;
    Ok(CompareReport {
        version: REPORT_VERSION,
        h_t,
        h_e,
        elide: cfg.elide,
        height,
        subtrees: ours.split.subtree_count(),
        recall: o.recall,
        visits_vs_exhaustive: Reduction::new(o.stats.node_visits, exh.record.stats.node_visits),
        subtree_visits_vs_exhaustive: Reduction::new(
            o.stats.sub_tree.node_visits,
            exh.record.stats.sub_tree.node_visits,
        ),
        dram_vs_reload: Reduction::new(o.traffic.total_bytes(), reload.total_bytes()),
        dram_vs_monolithic: Reduction::new(o.traffic.total_bytes(), mono_traffic.total_bytes()),
        monolithic_random_bytes: mono_traffic.random_bytes,
        energy_ours: o.energy,
        energy_reload: energy_report(&reload, &cfg.energy),
        energy_monolithic: energy_report(&mono_traffic, &cfg.energy),
        savings_vs_monolithic: savings(&mono_traffic, &o.traffic, &cfg.energy),
    })
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareReport> {
    let w = prepare(cfg)?;
    let report = compare_on(cfg, &w)?;
    ensure_dir(out)?;
    write_file(&out.join("compare.json"), report.to_json().as_bytes())?;
    let mut csv = Vec::new();
    report.savings_vs_monolithic.write_csv(&mut csv).expect("write to memory");
    write_file(&out.join("savings.csv"), &csv)?;
    Ok(report)
}

pub const ARTIFACT_VERSION: u32 = 1;

/// Self-contained built tree: the cloud, the split parameters and the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeArtifact {
    pub version: u32,
    pub h_t: u32,
    pub buffer_words: u64,
    pub cloud: PointCloud,
    pub tree: TreeDump,
}

impl TreeArtifact {
    pub fn new(cloud: PointCloud, split: &SplitTree) -> Self {
        TreeArtifact {
            version: ARTIFACT_VERSION,
            h_t: split.h_t(),
            buffer_words: split.buffer_words(),
            cloud,
            tree: split.tree().to_dump(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = artifact_path(path);
        let a: TreeArtifact = serde_json::from_str(&read_text(&path)?)?;
        if a.version != ARTIFACT_VERSION {
            return Err(Error::Validation(format!(
                "tree artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                a.version
            )));
        }
        Ok(a)
    }

    /// Validate and rebuild, optionally re-splitting at another h_t.
    pub fn split(&self, h_t: Option<u32>) -> Result<SplitTree> {
        let tree = KdTree::from_dump(&self.tree, &self.cloud)?;
        split_tree(tree, h_t.unwrap_or(self.h_t), self.buffer_words)
    }
}

/// A directory resolves to its `tree.json`.
pub fn artifact_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("tree.json")
    } else {
        path.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub points: usize,
    pub height: u32,
    pub h_t: u32,
    pub buffer_words: u64,
    pub subtrees: usize,
}

impl std::fmt::Display for BuildSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "N={} H={} h_t={} S={} subtrees={}",
            self.points, self.height, self.h_t, self.buffer_words, self.subtrees
        )
    }
}

pub fn build_split(cloud: &PointCloud, h_t: u32, buffer_words: Option<u64>) -> Result<SplitTree> {
    let tree = build_kdtree(cloud);
    let s = buffer_words.unwrap_or_else(|| auto_buffer_words(tree.height()));
    split_tree(tree, h_t, s)
}

pub fn cmd_build(dataset: &DatasetSpec, h_t: u32, buffer_words: Option<u64>, out: &Path) -> Result<BuildSummary> {
    let cloud = dataset.load()?;
    let split = build_split(&cloud, h_t, buffer_words)?;
    let summary = BuildSummary {
        points: cloud.len(),
        height: split.height(),
        h_t,
        buffer_words: split.buffer_words(),
        subtrees: split.subtree_count(),
    };
    ensure_dir(out)?;
    let artifact = TreeArtifact::new(cloud, &split);
    write_file(&out.join("tree.json"), serde_json::to_string(&artifact)?.as_bytes())?;
    Ok(summary)
}

/// Inputs of a single search run against a built tree.
#[derive(Debug, Clone)]
pub struct SearchRequest {
    pub tree: PathBuf,
    /// Overrides the artifact's h_t (re-split with the same buffer size).
    pub h_t: Option<u32>,
    /// Defaults to H (no elision).
    pub h_e: Option<u32>,
    pub experiment: ExperimentConfig,
    pub trace: bool,
    pub gather_csv: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub record: RunRecord,
    pub height: u32,
}

pub fn cmd_search(req: &SearchRequest, out: &Path) -> Result<SearchOutcome> {
    let cfg = &req.experiment;
    cfg.validate_static()?;
    let artifact = TreeArtifact::load(&req.tree)?;
    let split = artifact.split(req.h_t)?;
    let height = split.height();
    let h_e = req.h_e.unwrap_or(height);
    if h_e < 1 || h_e > height {
        return Err(Error::invalid(format!("h_e = {h_e} outside permissible range [1, {height}]")));
    }
    let batch = load_queries(cfg, &artifact.cloud)?;
    let cfg = ExperimentConfig {
        buffer_words: Some(split.buffer_words()),
        ..cfg.clone()
    };
    let w = prepare_with(&cfg, artifact.cloud, batch)?;
    let run = run_cell(
        &cfg,
        &w,
        CellSpec {
            h_t: split.h_t(),
            h_e,
            elide: cfg.elide,
            mode: SubtreeMode::KdTree,
        },
        false,
    )?;
    ensure_dir(out)?;
    let mut csv = Vec::new();
    run.sim.matrix.write_csv(&mut csv).expect("write to memory");
    write_file(&out.join("neighbors.csv"), &csv)?;
    write_file(&out.join("stats.json"), run.record.to_json().as_bytes())?;
    write_file(&out.join("traffic.json"), run.record.traffic.to_json().as_bytes())?;
    if req.trace {
        let search = search_config(&cfg, &w, split.h_t(), h_e);
        let opts = SimOptions {
            elide: cfg.elide,
            trace: true,
            ..Default::default()
        };
        let traced = simulate(&split, &w.batch, &search, &cfg.bank_config()?, &cfg.pe_config()?, opts)?;
        let mut buf = Vec::new();
        crate::memsim::write_trace_csv(&traced.trace, &mut buf).expect("write to memory");
        write_file(&out.join("trace.csv"), &buf)?;
    }
    if req.gather_csv {
        let g = gather(&run.sim.matrix, &cfg.agg_bank_config()?, cfg.agg_elide);
        let mut buf = Vec::new();
        g.write_csv(&run.sim.matrix, &mut buf).expect("write to memory");
        write_file(&out.join("gather.csv"), &buf)?;
    }
    Ok(SearchOutcome {
        record: run.record,
        height,
    })
}

pub fn cmd_gen(dataset: &DatasetSpec, out: &Path, format: Option<CloudFormat>) -> Result<usize> {
    let cloud = dataset.load()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    crate::geometry::save_cloud(&cloud, out, format.unwrap_or_else(|| CloudFormat::from_path(out)))?;
    Ok(cloud.len())
}
