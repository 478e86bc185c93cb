//! `crescent`: build split K-d trees, run simulated searches, sweep and
//! compare configurations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crescent_core::geometry::CloudFormat;
use crescent_core::harness::{self, DatasetSpec, ExperimentConfig, HeightList, SearchRequest};
use crescent_core::{CloudKind, Error, Result};
use log::info;

#[derive(Parser)]
#[command(name = "crescent", version, about = "Split K-d tree neighbor search simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a split tree and write `tree.json`.
    Build {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "ht", default_value_t = 4)]
        h_t: u32,
        #[arg(long)]
        buffer_words: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Search a built tree; writes `neighbors.csv`, `stats.json`, `traffic.json`.
    Search {
        /// Tree artifact or the directory holding `tree.json`.
        #[arg(long)]
        tree: PathBuf,
        /// Re-split at this top-tree height instead of the artifact's.
        #[arg(long = "ht")]
        h_t: Option<u32>,
        /// Elision height; defaults to H.
        #[arg(long = "he")]
        h_e: Option<u32>,
        #[command(flatten)]
        exp: ExpArgs,
        /// Also write a per-cycle `trace.csv`.
        #[arg(long)]
        trace: bool,
        /// Also write the aggregation `gather.csv`.
        #[arg(long)]
        gather: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the (h_t x h_e) grid plus baselines; writes `sweep.csv`.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// Height list such as `0..8`, `4..H`, `H-2`, `2,4,6`.
        #[arg(long = "ht")]
        h_t: Option<String>,
        #[arg(long = "he")]
        h_e: Option<String>,
        #[command(flatten)]
        exp: ExpArgs,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare one configuration against the baselines; writes `compare.json`.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "ht")]
        h_t: Option<String>,
        #[arg(long = "he")]
        h_e: Option<String>,
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a point cloud file.
    Gen {
        #[command(flatten)]
        data: DataArgs,
        /// `xyz-text` or `f32le-raw`; inferred from the extension by default.
        #[arg(long)]
        format: Option<CloudFormat>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Experiment config (JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Read points from a file instead of generating them.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// `uniform-cube`, `gaussian-clusters` or `grid`.
    #[arg(long)]
    kind: Option<CloudKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long = "k")]
    k_max: Option<usize>,
    #[arg(long)]
    banks: Option<u32>,
    #[arg(long)]
    pes: Option<u32>,
    #[arg(long)]
    queue_capacity: Option<u32>,
    #[arg(long)]
    buffer_words: Option<u64>,
    /// Enable bank-conflict elision.
    #[arg(long)]
    elide: bool,
    /// Compare against exact search and report recall.
    #[arg(long)]
    exact_oracle: bool,
    /// Number of self-queries; 0 queries every point.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    query_seed: Option<u64>,
    /// External query points instead of self-queries.
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// Exclude the query point from its own neighbors.
    #[arg(long)]
    no_self: bool,
    #[arg(long)]
    agg_banks: Option<u32>,
    #[arg(long)]
    agg_elide: bool,
}

fn base_config(config: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

impl DataArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = base_config(self.config.as_ref())?;
        self.apply(&mut cfg.dataset);
        Ok(cfg)
    }

    fn dataset(&self) -> Result<DatasetSpec> {
        Ok(self.config()?.dataset)
    }

    fn apply(&self, dataset: &mut DatasetSpec) {
        if let Some(path) = &self.cloud {
            *dataset = DatasetSpec::File {
                path: path.clone(),
                format: None,
            };
            return;
        }
        if let DatasetSpec::Generated { kind, n, seed } = dataset {
            *kind = self.kind.unwrap_or(*kind);
            *n = self.n.unwrap_or(*n);
            *seed = self.seed.unwrap_or(*seed);
        } else if self.kind.is_some() || self.n.is_some() || self.seed.is_some() {
            let d = ExperimentConfig::default().dataset;
            *dataset = d;
            self.apply(dataset);
        }
    }
}

impl ExpArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field.clone() { cfg.$field = v; })* };
        }
        set!(k_max, banks, pes, queue_capacity, queries, query_seed, agg_banks);
        if self.radius.is_some() {
            cfg.radius = self.radius;
        }
        if self.buffer_words.is_some() {
            cfg.buffer_words = self.buffer_words;
        }
        if self.query_file.is_some() {
            cfg.query_file = self.query_file.clone();
        }
        cfg.elide |= self.elide;
        cfg.agg_elide |= self.agg_elide;
        cfg.exact_oracle |= self.exact_oracle;
        if self.no_self {
            cfg.include_self = false;
        }
    }
}

fn experiment(data: &DataArgs, h_t: &Option<String>, h_e: &Option<String>, exp: &ExpArgs) -> Result<ExperimentConfig> {
    let mut cfg = data.config()?;
    exp.apply(&mut cfg);
    if let Some(s) = h_t {
        cfg.h_t = HeightList::new(s.clone());
    }
    if let Some(s) = h_e {
        cfg.h_e = HeightList::new(s.clone());
    }
    cfg.validate_static()?;
    Ok(cfg)
}

fn pct(r: f64) -> String {
    format!("{:.1}%", r * 100.0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build {
            data,
            h_t,
            buffer_words,
            out,
        } => {
            let summary = harness::cmd_build(&data.dataset()?, h_t, buffer_words, &out)?;
            println!("{summary}");
        }
        Command::Search {
            tree,
            h_t,
            h_e,
            exp,
            trace,
            gather,
            out,
        } => {
            // recall is opt-in here; sweeps and compares always compute it
            let mut cfg = ExperimentConfig {
                exact_oracle: false,
                ..Default::default()
            };
            exp.apply(&mut cfg);
            let req = SearchRequest {
                tree,
                h_t,
                h_e,
                experiment: cfg,
                trace,
                gather_csv: gather,
            };
            let outcome = harness::cmd_search(&req, &out)?;
            let rec = &outcome.record;
            info!("search took {:?}", rec.wall_time);
            let recall = rec.recall.map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"));
            println!(
                "H={} h_t={} h_e={} cycles={} node_visits={} recall={recall}",
                outcome.height, rec.config.h_t, rec.config.h_e, rec.stats.cycles, rec.stats.node_visits
            );
        }
        Command::Sweep {
            data,
            h_t,
            h_e,
            exp,
            jobs,
            out,
        } => {
            let cfg = experiment(&data, &h_t, &h_e, &exp)?;
            let res = harness::cmd_sweep(&cfg, jobs, &out)?;
            println!("H={} radius={:.6} rows={}", res.height, res.radius, res.rows.len());
        }
        Command::Compare {
            data,
            h_t,
            h_e,
            exp,
            out,
        } => {
            let cfg = experiment(&data, &h_t, &h_e, &exp)?;
            let rep = harness::cmd_compare(&cfg, &out)?;
            println!(
                "visits vs exhaustive {}, DRAM vs reload {}, DRAM vs monolithic {}",
                pct(rep.visits_vs_exhaustive.reduction),
                pct(rep.dram_vs_reload.reduction),
                pct(rep.dram_vs_monolithic.reduction)
            );
        }
        Command::Gen { data, format, out } => {
            let n = harness::cmd_gen(&data.dataset()?, &out, format)?;
            println!("wrote {n} points to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CRESCENT_LOG")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_io() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}
