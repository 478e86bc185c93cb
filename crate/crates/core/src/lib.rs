//! Approximate radius-limited neighbor search over split K-d trees, with a
//! cycle model of the banked on-chip tree buffer and DRAM traffic and energy
//! accounting.

pub mod aggregate;
pub mod error;
pub mod exact_search;
pub mod geometry;
pub mod harness;
pub mod kdtree;
pub mod memsim;
pub mod split_search;
pub mod traffic;
pub mod traversal;

pub use error::{CapacityRule, Error, Result};
pub use exact_search::{brute_force_search, kdtree_search, Neighbor, NeighborList};
pub use geometry::{generate_cloud, CloudFormat, CloudKind, Point3, PointCloud, QueryBatch};
pub use kdtree::{build_kdtree, split_tree, KdNode, KdTree, NodeId, SplitTree};
pub use split_search::{approximate_search, recall, NeighborMatrix, SearchConfig};
pub use memsim::{bank_of, simulate_search, BankConfig, PEConfig, SimStats};
pub use traffic::{EnergyModel, QueueConfig, TrafficReport};
pub use aggregate::{gather, gather_distortion, GatherResult};
pub use harness::{ExperimentConfig, RunRecord};
