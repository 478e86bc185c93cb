//! Shared fixtures for the crescent-core benchmarks in `benches/`.

use crescent_core::{build_kdtree, generate_cloud, CloudKind, KdTree, PointCloud, QueryBatch};

pub struct Fixture {
    pub cloud: PointCloud,
    pub tree: KdTree,
    pub batch: QueryBatch,
    /// Radius giving roughly 32 neighbors per query on a uniform cloud of this size.
    pub radius: f64,
}

/// Uniform cloud of `n` points with `queries` self-queries.
pub fn fixture(n: usize, queries: usize) -> Fixture {
    let cloud = generate_cloud(CloudKind::UniformCube, n, 1).expect("generate");
    let tree = build_kdtree(&cloud);
    let batch = QueryBatch::sample_from_cloud(&cloud, queries, 7).expect("sample");
    // 32 = n * (4/3) pi r^3
    let radius = (32.0 * 3.0 / (4.0 * std::f64::consts::PI * n as f64)).cbrt();
    Fixture {
        cloud,
        tree,
        batch,
        radius,
    }
}
