//! Points, point clouds, query batches, synthetic datasets and file ingestion.
//!
//! Coordinates are 32-bit floats end to end; distance arithmetic widens to
//! `f64` so that every search path computes bit-identical keys.

use std::fmt;
use std::fs;
use std::ops::Index;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per packed `f32le` record.
pub const RAW_RECORD_BYTES: usize = 12;

/// Default spread of each gaussian cluster, in unit-cube coordinates.
pub const CLUSTER_SIGMA: f32 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point3(pub [f32; 3]);

impl Point3 {
    pub const fn new(x: f32, y: f32, z: f32) -> Self {
        Point3([x, y, z])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Squared Euclidean distance, accumulated in `f64`.
    #[inline]
    pub fn dist2(&self, other: &Point3) -> f64 {
        let dx = self.0[0] as f64 - other.0[0] as f64;
        let dy = self.0[1] as f64 - other.0[1] as f64;
        let dz = self.0[2] as f64 - other.0[2] as f64;
        dx * dx + dy * dy + dz * dz
    }
}

impl Index<usize> for Point3 {
    type Output = f32;

    #[inline]
    fn index(&self, axis: usize) -> &f32 {
        &self.0[axis]
    }
}

impl From<[f32; 3]> for Point3 {
    fn from(c: [f32; 3]) -> Self {
        Point3(c)
    }
}

/// An ordered, non-empty set of finite points. Point order is the index space
/// every neighbor result refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CloudRepr")]
pub struct PointCloud {
    id: String,
    points: Vec<Point3>,
}

#[derive(Deserialize)]
struct CloudRepr {
    id: String,
    points: Vec<Point3>,
}

impl TryFrom<CloudRepr> for PointCloud {
    type Error = Error;

    fn try_from(r: CloudRepr) -> Result<Self> {
        PointCloud::new(r.id, r.points)
    }
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if points.len() > u32::MAX as usize {
            return Err(Error::invalid("point cloud exceeds u32 index space"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            id: id.into(),
            points,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, index: u32) -> &Point3 {
        &self.points[index as usize]
    }

    /// Length of the bounding-box diagonal; any radius at least this large
    /// covers the whole cloud from any point inside it.
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] as f64);
                hi[a] = hi[a].max(p[a] as f64);
            }
        }
        (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Queries to search for. In self-query mode each query is a cloud point and
/// `self_indices[i]` is that point's index.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    queries: Vec<Point3>,
    self_indices: Option<Vec<u32>>,
}

impl QueryBatch {
    pub fn new(queries: Vec<Point3>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::invalid("query batch must contain at least one query"));
        }
        if let Some(i) = queries.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("query {i} has a non-finite coordinate")));
        }
        Ok(QueryBatch {
            queries,
            self_indices: None,
        })
    }

    /// Every cloud point, in cloud order, as its own query.
    pub fn from_cloud(cloud: &PointCloud) -> Self {
        QueryBatch {
            queries: cloud.points().to_vec(),
            self_indices: Some((0..cloud.len() as u32).collect()),
        }
    }

    /// `count` distinct cloud points drawn with a seeded sampler (all of them
    /// when `count >= N`).
    pub fn sample_from_cloud(cloud: &PointCloud, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("query count must be at least 1"));
        }
        if count >= cloud.len() {
            return Ok(Self::from_cloud(cloud));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<u32> = sample(&mut rng, cloud.len(), count)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        Ok(QueryBatch {
            queries: idx.iter().map(|&i| *cloud.point(i)).collect(),
            self_indices: Some(idx),
        })
    }

    pub fn queries(&self) -> &[Point3] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn is_self_query(&self) -> bool {
        self.self_indices.is_some()
    }

    /// The cloud index this query was drawn from, in self-query mode.
    #[inline]
    pub fn self_index(&self, qid: usize) -> Option<u32> {
        self.self_indices.as_ref().map(|s| s[qid])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudKind {
    UniformCube,
    GaussianClusters,
    Grid,
}

impl FromStr for CloudKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-cube" | "uniform" => Ok(CloudKind::UniformCube),
            "gaussian-clusters" | "clusters" => Ok(CloudKind::GaussianClusters),
            "grid" => Ok(CloudKind::Grid),
            other => Err(Error::invalid(format!("unknown cloud kind '{other}'"))),
        }
    }
}

impl fmt::Display for CloudKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CloudKind::UniformCube => "uniform-cube",
            CloudKind::GaussianClusters => "gaussian-clusters",
            CloudKind::Grid => "grid",
        })
    }
}

/// Deterministic synthetic cloud. The generator is ChaCha8 so the stream is
/// identical across platforms.
pub fn generate_cloud(kind: CloudKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("cloud size n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match kind {
        CloudKind::UniformCube => (0..n)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect(),
        CloudKind::GaussianClusters => {
            let clusters = (n / 1000).max(1);
            let centers: Vec<Point3> = (0..clusters)
                .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let noise = Normal::new(0.0f32, CLUSTER_SIGMA).expect("valid sigma");
            (0..n)
                .map(|_| {
                    let c = centers[rng.random_range(0..clusters)];
                    Point3::new(
                        c[0] + noise.sample(&mut rng),
                        c[1] + noise.sample(&mut rng),
                        c[2] + noise.sample(&mut rng),
                    )
                })
                .collect()
        }
        CloudKind::Grid => grid_points(n),
    };
    PointCloud::new(format!("{kind}-{n}-s{seed}"), points)
}

/// The first `n` vertices of the smallest cubic lattice over `[0,1]^3` that
/// has at least `n` vertices, in lexicographic `(x, y, z)` order.
fn grid_points(n: usize) -> Vec<Point3> {
    let mut side = 1usize;
    while side * side * side < n {
        side += 1;
    }
    let coord = |i: usize| {
        if side == 1 {
            0.0
        } else {
            i as f32 / (side - 1) as f32
        }
    };
    (0..n)
        .map(|k| {
            let (x, rest) = (k / (side * side), k % (side * side));
            Point3::new(coord(x), coord(rest / side), coord(rest % side))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    XyzText,
    F32leRaw,
}

impl CloudFormat {
    /// Guess the format from a file extension: `.f32le`/`.bin` are raw,
    /// everything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32le") | Some("bin") | Some("raw") => CloudFormat::F32leRaw,
            _ => CloudFormat::XyzText,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-text" | "xyz" => Ok(CloudFormat::XyzText),
            "f32le-raw" | "f32le" => Ok(CloudFormat::F32leRaw),
            other => Err(Error::invalid(format!("unknown cloud format '{other}'"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let points = match format {
        CloudFormat::XyzText => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
                source_name: name.clone(),
                location: format!("byte {}", e.valid_up_to()),
                message: "file is not valid UTF-8".into(),
            })?;
            parse_xyz(text, &name)?
        }
        CloudFormat::F32leRaw => parse_f32le(&bytes, &name)?,
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.clone());
    PointCloud::new(id, points)
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str, source_name: &str) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {}", lineno + 1),
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut c = [0f32; 3];
        for (slot, field) in c.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f32>()
                .map_err(|_| parse_err(format!("'{field}' is not a number")))?;
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "{source_name} line {}: non-finite coordinate",
                lineno + 1
            )));
        }
        points.push(Point3(c));
    }
    Ok(points)
}

pub fn parse_f32le(bytes: &[u8], source_name: &str) -> Result<Vec<Point3>> {
    if !bytes.len().is_multiple_of(RAW_RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % RAW_RECORD_BYTES;
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            location: format!("byte {offset}"),
            message: format!(
                "truncated record: {} trailing bytes, records are {RAW_RECORD_BYTES} bytes",
                bytes.len() - offset
            ),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RAW_RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RAW_RECORD_BYTES).enumerate() {
        let mut c = [0f32; 3];
        for (a, w) in rec.chunks_exact(4).enumerate() {
            c[a] = f32::from_le_bytes([w[0], w[1], w[2], w[3]]);
        }
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "{source_name} byte {}: non-finite coordinate",
                i * RAW_RECORD_BYTES
            )));
        }
        points.push(Point3(c));
    }
    Ok(points)
}

/// Text form uses the shortest decimal that round-trips each `f32`.
pub fn encode_cloud(points: &[Point3], format: CloudFormat) -> Vec<u8> {
    match format {
        CloudFormat::XyzText => {
            let mut s = String::with_capacity(points.len() * 32);
            for p in points {
                s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
            }
            s.into_bytes()
        }
        CloudFormat::F32leRaw => points
            .iter()
            .flat_map(|p| p.0.iter().flat_map(|c| c.to_le_bytes()))
            .collect(),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    fs::write(path, encode_cloud(cloud.points(), format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_of_eight_is_unit_cube_corners() {
        let c = generate_cloud(CloudKind::Grid, 8, 99).unwrap();
        let expect = [
            [0., 0., 0.],
            [0., 0., 1.],
            [0., 1., 0.],
            [0., 1., 1.],
            [1., 0., 0.],
            [1., 0., 1.],
            [1., 1., 0.],
            [1., 1., 1.],
        ];
        let got: Vec<[f32; 3]> = c.points().iter().map(|p| p.0).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn single_uniform_point_in_unit_cube() {
        let c = generate_cloud(CloudKind::UniformCube, 1, 7).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.points()[0].0.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [CloudKind::UniformCube, CloudKind::GaussianClusters, CloudKind::Grid] {
            let a = generate_cloud(kind, 10_000, 1).unwrap();
            let b = generate_cloud(kind, 10_000, 1).unwrap();
            assert_eq!(
                encode_cloud(a.points(), CloudFormat::F32leRaw),
                encode_cloud(b.points(), CloudFormat::F32leRaw)
            );
        }
        let a = generate_cloud(CloudKind::UniformCube, 100, 1).unwrap();
        let b = generate_cloud(CloudKind::UniformCube, 100, 2).unwrap();
        assert_ne!(a.points(), b.points());
    }

    #[test]
    fn zero_points_rejected() {
        assert!(matches!(
            generate_cloud(CloudKind::UniformCube, 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn xyz_text_parses_with_comments() {
        let pts = parse_xyz("# header\n0 0 0\n\n1 2 3\n", "t").unwrap();
        assert_eq!(pts, vec![Point3::new(0., 0., 0.), Point3::new(1., 2., 3.)]);
    }

    #[test]
    fn xyz_arity_error_names_line() {
        let err = parse_xyz("0 0\n", "t").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 1"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_xyz("1 1 1\n0 x 0\n", "t").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn xyz_non_finite_is_validation_error() {
        assert!(matches!(parse_xyz("0 inf 0\n", "t"), Err(Error::Validation(_))));
        assert!(matches!(parse_xyz("NaN 0 0\n", "t"), Err(Error::Validation(_))));
    }

    #[test]
    fn raw_matches_text() {
        let mut raw = Vec::new();
        for v in [0f32, 0., 0., 1., 2., 3.] {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(raw.len(), 24);
        assert_eq!(parse_f32le(&raw, "t").unwrap(), parse_xyz("0 0 0\n1 2 3\n", "t").unwrap());
    }

    #[test]
    fn raw_truncated_record_names_offset() {
        let err = parse_f32le(&[0u8; 30], "t").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "byte 24"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_from_disk_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cloud(CloudKind::GaussianClusters, 500, 3).unwrap();
        for fmt in [CloudFormat::XyzText, CloudFormat::F32leRaw] {
            let p = dir.path().join(format!("c.{fmt:?}"));
            save_cloud(&c, &p, fmt).unwrap();
            let back = load_cloud(&p, fmt).unwrap();
            assert_eq!(back.points(), c.points());
        }
        let missing = load_cloud(&dir.path().join("nope.xyz"), CloudFormat::XyzText);
        assert!(missing.unwrap_err().is_io());
    }

    #[test]
    fn sampled_queries_are_distinct_cloud_points() {
        let c = generate_cloud(CloudKind::UniformCube, 1000, 5).unwrap();
        let q = QueryBatch::sample_from_cloud(&c, 100, 9).unwrap();
        let mut idx: Vec<u32> = (0..q.len()).map(|i| q.self_index(i).unwrap()).collect();
        for (i, &ci) in idx.iter().enumerate() {
            assert_eq!(q.queries()[i], *c.point(ci));
        }
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 100);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn raw_round_trip_is_byte_identical(
                bytes in proptest::collection::vec(any::<[f32; 3]>(), 1..64)
            ) {
                let pts: Vec<Point3> = bytes.into_iter()
                    .filter(|c| c.iter().all(|v| v.is_finite()))
                    .map(Point3).collect();
                prop_assume!(!pts.is_empty());
                let enc = encode_cloud(&pts, CloudFormat::F32leRaw);
                let dec = parse_f32le(&enc, "p").unwrap();
                prop_assert_eq!(encode_cloud(&dec, CloudFormat::F32leRaw), enc);
            }

            #[test]
            fn text_round_trip_is_value_identical(
                coords in proptest::collection::vec(
                    prop::array::uniform3(-1.0e6f32..1.0e6f32), 1..64)
            ) {
                let pts: Vec<Point3> = coords.into_iter().map(Point3).collect();
                let enc = encode_cloud(&pts, CloudFormat::XyzText);
                let dec = parse_xyz(std::str::from_utf8(&enc).unwrap(), "p").unwrap();
                prop_assert_eq!(dec, pts);
            }
        }
    }
}
