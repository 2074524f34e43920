//! Synthetic partial/complete point-cloud pairs from four parametric shapes.
//!
//! Complete clouds are uniform surface samples, rotated and rescaled so the
//! farthest point lies on the unit sphere. Partial clouds keep the side of
//! the shape facing a random view direction.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::PointCloud;
use crate::tensor::{read_exact, read_u32, Tensor};

pub const HPCD_MAGIC: &[u8; 4] = b"HPCD";
pub const HPCD_VERSION: u32 = 1;
pub const MIN_COMPLETE_POINTS: usize = 64;
/// Segments used to triangulate round cross-sections.
const SEGMENTS: usize = 64;
const VIEW_DIR_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Sphere, Self::Box, Self::Cylinder, Self::Cone];

    pub fn class_id(self) -> u32 {
        self as u32
    }

    pub fn from_class_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Semi-axes (sphere), half-extents (box), or radii and half-height
    /// (cylinder, cone).
    pub scale: [f64; 3],
    /// Axis-angle vector; its length is the angle in radians.
    pub rotation: [f64; 3],
    pub n_complete: usize,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, n_complete: usize) -> Self {
        Self { kind, scale: [1.0; 3], rotation: [0.0; 3], n_complete }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("shape scales must be > 0, got {:?}", self.scale)));
        }
        if self.rotation.iter().any(|r| !r.is_finite()) {
            return Err(Error::Domain("rotation must be finite".into()));
        }
        if self.n_complete < MIN_COMPLETE_POINTS {
            return Err(Error::Domain(format!(
                "n_complete must be >= {MIN_COMPLETE_POINTS}, got {}",
                self.n_complete
            )));
        }
        Ok(())
    }
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: V3) -> f64 {
    dot3(a, a).sqrt()
}

/// Triangle soup with area-proportional sampling.
struct Mesh {
    tris: Vec<[V3; 3]>,
    cumulative: Vec<f64>,
}

impl Mesh {
    fn new(tris: Vec<[V3; 3]>) -> Self {
        let mut acc = 0.0;
        let cumulative = tris
            .iter()
            .map(|[a, b, c]| {
                acc += 0.5 * norm3(cross(sub(*b, *a), sub(*c, *a)));
                acc
            })
            .collect();
        Self { tris, cumulative }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> V3 {
        let total = *self.cumulative.last().expect("non-empty mesh");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.tris.len() - 1);
        let [a, b, c] = self.tris[i];
        let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        std::array::from_fn(|k| a[k] + r1 * (b[k] - a[k]) + r2 * (c[k] - a[k]))
    }
}

fn quad(a: V3, b: V3, c: V3, d: V3) -> [[V3; 3]; 2] {
    [[a, b, c], [a, c, d]]
}

fn box_mesh([x, y, z]: V3) -> Mesh {
    let p = |sx: f64, sy: f64, sz: f64| [sx * x, sy * y, sz * z];
    let faces = [
        quad(p(1., -1., -1.), p(1., 1., -1.), p(1., 1., 1.), p(1., -1., 1.)),
        quad(p(-1., -1., -1.), p(-1., -1., 1.), p(-1., 1., 1.), p(-1., 1., -1.)),
        quad(p(-1., 1., -1.), p(-1., 1., 1.), p(1., 1., 1.), p(1., 1., -1.)),
        quad(p(-1., -1., -1.), p(1., -1., -1.), p(1., -1., 1.), p(-1., -1., 1.)),
        quad(p(-1., -1., 1.), p(1., -1., 1.), p(1., 1., 1.), p(-1., 1., 1.)),
        quad(p(-1., -1., -1.), p(-1., 1., -1.), p(1., 1., -1.), p(1., -1., -1.)),
    ];
    Mesh::new(faces.into_iter().flatten().collect())
}

fn ring([rx, ry, _]: V3, z: f64) -> Vec<V3> {
    (0..SEGMENTS)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / SEGMENTS as f64;
            [rx * a.cos(), ry * a.sin(), z]
        })
        .collect()
}

/// Elliptic cylinder along z with both caps.
fn cylinder_mesh(s: V3) -> Mesh {
    let (lo, hi) = (ring(s, -s[2]), ring(s, s[2]));
    let mut tris = Vec::with_capacity(4 * SEGMENTS);
    for i in 0..SEGMENTS {
        let j = (i + 1) % SEGMENTS;
        tris.extend(quad(lo[i], lo[j], hi[j], hi[i]));
        tris.push([[0.0, 0.0, s[2]], hi[i], hi[j]]);
        tris.push([[0.0, 0.0, -s[2]], lo[j], lo[i]]);
    }
    Mesh::new(tris)
}

/// Apex at `+z`, elliptic base at `-z`.
fn cone_mesh(s: V3) -> Mesh {
    let base = ring(s, -s[2]);
    let apex = [0.0, 0.0, s[2]];
    let mut tris = Vec::with_capacity(2 * SEGMENTS);
    for i in 0..SEGMENTS {
        let j = (i + 1) % SEGMENTS;
        tris.push([base[i], base[j], apex]);
        tris.push([[0.0, 0.0, -s[2]], base[j], base[i]]);
    }
    Mesh::new(tris)
}

fn unit_gaussian<R: Rng>(rng: &mut R) -> V3 {
    loop {
        let v: V3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = norm3(v);
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

/// Uniform on the ellipsoid surface: map sphere samples through the semi-axes
/// and accept in proportion to the local area stretch.
fn ellipsoid_point<R: Rng>(rng: &mut R, [a, b, c]: V3) -> V3 {
    let stretch = |u: V3| {
        let g = [b * c * u[0], a * c * u[1], a * b * u[2]];
        norm3(g)
    };
    let bound = (a * b).max(a * c).max(b * c);
    loop {
        let u = unit_gaussian(rng);
        if rng.random::<f64>() * bound <= stretch(u) {
            return [a * u[0], b * u[1], c * u[2]];
        }
    }
}

/// Rodrigues rotation matrix for an axis-angle vector.
fn rotation_matrix(r: V3) -> [[f64; 3]; 3] {
    let theta = norm3(r);
    if theta == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [x, y, z] = r.map(|v| v / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Samples the surface of `spec`, rotates, and rescales so that the largest
/// point norm is exactly 1. Deterministic in `(spec, seed)`.
pub fn generate_complete(spec: &ShapeSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_complete;
    let raw: Vec<V3> = match spec.kind {
        ShapeKind::Sphere => (0..n).map(|_| ellipsoid_point(&mut rng, spec.scale)).collect(),
        kind => {
            let mesh = match kind {
                ShapeKind::Box => box_mesh(spec.scale),
                ShapeKind::Cylinder => cylinder_mesh(spec.scale),
                _ => cone_mesh(spec.scale),
            };
            (0..n).map(|_| mesh.sample(&mut rng)).collect()
        }
    };
    let rot = rotation_matrix(spec.rotation);
    let rotated: Vec<V3> = raw
        .iter()
        .map(|p| std::array::from_fn(|i| dot3(rot[i], *p)))
        .collect();
    let max = rotated.iter().map(|p| norm3(*p)).fold(0.0, f64::max);
    let data = rotated.iter().flat_map(|p| p.map(|v| v / max)).collect();
    PointCloud::new(Tensor::matrix(n, 3, data)?, Some(spec.kind.class_id() as usize))
}

/// Keeps the `keep_fraction` of points with the largest projection on
/// `view_dir` (ties keep the lower index), then draws `n_partial` of them
/// uniformly with replacement.
pub fn crop_partial(
    complete: &PointCloud,
    view_dir: V3,
    keep_fraction: f64,
    n_partial: usize,
    seed: u64,
) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Domain(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    if !((norm3(view_dir) - 1.0).abs() <= VIEW_DIR_TOL) {
        return Err(Error::Domain(format!("view direction {view_dir:?} is not a unit vector")));
    }
    if complete.is_empty() || n_partial == 0 {
        return Err(Error::Domain("cropping needs a non-empty cloud and n_partial >= 1".into()));
    }
    let n = complete.len();
    let proj: Vec<f64> = complete
        .points
        .iter_rows()
        .map(|p| dot3([p[0], p[1], p[2]], view_dir))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| proj[j].total_cmp(&proj[i]));
    let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let kept = &order[..keep];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_partial * 3);
    for _ in 0..n_partial {
        let idx = kept[rng.random_range(0..keep)];
        data.extend_from_slice(complete.points.row(idx));
    }
    PointCloud::new(Tensor::matrix(n_partial, 3, data)?, complete.label)
}

/// One training or evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class_id: u32,
    pub partial: Tensor,
    pub complete: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_complete: usize,
    pub n_partial: usize,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_complete < MIN_COMPLETE_POINTS || self.n_partial == 0 {
            return Err(Error::Config(format!(
                "need n_complete >= {MIN_COMPLETE_POINTS} and n_partial >= 1"
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config("keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 512, n_test: 128, n_complete: 256, n_partial: 128, keep_fraction: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Generator stream for sample `index`; the splits use disjoint ranges.
    fn stream(self, index: usize) -> u64 {
        match self {
            Split::Train => index as u64,
            Split::Test => (1 << 32) + index as u64,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.hpcd",
            Split::Test => "test.hpcd",
        }
    }
}

fn quantize(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Sample `index` of `split`, with class `index % 4`. The random shape
/// parameters, view direction and sampling seeds all come from a generator
/// keyed by `(cfg.seed, split, index)`, so samples can be built in any order.
/// Coordinates are rounded to `f32`, matching the file format.
pub fn generate_sample(cfg: &DatasetConfig, split: Split, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream(index));
    let kind = ShapeKind::ALL[index % ShapeKind::ALL.len()];
    let scale = std::array::from_fn(|_| rng.random_range(0.5..1.5));
    let axis = unit_gaussian(&mut rng);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let spec = ShapeSpec { kind, scale, rotation: axis.map(|a| a * angle), n_complete: cfg.n_complete };
    let view = unit_gaussian(&mut rng);
    let complete = generate_complete(&spec, rng.next_u64())?;
    let partial = crop_partial(&complete, view, cfg.keep_fraction, cfg.n_partial, rng.next_u64())?;
    Ok(Sample {
        class_id: kind.class_id(),
        partial: quantize(partial.points),
        complete: quantize(complete.points),
    })
}

pub fn generate_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<Sample>> {
    let n = match split {
        Split::Train => cfg.n_train,
        Split::Test => cfg.n_test,
    };
    (0..n).into_par_iter().map(|i| generate_sample(cfg, split, i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    Ok(Dataset { train: generate_split(cfg, Split::Train)?, test: generate_split(cfg, Split::Test)? })
}

/// Writes `train.hpcd` and `test.hpcd` into `dir`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&dir.join(Split::Train.file_name()), &ds.train)?;
    write_dataset(&dir.join(Split::Test.file_name()), &ds.test)?;
    Ok(())
}

pub fn read_dataset_dir(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_dataset(&dir.join(Split::Train.file_name()))?.1,
        test: read_dataset(&dir.join(Split::Test.file_name()))?.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u32,
    pub n_complete: u32,
    pub n_partial: u32,
    pub num_classes: u32,
}

impl DatasetHeader {
    pub fn for_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first();
        let n_complete = first.map_or(0, |s| s.complete.rows());
        let n_partial = first.map_or(0, |s| s.partial.rows());
        for (i, s) in samples.iter().enumerate() {
            for (what, t, n) in [("complete", &s.complete, n_complete), ("partial", &s.partial, n_partial)] {
                if t.shape() != [n, 3] {
                    return Err(Error::Format(format!(
                        "sample {i}: {what} cloud has shape {:?}, expected [{n}, 3]",
                        t.shape()
                    )));
                }
            }
        }
        let num_classes = samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0);
        let u = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")));
        Ok(Self {
            version: HPCD_VERSION,
            count: u(samples.len())?,
            n_complete: u(n_complete)?,
            n_partial: u(n_partial)?,
            num_classes,
        })
    }

    fn record_bytes(&self) -> usize {
        4 + 12 * (self.n_partial as usize + self.n_complete as usize)
    }
}

pub fn encode_dataset<W: Write>(w: &mut W, samples: &[Sample]) -> Result<DatasetHeader> {
    let h = DatasetHeader::for_samples(samples)?;
    w.write_all(HPCD_MAGIC)?;
    for v in [h.version, h.count, h.n_complete, h.n_partial, h.num_classes] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        w.write_all(&s.class_id.to_le_bytes())?;
        for v in s.partial.data().iter().chain(s.complete.data()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(h)
}

pub fn read_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "dataset magic")?;
    if &magic != HPCD_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(r, "dataset header")?;
    if version != HPCD_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    Ok(DatasetHeader {
        version,
        count: read_u32(r, "dataset header")?,
        n_complete: read_u32(r, "dataset header")?,
        n_partial: read_u32(r, "dataset header")?,
        num_classes: read_u32(r, "dataset header")?,
    })
}

pub fn decode_dataset<R: Read>(r: &mut R) -> Result<(DatasetHeader, Vec<Sample>)> {
    let h = read_header(r)?;
    let (np, nc) = (h.n_partial as usize, h.n_complete as usize);
    let mut buf = vec![0u8; h.record_bytes()];
    let mut samples = Vec::with_capacity(h.count as usize);
    for i in 0..h.count {
        read_exact(r, &mut buf, &format!("record {i} of {}", h.count))?;
        let class_id = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes"));
        if class_id >= h.num_classes {
            return Err(Error::Format(format!(
                "record {i}: class {class_id} outside {} classes",
                h.num_classes
            )));
        }
        let coords: Vec<f64> = buf[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let (p, c) = coords.split_at(np * 3);
        samples.push(Sample {
            class_id,
            partial: Tensor::new(vec![np, 3], p.to_vec())?,
            complete: Tensor::new(vec![nc, 3], c.to_vec())?,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok((h, samples))
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<DatasetHeader> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let h = encode_dataset(&mut w, samples)?;
    w.flush()?;
    Ok(h)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    decode_dataset(&mut BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub header: DatasetHeader,
    /// Sample count per class id.
    pub per_class: Vec<u64>,
}

pub fn dataset_stats(path: &Path) -> Result<DatasetStats> {
    let (header, samples) = read_dataset(path)?;
    let mut per_class = vec![0u64; header.num_classes as usize];
    for s in &samples {
        per_class[s.class_id as usize] += 1;
    }
    Ok(DatasetStats { header, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_are_unit() {
        for seed in [0, 1, 99] {
            let pc = generate_complete(&ShapeSpec::new(ShapeKind::Sphere, 200), seed).unwrap();
            assert!(pc.points.iter_rows().all(|p| (norm3([p[0], p[1], p[2]]) - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn box_points_lie_on_faces() {
        let pc = generate_complete(&ShapeSpec::new(ShapeKind::Box, 500), 3).unwrap();
        // The normalized half-extent: every face is hit, so it is the largest coordinate.
        let h = pc.points.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(h >= 1.0 / 3f64.sqrt() - 1e-9 && h <= 1.0);
        for p in pc.points.iter_rows() {
            assert!(p.iter().any(|v| (v.abs() - h).abs() < 1e-9), "{p:?}");
            assert!(p.iter().all(|v| v.abs() <= h + 1e-9));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ShapeSpec { scale: [0.7, 1.2, 0.9], rotation: [0.3, -0.2, 1.0], ..ShapeSpec::new(ShapeKind::Cone, 128) };
        assert_eq!(generate_complete(&spec, 5).unwrap(), generate_complete(&spec, 5).unwrap());
        assert_ne!(generate_complete(&spec, 5).unwrap(), generate_complete(&spec, 6).unwrap());
    }

    #[test]
    fn crop_keeps_the_facing_side() {
        let pc = generate_complete(&ShapeSpec::new(ShapeKind::Sphere, 400), 1).unwrap();
        let out = crop_partial(&pc, [0.0, 0.0, 1.0], 0.5, 300, 2).unwrap();
        let mut z: Vec<f64> = pc.points.iter_rows().map(|p| p[2]).collect();
        z.sort_by(|a, b| b.total_cmp(a));
        let min_kept = out.points.iter_rows().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        assert!(min_kept >= z[199]);
        assert!(min_kept > z[200]);
        assert!(crop_partial(&pc, [0.0, 0.0, 2.0], 0.5, 10, 2).is_err());
        assert!(crop_partial(&pc, [0.0, 0.0, 1.0], 0.0, 10, 2).is_err());
    }

    #[test]
    fn hpcd_round_trip_and_truncation() {
        let cfg = DatasetConfig { n_train: 8, n_test: 0, n_complete: 64, n_partial: 32, ..Default::default() };
        let samples = generate_split(&cfg, Split::Train).unwrap();
        let mut bytes = Vec::new();
        encode_dataset(&mut bytes, &samples).unwrap();
        let (h, back) = decode_dataset(&mut bytes.as_slice()).unwrap();
        assert_eq!(h.count, 8);
        assert_eq!(h.num_classes, 4);
        assert_eq!(back, samples);
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_dataset(&mut &cut[..]), Err(Error::Format(_))));

        let mut empty = Vec::new();
        encode_dataset(&mut empty, &[]).unwrap();
        assert!(decode_dataset(&mut empty.as_slice()).unwrap().1.is_empty());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&mut bad.as_slice()).is_err());
    }
}
