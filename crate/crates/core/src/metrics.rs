//! Reconstruction metrics: Chamfer (L1 and squared), F-Score and normal
//! consistency between sampled surfaces.

use crate::geom::{self, Vec3};
use crate::mesh::TriangleMesh;
use crate::pointcloud::{write_text, SyntheticShape};
use crate::rng;
use crate::spatial::KdTree;
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

pub const DEFAULT_TAU: f64 = 0.01;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Area-weighted uniform samples on a mesh, each with its triangle's unit
/// normal.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let mut cum = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Empty("mesh has zero surface area".into()));
    }
    let mut r = rng::rng_from(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u = r.random::<f64>() * total;
        let t = cum.partition_point(|c| *c <= u).min(cum.len() - 1);
        let [a, b, c] = mesh.triangle_vertices(t);
        let (r1, r2): (f64, f64) = (r.random(), r.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
        normals.push(mesh.triangle_normal(t).unwrap_or([0.0, 0.0, 1.0]));
    }
    Ok((points, normals))
}

/// Nearest neighbour of every point of `from` in `to`.
fn nearest_all(from: &[Vec3], to: &KdTree) -> Vec<(usize, f64)> {
    from.par_iter()
        .map(|&q| {
            let (i, _, d) = to.nearest(q);
            (i, d)
        })
        .collect()
}

fn check_nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("metric needs two non-empty point sets".into()));
    }
    Ok(())
}

/// Both directions of nearest-neighbour matching between two sets.
struct Matching {
    ab: Vec<(usize, f64)>,
    ba: Vec<(usize, f64)>,
}

impl Matching {
    fn new(a: &[Vec3], b: &[Vec3]) -> Result<Self> {
        check_nonempty(a, b)?;
        let ta = KdTree::build(a)?;
        let tb = KdTree::build(b)?;
        Ok(Self {
            ab: nearest_all(a, &tb),
            ba: nearest_all(b, &ta),
        })
    }

    fn chamfer(&self) -> (f64, f64) {
        let mean = |v: &[(usize, f64)], f: fn(f64) -> f64| v.iter().map(|x| f(x.1)).sum::<f64>() / v.len() as f64;
        let cd1 = 0.5 * mean(&self.ab, |d| d) + 0.5 * mean(&self.ba, |d| d);
        let cd2 = 0.5 * mean(&self.ab, |d| d * d) + 0.5 * mean(&self.ba, |d| d * d);
        (cd1, cd2)
    }

    fn fscore(&self, tau: f64) -> f64 {
        let frac = |v: &[(usize, f64)]| v.iter().filter(|x| x.1 < tau).count() as f64 / v.len() as f64;
        fscore_from(frac(&self.ab), frac(&self.ba))
    }

    fn normal_consistency(&self, na: &[Vec3], nb: &[Vec3]) -> f64 {
        let ab: f64 = self.ab.iter().zip(na).map(|(m, n)| geom::dot(*n, nb[m.0])).sum::<f64>() / na.len() as f64;
        let ba: f64 = self.ba.iter().zip(nb).map(|(m, n)| geom::dot(*n, na[m.0])).sum::<f64>() / nb.len() as f64;
        0.5 * (ab + ba)
    }
}

fn fscore_from(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

/// `(CD1, CD2)`: halves of the two directed mean nearest-neighbour
/// distances (squared for CD2).
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<(f64, f64)> {
    Ok(Matching::new(a, b)?.chamfer())
}

/// Harmonic mean of the fraction of `a` within `tau` of `b` and the fraction
/// of `b` within `tau` of `a` (strict inequality).
pub fn fscore(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(Matching::new(a, b)?.fscore(tau))
}

fn check_normals(points: &[Vec3], normals: &[Vec3]) -> Result<()> {
    if points.len() != normals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points but {} normals",
            points.len(),
            normals.len()
        )));
    }
    if let Some(n) = normals.iter().find(|n| (geom::norm(**n) - 1.0).abs() > UNIT_TOLERANCE) {
        return Err(Error::InvalidArgument(format!("normal {n:?} is not unit length")));
    }
    Ok(())
}

/// Mean signed dot product between each normal and the normal of its
/// nearest neighbour in the other set, averaged over both directions.
pub fn normal_consistency(a: &[Vec3], na: &[Vec3], b: &[Vec3], nb: &[Vec3]) -> Result<f64> {
    check_normals(a, na)?;
    check_normals(b, nb)?;
    Ok(Matching::new(a, b)?.normal_consistency(na, nb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub cd1: f64,
    pub cd2: f64,
    pub cd1_scaled: f64,
    pub cd2_scaled: f64,
    pub fscore: f64,
    pub nc: f64,
    pub n_samples: usize,
    pub tau: f64,
}

pub const METRICS_COLUMNS: [&str; 8] = ["cd1", "cd2", "cd1_x100", "cd2_x100", "fscore", "nc", "n_samples", "tau"];

impl MetricsReport {
    pub fn csv_header() -> String {
        METRICS_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.cd1, self.cd2, self.cd1_scaled, self.cd2_scaled, self.fscore, self.nc, self.n_samples, self.tau
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "CD1 (x100)      {:.6}", self.cd1_scaled);
        let _ = writeln!(s, "CD2 (x100)      {:.6}", self.cd2_scaled);
        let _ = writeln!(s, "F-Score (τ={})  {:.6}", self.tau, self.fscore);
        let _ = writeln!(s, "Normal cons.    {:.6}", self.nc);
        let _ = writeln!(s, "samples         {}", self.n_samples);
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

/// Reference surface for evaluation.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Mesh(TriangleMesh),
    Analytic(SyntheticShape),
    /// A fixed dense sampling with unit normals.
    Samples { points: Vec<Vec3>, normals: Vec<Vec3> },
}

impl GroundTruth {
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        match self {
            GroundTruth::Mesh(m) => sample_mesh_surface(m, n, seed),
            GroundTruth::Analytic(s) => {
                s.validate()?;
                Ok(s.sample_surface(n, seed))
            }
            GroundTruth::Samples { points, normals } => {
                if points.is_empty() || points.len() != normals.len() {
                    return Err(Error::ShapeMismatch("ground truth needs one normal per point".into()));
                }
                if n >= points.len() {
                    return Ok((points.clone(), normals.clone()));
                }
                // uniform subset without replacement
                let mut r = rng::rng_from(seed);
                let mut idx = rand::seq::index::sample(&mut r, points.len(), n).into_vec();
                idx.sort_unstable();
                Ok((idx.iter().map(|&i| points[i]).collect(), idx.iter().map(|&i| normals[i]).collect()))
            }
        }
    }
}

/// Samples `n` points on both surfaces and computes every metric.
pub fn evaluate_reconstruction(pred: &TriangleMesh, gt: &GroundTruth, n: usize, tau: f64, seed: u64) -> Result<MetricsReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if pred.triangles.is_empty() {
        return Err(Error::Empty("predicted mesh has no triangles".into()));
    }
    let (pa, na) = sample_mesh_surface(pred, n, rng::derive(seed, &[0]))?;
    let (pb, nb) = gt.sample(n, rng::derive(seed, &[1]))?;
    let m = Matching::new(&pa, &pb)?;
    let (cd1, cd2) = m.chamfer();
    Ok(MetricsReport {
        cd1,
        cd2,
        cd1_scaled: 100.0 * cd1,
        cd2_scaled: 100.0 * cd2,
        fscore: m.fscore(tau),
        nc: m.normal_consistency(&na, &nb),
        n_samples: n,
        tau,
    })
}
