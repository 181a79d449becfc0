//! Point sets: loading, unit-cube normalization, Gaussian perturbation and
//! analytic test shapes.

mod io;
mod synthetic;

pub(crate) use io::{read_text, write_text};
pub use io::{
    load_ply_ascii, load_points, load_xyz, load_xyz_normals, parse_ply_ascii, save_ply, save_points, save_xyz,
    save_xyz_normals, PlyData,
};
pub use synthetic::{sample_synthetic, ShapeKind, SyntheticShape};

use crate::geom::{self, Vec3};
use crate::rng;
use crate::{Error, Result};
use rand_distr::{Distribution, Normal};

/// Maps normalized coordinates back to world units: `world = p * scale + center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl Default for NormalizationTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        geom::add(geom::scale(p, self.scale), self.center)
    }

    pub fn to_normalized(&self, p: Vec3) -> Vec3 {
        geom::scale(geom::sub(p, self.center), 1.0 / self.scale)
    }

    /// `self` maps a new frame into the current one and `inner` maps the
    /// current frame to the world; the result maps the new frame to the world.
    fn compose_after(&self, inner: &NormalizationTransform) -> NormalizationTransform {
        NormalizationTransform {
            center: inner.to_world(self.center),
            scale: inner.scale * self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub transform: NormalizationTransform,
}

impl PointCloud {
    /// Wraps raw points with an identity transform after validating them.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| !geom::is_finite(*p)) {
            return Err(Error::InvalidArgument(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            points,
            transform: NormalizationTransform::identity(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Points mapped back through the stored transform.
    pub fn world_points(&self) -> Vec<Vec3> {
        self.points.iter().map(|&p| self.transform.to_world(p)).collect()
    }
}

/// Centers the bounding box at the origin and scales the longest axis to
/// exactly `[-0.5, 0.5]`. The returned transform composes with any transform
/// the input already carried, so `world_points` is unchanged.
pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot normalize an empty cloud".into()));
    }
    let (lo, hi) = cloud.bounding_box();
    let axis = (0..3).fold(0, |a, k| if hi[k] - lo[k] > hi[a] - lo[a] { k } else { a });
    let extent = hi[axis] - lo[axis];
    if extent <= 0.0 || !extent.is_finite() {
        return Err(Error::Degenerate(
            "all points coincide; normalization scale is undefined".into(),
        ));
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let step = NormalizationTransform {
        center,
        scale: extent,
    };
    let points = cloud
        .points
        .iter()
        .map(|&p| {
            let mut q = step.to_normalized(p);
            for c in q.iter_mut() {
                *c = c.clamp(-0.5, 0.5);
            }
            // exact endpoints on the longest axis despite rounding
            if p[axis] == lo[axis] {
                q[axis] = -0.5;
            } else if p[axis] == hi[axis] {
                q[axis] = 0.5;
            }
            q
        })
        .collect();
    Ok(PointCloud {
        points,
        transform: step.compose_after(&cloud.transform),
    })
}

/// Perturbs every coordinate with an independent `N(0, sigma^2)` draw.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be a finite value >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = rng::rng_from(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                p[0] + normal.sample(&mut rng),
                p[1] + normal.sample(&mut rng),
                p[2] + normal.sample(&mut rng),
            ]
        })
        .collect();
    Ok(PointCloud {
        points,
        transform: cloud.transform,
    })
}
