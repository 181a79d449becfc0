//! Analytic shapes with exact signed distance, used to synthesize inputs and
//! as ground truth for evaluation.

use super::PointCloud;
use crate::geom::{self, Vec3};
use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Torus,
    Box,
}

/// Sphere at the origin, torus around the z axis, or axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticShape {
    Sphere { radius: f64 },
    Torus { major: f64, minor: f64 },
    Box { half_extents: Vec3 },
}

impl SyntheticShape {
    pub fn default_for(kind: ShapeKind) -> Self {
        match kind {
            ShapeKind::Sphere => SyntheticShape::Sphere { radius: 0.4 },
            ShapeKind::Torus => SyntheticShape::Torus {
                major: 0.3,
                minor: 0.12,
            },
            ShapeKind::Box => SyntheticShape::Box {
                half_extents: [0.35, 0.25, 0.2],
            },
        }
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            SyntheticShape::Sphere { .. } => ShapeKind::Sphere,
            SyntheticShape::Torus { .. } => ShapeKind::Torus,
            SyntheticShape::Box { .. } => ShapeKind::Box,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SyntheticShape::Sphere { radius } => radius > 0.0,
            SyntheticShape::Torus { major, minor } => minor > 0.0 && major > minor,
            SyntheticShape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid shape parameters: {self}")))
        }
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            SyntheticShape::Sphere { radius } => geom::norm(p) - radius,
            SyntheticShape::Torus { major, minor } => {
                let ring = p[0].hypot(p[1]) - major;
                ring.hypot(p[2]) - minor
            }
            SyntheticShape::Box { half_extents: b } => {
                let q = [p[0].abs() - b[0], p[1].abs() - b[1], p[2].abs() - b[2]];
                let outside = geom::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    /// Analytic gradient of [`Self::sdf`]; unit length off the medial axis.
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        match *self {
            SyntheticShape::Sphere { .. } => geom::normalized(p).unwrap_or([1.0, 0.0, 0.0]),
            SyntheticShape::Torus { major, .. } => {
                let rho = p[0].hypot(p[1]);
                let (cx, cy) = if rho > 0.0 {
                    (p[0] / rho * major, p[1] / rho * major)
                } else {
                    (major, 0.0)
                };
                geom::normalized([p[0] - cx, p[1] - cy, p[2]]).unwrap_or([0.0, 0.0, 1.0])
            }
            SyntheticShape::Box { half_extents: b } => {
                let q = [p[0].abs() - b[0], p[1].abs() - b[1], p[2].abs() - b[2]];
                let sign = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
                if q.iter().any(|&c| c > 0.0) {
                    let g = [
                        q[0].max(0.0) * sign(p[0]),
                        q[1].max(0.0) * sign(p[1]),
                        q[2].max(0.0) * sign(p[2]),
                    ];
                    geom::normalized(g).unwrap_or([1.0, 0.0, 0.0])
                } else {
                    let k = (0..3)
                        .max_by(|&i, &j| q[i].total_cmp(&q[j]))
                        .expect("three axes");
                    let mut g = [0.0; 3];
                    g[k] = sign(p[k]);
                    g
                }
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            SyntheticShape::Sphere { radius } => 4.0 * PI * radius * radius,
            SyntheticShape::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            SyntheticShape::Box { half_extents: b } => {
                8.0 * (b[0] * b[1] + b[1] * b[2] + b[0] * b[2])
            }
        }
    }

    /// Area-uniform surface samples and their outward unit normals.
    pub fn sample_surface(&self, n: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut rng = rng::rng_from(seed);
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, nrm) = self.sample_one(&mut rng);
            points.push(p);
            normals.push(nrm);
        }
        (points, normals)
    }

    fn sample_one<R: Rng>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match *self {
            SyntheticShape::Sphere { radius } => loop {
                let d: Vec3 = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                if let Some(u) = geom::normalized(d) {
                    return (geom::scale(u, radius), u);
                }
            },
            SyntheticShape::Torus { major, minor } => {
                let u = rng.random::<f64>() * 2.0 * PI;
                // the area element is proportional to (R + r cos v)
                let v = loop {
                    let v = rng.random::<f64>() * 2.0 * PI;
                    let accept = (major + minor * v.cos()) / (major + minor);
                    if rng.random::<f64>() < accept {
                        break v;
                    }
                };
                let ring = major + minor * v.cos();
                let p = [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                let nrm = [v.cos() * u.cos(), v.cos() * u.sin(), v.sin()];
                (p, nrm)
            }
            SyntheticShape::Box { half_extents: b } => {
                let areas = [b[1] * b[2], b[0] * b[2], b[0] * b[1]];
                let total: f64 = areas.iter().sum();
                let mut t = rng.random::<f64>() * total;
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if t < *a {
                        axis = k;
                        break;
                    }
                    t -= a;
                }
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        side * b[k]
                    } else {
                        (2.0 * rng.random::<f64>() - 1.0) * b[k]
                    };
                }
                let mut nrm = [0.0; 3];
                nrm[axis] = side;
                (p, nrm)
            }
        }
    }
}

impl fmt::Display for SyntheticShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticShape::Sphere { radius } => write!(f, "sphere:{radius}"),
            SyntheticShape::Torus { major, minor } => write!(f, "torus:{major}:{minor}"),
            SyntheticShape::Box { half_extents: b } => write!(f, "box:{}:{}:{}", b[0], b[1], b[2]),
        }
    }
}

/// `sphere`, `sphere:R`, `torus`, `torus:R:r`, `box`, `box:a:b:c`.
impl FromStr for SyntheticShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or_default().to_ascii_lowercase();
        let nums = parts
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad shape parameters in {s:?}")))?;
        let kind = match name.as_str() {
            "sphere" => ShapeKind::Sphere,
            "torus" => ShapeKind::Torus,
            "box" => ShapeKind::Box,
            _ => return Err(Error::InvalidArgument(format!("unknown shape {name:?}"))),
        };
        let shape = match (kind, nums.as_slice()) {
            (_, []) => SyntheticShape::default_for(kind),
            (ShapeKind::Sphere, [r]) => SyntheticShape::Sphere { radius: *r },
            (ShapeKind::Torus, [a, b]) => SyntheticShape::Torus {
                major: *a,
                minor: *b,
            },
            (ShapeKind::Box, [a, b, c]) => SyntheticShape::Box {
                half_extents: [*a, *b, *c],
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "wrong number of parameters for {name}: {s:?}"
                )))
            }
        };
        shape.validate()?;
        Ok(shape)
    }
}

/// `n` exact surface samples, area-uniform.
pub fn sample_synthetic(shape: &SyntheticShape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    shape.validate()?;
    PointCloud::new(shape.sample_surface(n, seed).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sphere_samples_on_surface() {
        let s = SyntheticShape::Sphere { radius: 0.4 };
        let c = sample_synthetic(&s, 1024, 1).unwrap();
        assert_eq!(c.len(), 1024);
        assert!(c.points.iter().all(|p| (geom::norm(*p) - 0.4).abs() < 1e-6));
    }

    #[test]
    fn torus_samples_on_surface() {
        let s = SyntheticShape::Torus {
            major: 0.3,
            minor: 0.12,
        };
        let c = sample_synthetic(&s, 2048, 2).unwrap();
        assert!(c.points.iter().all(|p| s.sdf(*p).abs() < 1e-6));
    }

    #[test]
    fn box_samples_on_surface() {
        let s = SyntheticShape::default_for(ShapeKind::Box);
        let c = sample_synthetic(&s, 2000, 3).unwrap();
        assert!(c.points.iter().all(|p| s.sdf(*p).abs() < 1e-6));
    }

    #[test]
    fn single_sample_and_zero_rejected() {
        let s = SyntheticShape::Sphere { radius: 0.4 };
        assert_eq!(sample_synthetic(&s, 1, 0).unwrap().len(), 1);
        assert!(sample_synthetic(&s, 0, 0).is_err());
    }

    #[test]
    fn sign_convention() {
        for kind in [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Box] {
            let s = SyntheticShape::default_for(kind);
            let (pts, nrm) = s.sample_surface(50, 9);
            for (p, n) in pts.iter().zip(&nrm) {
                assert!(s.sdf(geom::add(*p, geom::scale(*n, 0.01))) > 0.0);
                assert!(s.sdf(geom::sub(*p, geom::scale(*n, 0.01))) < 0.0);
            }
        }
    }

    #[test]
    fn torus_area_density() {
        // inner half (cos v < 0) carries (pi R - 2 r)/(2 pi R) of the area
        let (major, minor) = (0.3, 0.12);
        let s = SyntheticShape::Torus { major, minor };
        let (pts, _) = s.sample_surface(20_000, 5);
        let inner = pts.iter().filter(|p| p[0].hypot(p[1]) < major).count() as f64;
        let expected = (PI * major - 2.0 * minor) / (2.0 * PI * major);
        let frac = inner / pts.len() as f64;
        let sd = (expected * (1.0 - expected) / pts.len() as f64).sqrt();
        assert!((frac - expected).abs() < 4.0 * sd, "{frac} vs {expected}");
    }

    #[test]
    fn unit_gradient_away_from_medial_axis() {
        let h = 1e-6;
        let mut rng = rng::rng_from(42);
        for kind in [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Box] {
            let s = SyntheticShape::default_for(kind);
            let mut checked = 0;
            while checked < 200 {
                let p = [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                ];
                let mut g = [0.0; 3];
                for k in 0..3 {
                    let mut a = p;
                    let mut b = p;
                    a[k] += h;
                    b[k] -= h;
                    g[k] = (s.sdf(a) - s.sdf(b)) / (2.0 * h);
                }
                // near the medial axis the two one-sided slopes disagree
                let near_medial = (0..3).any(|k| {
                    let mut a = p;
                    a[k] += 1e-3;
                    let mut b = p;
                    b[k] -= 1e-3;
                    let ga = s.gradient(a);
                    let gb = s.gradient(b);
                    geom::dist(ga, gb) > 1e-2
                });
                if near_medial {
                    continue;
                }
                assert!((geom::norm(g) - 1.0).abs() < 1e-4, "{kind:?} at {p:?}");
                assert!(geom::dist(g, s.gradient(p)) < 1e-4);
                checked += 1;
            }
        }
    }

    #[test]
    fn parse_and_display() {
        let s: SyntheticShape = "torus:0.3:0.12".parse().unwrap();
        assert_eq!(s, SyntheticShape::Torus { major: 0.3, minor: 0.12 });
        assert_eq!(s.to_string().parse::<SyntheticShape>().unwrap(), s);
        assert_eq!("sphere".parse::<SyntheticShape>().unwrap(), SyntheticShape::Sphere { radius: 0.4 });
        assert!("sphere:1:2".parse::<SyntheticShape>().is_err());
        assert!("cone".parse::<SyntheticShape>().is_err());
    }
}
