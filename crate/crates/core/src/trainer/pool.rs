use crate::geom::{self, Vec3};
use crate::pointcloud::PointCloud;
use crate::rng;
use crate::spatial::KdTree;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Fixed training queries drawn around the input points.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPool {
    pub queries: Vec<Vec3>,
    pub nearest_index: Vec<usize>,
    /// Position of `nearest_index[i]`.
    pub nearest: Vec<Vec3>,
    pub parent_sigma: Vec<f64>,
    /// Local scale σ_p of every input point, after the zero fallback.
    pub point_sigma: Vec<f64>,
}

impl QueryPool {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Mean σ_p over the input points.
    pub fn rho_avg(&self) -> f64 {
        self.point_sigma.iter().sum::<f64>() / self.point_sigma.len() as f64
    }
}

/// Per-point σ_p (distance to the K-th neighbour). Zero values, from
/// duplicated points, are replaced by the median of the positive ones.
pub fn local_scales(tree: &KdTree, k: usize, knn_includes_self: bool) -> Result<Vec<f64>> {
    let mut sigma = tree.local_sigmas(k, knn_includes_self)?;
    if sigma.iter().any(|s| *s <= 0.0) {
        let mut pos: Vec<f64> = sigma.iter().copied().filter(|s| *s > 0.0).collect();
        if pos.is_empty() {
            return Err(Error::Degenerate("every local scale is zero".into()));
        }
        pos.sort_by(f64::total_cmp);
        let median = if pos.len() % 2 == 1 {
            pos[pos.len() / 2]
        } else {
            0.5 * (pos[pos.len() / 2 - 1] + pos[pos.len() / 2])
        };
        let n_zero = sigma.iter().filter(|s| **s <= 0.0).count();
        log::warn!("{n_zero} points have zero local scale; using median {median:.3e}");
        sigma.iter_mut().filter(|s| **s <= 0.0).for_each(|s| *s = median);
    }
    Ok(sigma)
}

/// Draws `queries_per_point` samples from `N(p, σ_p² I)` around every input
/// point and records the exact nearest input point of each.
pub fn build_query_pool(
    cloud: &PointCloud,
    tree: &KdTree,
    k: usize,
    queries_per_point: usize,
    knn_includes_self: bool,
    seed: u64,
) -> Result<QueryPool> {
    if queries_per_point == 0 {
        return Err(Error::InvalidArgument("queries_per_point must be >= 1".into()));
    }
    if tree.len() != cloud.len() {
        return Err(Error::ShapeMismatch("kd-tree was built for a different cloud".into()));
    }
    let point_sigma = local_scales(tree, k, knn_includes_self)?;
    let mut r = rng::rng_from(seed);
    let n = cloud.len() * queries_per_point;
    let mut queries = Vec::with_capacity(n);
    let mut parent_sigma = Vec::with_capacity(n);
    for (p, &s) in cloud.points.iter().zip(&point_sigma) {
        for _ in 0..queries_per_point {
            let d: Vec3 = [r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal)];
            queries.push(geom::add(*p, geom::scale(d, s)));
            parent_sigma.push(s);
        }
    }
    let found: Vec<(usize, Vec3, f64)> = queries.par_iter().map(|&q| tree.nearest(q)).collect();
    Ok(QueryPool {
        queries,
        nearest_index: found.iter().map(|f| f.0).collect(),
        nearest: found.iter().map(|f| f.1).collect(),
        parent_sigma,
        point_sigma,
    })
}
