//! Static kd-tree over 3D points.
//!
//! Results are exact. Ties in distance resolve to the lowest original index,
//! which makes every query reproducible against a linear scan.

use crate::geom::{self, Vec3};
use crate::{Error, Result};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// `order[slot]` is the original index of the point stored in `slot`.
    order: Vec<usize>,
    slot_of: Vec<usize>,
    nodes: Vec<Node>,
}

/// A neighbour returned by a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist_sq.sqrt()
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

// max-heap ordering for the bounded k-NN candidate set
struct HeapItem(Neighbor);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.0.key_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

impl KdTree {
    /// Median split on the widest bounding-box axis.
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("kd-tree needs at least one point".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_rec(points, &mut order, 0, points.len(), &mut nodes);
        let mut slot_of = vec![0; order.len()];
        for (slot, &i) in order.iter().enumerate() {
            slot_of[i] = slot;
        }
        let points = order.iter().map(|&i| points[i]).collect();
        Ok(Self {
            points,
            order,
            slot_of,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point stored under its original index.
    pub fn point(&self, index: usize) -> Vec3 {
        self.points[self.slot_of[index]]
    }

    /// Nearest stored point: (original index, position, distance).
    pub fn nearest(&self, q: Vec3) -> (usize, Vec3, f64) {
        let mut best = Neighbor {
            index: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        let mut best_slot = 0;
        self.nearest_rec(0, q, &mut best, &mut best_slot);
        (best.index, self.points[best_slot], best.dist())
    }

    fn nearest_rec(&self, node: usize, q: Vec3, best: &mut Neighbor, best_slot: &mut usize) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let cand = Neighbor {
                        index: self.order[slot],
                        dist_sq: geom::dist_sq(q, self.points[slot]),
                    };
                    if cand.key_cmp(best) == Ordering::Less {
                        *best = cand;
                        *best_slot = slot;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best, best_slot);
                // `<=` keeps equal-distance candidates reachable for the tie rule
                if diff * diff <= best.dist_sq {
                    self.nearest_rec(far, q, best, best_slot);
                }
            }
        }
    }

    /// `k` nearest points sorted by (distance, index).
    pub fn knn(&self, q: Vec3, k: usize) -> Vec<Neighbor> {
        self.knn_filtered(q, k, None)
    }

    /// Like [`Self::knn`] but never returns the point with original index
    /// `exclude`.
    pub fn knn_excluding(&self, q: Vec3, k: usize, exclude: usize) -> Vec<Neighbor> {
        self.knn_filtered(q, k, Some(exclude))
    }

    fn knn_filtered(&self, q: Vec3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, q, k, exclude, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|h| h.0).collect();
        out.sort_by(|a, b| a.key_cmp(b));
        out
    }

    fn knn_rec(
        &self,
        node: usize,
        q: Vec3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<HeapItem>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let index = self.order[slot];
                    if Some(index) == exclude {
                        continue;
                    }
                    let cand = Neighbor {
                        index,
                        dist_sq: geom::dist_sq(q, self.points[slot]),
                    };
                    if heap.len() < k {
                        heap.push(HeapItem(cand));
                    } else if cand.key_cmp(&heap.peek().expect("non-empty").0) == Ordering::Less {
                        heap.pop();
                        heap.push(HeapItem(cand));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, exclude, heap);
                let worst = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().expect("non-empty").0.dist_sq
                };
                if diff * diff <= worst {
                    self.knn_rec(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// Local scale of point `index`: the largest distance among its `k`
    /// nearest neighbours. With `includes_self == false` the point itself is
    /// not counted as a neighbour (duplicates at other indices are).
    pub fn local_sigma_with(&self, index: usize, k: usize, includes_self: bool) -> Result<f64> {
        if k == 0 || k >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "K must satisfy 1 <= K < {} (cloud size), got {k}",
                self.len()
            )));
        }
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("point index {index} out of range")));
        }
        let p = self.point(index);
        let nn = if includes_self {
            self.knn(p, k)
        } else {
            self.knn_excluding(p, k, index)
        };
        Ok(nn.last().map(Neighbor::dist).unwrap_or(0.0))
    }

    pub fn local_sigma(&self, index: usize, k: usize) -> Result<f64> {
        self.local_sigma_with(index, k, false)
    }

    /// Local scale for every stored point, in original index order.
    pub fn local_sigmas(&self, k: usize, includes_self: bool) -> Result<Vec<f64>> {
        if k == 0 || k >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "K must satisfy 1 <= K < {} (cloud size), got {k}",
                self.len()
            )));
        }
        let mut out = vec![0.0; self.len()];
        for (slot, &index) in self.order.iter().enumerate() {
            let p = self.points[slot];
            let nn = if includes_self {
                self.knn(p, k)
            } else {
                self.knn_excluding(p, k, index)
            };
            out[index] = nn.last().map(Neighbor::dist).unwrap_or(0.0);
        }
        Ok(out)
    }
}

fn build_rec(points: &[Vec3], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .expect("three axes");
    if hi[axis] - lo[axis] <= 0.0 {
        // all coincident: a single leaf, however large
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start, end }); // placeholder
    let left = build_rec(points, order, start, start + mid, nodes);
    let right = build_rec(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

/// Exhaustive reference search with the same tie rule as the tree.
pub fn brute_force_knn(points: &[Vec3], q: Vec3, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            index,
            dist_sq: geom::dist_sq(q, *p),
        })
        .collect();
    all.sort_by(|a, b| a.key_cmp(b));
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut r = rng::rng_from(seed);
        (0..n)
            .map(|_| [r.random::<f64>() - 0.5, r.random::<f64>() - 0.5, r.random::<f64>() - 0.5])
            .collect()
    }

    #[test]
    fn single_point_tree() {
        let t = KdTree::build(&[[1.0, 2.0, 3.0]]).unwrap();
        let (i, p, d) = t.nearest([10.0, 0.0, 0.0]);
        assert_eq!((i, p), (0, [1.0, 2.0, 3.0]));
        assert!((d - geom::dist([10.0, 0.0, 0.0], p)).abs() == 0.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(KdTree::build(&[]).is_err());
    }

    #[test]
    fn coincident_query_distance_zero() {
        let pts = random_points(100, 1);
        let t = KdTree::build(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let (j, _, d) = t.nearest(*p);
            assert_eq!((j, d), (i, 0.0));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let t = KdTree::build(&pts).unwrap();
        assert_eq!(t.nearest([0.0, 0.0, 0.0]).0, 0);
        // duplicates are both retrievable
        let nn = t.knn([1.0, 0.0, 0.0], 2);
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 3]);
        // a lattice with many exact ties
        let grid: Vec<Vec3> = (0..125)
            .map(|i| [(i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64])
            .collect();
        let t = KdTree::build(&grid).unwrap();
        for q in [[1.5, 1.5, 1.5], [2.5, 0.5, 3.5], [0.5, 0.5, 0.5]] {
            assert_eq!(t.nearest(q).0, brute_force_knn(&grid, q, 1)[0].index);
            assert_eq!(t.knn(q, 9), brute_force_knn(&grid, q, 9));
        }
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let pts = random_points(500, 2);
        let t = KdTree::build(&pts).unwrap();
        let queries = random_points(200, 3);
        for q in queries {
            let (i, p, d) = t.nearest(q);
            let bf = brute_force_knn(&pts, q, 1)[0];
            assert_eq!(i, bf.index);
            assert_eq!(p, pts[i]);
            assert!((d - bf.dist()).abs() <= 1e-12);
        }
    }

    #[test]
    fn lattice_sigma() {
        let h = 0.1;
        let pts: Vec<Vec3> = (0..20).map(|i| [i as f64 * h, 0.3, -0.2]).collect();
        let t = KdTree::build(&pts).unwrap();
        for i in 2..18 {
            let s = t.local_sigma(i, 2).unwrap();
            assert!((s - h).abs() < 1e-12, "two nearest are the immediate neighbours");
            let s = t.local_sigma(i, 4).unwrap();
            assert!((s - 2.0 * h).abs() < 1e-12);
        }
        assert!((t.local_sigma(5, 1).unwrap() - h).abs() < 1e-12);
        assert!(t.local_sigma(0, 20).is_err());
        assert!(t.local_sigma(0, 0).is_err());
    }

    #[test]
    fn sigma_k51_matches_pairwise_sort() {
        let pts = random_points(300, 4);
        let t = KdTree::build(&pts).unwrap();
        let all = t.local_sigmas(51, false).unwrap();
        for i in (0..300).step_by(7) {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| geom::dist(pts[i], *p))
                .collect();
            d.sort_by(f64::total_cmp);
            assert_eq!(t.local_sigma(i, 51).unwrap(), d[50]);
            assert_eq!(all[i], d[50]);
        }
        // counting the point itself shifts the neighbour rank by one
        let with_self = t.local_sigma_with(10, 51, true).unwrap();
        assert_eq!(with_self, t.local_sigma(10, 50).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn knn_matches_brute_force(seed in 0u64..10_000, n in 1usize..300, k in 1usize..20) {
            let pts = random_points(n, seed);
            let t = KdTree::build(&pts).unwrap();
            for q in random_points(20, seed + 1) {
                let got = t.knn(q, k);
                let want = brute_force_knn(&pts, q, k);
                prop_assert_eq!(got.len(), want.len());
                for (a, b) in got.iter().zip(&want) {
                    prop_assert_eq!(a.index, b.index);
                    prop_assert!((a.dist() - b.dist()).abs() <= 1e-12);
                }
                for w in got.windows(2) {
                    prop_assert!(w[0].dist_sq <= w[1].dist_sq);
                }
            }
        }
    }
}
