//! Exact spatial index over point clouds.
//!
//! A median-split kd-tree backing nearest and k-nearest queries. Results are
//! guaranteed identical to a brute-force linear scan: exact distances, ties
//! broken by smallest point id. Losses and their gradient checks rely on this
//! determinism.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

const LEAF_SIZE: usize = 16;

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

/// Immutable kd-tree. Safe to share across threads once built.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    // Permutation of original ids, partitioned by the tree structure.
    ids: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

/// One query result: original point id and squared Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub sq_dist: f64,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(&cloud.points)
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot index an empty cloud"));
        }
        let mut ids: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let root = build_node(points, &mut ids, 0, points.len(), &mut nodes);
        Ok(SpatialIndex {
            points: points.to_vec(),
            ids,
            nodes,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, id: usize) -> &Vector3<f64> {
        &self.points[id]
    }

    /// Exact global nearest neighbor; ties broken by smallest id.
    pub fn nearest(&self, query: &Vector3<f64>) -> Neighbor {
        let mut best = Neighbor {
            id: usize::MAX,
            sq_dist: f64::INFINITY,
        };
        self.nearest_rec(self.root, query, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, query: &Vector3<f64>, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.ids[start..end] {
                    let d = (self.points[id] - query).norm_squared();
                    if d < best.sq_dist || (d == best.sq_dist && id < best.id) {
                        *best = Neighbor { id, sq_dist: d };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, query, best);
                // Prune only on strict inequality so equal-distance ties on the
                // far side can still win by smaller id.
                if diff * diff <= best.sq_dist {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// Exact k nearest neighbors, ascending by squared distance then id.
    /// Returns all points when the cloud holds fewer than k.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::invalid("knn requires k >= 1"));
        }
        let mut heap = KnnHeap::new(k);
        self.knn_rec(self.root, query, &mut heap);
        Ok(heap.into_sorted())
    }

    fn knn_rec(&self, node: usize, query: &Vector3<f64>, heap: &mut KnnHeap) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.ids[start..end] {
                    let d = (self.points[id] - query).norm_squared();
                    heap.offer(Neighbor { id, sq_dist: d });
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, query, heap);
                if !heap.full() || diff * diff <= heap.worst_sq_dist() {
                    self.knn_rec(far, query, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    ids: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let n = end - start;
    if n <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    // Split on the axis of largest extent at the median.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &id in &ids[start..end] {
        for a in 0..3 {
            lo[a] = lo[a].min(points[id][a]);
            hi[a] = hi[a].max(points[id][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        // All points coincide; no useful split.
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    let mid = start + n / 2;
    ids[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let value = points[ids[mid]][axis];
    let left = build_node(points, ids, start, mid, nodes);
    let right = build_node(points, ids, mid, end, nodes);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    nodes.len() - 1
}

/// Bounded max-heap keyed by (sq_dist, id) so the retained set always holds
/// the lexicographically smallest k candidates.
struct KnnHeap {
    k: usize,
    items: Vec<Neighbor>,
}

fn key_gt(a: &Neighbor, b: &Neighbor) -> bool {
    a.sq_dist > b.sq_dist || (a.sq_dist == b.sq_dist && a.id > b.id)
}

impl KnnHeap {
    fn new(k: usize) -> Self {
        KnnHeap {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst_sq_dist(&self) -> f64 {
        self.items[0].sq_dist
    }

    fn offer(&mut self, cand: Neighbor) {
        if self.items.len() < self.k {
            self.items.push(cand);
            self.sift_up(self.items.len() - 1);
        } else if key_gt(&self.items[0], &cand) {
            self.items[0] = cand;
            self.sift_down(0);
        }
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if key_gt(&self.items[i], &self.items[parent]) {
                self.items.swap(i, parent);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut largest = i;
            if l < self.items.len() && key_gt(&self.items[l], &self.items[largest]) {
                largest = l;
            }
            if r < self.items.len() && key_gt(&self.items[r], &self.items[largest]) {
                largest = r;
            }
            if largest == i {
                break;
            }
            self.items.swap(i, largest);
            i = largest;
        }
    }

    fn into_sorted(mut self) -> Vec<Neighbor> {
        self.items.sort_by(|a, b| {
            a.sq_dist
                .partial_cmp(&b.sq_dist)
                .unwrap()
                .then(a.id.cmp(&b.id))
        });
        self.items
    }
}

/// Linear-scan oracle used by tests; kept here so other modules' tests can
/// reuse it as an independent reference.
pub fn brute_force_knn(points: &[Vector3<f64>], query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(id, p)| Neighbor {
            id,
            sq_dist: (p - query).norm_squared(),
        })
        .collect();
    all.sort_by(|a, b| {
        a.sq_dist
            .partial_cmp(&b.sq_dist)
            .unwrap()
            .then(a.id.cmp(&b.id))
    });
    all.truncate(k);
    all
}
