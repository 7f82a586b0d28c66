//! Exact nearest-neighbor search over real vectors.
//!
//! Two backends behind [`NearestNeighbor`]: a k-d tree with full
//! backtracking and a linear scan. Both return the lowest index among
//! equidistant candidates, so their answers are identical.

use crate::scalar::Real;

pub trait NearestNeighbor<T: Real>: Send + Sync {
    /// Index and squared Euclidean distance of the closest stored point.
    fn nearest(&self, query: &[T]) -> (usize, T);
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn dim(&self) -> usize;
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

#[inline]
fn better<T: Real>(cand: (usize, T), best: (usize, T)) -> bool {
    cand.1 < best.1 || (cand.1 == best.1 && cand.0 < best.0)
}

/// Row-major point storage.
#[derive(Debug, Clone, PartialEq)]
struct Points<T> {
    data: Vec<T>,
    dim: usize,
}

impl<T: Real> Points<T> {
    fn new(data: Vec<T>, dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "point data not a multiple of dim");
        Self { data, dim }
    }

    fn get(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScan<T> {
    points: Points<T>,
}

impl<T: Real> LinearScan<T> {
    pub fn new(data: Vec<T>, dim: usize) -> Self {
        Self {
            points: Points::new(data, dim),
        }
    }
}

impl<T: Real> NearestNeighbor<T> for LinearScan<T> {
    fn nearest(&self, query: &[T]) -> (usize, T) {
        let mut best = (0, T::max_value().unwrap());
        for i in 0..self.points.len() {
            let cand = (i, sq_dist(self.points.get(i), query));
            if better(cand, best) {
                best = cand;
            }
        }
        best
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn dim(&self) -> usize {
        self.points.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: T, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdTree<T> {
    points: Points<T>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

const LEAF_SIZE: usize = 8;

impl<T: Real> KdTree<T> {
    pub fn new(data: Vec<T>, dim: usize) -> Self {
        let points = Points::new(data, dim);
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if tree.points.len() > 0 {
            let n = tree.points.len();
            tree.build(0, n);
        }
        tree
    }

    /// Splits on the dimension of widest spread at the median.
    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = (0..self.points.dim)
            .map(|d| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (T::max_value().unwrap(), T::min_value().unwrap()),
                    |(lo, hi), &i| {
                        let v = self.points.get(i)[d];
                        (lo.min(v), hi.max(v))
                    },
                );
                (d, hi - lo)
            })
            .fold((0, -T::one()), |a, b| if b.1 > a.1 { b } else { a })
            .0;
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points.get(a)[dim]
                .partial_cmp(&points.get(b)[dim])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let value = self.points.get(self.order[mid])[dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn search(&self, node: usize, query: &[T], best: &mut (usize, T)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (i, sq_dist(self.points.get(i), query));
                    if better(cand, *best) {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.search(near, query, best);
                // Equal bounds are still visited so ties resolve to the lowest index.
                if diff * diff <= best.1 {
                    self.search(far, query, best);
                }
            }
        }
    }
}

impl<T: Real> NearestNeighbor<T> for KdTree<T> {
    fn nearest(&self, query: &[T]) -> (usize, T) {
        assert_eq!(query.len(), self.points.dim, "query dimension");
        let mut best = (0, T::max_value().unwrap());
        if !self.nodes.is_empty() {
            self.search(0, query, &mut best);
        }
        best
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn dim(&self) -> usize {
        self.points.dim
    }
}
