//! Exact k-d tree over fixed-dimension points.
//!
//! Queries return the true nearest neighbours under the squared Euclidean
//! metric. Equal distances resolve to the lowest point index, so results are
//! reproducible and match a brute-force scan ordered the same way.

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
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn before(&self, other: &Neighbor) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.build_node(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for a in 0..D {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            return id;
        }
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest point to `query`; `None` for an empty tree.
    pub fn nearest(&self, query: &[f64; D]) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_rec(0, query, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, node: usize, query: &[f64; D], best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: dist2(&self.points[i], query),
                    };
                    if cand.before(best) {
                        *best = cand;
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
                // `<=` keeps equal-distance candidates reachable for tie-breaking.
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        let mut heap: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.knn_rec(0, query, k, &mut heap);
        }
        heap
    }

    fn knn_rec(&self, node: usize, query: &[f64; D], k: usize, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        index: i,
                        dist2: dist2(&self.points[i], query),
                    };
                    if out.len() == k && !cand.before(&out[k - 1]) {
                        continue;
                    }
                    let pos = out.partition_point(|n| n.before(&cand));
                    out.insert(pos, cand);
                    out.truncate(k);
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
                self.knn_rec(near, query, k, out);
                if out.len() < k || diff * diff <= out[k - 1].dist2 {
                    self.knn_rec(far, query, k, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute<const D: usize>(pts: &[[f64; D]], q: &[f64; D]) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| Neighbor {
                index: i,
                dist2: dist2(p, q),
            })
            .collect();
        all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
        all
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 6]> = (0..2000)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(pts.clone());
        for _ in 0..500 {
            let q: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.2..1.2));
            assert_eq!(tree.nearest(&q).unwrap(), brute(&pts, &q)[0]);
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..1500)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(pts.clone());
        for _ in 0..200 {
            let q: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let expected: Vec<_> = brute(&pts, &q).into_iter().take(12).collect();
            assert_eq!(tree.knn(&q, 12), expected);
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // duplicated points on a grid produce many exact ties
        let mut pts = Vec::new();
        for _ in 0..3 {
            for x in 0..10 {
                for y in 0..10 {
                    pts.push([x as f64, y as f64]);
                }
            }
        }
        let tree = KdTree::build(pts.clone());
        for x in 0..10 {
            for y in 0..10 {
                let q = [x as f64 + 0.5, y as f64];
                assert_eq!(tree.nearest(&q).unwrap(), brute(&pts, &q)[0]);
            }
        }
    }

    #[test]
    fn empty_tree() {
        let tree: KdTree<3> = KdTree::build(Vec::new());
        assert!(tree.nearest(&[0.0; 3]).is_none());
        assert!(tree.knn(&[0.0; 3], 4).is_empty());
    }
}
