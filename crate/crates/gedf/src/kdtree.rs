//! Minimal 3-D kd-tree for exact nearest-neighbor distance queries.

use nalgebra::Vector3;

pub struct KdTree {
    // node i splits `points[order[...]]`; stored implicitly as a balanced
    // median tree over a reordered index array
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

struct Node {
    index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: None };
        tree.root = tree.build_rec(&mut indices, 0);
        tree
    }

    fn build_rec(&mut self, indices: &mut [usize], depth: usize) -> Option<usize> {
        if indices.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |a, b| {
            self.points[*a][axis].partial_cmp(&self.points[*b][axis]).unwrap()
        });
        let index = indices[mid];
        let node_id = self.nodes.len();
        self.nodes.push(Node { index, axis, left: None, right: None });
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_id].left = left;
        self.nodes[node_id].right = right;
        Some(node_id)
    }

    /// Distance to the nearest stored point; `None` for an empty tree.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> Option<f64> {
        let root = self.root?;
        let mut best = f64::INFINITY;
        self.search(root, q, &mut best);
        Some(best.sqrt())
    }

    fn search(&self, node_id: usize, q: &Vector3<f64>, best_sq: &mut f64) {
        let node = &self.nodes[node_id];
        let p = &self.points[node.index];
        let d = (q - p).norm_squared();
        if d < *best_sq {
            *best_sq = d;
        }
        let delta = q[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        if let Some(n) = near {
            self.search(n, q, best_sq);
        }
        if let Some(f) = far {
            if delta * delta < *best_sq {
                self.search(f, q, best_sq);
            }
        }
    }
}
