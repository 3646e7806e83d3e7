//! Exact nearest-neighbor search over the record store's input points.

use nalgebra::DVector;

pub(crate) fn dist2(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Static kd-tree over a prefix of an external point list. Points are
/// addressed by index, so the list may keep growing after a build; the tree
/// simply covers fewer of them and the caller scans the tail. Search is
/// exact: the far half-space is visited whenever the splitting plane lies
/// within the current best distance, equality included, so ties still
/// resolve to the lowest index.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    root: i32,
}

#[derive(Debug, Clone)]
struct Node {
    point: u32,
    axis: u16,
    left: i32,
    right: i32,
}

impl KdTree {
    /// Builds over `points[..count]`. The splitting axis cycles with depth
    /// and the median is taken under a total order (coordinate, then index),
    /// so duplicate coordinates cannot unbalance the recursion.
    pub fn build(points: &[DVector<f64>], count: usize) -> Self {
        let dim = points.first().map_or(1, DVector::len).max(1);
        let mut ids: Vec<u32> = (0..count as u32).collect();
        let mut nodes = Vec::with_capacity(count);
        let root = split(points, dim, &mut ids, 0, &mut nodes);
        KdTree { nodes, root }
    }

    /// Lowest-index point at minimum distance from `query`, with the squared
    /// distance. `None` for an empty tree.
    pub fn nearest(&self, points: &[DVector<f64>], query: &DVector<f64>) -> Option<(usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.descend(self.root, points, query, &mut best);
        Some(best)
    }

    fn descend(
        &self,
        at: i32,
        points: &[DVector<f64>],
        query: &DVector<f64>,
        best: &mut (usize, f64),
    ) {
        let node = &self.nodes[at as usize];
        let idx = node.point as usize;
        let d2 = dist2(query, &points[idx]);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let gap = query[node.axis as usize] - points[idx][node.axis as usize];
        let (near, far) = if gap < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if near >= 0 {
            self.descend(near, points, query, best);
        }
        if far >= 0 && gap * gap <= best.1 {
            self.descend(far, points, query, best);
        }
    }
}

fn split(
    points: &[DVector<f64>],
    dim: usize,
    ids: &mut [u32],
    depth: usize,
    nodes: &mut Vec<Node>,
) -> i32 {
    if ids.is_empty() {
        return -1;
    }
    let axis = depth % dim;
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let point = ids[mid];
    let (lo, hi) = ids.split_at_mut(mid);
    let left = split(points, dim, lo, depth + 1, nodes);
    let right = split(points, dim, &mut hi[1..], depth + 1, nodes);
    nodes.push(Node {
        point,
        axis: axis as u16,
        left,
        right,
    });
    (nodes.len() - 1) as i32
}
