//! Static 2D KD-tree for nearest-projected-point queries.

/// Balanced tree stored implicitly: the median of every slice is its root.
#[derive(Debug, Clone)]
pub struct KdTree2 {
    // (x, y, id), partitioned in place
    items: Vec<([f64; 2], usize)>,
}

impl KdTree2 {
    pub fn build(points: impl IntoIterator<Item = ([f64; 2], usize)>) -> Self {
        let mut items: Vec<_> = points.into_iter().collect();
        Self::partition(&mut items, 0);
        Self { items }
    }

    fn partition(items: &mut [([f64; 2], usize)], axis: usize) {
        if items.len() <= 1 {
            return;
        }
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| {
            a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1))
        });
        let (left, rest) = items.split_at_mut(mid);
        Self::partition(left, 1 - axis);
        Self::partition(&mut rest[1..], 1 - axis);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Nearest item to `query` as `(id, squared distance)`. Equidistant items
    /// resolve to the smaller id.
    pub fn nearest(&self, query: [f64; 2]) -> Option<(usize, f64)> {
        if self.items.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        Self::search(&self.items, 0, query, &mut best);
        Some(best)
    }

    fn search(items: &[([f64; 2], usize)], axis: usize, q: [f64; 2], best: &mut (usize, f64)) {
        if items.is_empty() {
            return;
        }
        let mid = items.len() / 2;
        let (p, id) = items[mid];
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if d2 < best.1 || (d2 == best.1 && id < best.0) {
            *best = (id, d2);
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&items[..mid], &items[mid + 1..])
        } else {
            (&items[mid + 1..], &items[..mid])
        };
        Self::search(near, 1 - axis, q, best);
        // equality keeps the far side in play for id tie-breaks
        if diff * diff <= best.1 {
            Self::search(far, 1 - axis, q, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_tree() {
        assert!(KdTree2::build(std::iter::empty()).nearest([0.0, 0.0]).is_none());
    }

    #[test]
    fn nearer_of_two() {
        let t = KdTree2::build([([3.0, 4.0], 0), ([6.0, 8.0], 1)]);
        assert_eq!(t.nearest([0.0, 0.0]), Some((0, 25.0)));
    }

    #[test]
    fn ties_resolve_to_smaller_id() {
        let t = KdTree2::build([([1.0, 0.0], 7), ([-1.0, 0.0], 3), ([0.0, 1.0], 5), ([0.0, -1.0], 9)]);
        assert_eq!(t.nearest([0.0, 0.0]), Some((3, 1.0)));
        let dup = KdTree2::build([([2.0, 2.0], 4), ([2.0, 2.0], 1), ([2.0, 2.0], 8)]);
        assert_eq!(dup.nearest([2.0, 2.0]), Some((1, 0.0)));
    }

    proptest! {
        #[test]
        fn agrees_with_linear_scan(
            pts in prop::collection::vec((0i32..40, 0i32..40), 1..200),
            q in (-5i32..45, -5i32..45),
        ) {
            // integer grid coordinates make exact ties common
            let items: Vec<([f64; 2], usize)> =
                pts.iter().enumerate().map(|(i, &(x, y))| ([x as f64, y as f64], i)).collect();
            let tree = KdTree2::build(items.clone());
            let q = [q.0 as f64, q.1 as f64];
            let expected = items
                .iter()
                .map(|(p, id)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2), *id))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            prop_assert_eq!(tree.nearest(q), Some((expected.1, expected.0)));
        }
    }
}
