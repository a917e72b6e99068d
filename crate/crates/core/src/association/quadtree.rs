//! Point quad-tree over marking centers.

use super::MarkingId;

/// Axis-aligned rectangle, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    /// Square of half-width `half` around `center`.
    pub fn square(center: [f64; 2], half: f64) -> Self {
        Self::new(
            [center[0] - half, center[1] - half],
            [center[0] + half, center[1] + half],
        )
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    fn mid(&self) -> [f64; 2] {
        [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1])]
    }

    fn quadrant_of(&self, p: [f64; 2]) -> usize {
        let m = self.mid();
        usize::from(p[0] >= m[0]) | (usize::from(p[1] >= m[1]) << 1)
    }

    fn quadrant(&self, q: usize) -> Rect {
        let m = self.mid();
        let (x0, x1) = if q & 1 == 0 {
            (self.min[0], m[0])
        } else {
            (m[0], self.max[0])
        };
        let (y0, y1) = if q & 2 == 0 {
            (self.min[1], m[1])
        } else {
            (m[1], self.max[1])
        };
        Rect::new([x0, y0], [x1, y1])
    }

    /// Squared distance from `p` to the nearest point of the rectangle.
    fn distance_sq(&self, p: [f64; 2]) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadItem {
    pub center: [f64; 2],
    pub id: MarkingId,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<QuadItem>),
    Internal(Box<[Node; 4]>),
}

impl Node {
    fn empty_leaf() -> Self {
        Node::Leaf(Vec::new())
    }

    fn count(&self) -> usize {
        match self {
            Node::Leaf(items) => items.len(),
            Node::Internal(children) => children.iter().map(Node::count).sum(),
        }
    }

    fn drain_into(self, out: &mut Vec<QuadItem>) {
        match self {
            Node::Leaf(items) => out.extend(items),
            Node::Internal(children) => {
                let [a, b, c, d] = *children;
                for child in [a, b, c, d] {
                    child.drain_into(out);
                }
            }
        }
    }
}

/// Quad-tree with per-leaf capacity and a depth limit. Inserting outside the
/// root bounds grows the root by doubling toward the point.
#[derive(Debug, Clone)]
pub struct QuadTree {
    root: Node,
    bounds: Rect,
    capacity: usize,
    max_depth: usize,
    len: usize,
}

pub const DEFAULT_CAPACITY: usize = 8;
pub const DEFAULT_MAX_DEPTH: usize = 16;

impl Default for QuadTree {
    fn default() -> Self {
        Self::new(Rect::square([0.0, 0.0], 64.0))
    }
}

impl QuadTree {
    pub fn new(bounds: Rect) -> Self {
        Self::with_params(bounds, DEFAULT_CAPACITY, DEFAULT_MAX_DEPTH)
    }

    pub fn with_params(bounds: Rect, capacity: usize, max_depth: usize) -> Self {
        assert!(capacity > 0, "quad-tree capacity must be positive");
        assert!(
            bounds.max[0] > bounds.min[0] && bounds.max[1] > bounds.min[1],
            "quad-tree bounds must have positive extent"
        );
        Self {
            root: Node::empty_leaf(),
            bounds,
            capacity,
            max_depth,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bounds(&self) -> Rect {
        self.bounds
    }

    /// Double the root toward `p` until it is covered, then re-seat the
    /// existing items under the new root.
    fn grow_to(&mut self, p: [f64; 2]) {
        if self.bounds.contains(p) {
            return;
        }
        while !self.bounds.contains(p) {
            let w = self.bounds.max[0] - self.bounds.min[0];
            let h = self.bounds.max[1] - self.bounds.min[1];
            let min = [
                if p[0] < self.bounds.min[0] {
                    self.bounds.min[0] - w
                } else {
                    self.bounds.min[0]
                },
                if p[1] < self.bounds.min[1] {
                    self.bounds.min[1] - h
                } else {
                    self.bounds.min[1]
                },
            ];
            self.bounds = Rect::new(min, [min[0] + 2.0 * w, min[1] + 2.0 * h]);
        }
        let old_root = std::mem::replace(&mut self.root, Node::empty_leaf());
        let mut items = Vec::with_capacity(self.len);
        old_root.drain_into(&mut items);
        for item in items {
            insert_into(&mut self.root, self.bounds, item, 0, self.capacity, self.max_depth);
        }
    }

    pub fn insert(&mut self, center: [f64; 2], id: MarkingId) {
        assert!(
            center[0].is_finite() && center[1].is_finite(),
            "quad-tree point must be finite"
        );
        self.grow_to(center);
        let item = QuadItem { center, id };
        let (capacity, max_depth) = (self.capacity, self.max_depth);
        insert_into(&mut self.root, self.bounds, item, 0, capacity, max_depth);
        self.len += 1;
    }

    /// Removes the item `id` stored at `center`. Returns whether it was found.
    pub fn remove(&mut self, center: [f64; 2], id: MarkingId) -> bool {
        if !self.bounds.contains(center) {
            return false;
        }
        let capacity = self.capacity;
        let removed = remove_from(&mut self.root, self.bounds, center, id, capacity);
        if removed {
            self.len -= 1;
        }
        removed
    }

    /// Moves `id` from `old` to `new`.
    pub fn relocate(&mut self, old: [f64; 2], new: [f64; 2], id: MarkingId) -> bool {
        let found = self.remove(old, id);
        if found {
            self.insert(new, id);
        }
        found
    }

    /// All items within `radius` (inclusive) of `center`, nearest first.
    pub fn query_radius(&self, center: [f64; 2], radius: f64) -> Vec<(QuadItem, f64)> {
        let mut out = Vec::new();
        if radius.is_nan() || radius < 0.0 {
            return out;
        }
        let r2 = radius * radius;
        query_node(&self.root, self.bounds, center, r2, &mut out);
        let mut hits: Vec<(QuadItem, f64)> = out.into_iter().map(|(item, d2)| (item, d2.sqrt())).collect();
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
        hits
    }

    /// Every stored item, in traversal order.
    pub fn items(&self) -> Vec<QuadItem> {
        let mut out = Vec::with_capacity(self.len);
        collect(&self.root, &mut out);
        out
    }

    /// Checks the structural invariants; used by tests and audits.
    pub fn check_invariants(&self) -> Result<(), String> {
        fn walk(node: &Node, rect: Rect, depth: usize, cap: usize, max_depth: usize) -> Result<usize, String> {
            match node {
                Node::Leaf(items) => {
                    if items.len() > cap && depth < max_depth {
                        return Err(format!("leaf over capacity at depth {depth}"));
                    }
                    for it in items {
                        if !rect.contains(it.center) {
                            return Err(format!("{:?} stored outside its node", it.id));
                        }
                    }
                    Ok(items.len())
                }
                Node::Internal(children) => {
                    let mut n = 0;
                    for (q, child) in children.iter().enumerate() {
                        n += walk(child, rect.quadrant(q), depth + 1, cap, max_depth)?;
                    }
                    Ok(n)
                }
            }
        }
        let n = walk(&self.root, self.bounds, 0, self.capacity, self.max_depth)?;
        if n != self.len || self.root.count() != self.len {
            return Err(format!("count mismatch: stored {n}, recorded {}", self.len));
        }
        Ok(())
    }
}

fn insert_into(node: &mut Node, rect: Rect, item: QuadItem, depth: usize, capacity: usize, max_depth: usize) {
    match node {
        Node::Internal(children) => {
            let q = rect.quadrant_of(item.center);
            insert_into(&mut children[q], rect.quadrant(q), item, depth + 1, capacity, max_depth);
        }
        Node::Leaf(items) => {
            items.push(item);
            if items.len() > capacity && depth < max_depth {
                let items = std::mem::take(items);
                *node = Node::Internal(Box::new([
                    Node::empty_leaf(),
                    Node::empty_leaf(),
                    Node::empty_leaf(),
                    Node::empty_leaf(),
                ]));
                for it in items {
                    insert_into(node, rect, it, depth, capacity, max_depth);
                }
            }
        }
    }
}

fn remove_from(node: &mut Node, rect: Rect, center: [f64; 2], id: MarkingId, capacity: usize) -> bool {
    match node {
        Node::Leaf(items) => {
            if let Some(pos) = items.iter().position(|it| it.id == id && it.center == center) {
                items.remove(pos);
                true
            } else {
                false
            }
        }
        Node::Internal(children) => {
            let q = rect.quadrant_of(center);
            let removed = remove_from(&mut children[q], rect.quadrant(q), center, id, capacity);
            if removed && children.iter().all(|c| matches!(c, Node::Leaf(_))) && node.count() <= capacity {
                let old = std::mem::replace(node, Node::empty_leaf());
                let mut merged = Vec::new();
                old.drain_into(&mut merged);
                *node = Node::Leaf(merged);
            }
            removed
        }
    }
}

fn query_node(node: &Node, rect: Rect, center: [f64; 2], r2: f64, out: &mut Vec<(QuadItem, f64)>) {
    if rect.distance_sq(center) > r2 {
        return;
    }
    match node {
        Node::Leaf(items) => {
            for it in items {
                let dx = it.center[0] - center[0];
                let dy = it.center[1] - center[1];
                let d2 = dx * dx + dy * dy;
                if d2 <= r2 {
                    out.push((*it, d2));
                }
            }
        }
        Node::Internal(children) => {
            for (q, child) in children.iter().enumerate() {
                query_node(child, rect.quadrant(q), center, r2, out);
            }
        }
    }
}

fn collect(node: &Node, out: &mut Vec<QuadItem>) {
    match node {
        Node::Leaf(items) => out.extend_from_slice(items),
        Node::Internal(children) => children.iter().for_each(|c| collect(c, out)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(items: &[QuadItem], center: [f64; 2], radius: f64) -> Vec<MarkingId> {
        let mut hits: Vec<(f64, MarkingId)> = items
            .iter()
            .filter_map(|it| {
                let d2 = (it.center[0] - center[0]).powi(2) + (it.center[1] - center[1]).powi(2);
                (d2 <= radius * radius).then_some((d2, it.id))
            })
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits.into_iter().map(|(_, id)| id).collect()
    }

    #[test]
    fn single_point_and_empty() {
        let mut t = QuadTree::default();
        assert!(t.query_radius([0.0, 0.0], 10.0).is_empty());
        t.insert([1.0, 2.0], MarkingId(7));
        let hits = t.query_radius([1.5, 2.0], 1.0);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0.id, MarkingId(7));
    }

    #[test]
    fn radius_cutoff() {
        let mut t = QuadTree::default();
        t.insert([1.0, 0.0], MarkingId(0));
        t.insert([3.0, 0.0], MarkingId(1));
        let hits = t.query_radius([0.0, 0.0], 2.0);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0.id, MarkingId(0));
    }

    #[test]
    fn grows_for_out_of_bounds_points() {
        let mut t = QuadTree::new(Rect::square([0.0, 0.0], 1.0));
        t.insert([0.5, 0.5], MarkingId(0));
        t.insert([-1000.0, 37.0], MarkingId(1));
        t.insert([250.0, -999.0], MarkingId(2));
        assert!(t.bounds().contains([-1000.0, 37.0]));
        assert_eq!(t.query_radius([-1000.0, 37.0], 0.1)[0].0.id, MarkingId(1));
        assert_eq!(t.query_radius([250.0, -999.0], 0.1)[0].0.id, MarkingId(2));
        assert_eq!(t.query_radius([0.5, 0.5], 0.1)[0].0.id, MarkingId(0));
        t.check_invariants().unwrap();
    }

    #[test]
    fn thousand_points_match_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = QuadTree::new(Rect::square([50.0, 50.0], 50.0));
        let mut items = Vec::new();
        for i in 0..1000 {
            let c = [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)];
            t.insert(c, MarkingId(i));
            items.push(QuadItem {
                center: c,
                id: MarkingId(i),
            });
        }
        t.check_invariants().unwrap();
        for _ in 0..1000 {
            let c = [rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0)];
            let r = rng.random_range(0.01..20.0);
            let got: Vec<_> = t.query_radius(c, r).into_iter().map(|(it, _)| it.id).collect();
            assert_eq!(got, brute(&items, c, r));
        }
    }

    #[test]
    fn coincident_points_beyond_capacity() {
        let mut t = QuadTree::with_params(Rect::square([0.0, 0.0], 1.0), 2, 4);
        for i in 0..20 {
            t.insert([0.25, 0.25], MarkingId(i));
        }
        t.check_invariants().unwrap();
        assert_eq!(t.query_radius([0.25, 0.25], 0.0).len(), 20);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(f64, f64),
        Remove(usize),
        Query(f64, f64, f64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (-200.0f64..200.0, -200.0f64..200.0).prop_map(|(x, y)| Op::Insert(x, y)),
            1 => any::<usize>().prop_map(Op::Remove),
            3 => (-200.0f64..200.0, -200.0f64..200.0, 0.0f64..60.0).prop_map(|(x, y, r)| Op::Query(x, y, r)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn random_operations_match_brute_force(ops in prop::collection::vec(op(), 500)) {
            let mut t = QuadTree::with_params(Rect::square([0.0, 0.0], 10.0), 4, 16);
            let mut live: Vec<QuadItem> = Vec::new();
            let mut next = 0u32;
            let (mut inserts, mut removals) = (0usize, 0usize);
            for op in ops {
                match op {
                    Op::Insert(x, y) => {
                        t.insert([x, y], MarkingId(next));
                        live.push(QuadItem { center: [x, y], id: MarkingId(next) });
                        next += 1;
                        inserts += 1;
                    }
                    Op::Remove(k) => {
                        if !live.is_empty() {
                            let it = live.swap_remove(k % live.len());
                            prop_assert!(t.remove(it.center, it.id));
                            removals += 1;
                        }
                    }
                    Op::Query(x, y, r) => {
                        let got: Vec<_> = t.query_radius([x, y], r).into_iter().map(|(it, _)| it.id).collect();
                        prop_assert_eq!(got, brute(&live, [x, y], r));
                    }
                }
                prop_assert_eq!(t.len(), inserts - removals);
            }
            t.check_invariants().unwrap();
        }
    }
}
