use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{LaneVector, Point, Result, SceneError, Turn};
use crate::tensor::Tensor;

/// Largest predecessor/successor hop count carried by a graph.
pub const MAX_HOPS: usize = 6;

/// A lane centerline with attributes and declared connectivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub id: u32,
    pub points: Vec<Point>,
    #[serde(default)]
    pub turn: Turn,
    #[serde(default)]
    pub traf: bool,
    #[serde(default)]
    pub intersect: bool,
    #[serde(default)]
    pub successors: Vec<u32>,
    #[serde(default)]
    pub left: Option<u32>,
    #[serde(default)]
    pub right: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Predecessor,
    Successor,
}

/// Adjacency relations between lane vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Pred(usize),
    Succ(usize),
    Right,
    Left,
    Merge,
    Overlap,
}

/// Lane vectors plus the six relation families between them.
///
/// Pair `(i, j)` in `pred[k-1]` means vector `j` is reached from `i` by
/// exactly `k` predecessor hops; `succ` likewise downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGraph {
    pub vectors: Vec<LaneVector>,
    pub pred: Vec<BTreeSet<(usize, usize)>>,
    pub succ: Vec<BTreeSet<(usize, usize)>>,
    pub right: Vec<Option<usize>>,
    pub left: Vec<Option<usize>>,
    pub merge: BTreeSet<(usize, usize)>,
    pub overlap: BTreeSet<(usize, usize)>,
    pub overlap_threshold: f64,
}

impl LaneGraph {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Builds a graph from vectors and one-hop successor pairs; derives the
    /// multi-hop sets, merge and overlap.
    pub fn from_parts(
        vectors: Vec<LaneVector>,
        succ1: BTreeSet<(usize, usize)>,
        right: Vec<Option<usize>>,
        left: Vec<Option<usize>>,
        overlap_threshold: f64,
    ) -> Self {
        let pred1: BTreeSet<_> = succ1.iter().map(|&(a, b)| (b, a)).collect();
        let succ = compose_hops(&succ1);
        let pred = compose_hops(&pred1);

        let mut merge = BTreeSet::new();
        for fan in [&succ1, &pred1] {
            let mut by_target: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(a, b) in fan.iter() {
                by_target.entry(b).or_default().push(a);
            }
            for sources in by_target.values() {
                for &a in sources {
                    for &b in sources {
                        if a != b {
                            merge.insert((a, b));
                        }
                    }
                }
            }
        }

        let mut overlap = BTreeSet::new();
        let n = vectors.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let direct = succ1.contains(&(a, b)) || succ1.contains(&(b, a));
                if !direct && vectors[a].anchor.dist(vectors[b].anchor) < overlap_threshold {
                    overlap.insert((a, b));
                    overlap.insert((b, a));
                }
            }
        }
        overlap.extend(merge.iter().copied());

        LaneGraph {
            vectors,
            pred,
            succ,
            right,
            left,
            merge,
            overlap,
            overlap_threshold,
        }
    }

    pub fn relation(&self, rel: Relation) -> Result<BTreeSet<(usize, usize)>> {
        Ok(match rel {
            Relation::Pred(k) => dilated_adjacency(self, k, Direction::Predecessor)?,
            Relation::Succ(k) => dilated_adjacency(self, k, Direction::Successor)?,
            Relation::Right => functional_pairs(&self.right),
            Relation::Left => functional_pairs(&self.left),
            Relation::Merge => self.merge.clone(),
            Relation::Overlap => self.overlap.clone(),
        })
    }

    /// Dense `[Nl, Nl]` 0/1 matrix with `m[i][j] = 1` for `(i, j)` in `rel`.
    pub fn adjacency(&self, rel: Relation) -> Result<Tensor> {
        let n = self.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, j) in self.relation(rel)? {
            t.data_mut()[i * n + j] = 1.0;
        }
        Ok(t)
    }

    /// Vectors belonging to polyline `lane_id`, in order.
    pub fn lane_members(&self, lane_id: u32) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.vectors[i].lane_id == lane_id)
            .collect()
    }

    pub fn nearest_vector(&self, p: Point) -> Option<(usize, f64)> {
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.distance_to(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.len();
        if self.pred.len() != MAX_HOPS || self.succ.len() != MAX_HOPS {
            return Err(format!("expected {MAX_HOPS} hop sets"));
        }
        if self.right.len() != n || self.left.len() != n {
            return Err("left/right maps must cover every vector".into());
        }
        let in_range = |s: &BTreeSet<(usize, usize)>| s.iter().all(|&(a, b)| a < n && b < n);
        if !self.pred.iter().chain(&self.succ).all(in_range)
            || !in_range(&self.merge)
            || !in_range(&self.overlap)
        {
            return Err("relation index out of range".into());
        }
        for s in [&self.merge, &self.overlap] {
            if let Some(&(a, b)) = s.iter().find(|&&(a, b)| !s.contains(&(b, a))) {
                return Err(format!("relation not symmetric at ({a}, {b})"));
            }
        }
        if let Some(p) = self.merge.iter().find(|p| !self.overlap.contains(p)) {
            return Err(format!("merge pair {p:?} missing from overlap"));
        }
        let pred1: BTreeSet<_> = self.succ[0].iter().map(|&(a, b)| (b, a)).collect();
        if pred1 != self.pred[0] {
            return Err("pred[1] is not the reverse of succ[1]".into());
        }
        if compose_hops(&self.pred[0]) != self.pred || compose_hops(&self.succ[0]) != self.succ {
            return Err("multi-hop sets are not compositions of the one-hop set".into());
        }
        Ok(())
    }
}

fn functional_pairs(map: &[Option<usize>]) -> BTreeSet<(usize, usize)> {
    map.iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|j| (i, j)))
        .collect()
}

/// `hops[k-1]` = pairs joined by a walk of exactly `k` one-hop edges.
fn compose_hops(one: &BTreeSet<(usize, usize)>) -> Vec<BTreeSet<(usize, usize)>> {
    let mut next: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in one {
        next.entry(a).or_default().push(b);
    }
    let mut hops = vec![one.clone()];
    for _ in 1..MAX_HOPS {
        let prev = hops.last().expect("non-empty");
        let mut cur = BTreeSet::new();
        for &(a, b) in prev {
            if let Some(ns) = next.get(&b) {
                for &c in ns {
                    cur.insert((a, c));
                }
            }
        }
        hops.push(cur);
    }
    hops
}

/// Exact `k`-hop predecessor or successor pairs, `k` in `1..=6`.
pub fn dilated_adjacency(
    graph: &LaneGraph,
    k: usize,
    dir: Direction,
) -> Result<BTreeSet<(usize, usize)>> {
    if !(1..=MAX_HOPS).contains(&k) {
        return Err(SceneError::HopRange(k));
    }
    Ok(match dir {
        Direction::Predecessor => graph.pred[k - 1].clone(),
        Direction::Successor => graph.succ[k - 1].clone(),
    })
}

fn resample(poly: &LanePolyline, segment_length: f64) -> Result<Vec<Point>> {
    if poly.points.len() < 2 {
        return Err(SceneError::DegeneratePolyline {
            id: poly.id,
            reason: "fewer than two points".into(),
        });
    }
    let mut cum = vec![0.0];
    for w in poly.points.windows(2) {
        let d = w[0].dist(w[1]);
        if d == 0.0 || !d.is_finite() {
            return Err(SceneError::DegeneratePolyline {
                id: poly.id,
                reason: format!("repeated point {:?}", w[1]),
            });
        }
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let n = ((total / segment_length).round() as usize).max(1);
    let mut out = Vec::with_capacity(n + 1);
    let mut seg = 0;
    for i in 0..=n {
        let s = total * i as f64 / n as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < s {
            seg += 1;
        }
        let t = ((s - cum[seg]) / (cum[seg + 1] - cum[seg])).clamp(0.0, 1.0);
        out.push(poly.points[seg].lerp(poly.points[seg + 1], t));
    }
    Ok(out)
}

/// Splits polylines into lane vectors of about `segment_length` meters and
/// derives every adjacency relation.
pub fn build_lane_graph(
    polylines: &[LanePolyline],
    segment_length: f64,
    overlap_threshold: f64,
) -> Result<LaneGraph> {
    if !(segment_length > 0.0) || !(overlap_threshold > 0.0) {
        return Err(SceneError::InvalidParameter(format!(
            "segment_length {segment_length} and overlap_threshold {overlap_threshold} must be positive"
        )));
    }
    let known: BTreeSet<u32> = polylines.iter().map(|p| p.id).collect();
    let mut vectors = Vec::new();
    let mut span: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut succ1 = BTreeSet::new();
    for poly in polylines {
        for t in poly.successors.iter().chain(&poly.left).chain(&poly.right) {
            if !known.contains(t) {
                return Err(SceneError::UnknownLane {
                    id: poly.id,
                    target: *t,
                });
            }
        }
        let pts = resample(poly, segment_length)?;
        let first = vectors.len();
        for w in pts.windows(2) {
            let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
            vectors.push(LaneVector {
                lane_id: poly.id,
                dx,
                dy,
                heading: dy.atan2(dx),
                turn: poly.turn,
                traf: poly.traf,
                intersect: poly.intersect,
                anchor: w[0].lerp(w[1], 0.5),
            });
            if vectors.len() - 1 > first {
                succ1.insert((vectors.len() - 2, vectors.len() - 1));
            }
        }
        span.insert(poly.id, (first, vectors.len() - 1));
    }
    for poly in polylines {
        let tail = span[&poly.id].1;
        for s in &poly.successors {
            succ1.insert((tail, span[s].0));
        }
    }
    let n = vectors.len();
    let nearest_in = |i: usize, lane: u32| -> Option<usize> {
        let (a, b) = span[&lane];
        (a..=b).min_by(|&x, &y| {
            let dx = vectors[i].anchor.dist(vectors[x].anchor);
            let dy = vectors[i].anchor.dist(vectors[y].anchor);
            dx.total_cmp(&dy)
        })
    };
    let mut right = vec![None; n];
    let mut left = vec![None; n];
    for poly in polylines {
        let (a, b) = span[&poly.id];
        for i in a..=b {
            right[i] = poly.right.and_then(|r| nearest_in(i, r));
            left[i] = poly.left.and_then(|l| nearest_in(i, l));
        }
    }
    Ok(LaneGraph::from_parts(vectors, succ1, right, left, overlap_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Level-by-level frontier expansion from every vector: pairs whose
    /// depth-`k` frontier contains the target.
    fn bfs_k_hop(n: usize, one: &BTreeSet<(usize, usize)>, k: usize) -> BTreeSet<(usize, usize)> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in one {
            adj[a].push(b);
        }
        let mut out = BTreeSet::new();
        for s in 0..n {
            let mut frontier: BTreeSet<usize> = [s].into();
            for _ in 0..k {
                frontier = frontier.iter().flat_map(|&v| adj[v].iter().copied()).collect();
            }
            out.extend(frontier.into_iter().map(|t| (s, t)));
        }
        out
    }

    fn line(id: u32, pts: &[(f64, f64)], succ: &[u32]) -> LanePolyline {
        LanePolyline {
            id,
            points: pts.iter().map(|&(x, y)| Point::new(x, y)).collect(),
            turn: Turn::None,
            traf: false,
            intersect: false,
            successors: succ.to_vec(),
            left: None,
            right: None,
        }
    }

    #[test]
    fn straight_two_segment_chain() {
        let g = build_lane_graph(&[line(1, &[(0.0, 0.0), (20.0, 0.0)], &[])], 10.0, 2.5).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.pred[0], [(1, 0)].into());
        assert_eq!(g.succ[0], [(0, 1)].into());
        assert!(g.merge.is_empty() && g.overlap.is_empty());
        assert!(g.right.iter().chain(&g.left).all(Option::is_none));
        g.validate().unwrap();
    }

    #[test]
    fn converging_lanes_merge_and_overlap() {
        let lanes = [
            line(1, &[(-10.0, 2.0), (0.0, 0.0)], &[3]),
            line(2, &[(-10.0, -2.0), (0.0, 0.0)], &[3]),
            line(3, &[(0.0, 0.0), (10.0, 0.0)], &[]),
        ];
        let g = build_lane_graph(&lanes, 10.0, 2.5).unwrap();
        let (t1, t2) = (g.lane_members(1)[0], g.lane_members(2)[0]);
        assert!(g.merge.contains(&(t1, t2)) && g.merge.contains(&(t2, t1)));
        assert!(g.overlap.contains(&(t1, t2)) && g.overlap.contains(&(t2, t1)));
        g.validate().unwrap();
    }

    #[test]
    fn parallel_lanes_overlap_by_threshold() {
        let mut a = line(1, &[(0.0, 0.0), (30.0, 0.0)], &[]);
        let mut b = line(2, &[(0.0, 3.0), (30.0, 3.0)], &[]);
        a.left = Some(2);
        b.right = Some(1);
        let lanes = [a, b];
        let tight = build_lane_graph(&lanes, 10.0, 2.5).unwrap();
        assert!(tight.overlap.is_empty());
        let loose = build_lane_graph(&lanes, 10.0, 4.0).unwrap();
        // brute-force oracle over every cross-lane pair
        let mut expect = BTreeSet::new();
        for i in 0..loose.len() {
            for j in 0..loose.len() {
                if loose.vectors[i].lane_id != loose.vectors[j].lane_id
                    && loose.vectors[i].anchor.dist(loose.vectors[j].anchor) < 4.0
                {
                    expect.insert((i, j));
                }
            }
        }
        assert_eq!(loose.overlap, expect);
        assert_eq!(expect.len(), 6);
        assert!(loose.left.iter().take(3).all(|l| l.is_some()));
        loose.validate().unwrap();
    }

    #[test]
    fn chain_two_hop() {
        let g = build_lane_graph(&[line(1, &[(0.0, 0.0), (30.0, 0.0)], &[])], 10.0, 2.5).unwrap();
        assert_eq!(dilated_adjacency(&g, 2, Direction::Successor).unwrap(), [(0, 2)].into());
        assert_eq!(dilated_adjacency(&g, 1, Direction::Predecessor).unwrap(), g.pred[0]);
        assert!(matches!(
            dilated_adjacency(&g, 7, Direction::Successor),
            Err(SceneError::HopRange(7))
        ));
        assert!(matches!(
            dilated_adjacency(&g, 0, Direction::Successor),
            Err(SceneError::HopRange(0))
        ));
    }

    #[test]
    fn repeated_point_rejected_with_id() {
        let err = build_lane_graph(&[line(9, &[(0.0, 0.0), (0.0, 0.0), (5.0, 0.0)], &[])], 10.0, 2.5)
            .unwrap_err();
        assert!(matches!(err, SceneError::DegeneratePolyline { id: 9, .. }));
    }

    #[test]
    fn bfs_matches_composition_on_branching_dag() {
        let one: BTreeSet<_> = [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (1, 4)].into();
        let hops = compose_hops(&one);
        for k in 1..=MAX_HOPS {
            assert_eq!(hops[k - 1], bfs_k_hop(5, &one, k), "k = {k}");
        }
    }
}
