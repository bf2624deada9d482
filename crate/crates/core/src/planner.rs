//! Local risk-averse replanning on the lattice.
//!
//! Between the current waypoint and the next subgoal, vertices of a local
//! box are thresholded against the risk field (`α ≥ γ`), and A* runs over
//! the surviving 26-connected vertices. An unsafe subgoal is replaced by the
//! safest vertex in a ball around it; if nothing is reachable the plan falls
//! back to the reachable safe vertex closest to the subgoal.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::RiskField;
use crate::scene::{Lattice, Vec3};

/// Vertex indices inside the box spanned by `a` and `b`, inflated by
/// `margin` and clipped to the lattice. Ascending index order.
pub fn local_partition(lattice: &Lattice, a: &Vec3, b: &Vec3, margin: f64) -> Result<Vec<usize>> {
    for p in [a, b] {
        if !lattice.contains(p) {
            return Err(Error::OutsideLattice([p.x, p.y, p.z]));
        }
    }
    let dims = lattice.dims();
    let s = lattice.spacing();
    let o = lattice.origin();
    let mut range = [(0usize, 0usize); 3];
    for ax in 0..3 {
        let lo = (a[ax].min(b[ax]) - margin - o[ax]) / s;
        let hi = (a[ax].max(b[ax]) + margin - o[ax]) / s;
        let first = (lo - 1e-9).ceil().max(0.0) as usize;
        let last = ((hi + 1e-9).floor() as isize).min(dims[ax] as isize - 1);
        if last < first as isize {
            return Err(Error::OutsideLattice([a.x, a.y, a.z]));
        }
        range[ax] = (first, last as usize);
    }
    let mut out = Vec::new();
    for i in range[0].0..=range[0].1 {
        for j in range[1].0..=range[1].1 {
            for k in range[2].0..=range[2].1 {
                out.push(lattice.index([i, j, k]));
            }
        }
    }
    Ok(out)
}

/// Safe vertices of a local partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeSet {
    lattice: Lattice,
    member: Vec<bool>,
    partition: Vec<usize>,
    gamma: f64,
}

impl SafeSet {
    /// Every vertex of the lattice is a member.
    pub fn everything(lattice: &Lattice) -> SafeSet {
        SafeSet {
            lattice: *lattice,
            member: vec![true; lattice.len()],
            partition: (0..lattice.len()).collect(),
            gamma: f64::NEG_INFINITY,
        }
    }

    /// Builds a set from an explicit membership mask over the whole lattice.
    pub fn from_mask(lattice: &Lattice, member: Vec<bool>, gamma: f64) -> SafeSet {
        assert_eq!(member.len(), lattice.len());
        SafeSet {
            lattice: *lattice,
            partition: (0..lattice.len()).collect(),
            member,
            gamma,
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn contains(&self, vertex: usize) -> bool {
        self.member.get(vertex).copied().unwrap_or(false)
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.partition.iter().copied().filter(|&v| self.member[v])
    }

    pub fn len(&self) -> usize {
        self.members().count()
    }

    pub fn is_empty(&self) -> bool {
        self.members().next().is_none()
    }

    /// Safe neighbours of `vertex` with edge lengths.
    pub fn neighbors(&self, vertex: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.lattice
            .neighbors(vertex)
            .filter(|&(v, _)| self.member[v])
    }
}

/// Keeps the partition vertices with `α ≥ γ`.
pub fn filter_safe(field: &RiskField, partition: &[usize], gamma: f64) -> SafeSet {
    let mut member = vec![false; field.lattice.len()];
    for &v in partition {
        if field.values[v] >= gamma {
            member[v] = true;
        }
    }
    SafeSet {
        lattice: field.lattice,
        member,
        partition: partition.to_vec(),
        gamma,
    }
}

/// Length of a vertex path, independent of the order its steps are taken in.
pub fn path_length(lattice: &Lattice, waypoints: &[usize]) -> f64 {
    let mut steps: BTreeMap<usize, usize> = BTreeMap::new();
    for w in waypoints.windows(2) {
        let (a, b) = (lattice.coords(w[0]), lattice.coords(w[1]));
        let sq: usize = (0..3).map(|x| a[x].abs_diff(b[x]).pow(2)).sum();
        *steps.entry(sq).or_default() += 1;
    }
    steps
        .iter()
        .map(|(&sq, &n)| n as f64 * (sq as f64).sqrt())
        .sum::<f64>()
        * lattice.spacing()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSegment {
    pub lattice: Lattice,
    /// Vertex indices, start first.
    pub waypoints: Vec<usize>,
    /// Terminal is not the nominal subgoal.
    pub reached_proxy: bool,
    /// Terminal came from the reachable-set fallback rather than a proxy.
    pub fallback: bool,
    pub total_length: f64,
}

impl PathSegment {
    pub fn new(lattice: &Lattice, waypoints: Vec<usize>) -> PathSegment {
        let total_length = path_length(lattice, &waypoints);
        PathSegment {
            lattice: *lattice,
            waypoints,
            reached_proxy: false,
            fallback: false,
            total_length,
        }
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.waypoints
            .iter()
            .map(|&v| self.lattice.position(v))
            .collect()
    }

    pub fn terminal(&self) -> usize {
        *self.waypoints.last().expect("segments are nonempty")
    }

    /// CSV with columns `k,x,y,z,alpha`.
    pub fn to_csv(&self, field: &RiskField) -> String {
        let mut out = String::from("k,x,y,z,alpha\n");
        for (k, &v) in self.waypoints.iter().enumerate() {
            let p = self.lattice.position(v);
            let _ = writeln!(out, "{k},{},{},{},{}", p.x, p.y, p.z, field.values[v]);
        }
        out
    }

    pub fn write_csv(&self, field: &RiskField, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv(field)).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Open {
    f: f64,
    h: f64,
    vertex: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // reversed: BinaryHeap pops the smallest (f, h, vertex)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest 26-connected path through the safe set, or `None` when the goal
/// is unreachable. Straight-line distance is the heuristic; open-list ties
/// go to the smaller heuristic, then the smaller vertex index.
pub fn astar(safe: &SafeSet, start: usize, goal: usize) -> Result<Option<PathSegment>> {
    for v in [start, goal] {
        if !safe.contains(v) {
            return Err(Error::UnsafeVertex(v));
        }
    }
    let lat = safe.lattice();
    let goal_pos = lat.position(goal);
    let heuristic = |v: usize| (lat.position(v) - goal_pos).norm();
    let n = lat.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[start] = 0.0;
    let h0 = heuristic(start);
    open.push(Open {
        f: h0,
        h: h0,
        vertex: start,
    });
    while let Some(Open { vertex: u, .. }) = open.pop() {
        if closed[u] {
            continue;
        }
        if u == goal {
            let mut path = vec![goal];
            let mut v = goal;
            while v != start {
                v = parent[v];
                path.push(v);
            }
            path.reverse();
            return Ok(Some(PathSegment::new(lat, path)));
        }
        closed[u] = true;
        for (v, w) in safe.neighbors(u) {
            if closed[v] {
                continue;
            }
            let tentative = g[u] + w;
            if tentative < g[v] {
                g[v] = tentative;
                parent[v] = u;
                let h = heuristic(v);
                open.push(Open {
                    f: tentative + h,
                    h,
                    vertex: v,
                });
            }
        }
    }
    Ok(None)
}

/// Safest safe vertex within the closed ball of radius `delta` around
/// `target`; ties go to the closer vertex, then the smaller index.
pub fn proxy_subgoal(
    safe: &SafeSet,
    field: &RiskField,
    target: &Vec3,
    delta: f64,
) -> Option<usize> {
    let lat = safe.lattice();
    let mut best: Option<(f64, f64, usize)> = None;
    for v in safe.members() {
        let dist = (lat.position(v) - target).norm();
        if dist > delta {
            continue;
        }
        let alpha = field.values[v];
        let better = match best {
            None => true,
            Some((ba, bd, _)) => alpha > ba || (alpha == ba && dist < bd),
        };
        if better {
            best = Some((alpha, dist, v));
        }
    }
    best.map(|(_, _, v)| v)
}

/// Safe vertices connected to `start`, in ascending index order.
pub fn reachable(safe: &SafeSet, start: usize) -> Vec<usize> {
    let mut seen = vec![false; safe.lattice().len()];
    let mut out = Vec::new();
    if !safe.contains(start) {
        return out;
    }
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        out.push(u);
        for (v, _) in safe.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    /// Risk tolerance, meters.
    pub gamma: f64,
    /// Partition inflation, meters.
    pub margin: f64,
    /// Initial proxy ball radius, meters.
    pub delta: f64,
    /// Number of one-spacing expansions of the proxy ball.
    pub delta_retries: usize,
}

impl PlanParams {
    /// γ = 0.10, margin of 4 spacings, δ of 3 spacings with 5 retries.
    pub fn for_lattice(lattice: &Lattice) -> PlanParams {
        PlanParams {
            gamma: 0.10,
            margin: 4.0 * lattice.spacing(),
            delta: 3.0 * lattice.spacing(),
            delta_retries: 5,
        }
    }
}

fn snap_checked(lattice: &Lattice, p: &Vec3) -> usize {
    let (v, d) = lattice.snap(p);
    if d > lattice.spacing() * 3f64.sqrt() / 2.0 {
        warn!(
            "point {:?} snaps {d:.3} m away from the lattice",
            p.as_slice()
        );
    }
    v
}

/// Plans from `from` toward `to`: nominal subgoal if safe and reachable,
/// else a proxy subgoal, else the reachable safe vertex nearest to `to`.
/// Errors with [`Error::Blocked`] when the start vertex is unsafe.
pub fn plan_segment(
    field: &RiskField,
    from: &Vec3,
    to: &Vec3,
    params: &PlanParams,
) -> Result<PathSegment> {
    let lat = &field.lattice;
    let partition = local_partition(lat, from, to, params.margin)?;
    let safe = filter_safe(field, &partition, params.gamma);
    let start = snap_checked(lat, from);
    if !safe.contains(start) {
        return Err(Error::Blocked(format!(
            "start vertex {start} has risk {:.4} below tolerance {:.4}",
            field.values[start], params.gamma
        )));
    }
    let goal = snap_checked(lat, to);
    if safe.contains(goal) {
        if let Some(seg) = astar(&safe, start, goal)? {
            return Ok(seg);
        }
    }
    let mut tried = Vec::new();
    for attempt in 0..=params.delta_retries {
        let delta = params.delta + attempt as f64 * lat.spacing();
        let Some(proxy) = proxy_subgoal(&safe, field, to, delta) else {
            continue;
        };
        if proxy == goal || tried.contains(&proxy) {
            continue;
        }
        tried.push(proxy);
        if let Some(mut seg) = astar(&safe, start, proxy)? {
            seg.reached_proxy = true;
            return Ok(seg);
        }
    }
    let target = reachable(&safe, start)
        .into_iter()
        .map(|v| ((lat.position(v) - to).norm(), v))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, v)| v)
        .unwrap_or(start);
    let mut seg = astar(&safe, start, target)?.expect("target is reachable by construction");
    seg.reached_proxy = true;
    seg.fallback = true;
    Ok(seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(n: usize) -> Lattice {
        Lattice::new(Vec3::zeros(), 1.0, [n, n, n]).unwrap()
    }

    fn flat_field(lat: &Lattice, value: f64) -> RiskField {
        RiskField {
            lattice: *lat,
            values: vec![value; lat.len()],
            epsilon: 0.05,
        }
    }

    #[test]
    fn degenerate_partition_is_neighbourhood() {
        let lat = lattice(5);
        let p = lat.position(lat.index([0, 2, 4]));
        let part = local_partition(&lat, &p, &p, 1.0).unwrap();
        assert_eq!(part.len(), 2 * 3 * 2);
        let p = lat.position(lat.index([2, 2, 2]));
        assert_eq!(local_partition(&lat, &p, &p, 1.0).unwrap().len(), 27);
        assert!(local_partition(&lat, &Vec3::new(-1.0, 0.0, 0.0), &p, 1.0).is_err());
    }

    #[test]
    fn zero_margin_partition_is_segment_box() {
        let lat = lattice(5);
        let a = Vec3::new(1.0, 2.0, 3.0);
        let b = Vec3::new(3.0, 2.0, 3.0);
        let part = local_partition(&lat, &a, &b, 0.0).unwrap();
        let coords: Vec<_> = part.iter().map(|&v| lat.coords(v)).collect();
        assert_eq!(coords, vec![[1, 2, 3], [2, 2, 3], [3, 2, 3]]);
    }

    #[test]
    fn threshold_edges() {
        let lat = lattice(3);
        let mut field = flat_field(&lat, 0.2);
        field.values[4] = 0.1;
        let all: Vec<usize> = (0..lat.len()).collect();
        assert_eq!(filter_safe(&field, &all, f64::NEG_INFINITY).len(), 27);
        assert!(filter_safe(&field, &all, 0.3).is_empty());
        let s = filter_safe(&field, &all, 0.1);
        assert!(s.contains(4), "ties are members");
        assert!(!filter_safe(&field, &all, 0.15).contains(4));
    }

    #[test]
    fn astar_trivial_paths() {
        let lat = lattice(3);
        let safe = SafeSet::everything(&lat);
        let seg = astar(&safe, 13, 13).unwrap().unwrap();
        assert_eq!(seg.waypoints, vec![13]);
        assert_eq!(seg.total_length, 0.0);
        let seg = astar(&safe, 0, lat.index([2, 2, 2])).unwrap().unwrap();
        assert_eq!(seg.waypoints.len(), 3);
        assert!((seg.total_length - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn astar_unsafe_endpoints_and_disconnection() {
        let lat = lattice(3);
        let mut mask = vec![true; lat.len()];
        // wall at i = 1
        for j in 0..3 {
            for k in 0..3 {
                mask[lat.index([1, j, k])] = false;
            }
        }
        let safe = SafeSet::from_mask(&lat, mask, 0.0);
        assert!(matches!(astar(&safe, 13, 0), Err(Error::UnsafeVertex(13))));
        assert_eq!(astar(&safe, 0, lat.index([2, 0, 0])).unwrap(), None);
    }

    #[test]
    fn proxy_prefers_dominant_vertex_and_handles_empty_ball() {
        let lat = lattice(5);
        let mut field = flat_field(&lat, 0.2);
        let target = lat.index([2, 2, 2]);
        field.values[target] = 0.9;
        let all: Vec<usize> = (0..lat.len()).collect();
        let safe = filter_safe(&field, &all, 0.1);
        assert_eq!(
            proxy_subgoal(&safe, &field, &lat.position(target), 1.5),
            Some(target)
        );
        let outside = Vec3::new(40.0, 40.0, 40.0);
        assert_eq!(proxy_subgoal(&safe, &field, &outside, 1.0), None);
        // equal α: closest to the target wins
        let flat = flat_field(&lat, 0.2);
        let safe = filter_safe(&flat, &all, 0.1);
        let p = Vec3::new(2.2, 2.0, 2.0);
        assert_eq!(proxy_subgoal(&safe, &flat, &p, 2.0), Some(target));
    }

    #[test]
    fn free_corridor_plans_straight() {
        let lat = Lattice::new(Vec3::zeros(), 0.1, [21, 5, 5]).unwrap();
        let field = flat_field(&lat, 1.0);
        let a = Vec3::new(0.0, 0.2, 0.2);
        let b = Vec3::new(2.0, 0.2, 0.2);
        let seg = plan_segment(&field, &a, &b, &PlanParams::for_lattice(&lat)).unwrap();
        assert!(!seg.reached_proxy);
        assert_eq!(seg.waypoints.len(), 21);
        assert!((seg.total_length - 2.0).abs() < 1e-12);
        assert_eq!(seg.terminal(), lat.snap(&b).0);
    }

    #[test]
    fn unsafe_start_is_blocked() {
        let lat = lattice(5);
        let mut field = flat_field(&lat, 1.0);
        field.values[0] = -1.0;
        let r = plan_segment(
            &field,
            &Vec3::zeros(),
            &Vec3::new(4.0, 0.0, 0.0),
            &PlanParams::for_lattice(&lat),
        );
        assert!(matches!(r, Err(Error::Blocked(_))));
    }

    #[test]
    fn csv_columns() {
        let lat = lattice(3);
        let field = flat_field(&lat, 0.37);
        let seg = PathSegment::new(&lat, vec![0, 1]);
        let csv = seg.to_csv(&field);
        assert_eq!(csv, "k,x,y,z,alpha\n0,0,0,0,0.37\n1,0,0,1,0.37\n");
    }
}
