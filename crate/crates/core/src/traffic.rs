//! Road networks, deterministic shortest paths, and the convex-combinations
//! (Frank-Wolfe style) traffic assignment for arc-separable nondecreasing
//! costs, plus reading/writing the TNTP text conventions.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One directed arc with its congestion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadArc {
    pub tail: usize,
    pub head: usize,
    pub capacity: f64,
    pub free_flow_time: f64,
}

/// A directed road network. The node-arc incidence convention puts `-1` at an
/// arc's tail and `+1` at its head.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    n_nodes: usize,
    arcs: Vec<RoadArc>,
    /// Outgoing arc indices per node, in arc-index order.
    out: Vec<Vec<usize>>,
}

impl RoadNetwork {
    pub fn new(n_nodes: usize, arcs: Vec<RoadArc>) -> Result<Self> {
        let mut out = vec![Vec::new(); n_nodes];
        for (i, a) in arcs.iter().enumerate() {
            if a.tail >= n_nodes || a.head >= n_nodes {
                return Err(Error::Invalid(format!(
                    "arc {i} references node beyond {n_nodes}"
                )));
            }
            if a.capacity <= 0.0 || a.free_flow_time <= 0.0 {
                return Err(Error::Invalid(format!(
                    "arc {i} needs positive capacity and free-flow time"
                )));
            }
            out[a.tail].push(i);
        }
        Ok(RoadNetwork { n_nodes, arcs, out })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs(&self) -> &[RoadArc] {
        &self.arcs
    }

    /// Dense node-arc incidence matrix (`n_nodes x n_arcs`).
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut n = DMatrix::zeros(self.n_nodes, self.arcs.len());
        for (j, a) in self.arcs.iter().enumerate() {
            n[(a.tail, j)] = -1.0;
            n[(a.head, j)] = 1.0;
        }
        n
    }
}

/// Origin-destination demands.
#[derive(Debug, Clone, PartialEq)]
pub struct OdPair {
    pub origin: usize,
    pub destination: usize,
    pub demand: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OdMatrix {
    pairs: Vec<OdPair>,
}

impl OdMatrix {
    pub fn new(pairs: Vec<OdPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.origin == p.destination {
                return Err(Error::Invalid(format!("OD pair {i} has origin = destination")));
            }
            if !p.demand.is_finite() || p.demand <= 0.0 {
                return Err(Error::Invalid(format!("OD pair {i} needs positive finite demand")));
            }
        }
        Ok(OdMatrix { pairs })
    }

    pub fn pairs(&self) -> &[OdPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn total_demand(&self) -> f64 {
        self.pairs.iter().map(|p| p.demand).sum()
    }

    /// A new matrix keeping only the given pair indices.
    pub fn subset(&self, indices: &[usize]) -> OdMatrix {
        OdMatrix { pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect() }
    }
}

/// Arc-separable cost model `c_a(x_a)`.
pub trait ArcCost: Sync {
    fn arc_cost(&self, arc: &RoadArc, flow: f64) -> f64;

    fn costs(&self, net: &RoadNetwork, flows: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(net.n_arcs(), |a, _| self.arc_cost(&net.arcs()[a], flows[a]))
    }
}

/// The standard congestion multiplier `g(t) = 1 + 0.15 t^4` applied to the
/// free-flow time at utilization `t = x/m`.
pub fn bpr(t: f64) -> f64 {
    1.0 + 0.15 * t.powi(4)
}

/// `c_a(x) = c0_a * bpr(x / m_a)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BprCost;

impl ArcCost for BprCost {
    fn arc_cost(&self, arc: &RoadArc, flow: f64) -> f64 {
        arc.free_flow_time * bpr(flow / arc.capacity)
    }
}

/// Cost from any scalar congestion function of the utilization.
pub struct ScalarCongestionCost<G: Fn(f64) -> f64 + Sync> {
    pub g: G,
}

impl<G: Fn(f64) -> f64 + Sync> ArcCost for ScalarCongestionCost<G> {
    fn arc_cost(&self, arc: &RoadArc, flow: f64) -> f64 {
        arc.free_flow_time * (self.g)(flow / arc.capacity)
    }
}

/// One-to-all shortest paths by deque label correcting. Ties in distance are
/// broken toward the lowest predecessor arc index, which makes downstream
/// flow loading deterministic.
pub fn shortest_paths(
    net: &RoadNetwork,
    origin: usize,
    costs: &DVector<f64>,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = net.n_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut queued = vec![false; n];
    let mut queue = VecDeque::new();
    dist[origin] = 0.0;
    queue.push_back(origin);
    queued[origin] = true;
    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        let du = dist[u];
        for &ai in &net.out[u] {
            let arc = &net.arcs[ai];
            let nd = du + costs[ai];
            let v = arc.head;
            let better = nd < dist[v]
                || (nd == dist[v] && pred[v].is_some_and(|p| ai < p));
            if better {
                let improved = nd < dist[v];
                dist[v] = nd;
                pred[v] = Some(ai);
                if improved && !queued[v] {
                    // Small-label-first heuristic keeps revisits low.
                    if queue.front().is_some_and(|&f| dist[v] < dist[f]) {
                        queue.push_front(v);
                    } else {
                        queue.push_back(v);
                    }
                    queued[v] = true;
                }
            }
        }
    }
    (dist, pred)
}

/// Assigns every OD pair's demand to its current shortest path. Returns the
/// aggregate arc flows, per-pair flows for `tracked` pair indices, and the
/// total cost of the assignment (`sum_w d_w * dist_w`).
pub fn all_or_nothing(
    net: &RoadNetwork,
    od: &OdMatrix,
    costs: &DVector<f64>,
    tracked: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let mut flows = DVector::zeros(net.n_arcs());
    let mut tracked_flows = DMatrix::zeros(tracked.len(), net.n_arcs());
    let mut min_cost = 0.0;

    // One shortest-path tree per distinct origin.
    let mut by_origin: Vec<(usize, Vec<usize>)> = Vec::new();
    for (w, p) in od.pairs().iter().enumerate() {
        match by_origin.iter_mut().find(|(o, _)| *o == p.origin) {
            Some((_, list)) => list.push(w),
            None => by_origin.push((p.origin, vec![w])),
        }
    }
    for (origin, pair_ids) in by_origin {
        let (dist, pred) = shortest_paths(net, origin, costs);
        for w in pair_ids {
            let pair = &od.pairs()[w];
            if !dist[pair.destination].is_finite() {
                return Err(Error::Invalid(format!(
                    "no path from {} to {}: disconnected OD pair",
                    pair.origin + 1,
                    pair.destination + 1
                )));
            }
            min_cost += pair.demand * dist[pair.destination];
            let slot = tracked.iter().position(|&t| t == w);
            let mut v = pair.destination;
            while v != origin {
                let ai = pred[v].expect("finite distance implies a predecessor");
                flows[ai] += pair.demand;
                if let Some(s) = slot {
                    tracked_flows[(s, ai)] += pair.demand;
                }
                v = net.arcs[ai].tail;
            }
        }
    }
    Ok((flows, tracked_flows, min_cost))
}

#[derive(Debug, Clone)]
pub struct AssignmentOptions {
    /// Relative equilibrium gap target.
    pub tol: f64,
    pub max_iter: usize,
    /// OD pair indices whose per-pair flow decomposition should be kept.
    pub tracked: Vec<usize>,
}

impl Default for AssignmentOptions {
    fn default() -> Self {
        AssignmentOptions { tol: 1e-4, max_iter: 100_000, tracked: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct Assignment {
    pub flows: DVector<f64>,
    /// Row per tracked pair (same order as requested).
    pub tracked_flows: DMatrix<f64>,
    pub relative_gap: f64,
    pub iterations: usize,
    /// `sum_w d_w * (shortest-path cost)` at the final flows: the lower bound
    /// used in the gap, also the "minimal cost of travel".
    pub min_travel_cost: f64,
}

/// Convex-combinations assignment: all-or-nothing subproblems with step
/// `2/(k+2)`, stopping at relative gap `tol` (gap lower bound from the
/// all-or-nothing solution).
pub fn solve_traffic_assignment(
    net: &RoadNetwork,
    od: &OdMatrix,
    cost: &dyn ArcCost,
    opts: &AssignmentOptions,
) -> Result<Assignment> {
    if od.is_empty() {
        return Ok(Assignment {
            flows: DVector::zeros(net.n_arcs()),
            tracked_flows: DMatrix::zeros(0, net.n_arcs()),
            relative_gap: 0.0,
            iterations: 0,
            min_travel_cost: 0.0,
        });
    }
    let free_costs = cost.costs(net, &DVector::zeros(net.n_arcs()));
    let (mut flows, mut tracked_flows, _) = all_or_nothing(net, od, &free_costs, &opts.tracked)?;
    let mut gap = f64::INFINITY;
    let mut min_cost = 0.0;
    let mut iterations = 0;
    for k in 1..=opts.max_iter {
        let costs = cost.costs(net, &flows);
        let (aon, aon_tracked, lower) = all_or_nothing(net, od, &costs, &opts.tracked)?;
        let current = costs.dot(&flows);
        gap = (current - lower) / current.max(f64::MIN_POSITIVE);
        min_cost = lower;
        iterations = k;
        if gap <= opts.tol {
            break;
        }
        let step = 2.0 / (k as f64 + 2.0);
        flows = &flows * (1.0 - step) + aon * step;
        tracked_flows = &tracked_flows * (1.0 - step) + aon_tracked * step;
    }
    if gap > opts.tol {
        return Err(Error::NonConvergence(format!(
            "assignment stalled at relative gap {gap:.3e} after {iterations} iterations"
        )));
    }
    Ok(Assignment { flows, tracked_flows, relative_gap: gap, iterations, min_travel_cost: min_cost })
}

/// Smallest eps making `flows` an eps-approximate Wardrop equilibrium under
/// `cost`, via one shortest-path pass: `c(x)'x - sum_w d_w dist_w`. Also
/// returns the minimal travel cost (the subtrahend) for normalization.
pub fn wardrop_epsilon(
    net: &RoadNetwork,
    od: &OdMatrix,
    cost: &dyn ArcCost,
    flows: &DVector<f64>,
) -> Result<(f64, f64)> {
    let costs = cost.costs(net, flows);
    let (_, _, min_cost) = all_or_nothing(net, od, &costs, &[])?;
    let eps = (costs.dot(flows) - min_cost).max(0.0);
    Ok((eps, min_cost))
}

// ---------------------------------------------------------------------------
// TNTP text convention
// ---------------------------------------------------------------------------

fn meta_value(lines: &[(usize, &str)], key: &str) -> Option<(usize, String)> {
    for (no, line) in lines {
        if let Some(rest) = line.strip_prefix(&format!("<{key}>")) {
            return Some((*no, rest.trim().to_string()));
        }
    }
    None
}

/// Parses a network file and a trip table in the TNTP layout. Node ids are
/// 1-based in the files and 0-based in memory. Unused arc columns (length,
/// B, power, speed, toll, type) are ignored.
pub fn load_tntp(net_text: &str, trips_text: &str) -> Result<(RoadNetwork, OdMatrix)> {
    let net = parse_tntp_net(net_text)?;
    let od = parse_tntp_trips(trips_text, net.n_nodes())?;
    Ok((net, od))
}

pub fn parse_tntp_net(text: &str) -> Result<RoadNetwork> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('~'))
        .collect();
    let (_, n_nodes) = meta_value(&lines, "NUMBER OF NODES")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing <NUMBER OF NODES> header".into() })?;
    let n_nodes: usize = n_nodes
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "malformed <NUMBER OF NODES>".into() })?;
    let (_, n_links) = meta_value(&lines, "NUMBER OF LINKS")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing <NUMBER OF LINKS> header".into() })?;
    let n_links: usize = n_links
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "malformed <NUMBER OF LINKS>".into() })?;

    let end = lines
        .iter()
        .position(|(_, l)| l.starts_with("<END OF METADATA>"))
        .map(|i| i + 1)
        .unwrap_or(0);
    let mut arcs = Vec::with_capacity(n_links);
    for (no, line) in &lines[end..] {
        if line.starts_with('<') {
            continue;
        }
        let fields: Vec<&str> = line
            .trim_end_matches(';')
            .split_whitespace()
            .collect();
        if fields.len() < 5 {
            return Err(Error::Parse { line: *no, msg: format!("arc row needs 5+ fields, got {}", fields.len()) });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse { line: *no, msg: format!("bad {what}: {s:?}") })
        };
        let tail: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse { line: *no, msg: format!("bad tail node: {:?}", fields[0]) })?;
        let head: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse { line: *no, msg: format!("bad head node: {:?}", fields[1]) })?;
        if tail == 0 || head == 0 || tail > n_nodes || head > n_nodes {
            return Err(Error::Parse { line: *no, msg: format!("arc references node outside 1..={n_nodes}") });
        }
        let capacity = parse_f(fields[2], "capacity")?;
        let free_flow_time = parse_f(fields[4], "free-flow time")?;
        if capacity <= 0.0 {
            return Err(Error::Parse { line: *no, msg: format!("non-positive capacity {capacity}") });
        }
        if free_flow_time <= 0.0 {
            return Err(Error::Parse { line: *no, msg: format!("non-positive free-flow time {free_flow_time}") });
        }
        arcs.push(RoadArc { tail: tail - 1, head: head - 1, capacity, free_flow_time });
    }
    if arcs.is_empty() {
        return Err(Error::Parse { line: lines.last().map_or(1, |(n, _)| *n), msg: "no arc records found".into() });
    }
    if arcs.len() != n_links {
        return Err(Error::Parse {
            line: lines.last().map_or(1, |(n, _)| *n),
            msg: format!("header says {n_links} links, found {}", arcs.len()),
        });
    }
    RoadNetwork::new(n_nodes, arcs)
}

pub fn parse_tntp_trips(text: &str, n_nodes: usize) -> Result<OdMatrix> {
    let mut pairs = Vec::new();
    let mut origin: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') || line.starts_with('<') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("Origin") {
            let o: usize = rest
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: no, msg: format!("bad origin id: {rest:?}") })?;
            if o == 0 || o > n_nodes {
                return Err(Error::Parse { line: no, msg: format!("origin {o} outside 1..={n_nodes}") });
            }
            origin = Some(o - 1);
            continue;
        }
        let o = origin.ok_or(Error::Parse { line: no, msg: "trip entry before any Origin header".into() })?;
        for entry in line.split(';') {
            let entry = entry.trim();
            if entry.is_empty() {
                continue;
            }
            let (dest_s, flow_s) = entry
                .split_once(':')
                .ok_or(Error::Parse { line: no, msg: format!("expected `dest : flow`, got {entry:?}") })?;
            let dest: usize = dest_s
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: no, msg: format!("bad destination: {dest_s:?}") })?;
            if dest == 0 || dest > n_nodes {
                return Err(Error::Parse { line: no, msg: format!("destination {dest} outside 1..={n_nodes}") });
            }
            let flow: f64 = flow_s
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: no, msg: format!("bad flow: {flow_s:?}") })?;
            if flow < 0.0 || !flow.is_finite() {
                return Err(Error::Parse { line: no, msg: format!("negative or non-finite flow {flow}") });
            }
            if flow > 0.0 && dest - 1 != o {
                pairs.push(OdPair { origin: o, destination: dest - 1, demand: flow });
            }
        }
    }
    OdMatrix::new(pairs)
}

/// Writes the used network fields back in the TNTP layout.
pub fn write_tntp_net(net: &RoadNetwork) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<NUMBER OF ZONES> {}", net.n_nodes());
    let _ = writeln!(s, "<NUMBER OF NODES> {}", net.n_nodes());
    let _ = writeln!(s, "<FIRST THRU NODE> 1");
    let _ = writeln!(s, "<NUMBER OF LINKS> {}", net.n_arcs());
    let _ = writeln!(s, "<END OF METADATA>");
    let _ = writeln!(s, "~ \tInit node\tTerm node\tCapacity\tLength\tFree Flow Time\tB\tPower\tSpeed limit\tToll\tType\t;");
    for a in net.arcs() {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t0\t{}\t0.15\t4\t0\t0\t1\t;",
            a.tail + 1,
            a.head + 1,
            a.capacity,
            a.free_flow_time
        );
    }
    s
}

pub fn write_tntp_trips(od: &OdMatrix, n_nodes: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<NUMBER OF ZONES> {n_nodes}");
    let _ = writeln!(s, "<TOTAL OD FLOW> {}", od.total_demand());
    let _ = writeln!(s, "<END OF METADATA>");
    for o in 0..n_nodes {
        let dests: Vec<&OdPair> = od.pairs().iter().filter(|p| p.origin == o).collect();
        if dests.is_empty() {
            continue;
        }
        let _ = writeln!(s, "Origin {}", o + 1);
        for chunk in dests.chunks(5) {
            let row: Vec<String> = chunk
                .iter()
                .map(|p| format!("{} : {};", p.destination + 1, p.demand))
                .collect();
            let _ = writeln!(s, "    {}", row.join(" "));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parallel_two_arc(cap1: f64, cap2: f64, fft1: f64, fft2: f64) -> RoadNetwork {
        RoadNetwork::new(
            2,
            vec![
                RoadArc { tail: 0, head: 1, capacity: cap1, free_flow_time: fft1 },
                RoadArc { tail: 0, head: 1, capacity: cap2, free_flow_time: fft2 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn bpr_values() {
        assert_eq!(bpr(0.0), 1.0);
        assert!((bpr(1.0) - 1.15).abs() < 1e-15);
        assert!((bpr(2.0) - 3.4).abs() < 1e-15);
    }

    #[test]
    fn identical_parallel_arcs_split_evenly() {
        let net = parallel_two_arc(100.0, 100.0, 1.0, 1.0);
        let od = OdMatrix::new(vec![OdPair { origin: 0, destination: 1, demand: 80.0 }]).unwrap();
        let opts = AssignmentOptions { tol: 1e-6, ..Default::default() };
        let res = solve_traffic_assignment(&net, &od, &BprCost, &opts).unwrap();
        assert!((res.flows[0] - 40.0).abs() < 0.05);
        assert!((res.flows[1] - 40.0).abs() < 0.05);
    }

    #[test]
    fn asymmetric_parallel_arcs_match_bisection_oracle() {
        let net = parallel_two_arc(120.0, 60.0, 1.0, 1.3);
        let d = 150.0;
        let od = OdMatrix::new(vec![OdPair { origin: 0, destination: 1, demand: d }]).unwrap();
        let opts = AssignmentOptions { tol: 1e-7, ..Default::default() };
        let res = solve_traffic_assignment(&net, &od, &BprCost, &opts).unwrap();

        // Oracle: both arcs used => equal costs; bisection on x in [0, d].
        let c1 = |x: f64| 1.0 * bpr(x / 120.0);
        let c2 = |x: f64| 1.3 * bpr(x / 60.0);
        let (mut lo, mut hi) = (0.0, d);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if c1(mid) < c2(d - mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x_star = 0.5 * (lo + hi);
        assert!((res.flows[0] - x_star).abs() < 0.05, "{} vs {}", res.flows[0], x_star);
    }

    #[test]
    fn tracked_flows_conserve_per_od() {
        // Diamond network, two OD pairs, check N x_w = d_w.
        let net = RoadNetwork::new(
            4,
            vec![
                RoadArc { tail: 0, head: 1, capacity: 10.0, free_flow_time: 1.0 },
                RoadArc { tail: 0, head: 2, capacity: 10.0, free_flow_time: 1.2 },
                RoadArc { tail: 1, head: 3, capacity: 10.0, free_flow_time: 1.0 },
                RoadArc { tail: 2, head: 3, capacity: 10.0, free_flow_time: 0.9 },
                RoadArc { tail: 1, head: 2, capacity: 5.0, free_flow_time: 0.3 },
            ],
        )
        .unwrap();
        let od = OdMatrix::new(vec![
            OdPair { origin: 0, destination: 3, demand: 12.0 },
            OdPair { origin: 1, destination: 3, demand: 4.0 },
        ])
        .unwrap();
        let opts = AssignmentOptions { tol: 1e-5, tracked: vec![0, 1], ..Default::default() };
        let res = solve_traffic_assignment(&net, &od, &BprCost, &opts).unwrap();
        let incidence = net.incidence();
        for (w, pair) in od.pairs().iter().enumerate() {
            let xw = res.tracked_flows.row(w).transpose();
            let balance = &incidence * &xw;
            for v in 0..4 {
                let expect = if v == pair.origin {
                    -pair.demand
                } else if v == pair.destination {
                    pair.demand
                } else {
                    0.0
                };
                assert!((balance[v] - expect).abs() < 1e-6, "node {v}: {balance:?}");
            }
        }
        // Tracked rows sum to the aggregate.
        let sum = res.tracked_flows.row(0) + res.tracked_flows.row(1);
        assert!((sum.transpose() - &res.flows).amax() < 1e-9);
    }

    #[test]
    fn disconnected_od_reported() {
        let net = RoadNetwork::new(
            3,
            vec![RoadArc { tail: 0, head: 1, capacity: 1.0, free_flow_time: 1.0 }],
        )
        .unwrap();
        let od = OdMatrix::new(vec![OdPair { origin: 0, destination: 2, demand: 1.0 }]).unwrap();
        let err = solve_traffic_assignment(&net, &od, &BprCost, &AssignmentOptions::default());
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    #[test]
    fn shortest_path_tie_breaks_to_lowest_arc_index() {
        // Two equal-cost parallel arcs: the predecessor must be arc 0.
        let net = parallel_two_arc(1.0, 1.0, 2.0, 2.0);
        let costs = DVector::from_vec(vec![2.0, 2.0]);
        let (_, pred) = shortest_paths(&net, 0, &costs);
        assert_eq!(pred[1], Some(0));
    }

    #[test]
    fn golden_two_node_fixture() {
        let net_text = "\
<NUMBER OF ZONES> 2
<NUMBER OF NODES> 2
<FIRST THRU NODE> 1
<NUMBER OF LINKS> 2
<END OF METADATA>
~ Init Term Capacity Length FFT B Power Speed Toll Type ;
 1 2 400.0 1 1.5 0.15 4 0 0 1 ;
 2 1 300.0 1 2.5 0.15 4 0 0 1 ;
";
        let trips_text = "\
<NUMBER OF ZONES> 2
<TOTAL OD FLOW> 70
<END OF METADATA>
Origin 1
    2 : 50;
Origin 2
    1 : 20;
";
        let (net, od) = load_tntp(net_text, trips_text).unwrap();
        assert_eq!(net.n_nodes(), 2);
        assert_eq!(net.n_arcs(), 2);
        assert_eq!(net.arcs()[0], RoadArc { tail: 0, head: 1, capacity: 400.0, free_flow_time: 1.5 });
        assert_eq!(net.arcs()[1], RoadArc { tail: 1, head: 0, capacity: 300.0, free_flow_time: 2.5 });
        assert_eq!(od.pairs().len(), 2);
        assert_eq!(od.pairs()[0], OdPair { origin: 0, destination: 1, demand: 50.0 });
        assert_eq!(od.total_demand(), 70.0);
    }

    #[test]
    fn tntp_round_trip_is_lossless_for_used_fields() {
        let net = parallel_two_arc(123.456789012345, 60.0, 1.25, 2.0);
        let od = OdMatrix::new(vec![
            OdPair { origin: 0, destination: 1, demand: 17.125 },
            OdPair { origin: 1, destination: 0, demand: 3.0625 },
        ])
        .unwrap();
        let (net2, od2) = load_tntp(&write_tntp_net(&net), &write_tntp_trips(&od, 2)).unwrap();
        assert_eq!(net2, net);
        assert_eq!(od2, od);
    }

    #[test]
    fn empty_arc_section_is_structured_error() {
        let net_text = "\
<NUMBER OF NODES> 2
<NUMBER OF LINKS> 0
<END OF METADATA>
";
        let err = parse_tntp_net(net_text);
        assert!(matches!(err, Err(Error::Parse { .. })));
    }

    #[test]
    fn dangling_node_and_negative_capacity_errors() {
        let bad_node = "\
<NUMBER OF NODES> 2
<NUMBER OF LINKS> 1
<END OF METADATA>
 1 3 10.0 1 1.0 0.15 4 0 0 1 ;
";
        assert!(matches!(parse_tntp_net(bad_node), Err(Error::Parse { line: 4, .. })));
        let bad_cap = "\
<NUMBER OF NODES> 2
<NUMBER OF LINKS> 1
<END OF METADATA>
 1 2 -10.0 1 1.0 0.15 4 0 0 1 ;
";
        assert!(matches!(parse_tntp_net(bad_cap), Err(Error::Parse { line: 4, .. })));
    }
}
