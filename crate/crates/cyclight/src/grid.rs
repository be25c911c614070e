//! Rectangular grid road network.
//!
//! Interior intersections form an `rows x cols` lattice; every edge
//! intersection additionally connects to a boundary node that acts as a
//! source and sink for demand. Boundary nodes are numbered clockwise
//! starting at the northwest corner: first along the north edge west to
//! east, then down the east edge, back along the south edge east to west,
//! and up the west edge. Every adjacent pair of nodes is joined by one
//! directed link per direction of travel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub type NodeId = usize;
pub type LinkId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

pub const DIRECTIONS: [Direction; 4] = [
    Direction::North,
    Direction::East,
    Direction::South,
    Direction::West,
];

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::North => 0,
            Direction::East => 1,
            Direction::South => 2,
            Direction::West => 3,
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::North => Direction::South,
            Direction::East => Direction::West,
            Direction::South => Direction::North,
            Direction::West => Direction::East,
        }
    }

    /// Compass direction after a left turn while travelling `self`.
    pub fn left(self) -> Direction {
        match self {
            Direction::North => Direction::West,
            Direction::West => Direction::South,
            Direction::South => Direction::East,
            Direction::East => Direction::North,
        }
    }

    /// Compass direction after a right turn while travelling `self`.
    pub fn right(self) -> Direction {
        self.left().opposite()
    }
}

/// How a vehicle crosses an intersection: the relation between its incoming
/// travel direction and its outgoing one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Turn {
    Straight,
    Left,
    Right,
    UTurn,
}

pub fn turn(incoming: Direction, outgoing: Direction) -> Turn {
    if outgoing == incoming {
        Turn::Straight
    } else if outgoing == incoming.left() {
        Turn::Left
    } else if outgoing == incoming.right() {
        Turn::Right
    } else {
        Turn::UTurn
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    /// Direction of travel along the link.
    pub dir: Direction,
    pub length_m: f64,
    pub lanes: usize,
}

/// Build parameters; the full network is reconstructed from these, so this
/// is also the serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub link_length_m: f64,
    pub lanes: usize,
    pub speed_limit_mps: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, link_length_m: f64, lanes: usize, speed_limit_mps: f64) -> Self {
        GridSpec { rows, cols, link_length_m, lanes, speed_limit_mps }
    }
}

#[derive(Debug, Clone)]
pub struct GridNetwork {
    pub spec: GridSpec,
    pub links: Vec<Link>,
    /// Per node, outgoing link toward each compass side (`None` off-lattice).
    out_links: Vec<[Option<LinkId>; 4]>,
    /// Per node, incoming link from each compass side: `in_links[n][North]`
    /// carries southbound traffic arriving from the north neighbor.
    in_links: Vec<[Option<LinkId>; 4]>,
}

impl GridNetwork {
    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn interior_count(&self) -> usize {
        self.spec.rows * self.spec.cols
    }

    pub fn boundary_count(&self) -> usize {
        2 * (self.spec.rows + self.spec.cols)
    }

    pub fn node_count(&self) -> usize {
        self.interior_count() + self.boundary_count()
    }

    pub fn is_interior(&self, n: NodeId) -> bool {
        n < self.interior_count()
    }

    pub fn is_boundary(&self, n: NodeId) -> bool {
        n >= self.interior_count() && n < self.node_count()
    }

    pub fn interior_id(&self, row: usize, col: usize) -> NodeId {
        debug_assert!(row < self.spec.rows && col < self.spec.cols);
        row * self.spec.cols + col
    }

    pub fn interior_pos(&self, n: NodeId) -> (usize, usize) {
        debug_assert!(self.is_interior(n));
        (n / self.spec.cols, n % self.spec.cols)
    }

    /// Boundary node for 1-based clockwise index `lambda` (1 = northwest).
    pub fn boundary_id(&self, lambda: usize) -> NodeId {
        debug_assert!(lambda >= 1 && lambda <= self.boundary_count());
        self.interior_count() + lambda - 1
    }

    pub fn out_link(&self, n: NodeId, side: Direction) -> Option<LinkId> {
        self.out_links[n][side.index()]
    }

    pub fn in_link(&self, n: NodeId, side: Direction) -> Option<LinkId> {
        self.in_links[n][side.index()]
    }

    pub fn link(&self, l: LinkId) -> &Link {
        &self.links[l]
    }

    /// Interior neighbor intersection on the given side, if any.
    pub fn neighbor_intersection(&self, n: NodeId, side: Direction) -> Option<NodeId> {
        let (r, c) = self.interior_pos(n);
        let (rows, cols) = (self.spec.rows, self.spec.cols);
        match side {
            Direction::North if r > 0 => Some(self.interior_id(r - 1, c)),
            Direction::South if r + 1 < rows => Some(self.interior_id(r + 1, c)),
            Direction::West if c > 0 => Some(self.interior_id(r, c - 1)),
            Direction::East if c + 1 < cols => Some(self.interior_id(r, c + 1)),
            _ => None,
        }
    }

    /// Boundary nodes along one edge, ordered by the clockwise numbering.
    pub fn edge_nodes(&self, edge: Direction) -> Vec<NodeId> {
        let (rows, cols) = (self.spec.rows, self.spec.cols);
        let first = match edge {
            Direction::North => 1,
            Direction::East => 1 + cols,
            Direction::South => 1 + cols + rows,
            Direction::West => 1 + 2 * cols + rows,
        };
        let len = match edge {
            Direction::North | Direction::South => cols,
            Direction::East | Direction::West => rows,
        };
        (first..first + len).map(|l| self.boundary_id(l)).collect()
    }

    /// Any node adjacent on the given side: interior neighbor or the
    /// attached boundary node.
    fn any_neighbor(&self, n: NodeId, side: Direction) -> Option<NodeId> {
        self.neighbor_intersection(n, side).or_else(|| self.attached_boundary(n, side))
    }

    /// Boundary node sitting on the given side of interior node `n`.
    fn attached_boundary(&self, n: NodeId, side: Direction) -> Option<NodeId> {
        let (r, c) = self.interior_pos(n);
        let (rows, cols) = (self.spec.rows, self.spec.cols);
        let lambda = match side {
            Direction::North if r == 0 => Some(1 + c),
            Direction::East if c == cols - 1 => Some(1 + cols + r),
            Direction::South if r == rows - 1 => Some(1 + cols + rows + (cols - 1 - c)),
            Direction::West if c == 0 => Some(1 + 2 * cols + rows + (rows - 1 - r)),
            _ => None,
        };
        lambda.map(|l| self.boundary_id(l))
    }
}

/// Construct the network. Fails for grids smaller than 2x2 and for links
/// too short to hold the approach sensor zone.
pub fn build_grid(spec: GridSpec) -> Result<GridNetwork> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(Error::GridTooSmall { rows: spec.rows, cols: spec.cols });
    }
    if !(spec.link_length_m >= 100.0) {
        return Err(Error::LinkTooShort(spec.link_length_m));
    }

    let mut net = GridNetwork {
        spec,
        links: Vec::new(),
        out_links: vec![[None; 4]; spec.rows * spec.cols + 2 * (spec.rows + spec.cols)],
        in_links: vec![[None; 4]; spec.rows * spec.cols + 2 * (spec.rows + spec.cols)],
    };

    let push = |net: &mut GridNetwork, from: NodeId, to: NodeId, dir: Direction| {
        let id = net.links.len();
        net.links.push(Link { from, to, dir, length_m: spec.link_length_m, lanes: spec.lanes });
        net.out_links[from][dir.index()] = Some(id);
        // The link arrives at `to` from the side it departed `from`.
        net.in_links[to][dir.opposite().index()] = Some(id);
    };

    // Links leaving interior nodes, row-major, sides in compass order.
    for n in 0..net.interior_count() {
        for side in DIRECTIONS {
            if let Some(to) = net.any_neighbor(n, side) {
                push(&mut net, n, to, side);
            }
        }
    }
    // Links entering the grid from boundary nodes; each boundary node is
    // attached to exactly one interior node.
    for n in 0..net.interior_count() {
        for side in DIRECTIONS {
            if let Some(b) = net.attached_boundary(n, side) {
                push(&mut net, b, n, side.opposite());
            }
        }
    }
    Ok(net)
}

/// Ordered links from an origin boundary node to a destination boundary node.
pub type Route = Vec<LinkId>;

/// Fewest-links route between two boundary nodes. Ties are broken by
/// preferring the straight-ahead movement, then north, east, south, west.
pub fn shortest_route(net: &GridNetwork, origin: NodeId, dest: NodeId) -> Result<Route> {
    if origin >= net.node_count() {
        return Err(Error::UnknownNode(origin));
    }
    if dest >= net.node_count() {
        return Err(Error::UnknownNode(dest));
    }
    if !net.is_boundary(origin) {
        return Err(Error::NotBoundary(origin));
    }
    if !net.is_boundary(dest) {
        return Err(Error::NotBoundary(dest));
    }
    if origin == dest {
        return Err(Error::DegenerateRoute(origin));
    }

    // Link-count distance to `dest` over the reverse graph.
    let mut dist = vec![usize::MAX; net.node_count()];
    dist[dest] = 0;
    let mut frontier = std::collections::VecDeque::from([dest]);
    while let Some(n) = frontier.pop_front() {
        for side in DIRECTIONS {
            if let Some(l) = net.in_link(n, side) {
                let from = net.link(l).from;
                if dist[from] == usize::MAX {
                    dist[from] = dist[n] + 1;
                    frontier.push_back(from);
                }
            }
        }
    }
    if dist[origin] == usize::MAX {
        return Err(Error::NoRoute { from: origin, to: dest });
    }

    let mut route = Vec::with_capacity(dist[origin]);
    let mut at = origin;
    let mut heading: Option<Direction> = None;
    while at != dest {
        let mut sides: Vec<Direction> = DIRECTIONS.to_vec();
        if let Some(h) = heading {
            // Straight-ahead first, the rest keep compass order.
            sides.retain(|&s| s != h);
            sides.insert(0, h);
        }
        let next = sides
            .into_iter()
            .filter_map(|s| net.out_link(at, s))
            .find(|&l| dist[net.link(l).to] + 1 == dist[at])
            .expect("distance field admits a next hop");
        heading = Some(net.link(next).dir);
        at = net.link(next).to;
        route.push(next);
    }
    Ok(route)
}

/// A named demand stream: vehicles enter at one of `origins` and leave at
/// one of `destinations` on the opposite edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGroup {
    pub name: String,
    pub origins: Vec<NodeId>,
    pub destinations: Vec<NodeId>,
    /// Demand ceiling per route in vehicles per hour; the realized rate is
    /// this bound scaled by the per-window random factor.
    pub upper_bound_veh_h: f64,
}

impl FlowGroup {
    pub fn validate(&self, net: &GridNetwork) -> Result<()> {
        let check_edge = |nodes: &[NodeId], what: &str| -> Result<Direction> {
            for &n in nodes {
                if !net.is_boundary(n) {
                    return Err(Error::BadFlowGroup {
                        name: self.name.clone(),
                        reason: format!("{what} node {n} is not a boundary node"),
                    });
                }
            }
            for edge in DIRECTIONS {
                let members = net.edge_nodes(edge);
                if nodes.iter().all(|n| members.contains(n)) {
                    return Ok(edge);
                }
            }
            Err(Error::BadFlowGroup {
                name: self.name.clone(),
                reason: format!("{what} nodes do not lie on a single edge"),
            })
        };
        let from = check_edge(&self.origins, "origin")?;
        let to = check_edge(&self.destinations, "destination")?;
        if from.opposite() != to {
            return Err(Error::BadFlowGroup {
                name: self.name.clone(),
                reason: format!("origins on {from:?} edge but destinations on {to:?}, not opposite"),
            });
        }
        if !(self.upper_bound_veh_h >= 0.0 && self.upper_bound_veh_h.is_finite()) {
            return Err(Error::BadFlowGroup {
                name: self.name.clone(),
                reason: format!("bad demand bound {}", self.upper_bound_veh_h),
            });
        }
        Ok(())
    }
}

/// The four standard flow groups: two major north-south streams and two
/// minor east-west streams, with the stock demand ceilings.
pub fn standard_flow_groups(net: &GridNetwork) -> Vec<FlowGroup> {
    standard_flow_groups_scaled(net, 1.0)
}

/// Standard groups with all demand ceilings multiplied by `scale`.
pub fn standard_flow_groups_scaled(net: &GridNetwork, scale: f64) -> Vec<FlowGroup> {
    use Direction::*;
    let mk = |name: &str, from: Direction, bound: f64| FlowGroup {
        name: name.to_string(),
        origins: net.edge_nodes(from),
        destinations: net.edge_nodes(from.opposite()),
        upper_bound_veh_h: bound * scale,
    };
    vec![
        mk("F1", North, 300.0),
        mk("F2", South, 350.0),
        mk("f1", West, 200.0),
        mk("f2", East, 250.0),
    ]
}

/// One origin's realized traffic for an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub origin: NodeId,
    pub destination: NodeId,
    pub route: Route,
    /// Entry times in seconds, sorted ascending, all within `[0, horizon)`.
    pub arrivals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSchedule {
    pub group: FlowGroup,
    /// One demand factor per window, each drawn uniformly from (0, 1).
    pub sigmas: Vec<f64>,
    pub routes: Vec<RoutePlan>,
}

/// Fully realized arrivals for one episode. Regenerating with the same seed
/// reproduces this structure exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSchedule {
    pub horizon_s: u32,
    pub window_s: u32,
    pub seed: u64,
    pub groups: Vec<GroupSchedule>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DemandOptions {
    /// Force every window's demand factor to this value instead of drawing
    /// it. Degenerate test hook: 0.0 silences all arrivals, 1.0 pins demand
    /// at the ceiling.
    pub sigma_override: Option<f64>,
}

/// Draw an episode demand schedule: per group, a demand factor per window;
/// per origin, one destination from the group's set and a Poisson arrival
/// stream at `bound x factor`, piecewise-constant over windows.
pub fn generate_demand_schedule(
    net: &GridNetwork,
    groups: &[FlowGroup],
    horizon_s: u32,
    window_s: u32,
    seed: u64,
    options: DemandOptions,
) -> Result<DemandSchedule> {
    let n_windows = (horizon_s as usize).div_ceil(window_s as usize);
    let mut out = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        group.validate(net)?;
        let mut sigma_rng = stream_rng(seed, "sigma", &[gi as u64]);
        let sigmas: Vec<f64> = (0..n_windows)
            .map(|_| match options.sigma_override {
                Some(s) => s,
                None => sigma_rng.gen::<f64>(),
            })
            .collect();

        let mut routes = Vec::with_capacity(group.origins.len());
        for (oi, &origin) in group.origins.iter().enumerate() {
            let mut route_rng = stream_rng(seed, "route", &[gi as u64, oi as u64]);
            let destination = group.destinations[route_rng.gen_range(0..group.destinations.len())];
            let route = shortest_route(net, origin, destination)?;

            let mut arr_rng = stream_rng(seed, "arrivals", &[gi as u64, oi as u64]);
            let mut arrivals = Vec::new();
            for (w, &sigma) in sigmas.iter().enumerate() {
                let w_start = (w as u32 * window_s) as f64;
                let w_end = ((w as u32 + 1) * window_s).min(horizon_s) as f64;
                let rate_per_s = group.upper_bound_veh_h * sigma / 3600.0;
                let lambda = rate_per_s * (w_end - w_start);
                let n = poisson(&mut arr_rng, lambda);
                let mut times: Vec<f64> =
                    (0..n).map(|_| w_start + arr_rng.gen::<f64>() * (w_end - w_start)).collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                arrivals.extend(times);
            }
            routes.push(RoutePlan { origin, destination, route, arrivals });
        }
        out.push(GroupSchedule { group: group.clone(), sigmas, routes });
    }
    Ok(DemandSchedule { horizon_s, window_s, seed, groups: out })
}

/// Knuth's product-of-uniforms Poisson sampler; fine for the window means
/// seen here (at most a few dozen).
fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}
