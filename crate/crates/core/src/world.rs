//! Procedural towns, vehicle routes and the pedestrian spawn sampler.
//!
//! Towns are built from a small road description: junction nodes joined by
//! centerline polylines with rounded corners. Every road carries one lane per
//! direction (right-hand traffic). Junctions get Bézier connector lanes for
//! every turn; a dead end gets a bulb-shaped turnaround.

use std::f64::consts::{FRAC_PI_3, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{frame_to_world, OrientedBox, Pose2D, Vec2};

pub const LANE_WIDTH: f64 = 3.5;
/// Maximum spacing between consecutive route waypoints.
pub const ROUTE_SPACING: f64 = 2.0;
/// Longest route `sample_route` will try to build.
pub const MAX_ROUTE_LENGTH: f64 = 1000.0;
pub const JUNCTION_SLOW_RADIUS: f64 = 10.0;
pub const JUNCTION_SLOW_FACTOR: f64 = 0.6;
pub const SPAWN_ATTEMPTS: usize = 100;

/// Distance from a junction center at which road lanes stop and connectors begin.
const JUNCTION_SETBACK: f64 = 14.0;
const ARC_STEP: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown town {0:?} (expected TownA or TownB)")]
    UnknownTown(String),
    #[error("invalid town map: {0}")]
    InvalidMap(String),
    #[error("requested route length {requested} m exceeds the {cap} m cap")]
    RouteTooLong { requested: f64, cap: f64 },
    #[error("lane graph exhausted after {reached:.1} m (needed {requested} m)")]
    GraphExhausted { reached: f64, requested: f64 },
    #[error("invalid spawn spec: {0}")]
    BadSpawnSpec(String),
    #[error("no valid spawn point after {0} attempts")]
    SpawnRejected(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Road,
    Connector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lane {
    pub id: usize,
    pub kind: LaneKind,
    pub width: f64,
    pub points: Vec<Vec2>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }
}

/// Successor relation in the lane graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionKind {
    Tee,
    DeadEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub kind: JunctionKind,
    pub position: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min_x, self.max_x),
            p.y.clamp(self.min_y, self.max_y),
        )
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Immutable town description. Serializes to the JSON map schema
/// (`lanes`, `adjacency`, `junctions`, `bounds`, `obstacles`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TownMap {
    pub name: String,
    pub lanes: Vec<Lane>,
    pub adjacency: Vec<Link>,
    pub junctions: Vec<Junction>,
    #[serde(rename = "bounds")]
    pub walkable_bounds: Bounds,
    #[serde(rename = "obstacles")]
    pub static_obstacles: Vec<OrientedBox>,
}

impl TownMap {
    pub fn successors(&self, lane: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .iter()
            .filter(move |l| l.from == lane)
            .map(|l| l.to)
    }

    pub fn t_junction_count(&self) -> usize {
        self.junctions
            .iter()
            .filter(|j| j.kind == JunctionKind::Tee)
            .count()
    }

    pub fn is_blocked(&self, p: Vec2) -> bool {
        self.static_obstacles.iter().any(|o| o.contains(p))
    }

    /// Checks the structural invariants: lanes have at least two points with
    /// positive spacing, ids are positional, links join endpoints within 0.1 m.
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidMap(m));
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.id != i {
                return bad(format!("lane at index {i} has id {}", lane.id));
            }
            if lane.points.len() < 2 {
                return bad(format!("lane {i} has fewer than 2 points"));
            }
            if lane.points.iter().any(|p| !p.is_finite()) {
                return bad(format!("lane {i} has a non-finite point"));
            }
            if lane.points.windows(2).any(|w| !(w[0].distance(w[1]) > 0.0)) {
                return bad(format!("lane {i} has a zero-length segment"));
            }
            if !(lane.width > 0.0) {
                return bad(format!("lane {i} has non-positive width"));
            }
        }
        for link in &self.adjacency {
            let (Some(a), Some(b)) = (self.lanes.get(link.from), self.lanes.get(link.to)) else {
                return bad(format!("link {link:?} references a missing lane"));
            };
            let gap = a.points.last().unwrap().distance(b.points[0]);
            if gap > 0.1 {
                return bad(format!("link {link:?} endpoints are {gap:.3} m apart"));
            }
        }
        for o in &self.static_obstacles {
            o.validate()
                .map_err(|e| WorldError::InvalidMap(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("town map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WorldError> {
        let map: TownMap =
            serde_json::from_str(s).map_err(|e| WorldError::InvalidMap(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }
}

// ---------------------------------------------------------------------------
// Polyline helpers

fn arc_points(center: Vec2, radius: f64, from: f64, to: f64) -> Vec<Vec2> {
    let sweep = to - from;
    let n = ((sweep.abs() * radius) / ARC_STEP).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| center + Vec2::from_angle(from + sweep * i as f64 / n as f64) * radius)
        .collect()
}

/// Samples a polyline through `corners`, rounding each interior corner with
/// the paired radius. Straight runs are kept as single segments.
fn filleted(corners: &[(Vec2, f64)]) -> Vec<Vec2> {
    let mut out = vec![corners[0].0];
    for i in 1..corners.len() - 1 {
        let (p, r) = corners[i];
        let u = unit(p - corners[i - 1].0);
        let v = unit(corners[i + 1].0 - p);
        let turn = u.cross(v).atan2(u.dot(v));
        if r <= 0.0 || turn.abs() < 1e-9 {
            out.push(p);
            continue;
        }
        let t = r * (turn.abs() / 2.0).tan();
        let start = p - u * t;
        let center = start + u.perp() * (r * turn.signum());
        let a0 = (start - center).angle();
        out.extend(arc_points(center, r, a0, a0 + turn));
    }
    out.push(corners[corners.len() - 1].0);
    dedup(out)
}

fn unit(v: Vec2) -> Vec2 {
    v * (1.0 / v.norm())
}

fn dedup(pts: Vec<Vec2>) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = Vec::with_capacity(pts.len());
    for p in pts {
        if out.last().is_none_or(|q| q.distance(p) > 1e-9) {
            out.push(p);
        }
    }
    out
}

fn polyline_length(pts: &[Vec2]) -> f64 {
    pts.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Drops `dist` metres of arc length from the start of the polyline.
fn trim_start(pts: &[Vec2], dist: f64) -> Vec<Vec2> {
    if dist <= 0.0 {
        return pts.to_vec();
    }
    let mut acc = 0.0;
    for i in 0..pts.len() - 1 {
        let seg = pts[i].distance(pts[i + 1]);
        if acc + seg > dist {
            let cut = pts[i].lerp(pts[i + 1], (dist - acc) / seg);
            let mut out = vec![cut];
            out.extend_from_slice(&pts[i + 1..]);
            return dedup(out);
        }
        acc += seg;
    }
    panic!("polyline shorter than trim distance {dist}");
}

fn trim_end(pts: &[Vec2], dist: f64) -> Vec<Vec2> {
    let mut rev: Vec<Vec2> = pts.iter().rev().copied().collect();
    rev = trim_start(&rev, dist);
    rev.reverse();
    rev
}

/// Offsets a polyline sideways; positive `offset` moves it to the left of travel.
fn offset_polyline(pts: &[Vec2], offset: f64) -> Vec<Vec2> {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let seg_in = (i > 0).then(|| unit(pts[i] - pts[i - 1]));
            let seg_out = (i + 1 < n).then(|| unit(pts[i + 1] - pts[i]));
            let normal = match (seg_in, seg_out) {
                (Some(a), Some(b)) => {
                    let avg = unit(a.perp() + b.perp());
                    avg * (1.0 / avg.dot(a.perp()).max(0.5))
                }
                (Some(a), None) | (None, Some(a)) => a.perp(),
                (None, None) => unreachable!(),
            };
            pts[i] + normal * offset
        })
        .collect()
}

/// Cubic Bézier from `p0` leaving along `d0` to `p3` arriving along `d3`,
/// with handle lengths that reproduce a circular arc for symmetric turns.
fn connector_curve(p0: Vec2, d0: Vec2, p3: Vec2, d3: Vec2) -> Vec<Vec2> {
    let chord = p0.distance(p3);
    let turn = d0.cross(d3).atan2(d0.dot(d3)).abs();
    let handle = if turn < 1e-3 {
        chord / 3.0
    } else {
        let radius = chord / (2.0 * (turn / 2.0).sin());
        4.0 / 3.0 * (turn / 4.0).tan() * radius
    };
    let p1 = p0 + d0 * handle;
    let p2 = p3 - d3 * handle;
    let n = (chord / 0.5).ceil().max(4.0) as usize;
    let pts = (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let s = 1.0 - t;
            p0 * (s * s * s) + p1 * (3.0 * s * s * t) + p2 * (3.0 * s * t * t) + p3 * (t * t * t)
        })
        .collect();
    dedup(pts)
}

/// Turnaround at a dead end, in the frame of the arriving lane's road
/// (origin at the road end, +x toward the dead end). Starts at
/// `(0, -LANE_WIDTH/2)` heading +x and ends at `(0, +LANE_WIDTH/2)` heading -x.
fn bulb_local() -> Vec<Vec2> {
    let half = LANE_WIDTH / 2.0;
    let (r_small, r_big) = (8.0, 10.0);
    let a = Vec2::new(0.0, -(half + r_small));
    let reach = ((r_small + r_big).powi(2) - a.y * a.y).sqrt();
    let c = Vec2::new(reach, 0.0);
    let tangent_angle = (c - a).angle();
    let mut pts = arc_points(a, r_small, PI / 2.0, tangent_angle);
    let start_big = tangent_angle - PI;
    let end_big = PI - tangent_angle;
    pts.extend(arc_points(c, r_big, start_big, end_big));
    let a2 = Vec2::new(0.0, half + r_small);
    pts.extend(arc_points(a2, r_small, -tangent_angle, -PI / 2.0));
    dedup(pts)
}

// ---------------------------------------------------------------------------
// Town construction

struct RoadSpec {
    from: usize,
    to: usize,
    /// Centerline corners including both node positions; interior entries carry a fillet radius.
    corners: Vec<(Vec2, f64)>,
}

struct NetworkSpec {
    name: &'static str,
    nodes: Vec<Junction>,
    roads: Vec<RoadSpec>,
    bounds: Bounds,
    obstacles: Vec<OrientedBox>,
}

fn road(from: usize, to: usize, corners: &[(f64, f64, f64)]) -> RoadSpec {
    RoadSpec {
        from,
        to,
        corners: corners
            .iter()
            .map(|&(x, y, r)| (Vec2::new(x, y), r))
            .collect(),
    }
}

fn building(x: f64, y: f64, heading: f64, hl: f64, hw: f64) -> OrientedBox {
    OrientedBox::new(Pose2D::new(x, y, heading), hl, hw).expect("valid building")
}

fn tee(x: f64, y: f64) -> Junction {
    Junction {
        kind: JunctionKind::Tee,
        position: Vec2::new(x, y),
    }
}

/// Open ground around the road network. Wider than the farthest spawn from
/// any lane (30 m plus half a lane), so the map edge never rejects a spawn.
const MARGIN: f64 = 35.0;

/// Training town: 200 m square ring, a cross street and a half street, four T junctions.
fn town_a_spec() -> NetworkSpec {
    // nodes: 0 = W(0,100), 1 = E(200,100), 2 = N(100,200), 3 = M(100,100)
    NetworkSpec {
        name: "TownA",
        nodes: vec![tee(0.0, 100.0), tee(200.0, 100.0), tee(100.0, 200.0), tee(100.0, 100.0)],
        roads: vec![
            road(0, 1, &[(0.0, 100.0, 0.0), (0.0, 0.0, 20.0), (200.0, 0.0, 20.0), (200.0, 100.0, 0.0)]),
            road(1, 2, &[(200.0, 100.0, 0.0), (200.0, 200.0, 20.0), (100.0, 200.0, 0.0)]),
            road(2, 0, &[(100.0, 200.0, 0.0), (0.0, 200.0, 20.0), (0.0, 100.0, 0.0)]),
            road(0, 3, &[(0.0, 100.0, 0.0), (100.0, 100.0, 0.0)]),
            road(3, 1, &[(100.0, 100.0, 0.0), (200.0, 100.0, 0.0)]),
            road(2, 3, &[(100.0, 200.0, 0.0), (100.0, 100.0, 0.0)]),
        ],
        bounds: Bounds {
            min_x: -MARGIN,
            min_y: -MARGIN,
            max_x: 200.0 + MARGIN,
            max_y: 200.0 + MARGIN,
        },
        obstacles: vec![
            building(100.0, 50.0, 0.0, 70.0, 26.0),
            building(50.0, 150.0, 0.0, 26.0, 26.0),
            building(150.0, 150.0, 0.0, 26.0, 26.0),
        ],
    }
}

/// Test town: 250 m × 150 m ring with one sweeping curved corner, a north-south
/// connector and a dead-end spur; three T junctions.
fn town_b_spec() -> NetworkSpec {
    // nodes: 0 = S(125,0), 1 = N(125,150), 2 = W(0,75), 3 = spur end(60,75)
    NetworkSpec {
        name: "TownB",
        nodes: vec![
            tee(125.0, 0.0),
            tee(125.0, 150.0),
            tee(0.0, 75.0),
            Junction {
                kind: JunctionKind::DeadEnd,
                position: Vec2::new(60.0, 75.0),
            },
        ],
        roads: vec![
            road(0, 1, &[(125.0, 0.0, 0.0), (250.0, 0.0, 20.0), (250.0, 150.0, 60.0), (125.0, 150.0, 0.0)]),
            road(1, 2, &[(125.0, 150.0, 0.0), (0.0, 150.0, 20.0), (0.0, 75.0, 0.0)]),
            road(2, 0, &[(0.0, 75.0, 0.0), (0.0, 0.0, 20.0), (125.0, 0.0, 0.0)]),
            road(0, 1, &[(125.0, 0.0, 0.0), (125.0, 150.0, 0.0)]),
            road(2, 3, &[(0.0, 75.0, 0.0), (60.0, 75.0, 0.0)]),
        ],
        bounds: Bounds {
            min_x: -MARGIN,
            min_y: -MARGIN,
            max_x: 250.0 + MARGIN,
            max_y: 150.0 + MARGIN,
        },
        obstacles: vec![
            building(62.5, 32.0, 0.0, 38.0, 10.0),
            building(62.5, 122.0, 0.0, 38.0, 6.0),
            building(175.0, 62.0, PI / 2.0, 36.0, 26.0),
        ],
    }
}

struct RoadLanes {
    from: usize,
    to: usize,
    forward: usize,
    backward: usize,
}

fn assemble(spec: NetworkSpec) -> TownMap {
    let half = LANE_WIDTH / 2.0;
    let mut lanes: Vec<Lane> = Vec::new();
    let mut adjacency = Vec::new();
    let mut road_lanes = Vec::new();
    let setback = |node: usize| match spec.nodes[node].kind {
        JunctionKind::Tee => JUNCTION_SETBACK,
        JunctionKind::DeadEnd => 0.0,
    };

    let push_lane = |lanes: &mut Vec<Lane>, kind, points| {
        let id = lanes.len();
        lanes.push(Lane {
            id,
            kind,
            width: LANE_WIDTH,
            points,
        });
        id
    };

    for r in &spec.roads {
        let center = filleted(&r.corners);
        let center = trim_end(&trim_start(&center, setback(r.from)), setback(r.to));
        let fwd = offset_polyline(&center, -half);
        let rev: Vec<Vec2> = center.iter().rev().copied().collect();
        let bwd = offset_polyline(&rev, -half);
        let forward = push_lane(&mut lanes, LaneKind::Road, fwd);
        let backward = push_lane(&mut lanes, LaneKind::Road, bwd);
        road_lanes.push(RoadLanes {
            from: r.from,
            to: r.to,
            forward,
            backward,
        });
    }

    let end_dir = |pts: &[Vec2]| unit(pts[pts.len() - 1] - pts[pts.len() - 2]);
    let start_dir = |pts: &[Vec2]| unit(pts[1] - pts[0]);

    for (node_id, node) in spec.nodes.iter().enumerate() {
        // (road index, lane id) pairs arriving at / leaving this node
        let mut arriving = Vec::new();
        let mut leaving = Vec::new();
        for (ri, rl) in road_lanes.iter().enumerate() {
            if rl.to == node_id {
                arriving.push((ri, rl.forward));
                leaving.push((ri, rl.backward));
            }
            if rl.from == node_id {
                arriving.push((ri, rl.backward));
                leaving.push((ri, rl.forward));
            }
        }
        match node.kind {
            JunctionKind::Tee => {
                for &(ra, la) in &arriving {
                    for &(rb, lb) in &leaving {
                        if ra == rb {
                            continue;
                        }
                        let a = &lanes[la].points;
                        let b = &lanes[lb].points;
                        let pts = connector_curve(a[a.len() - 1], end_dir(a), b[0], start_dir(b));
                        let c = push_lane(&mut lanes, LaneKind::Connector, pts);
                        adjacency.push(Link { from: la, to: c });
                        adjacency.push(Link { from: c, to: lb });
                    }
                }
            }
            JunctionKind::DeadEnd => {
                let (_, la) = arriving[0];
                let (_, lb) = leaving[0];
                let a = &lanes[la].points;
                let dir = end_dir(a);
                let frame = Pose2D::new(node.position.x, node.position.y, dir.angle());
                let mut pts: Vec<Vec2> = bulb_local()
                    .into_iter()
                    .map(|p| frame_to_world(&frame, p))
                    .collect();
                // pin the ends to the lane endpoints exactly
                let n = pts.len();
                pts[0] = a[a.len() - 1];
                pts[n - 1] = lanes[lb].points[0];
                let c = push_lane(&mut lanes, LaneKind::Connector, dedup(pts));
                adjacency.push(Link { from: la, to: c });
                adjacency.push(Link { from: c, to: lb });
            }
        }
    }

    TownMap {
        name: spec.name.to_string(),
        lanes,
        adjacency,
        junctions: spec.nodes,
        walkable_bounds: spec.bounds,
        static_obstacles: spec.obstacles,
    }
}

/// Builds one of the two fixed towns: `TownA` (training) or `TownB` (held out).
pub fn build_town(name: &str) -> Result<TownMap, WorldError> {
    let spec = match name {
        "TownA" => town_a_spec(),
        "TownB" => town_b_spec(),
        other => return Err(WorldError::UnknownTown(other.to_string())),
    };
    let map = assemble(spec);
    map.validate()?;
    Ok(map)
}

// ---------------------------------------------------------------------------
// Routes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutePoint {
    pub position: Vec2,
    pub target_speed: f64,
}

/// Densely resampled path for the vehicle with per-point target speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub waypoints: Vec<RoutePoint>,
    /// Cumulative arc length at each waypoint.
    pub stations: Vec<f64>,
    pub total_length: f64,
}

impl Route {
    /// Builds a route from a polyline, splitting every segment so consecutive
    /// waypoints are at most [`ROUTE_SPACING`] apart.
    pub fn from_polyline(points: &[Vec2], speed_at: impl Fn(Vec2) -> f64) -> Self {
        let mut waypoints = Vec::new();
        let mut stations = Vec::new();
        let mut s = 0.0;
        if let Some(&first) = points.first() {
            waypoints.push(RoutePoint {
                position: first,
                target_speed: speed_at(first),
            });
            stations.push(0.0);
        }
        for w in points.windows(2) {
            let len = w[0].distance(w[1]);
            if len <= 1e-9 {
                continue;
            }
            let pieces = (len / ROUTE_SPACING).ceil() as usize;
            let mut prev = w[0];
            for k in 1..=pieces {
                let p = if k == pieces {
                    w[1]
                } else {
                    w[0].lerp(w[1], k as f64 / pieces as f64)
                };
                s += prev.distance(p);
                prev = p;
                waypoints.push(RoutePoint {
                    position: p,
                    target_speed: speed_at(p),
                });
                stations.push(s);
            }
        }
        Self {
            waypoints,
            stations,
            total_length: s,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.len() < 2
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.stations.partition_point(|&st| st <= s);
        i.clamp(1, self.stations.len() - 1) - 1
    }

    /// Position at arc length `s` (clamped to the route).
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.total_length);
        let i = self.segment_at(s);
        let (a, b) = (self.waypoints[i].position, self.waypoints[i + 1].position);
        let len = self.stations[i + 1] - self.stations[i];
        a.lerp(b, ((s - self.stations[i]) / len).clamp(0.0, 1.0))
    }

    /// Unit tangent at arc length `s`.
    pub fn direction_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s.clamp(0.0, self.total_length));
        unit(self.waypoints[i + 1].position - self.waypoints[i].position)
    }

    /// Target speed of the waypoint at or before `s`.
    pub fn speed_at(&self, s: f64) -> f64 {
        self.waypoints[self.segment_at(s.clamp(0.0, self.total_length))].target_speed
    }

    /// Lowest target speed over the stretch `[from, to]`.
    pub fn min_speed_between(&self, from: f64, to: f64) -> f64 {
        let lo = self.segment_at(from.clamp(0.0, self.total_length));
        let hi = self.segment_at(to.clamp(0.0, self.total_length)) + 1;
        self.waypoints[lo..=hi]
            .iter()
            .map(|w| w.target_speed)
            .fold(f64::INFINITY, f64::min)
    }

    /// Projects `p` onto the route near station `hint`; returns `(station, distance)`.
    pub fn project(&self, p: Vec2, hint: f64, back: f64, ahead: f64) -> (f64, f64) {
        let lo = self.segment_at((hint - back).max(0.0));
        let hi = self.segment_at((hint + ahead).min(self.total_length));
        let mut best = (hint, f64::INFINITY);
        for i in lo..=hi {
            let a = self.waypoints[i].position;
            let b = self.waypoints[i + 1].position;
            let ab = b - a;
            let t = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
            let d = (a + ab * t).distance(p);
            if d < best.1 {
                best = (self.stations[i] + t * (self.stations[i + 1] - self.stations[i]), d);
            }
        }
        best
    }

    /// Cross-track distance to the whole route.
    pub fn distance_to(&self, p: Vec2) -> f64 {
        self.project(p, 0.0, 0.0, self.total_length).1
    }
}

/// Random lane-graph walk of at least `min_length` metres starting at a random
/// point of a random road lane, resampled to ≤ 2 m spacing.
pub fn sample_route<R: Rng + ?Sized>(
    map: &TownMap,
    rng: &mut R,
    min_length: f64,
    cruise_speed: f64,
) -> Result<Route, WorldError> {
    if min_length > MAX_ROUTE_LENGTH {
        return Err(WorldError::RouteTooLong {
            requested: min_length,
            cap: MAX_ROUTE_LENGTH,
        });
    }
    let roads: Vec<usize> = map
        .lanes
        .iter()
        .filter(|l| l.kind == LaneKind::Road)
        .map(|l| l.id)
        .collect();
    if roads.is_empty() {
        return Err(WorldError::InvalidMap("no road lanes".into()));
    }
    let mut lane = roads[rng.random_range(0..roads.len())];
    let start_frac: f64 = rng.random_range(0.0..1.0);
    let first = &map.lanes[lane];
    let mut points = trim_start(&first.points, start_frac * first.length() * 0.999);
    let mut length = polyline_length(&points);
    let mut connector_pts: Vec<(Vec2, Vec2)> = Vec::new();

    while length < min_length {
        let next: Vec<usize> = map.successors(lane).collect();
        if next.is_empty() {
            return Err(WorldError::GraphExhausted {
                reached: length,
                requested: min_length,
            });
        }
        lane = next[rng.random_range(0..next.len())];
        let pts = &map.lanes[lane].points;
        if map.lanes[lane].kind == LaneKind::Connector {
            connector_pts.push((pts[0], pts[pts.len() - 1]));
        }
        length += polyline_length(pts);
        points.extend_from_slice(&pts[1..]);
    }

    let junctions: Vec<Vec2> = map.junctions.iter().map(|j| j.position).collect();
    let connectors: Vec<&[Vec2]> = map
        .lanes
        .iter()
        .filter(|l| l.kind == LaneKind::Connector)
        .map(|l| l.points.as_slice())
        .collect();
    let on_connector = |p: Vec2| {
        connectors
            .iter()
            .any(|c| c.windows(2).any(|w| point_segment_distance(p, w[0], w[1]) < 0.5))
    };
    let speed_at = |p: Vec2| {
        let near = junctions
            .iter()
            .any(|j| j.distance(p) <= JUNCTION_SLOW_RADIUS);
        if near || on_connector(p) {
            cruise_speed * JUNCTION_SLOW_FACTOR
        } else {
            cruise_speed
        }
    };
    Ok(Route::from_polyline(&dedup(points), speed_at))
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
    (a + ab * t).distance(p)
}

// ---------------------------------------------------------------------------
// Spawning

/// Sector around the vehicle's heading in which the pedestrian is spawned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub angle_min: f64,
    pub angle_max: f64,
    pub dist_min: f64,
    pub dist_max: f64,
}

impl Default for SpawnSpec {
    fn default() -> Self {
        Self {
            angle_min: -FRAC_PI_3,
            angle_max: FRAC_PI_3,
            dist_min: 7.0,
            dist_max: 30.0,
        }
    }
}

impl SpawnSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.angle_min < self.angle_max) {
            return Err(WorldError::BadSpawnSpec("angle_min must be < angle_max".into()));
        }
        if !(0.0 < self.dist_min && self.dist_min < self.dist_max) {
            return Err(WorldError::BadSpawnSpec(
                "need 0 < dist_min < dist_max".into(),
            ));
        }
        Ok(())
    }
}

/// Point at bearing `phi` (relative to the vehicle heading) and distance `d`.
pub fn sector_point(vehicle: &Pose2D, phi: f64, d: f64) -> Vec2 {
    vehicle.position() + Vec2::from_angle(vehicle.heading + phi) * d
}

/// Pedestrian spawn pose: uniform bearing and distance inside the sector,
/// rejected while outside the walkable bounds or inside an obstacle; uniform
/// heading.
pub fn sample_spawn<R: Rng + ?Sized>(
    vehicle: &Pose2D,
    spec: &SpawnSpec,
    map: &TownMap,
    rng: &mut R,
) -> Result<Pose2D, WorldError> {
    spec.validate()?;
    for _ in 0..SPAWN_ATTEMPTS {
        let phi = rng.random_range(spec.angle_min..=spec.angle_max);
        let d = rng.random_range(spec.dist_min..=spec.dist_max);
        let p = sector_point(vehicle, phi, d);
        if map.walkable_bounds.contains(p) && !map.is_blocked(p) {
            let heading = rng.random_range(-PI..=PI);
            return Ok(Pose2D::new(p.x, p.y, heading));
        }
    }
    Err(WorldError::SpawnRejected(SPAWN_ATTEMPTS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::wrap_angle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn towns_build_and_validate() {
        let a = build_town("TownA").unwrap();
        assert_eq!(a.t_junction_count(), 4);
        assert!(a.lanes.iter().all(|l| l.width == 3.5));
        let b = build_town("TownB").unwrap();
        assert_eq!(b.t_junction_count(), 3);
        assert!(b
            .junctions
            .iter()
            .any(|j| j.kind == JunctionKind::DeadEnd));
        assert!(matches!(build_town("TownC"), Err(WorldError::UnknownTown(_))));
    }

    #[test]
    fn build_town_is_referentially_transparent() {
        assert_eq!(build_town("TownA").unwrap(), build_town("TownA").unwrap());
        assert_eq!(build_town("TownB").unwrap(), build_town("TownB").unwrap());
        assert_ne!(
            build_town("TownA").unwrap().lanes.len(),
            build_town("TownB").unwrap().lanes.len()
        );
    }

    #[test]
    fn every_lane_has_a_successor() {
        for name in ["TownA", "TownB"] {
            let map = build_town(name).unwrap();
            for lane in &map.lanes {
                assert!(map.successors(lane.id).next().is_some(), "{name} lane {}", lane.id);
            }
        }
    }

    #[test]
    fn map_json_round_trip() {
        let map = build_town("TownB").unwrap();
        let back = TownMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
        let mut broken = map.clone();
        broken.lanes[0].points.truncate(1);
        assert!(TownMap::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn bulb_is_smooth_enough_to_drive() {
        let pts = bulb_local();
        assert!((pts[0].x).abs() < 1e-9 && (pts[0].y + 1.75).abs() < 1e-9);
        let last = pts[pts.len() - 1];
        assert!(last.x.abs() < 1e-9 && (last.y - 1.75).abs() < 1e-9);
        // heading changes by < 10 degrees between 1 m samples
        for w in pts.windows(3) {
            let t = wrap_angle((w[2] - w[1]).angle() - (w[1] - w[0]).angle()).unwrap();
            assert!(t.abs() < 0.18, "kink of {t} rad");
        }
    }

    #[test]
    fn route_determinism_and_errors() {
        let map = build_town("TownA").unwrap();
        let r1 = sample_route(&map, &mut ChaCha8Rng::seed_from_u64(1), 100.0, 8.5).unwrap();
        let r2 = sample_route(&map, &mut ChaCha8Rng::seed_from_u64(1), 100.0, 8.5).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.total_length >= 100.0);
        assert!(matches!(
            sample_route(&map, &mut ChaCha8Rng::seed_from_u64(1), 1e6, 8.5),
            Err(WorldError::RouteTooLong { .. })
        ));
    }

    #[test]
    fn routes_are_dense_consistent_and_on_lanes() {
        for name in ["TownA", "TownB"] {
            let map = build_town(name).unwrap();
            for seed in 0..100 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r = sample_route(&map, &mut rng, 300.0, 8.5).unwrap();
                let arc: f64 = r
                    .waypoints
                    .windows(2)
                    .map(|w| w[0].position.distance(w[1].position))
                    .sum();
                assert!((arc - r.total_length).abs() < 1e-6);
                for w in r.waypoints.windows(2) {
                    assert!(w[0].position.distance(w[1].position) <= ROUTE_SPACING + 1e-9);
                }
                for wp in r.waypoints.iter().step_by(3) {
                    let near = map.lanes.iter().any(|l| {
                        l.points
                            .windows(2)
                            .any(|s| point_segment_distance(wp.position, s[0], s[1]) <= l.width / 2.0)
                    });
                    assert!(near, "{name} seed {seed}: waypoint off the lane graph");
                }
                assert!(r
                    .waypoints
                    .iter()
                    .all(|w| w.target_speed == 8.5 || w.target_speed == 8.5 * 0.6));
            }
        }
    }

    #[test]
    fn route_point_lookup() {
        let r = Route::from_polyline(&[Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)], |_| 5.0);
        assert_eq!(r.waypoints.len(), 6);
        assert!((r.point_at(3.3).x - 3.3).abs() < 1e-12);
        assert_eq!(r.point_at(50.0), Vec2::new(10.0, 0.0));
        let (s, d) = r.project(Vec2::new(4.0, 1.0), 3.0, 2.0, 5.0);
        assert!((s - 4.0).abs() < 1e-12 && (d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spawn_examples() {
        let p = sector_point(&Pose2D::new(0.0, 0.0, 0.0), 0.0, 7.0);
        assert!((p.x - 7.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        let p = sector_point(&Pose2D::new(0.0, 0.0, PI / 2.0), PI / 3.0, 30.0);
        let want = Vec2::new(30.0 * (5.0 * PI / 6.0).cos(), 30.0 * (5.0 * PI / 6.0).sin());
        assert!(p.distance(want) < 1e-9);
    }

    #[test]
    fn spawn_respects_sector_and_obstacles() {
        let map = build_town("TownA").unwrap();
        let spec = SpawnSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vehicle = Pose2D::new(20.0, 1.75, 0.0);
        for _ in 0..2000 {
            let ped = sample_spawn(&vehicle, &spec, &map, &mut rng).unwrap();
            let rel = ped.position() - vehicle.position();
            let d = rel.norm();
            assert!((7.0 - 1e-9..=30.0 + 1e-9).contains(&d));
            let bearing = wrap_angle(rel.angle() - vehicle.heading).unwrap();
            assert!(bearing.abs() <= FRAC_PI_3 + 1e-9);
            assert!(!map.is_blocked(ped.position()));
            assert!(map.walkable_bounds.contains(ped.position()));
        }
    }

    #[test]
    fn spawn_errors() {
        let map = build_town("TownA").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = SpawnSpec {
            dist_min: 10.0,
            dist_max: 5.0,
            ..Default::default()
        };
        assert!(sample_spawn(&Pose2D::default(), &bad, &map, &mut rng).is_err());
        // vehicle far outside the map: every candidate is out of bounds
        let far = Pose2D::new(1e5, 1e5, 0.0);
        assert!(matches!(
            sample_spawn(&far, &SpawnSpec::default(), &map, &mut rng),
            Err(WorldError::SpawnRejected(100))
        ));
    }
}
