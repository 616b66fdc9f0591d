//! Vehicle and pedestrian motion models and the rule-based driving policies.
//!
//! All three policies share pure-pursuit steering and proportional speed
//! tracking; they differ only in how they react to the pedestrian.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap, world_to_frame, OrientedBox, Pose2D, Vec2};
use crate::world::{Bounds, Route};

pub const WHEELBASE: f64 = 2.7;
pub const VEHICLE_HALF_LENGTH: f64 = 2.25;
pub const VEHICLE_HALF_WIDTH: f64 = 1.0;
pub const MAX_VEHICLE_SPEED: f64 = 15.0;
pub const MIN_ACCEL: f64 = -8.0;
pub const MAX_ACCEL: f64 = 3.0;
pub const MAX_STEER: f64 = 0.61;
pub const PEDESTRIAN_RADIUS: f64 = 0.35;
pub const MAX_PEDESTRIAN_SPEED: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    pub speed: f64,
    /// Arc length travelled along the active route.
    pub route_progress: f64,
}

impl VehicleState {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox {
            center: self.pose,
            half_length: VEHICLE_HALF_LENGTH,
            half_width: VEHICLE_HALF_WIDTH,
        }
    }

    pub fn velocity(&self) -> Vec2 {
        self.pose.forward() * self.speed
    }

    /// Re-projects the vehicle onto `route` just around its previous progress.
    pub fn update_progress(&mut self, route: &Route) {
        if route.is_empty() {
            return;
        }
        let (s, _) = route.project(self.pose.position(), self.route_progress, 1.0, 10.0);
        self.route_progress = s.max(self.route_progress);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub radius: f64,
}

impl PedestrianState {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self {
            position,
            heading: wrap(heading),
            speed: 0.0,
            radius: PEDESTRIAN_RADIUS,
        }
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.position.x, self.position.y, self.heading)
    }
}

/// Low-level command; both channels are clamped on construction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleControl {
    accel: f64,
    steer: f64,
}

impl VehicleControl {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self {
            accel: accel.clamp(MIN_ACCEL, MAX_ACCEL),
            steer: steer.clamp(-MAX_STEER, MAX_STEER),
        }
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn steer(&self) -> f64 {
        self.steer
    }
}

/// Kinematic bicycle step. Position advances along the midpoint heading of
/// the step, which keeps constant-steer arcs accurate at 20 Hz.
pub fn step_vehicle(s: &VehicleState, u: VehicleControl, dt: f64) -> VehicleState {
    let v = s.speed;
    let dpsi = v / WHEELBASE * u.steer.tan() * dt;
    let mid = s.pose.heading + 0.5 * dpsi;
    let (sin, cos) = mid.sin_cos();
    VehicleState {
        pose: Pose2D {
            x: s.pose.x + v * cos * dt,
            y: s.pose.y + v * sin * dt,
            heading: wrap(s.pose.heading + dpsi),
        },
        speed: (v + u.accel * dt).clamp(0.0, MAX_VEHICLE_SPEED),
        route_progress: s.route_progress,
    }
}

/// Constant-velocity pedestrian step, clamped to the walkable area.
pub fn step_pedestrian(s: &PedestrianState, dt: f64, bounds: &Bounds) -> PedestrianState {
    PedestrianState {
        position: bounds.clamp(s.position + s.velocity() * dt),
        ..*s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DrivingPolicyId {
    Baseline,
    Cautious,
    Oblivious,
}

impl DrivingPolicyId {
    pub const ALL: [DrivingPolicyId; 3] = [Self::Baseline, Self::Cautious, Self::Oblivious];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::Cautious => "Cautious",
            Self::Oblivious => "Oblivious",
        }
    }
}

/// Hazard corridor in front of the vehicle, in vehicle coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardParams {
    /// Constant-velocity extrapolation horizon for the pedestrian (s).
    pub horizon: f64,
    pub min_length: f64,
    /// Corridor length per unit speed (s).
    pub time_gap: f64,
    pub half_width: f64,
    /// Speed cap applied while the pedestrian is within `cap_radius`.
    #[serde(default)]
    pub speed_cap: Option<f64>,
    #[serde(default)]
    pub cap_radius: f64,
}

impl HazardParams {
    pub fn corridor_length(&self, speed: f64) -> f64 {
        self.min_length.max(self.time_gap * speed)
    }
}

/// Tunable constants of the rule-based drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivingParams {
    pub cruise_speed: f64,
    pub lookahead_min: f64,
    pub lookahead_gain: f64,
    pub speed_gain: f64,
    /// Comfortable deceleration used to stop at the end of the route (m/s²).
    pub stop_decel: f64,
    pub baseline: HazardParams,
    pub cautious: HazardParams,
}

impl Default for DrivingParams {
    fn default() -> Self {
        Self {
            cruise_speed: 8.5,
            lookahead_min: 4.0,
            lookahead_gain: 1.2,
            speed_gain: 1.5,
            stop_decel: 2.0,
            baseline: HazardParams {
                horizon: 1.0,
                min_length: 6.0,
                time_gap: 1.5,
                half_width: 2.0,
                speed_cap: None,
                cap_radius: 0.0,
            },
            cautious: HazardParams {
                horizon: 2.0,
                min_length: 10.0,
                time_gap: 2.5,
                half_width: 3.0,
                speed_cap: Some(6.0),
                cap_radius: 20.0,
            },
        }
    }
}

/// Contract for anything that drives the vehicle one tick at a time.
pub trait DrivingPolicy {
    fn control(&self, v: &VehicleState, route: &Route, ped: &PedestrianState) -> VehicleControl;
}

/// Pure-pursuit follower with policy-dependent hazard handling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleDriver {
    pub policy: DrivingPolicyId,
    pub params: DrivingParams,
}

impl RuleDriver {
    pub fn new(policy: DrivingPolicyId, params: DrivingParams) -> Self {
        Self { policy, params }
    }

    fn hazard_params(&self) -> Option<&HazardParams> {
        match self.policy {
            DrivingPolicyId::Baseline => Some(&self.params.baseline),
            DrivingPolicyId::Cautious => Some(&self.params.cautious),
            DrivingPolicyId::Oblivious => None,
        }
    }

    /// True when the pedestrian's extrapolated path over the horizon crosses
    /// the corridor ahead of the vehicle.
    pub fn hazard(&self, v: &VehicleState, ped: &PedestrianState) -> bool {
        let Some(h) = self.hazard_params() else {
            return false;
        };
        let p0 = world_to_frame(&v.pose, ped.position);
        let vel = ped.velocity().rotated(-v.pose.heading);
        let p1 = p0 + vel * h.horizon;
        let x_max = VEHICLE_HALF_LENGTH + h.corridor_length(v.speed);
        segment_hits_rect(p0, p1, 0.0, x_max, -h.half_width, h.half_width)
    }

    fn lookahead(&self, speed: f64) -> f64 {
        self.params
            .lookahead_min
            .max(self.params.lookahead_gain * speed)
    }

    fn steer(&self, v: &VehicleState, route: &Route) -> f64 {
        let target = route.point_at(v.route_progress + self.lookahead(v.speed));
        let local = world_to_frame(&v.pose, target);
        let d2 = local.dot(local);
        if d2 < 1e-9 {
            return 0.0;
        }
        (WHEELBASE * 2.0 * local.y / d2).atan()
    }

    fn target_speed(&self, v: &VehicleState, route: &Route, ped: &PedestrianState) -> f64 {
        let s = v.route_progress;
        let mut target = route.min_speed_between(s, s + self.lookahead(v.speed));
        let remaining = (route.total_length - v.route_progress - 1.0).max(0.0);
        target = target.min((2.0 * self.params.stop_decel * remaining).sqrt());
        if let Some(h) = self.hazard_params() {
            if let Some(cap) = h.speed_cap {
                if ped.position.distance(v.pose.position()) <= h.cap_radius {
                    target = target.min(cap);
                }
            }
        }
        target
    }
}

impl DrivingPolicy for RuleDriver {
    fn control(&self, v: &VehicleState, route: &Route, ped: &PedestrianState) -> VehicleControl {
        if route.is_empty() {
            return VehicleControl::new(-self.params.speed_gain * v.speed, 0.0);
        }
        let steer = self.steer(v, route);
        if self.hazard(v, ped) {
            return VehicleControl::new(MIN_ACCEL, steer);
        }
        let target = self.target_speed(v, route, ped);
        VehicleControl::new(self.params.speed_gain * (target - v.speed), steer)
    }
}

/// Convenience wrapper using the default driver constants.
pub fn drive(
    policy: DrivingPolicyId,
    v: &VehicleState,
    route: &Route,
    ped: &PedestrianState,
) -> VehicleControl {
    RuleDriver::new(policy, DrivingParams::default()).control(v, route, ped)
}

/// Liang–Barsky clip of segment `a→b` against an axis-aligned rectangle.
fn segment_hits_rect(a: Vec2, b: Vec2, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
    let d = b - a;
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (p, q) in [
        (-d.x, a.x - x0),
        (d.x, x1 - a.x),
        (-d.y, a.y - y0),
        (d.y, y1 - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::frame_to_world;
    use crate::world::{build_town, sample_route};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DT: f64 = 0.05;

    fn vehicle(x: f64, y: f64, heading: f64, speed: f64) -> VehicleState {
        VehicleState {
            pose: Pose2D::new(x, y, heading),
            speed,
            route_progress: 0.0,
        }
    }

    fn straight_route() -> Route {
        Route::from_polyline(&[Vec2::new(0.0, 0.0), Vec2::new(500.0, 0.0)], |_| 8.5)
    }

    fn ped_at(p: Vec2) -> PedestrianState {
        PedestrianState::new(p, 0.0)
    }

    #[test]
    fn vehicle_kinematics() {
        let s = vehicle(1.0, 2.0, 0.3, 0.0);
        assert_eq!(step_vehicle(&s, VehicleControl::new(0.0, 0.4), DT).pose, s.pose);
        let s = vehicle(0.0, 0.0, 0.7, 10.0);
        let n = step_vehicle(&s, VehicleControl::new(0.0, 0.0), DT);
        assert!((n.pose.position().distance(s.pose.position()) - 0.5).abs() < 1e-12);
        assert!((n.pose.heading - 0.7).abs() < 1e-15);
        let n = step_vehicle(&vehicle(0.0, 0.0, 0.0, 14.9), VehicleControl::new(3.0, 0.0), DT);
        assert_eq!(n.speed, 15.0);
        let n = step_vehicle(&vehicle(0.0, 0.0, 0.0, 0.1), VehicleControl::new(-8.0, 0.0), DT);
        assert_eq!(n.speed, 0.0);
    }

    #[test]
    fn constant_steer_matches_fine_integration() {
        let u = VehicleControl::new(0.0, 0.3);
        let mut coarse = vehicle(0.0, 0.0, 0.0, 10.0);
        for _ in 0..200 {
            coarse = step_vehicle(&coarse, u, DT);
        }
        let mut fine = vehicle(0.0, 0.0, 0.0, 10.0);
        for _ in 0..2000 {
            fine = step_vehicle(&fine, u, DT / 10.0);
        }
        let err = coarse.pose.position().distance(fine.pose.position());
        assert!(err < 0.05, "coarse vs fine drift {err}");
    }

    #[test]
    fn pedestrian_kinematics() {
        let bounds = Bounds {
            min_x: -10.0,
            min_y: -10.0,
            max_x: 10.0,
            max_y: 10.0,
        };
        let still = ped_at(Vec2::new(1.0, 1.0));
        assert_eq!(step_pedestrian(&still, DT, &bounds), still);
        let mut p = PedestrianState {
            speed: 3.5,
            ..ped_at(Vec2::ZERO)
        };
        for _ in 0..20 {
            p = step_pedestrian(&p, DT, &bounds);
        }
        assert!((p.position.x - 3.5).abs() < 1e-12 && p.position.y.abs() < 1e-12);
        let edge = PedestrianState {
            speed: 3.5,
            ..ped_at(Vec2::new(9.9, 0.0))
        };
        assert_eq!(step_pedestrian(&edge, DT, &bounds).position.x, 10.0);
    }

    #[test]
    fn oblivious_never_brakes_for_pedestrian() {
        let v = vehicle(10.0, 0.0, 0.0, 8.5);
        let mut v = v;
        v.route_progress = 10.0;
        let ped = ped_at(frame_to_world(&v.pose, Vec2::new(1.0 + VEHICLE_HALF_LENGTH, 0.0)));
        let u = drive(DrivingPolicyId::Oblivious, &v, &straight_route(), &ped);
        assert!(u.accel() > MIN_ACCEL);
        assert!(u.accel().abs() < 1e-12);
    }

    #[test]
    fn baseline_brakes_for_pedestrian_in_corridor() {
        let mut v = vehicle(10.0, 0.0, 0.0, 8.5);
        v.route_progress = 10.0;
        let route = straight_route();
        let ped = ped_at(frame_to_world(&v.pose, Vec2::new(5.0, 0.0)));
        assert_eq!(drive(DrivingPolicyId::Baseline, &v, &route, &ped).accel(), -8.0);
        let ped = ped_at(frame_to_world(&v.pose, Vec2::new(5.0, 10.0)));
        let u = drive(DrivingPolicyId::Baseline, &v, &route, &ped);
        assert!(u.accel().abs() < 1e-12, "tracking control expected, got {}", u.accel());
    }

    #[test]
    fn baseline_reacts_to_extrapolated_crossing() {
        let mut v = vehicle(0.0, 0.0, 0.0, 8.5);
        v.route_progress = 0.0;
        // 4 m to the left, walking right at 3.5 m/s: enters the corridor within 1 s
        let ped = PedestrianState {
            speed: 3.5,
            ..PedestrianState::new(Vec2::new(8.0, 4.5), -std::f64::consts::FRAC_PI_2)
        };
        let d = RuleDriver::new(DrivingPolicyId::Baseline, DrivingParams::default());
        assert!(d.hazard(&v, &ped));
        let standing = PedestrianState::new(Vec2::new(8.0, 4.5), 0.0);
        assert!(!d.hazard(&v, &standing));
    }

    #[test]
    fn cautious_caps_speed_near_pedestrian() {
        let mut v = vehicle(0.0, 0.0, 0.0, 8.5);
        v.route_progress = 0.0;
        let ped = ped_at(Vec2::new(-15.0, 8.0)); // behind, within 20 m
        let u = drive(DrivingPolicyId::Cautious, &v, &straight_route(), &ped);
        assert!((u.accel() - 1.5 * (6.0 - 8.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_route_stops_the_vehicle() {
        let v = vehicle(0.0, 0.0, 0.0, 4.0);
        let empty = Route::from_polyline(&[], |_| 0.0);
        let u = drive(DrivingPolicyId::Baseline, &v, &empty, &ped_at(Vec2::new(50.0, 50.0)));
        assert!(u.accel() < 0.0 && u.steer() == 0.0);
    }

    #[test]
    fn oblivious_tracks_sampled_routes() {
        let driver = RuleDriver::new(DrivingPolicyId::Oblivious, DrivingParams::default());
        let far = ped_at(Vec2::new(-1e4, -1e4));
        let mut worst: f64 = 0.0;
        for name in ["TownA", "TownB"] {
            let map = build_town(name).unwrap();
            for seed in 0..40 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let route = sample_route(&map, &mut rng, 400.0, 8.5).unwrap();
                let start = route.waypoints[0].position;
                let mut v = VehicleState {
                    pose: Pose2D::new(start.x, start.y, route.direction_at(0.0).angle()),
                    speed: 0.0,
                    route_progress: 0.0,
                };
                while v.route_progress < route.total_length - 10.0 {
                    let u = driver.control(&v, &route, &far);
                    v = step_vehicle(&v, u, DT);
                    v.update_progress(&route);
                    let (_, cte) = route.project(v.pose.position(), v.route_progress, 5.0, 5.0);
                    worst = worst.max(cte);
                }
            }
        }
        assert!(worst < 1.0, "max cross-track error {worst}");
    }

    proptest! {
        #[test]
        fn speed_stays_in_bounds(speed in 0.0..15.0f64, accel in -20.0..20.0f64, steer in -2.0..2.0f64) {
            let n = step_vehicle(&vehicle(0.0, 0.0, 0.0, speed), VehicleControl::new(accel, steer), DT);
            prop_assert!((0.0..=15.0).contains(&n.speed));
            let max_turn = speed / WHEELBASE * MAX_STEER.tan() * DT;
            prop_assert!(n.pose.heading.abs() <= max_turn + 1e-12);
        }

        #[test]
        fn cautious_brakes_whenever_baseline_does(
            speed in 0.0..15.0f64, px in -10.0..40.0f64, py in -10.0..10.0f64,
            ph in -3.2..3.2f64, ps in 0.0..3.5f64,
        ) {
            let v = vehicle(0.0, 0.0, 0.0, speed);
            let ped = PedestrianState { speed: ps, ..PedestrianState::new(Vec2::new(px, py), ph) };
            let p = DrivingParams::default();
            let base = RuleDriver::new(DrivingPolicyId::Baseline, p).hazard(&v, &ped);
            let caut = RuleDriver::new(DrivingPolicyId::Cautious, p).hazard(&v, &ped);
            prop_assert!(!base || caut);
        }

        #[test]
        fn drive_is_pure(speed in 0.0..15.0f64, px in -30.0..30.0f64, py in -30.0..30.0f64) {
            let route = straight_route();
            let v = vehicle(3.0, 0.5, 0.1, speed);
            let ped = ped_at(Vec2::new(px, py));
            for id in DrivingPolicyId::ALL {
                prop_assert_eq!(drive(id, &v, &route, &ped), drive(id, &v, &route, &ped));
            }
        }
    }
}
