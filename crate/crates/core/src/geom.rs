//! Planar geometry: points, poses, angle arithmetic, frame transforms and the
//! vehicle-footprint vs. pedestrian-disc contact test.
//!
//! Angles are counterclockwise-positive with zero along +x. Every heading
//! written by this crate lives in `(-π, π]`.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the band (m) at either end of a box that counts as its front or rear face.
pub const FACE_BAND: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("angle is not finite: {0}")]
    NonFiniteAngle(f64),
    #[error("degenerate box: half_length={half_length}, half_width={half_width}")]
    DegenerateBox { half_length: f64, half_width: f64 },
    #[error("circle radius must be positive, got {0}")]
    BadRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector pointing along `angle`.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counterclockwise rotation by `angle`.
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
        }
    }

    /// Left-hand normal (rotated by +90°).
    pub fn perp(self) -> Self {
        Self {
            x: -self.y,
            y: self.x,
        }
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Self {
        self + (o - self) * t
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    /// Builds a pose, wrapping `heading` into `(-π, π]`.
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }
}

/// Wraps a finite angle into `(-π, π]`; exact `π` stays `π`.
pub fn wrap_angle(a: f64) -> Result<f64, GeomError> {
    if !a.is_finite() {
        return Err(GeomError::NonFiniteAngle(a));
    }
    Ok(wrap(a))
}

/// Infallible wrap for angles already known to be finite.
pub(crate) fn wrap(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Expresses world point `p` in the coordinates of `frame`.
pub fn world_to_frame(frame: &Pose2D, p: Vec2) -> Vec2 {
    let (s, c) = frame.heading.sin_cos();
    let dx = p.x - frame.x;
    let dy = p.y - frame.y;
    Vec2::new(c * dx + s * dy, -s * dx + c * dy)
}

/// Inverse of [`world_to_frame`].
pub fn frame_to_world(frame: &Pose2D, p: Vec2) -> Vec2 {
    let (s, c) = frame.heading.sin_cos();
    Vec2::new(c * p.x - s * p.y + frame.x, s * p.x + c * p.y + frame.y)
}

/// Rectangle with an arbitrary orientation. `half_length` runs along the
/// heading of `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Pose2D,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2D, half_length: f64, half_width: f64) -> Result<Self, GeomError> {
        let b = Self {
            center,
            half_length,
            half_width,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let ok = self.half_length > 0.0
            && self.half_width > 0.0
            && self.half_length >= self.half_width
            && self.half_length.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeomError::DegenerateBox {
                half_length: self.half_length,
                half_width: self.half_width,
            })
        }
    }

    /// Corners in world coordinates, counterclockwise from front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let (l, w) = (self.half_length, self.half_width);
        [
            Vec2::new(l, w),
            Vec2::new(-l, w),
            Vec2::new(-l, -w),
            Vec2::new(l, -w),
        ]
        .map(|p| frame_to_world(&self.center, p))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let q = world_to_frame(&self.center, p);
        q.x.abs() <= self.half_length && q.y.abs() <= self.half_width
    }

    /// Closest point of the (solid) box to `p`, in world coordinates.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        let q = world_to_frame(&self.center, p);
        let clamped = Vec2::new(
            q.x.clamp(-self.half_length, self.half_length),
            q.y.clamp(-self.half_width, self.half_width),
        );
        frame_to_world(&self.center, clamped)
    }

    /// Face zone of a point given in world coordinates.
    pub fn zone_of(&self, p: Vec2) -> Zone {
        let local_x = world_to_frame(&self.center, p).x;
        let edge = self.half_length - FACE_BAND;
        if local_x >= edge {
            Zone::Front
        } else if local_x <= -edge {
            Zone::Rear
        } else {
            Zone::Side
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    Front,
    Side,
    Rear,
}

impl Zone {
    pub fn as_str(self) -> &'static str {
        match self {
            Zone::Front => "front",
            Zone::Side => "side",
            Zone::Rear => "rear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub point: Vec2,
    pub zone: Zone,
}

/// Result of a box/disc test. `contact` is present iff the shapes touch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactReport {
    pub contact: Option<Contact>,
}

impl ContactReport {
    pub fn hit(&self) -> bool {
        self.contact.is_some()
    }
}

/// Tests a disc against a solid oriented box using the exact closest point.
pub fn collide_box_circle(
    b: &OrientedBox,
    center: Vec2,
    radius: f64,
) -> Result<ContactReport, GeomError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(GeomError::BadRadius(radius));
    }
    b.validate()?;
    let point = b.closest_point(center);
    if point.distance(center) <= radius + 1e-9 {
        Ok(ContactReport {
            contact: Some(Contact {
                point,
                zone: b.zone_of(point),
            }),
        })
    } else {
        Ok(ContactReport::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference wrap by repeated ±2π steps.
    fn wrap_by_steps(mut a: f64) -> f64 {
        while a > PI {
            a -= TAU;
        }
        while a <= -PI {
            a += TAU;
        }
        a
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert_eq!(wrap_angle(PI).unwrap(), PI);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert!((wrap_angle(3.0 * PI).unwrap().abs() - PI).abs() < 1e-12);
        let w = wrap_angle(-3.5 * PI).unwrap();
        assert!((w - wrap_by_steps(-3.5 * PI)).abs() < 1e-12);
        assert!((w - 0.5 * PI).abs() < 1e-12);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn frame_examples() {
        let p = world_to_frame(&Pose2D::new(0.0, 0.0, 0.0), Vec2::new(3.0, 4.0));
        assert_eq!(p, Vec2::new(3.0, 4.0));
        let p = world_to_frame(&Pose2D::new(0.0, 0.0, PI / 2.0), Vec2::new(0.0, 1.0));
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        let p = world_to_frame(&Pose2D::new(2.0, 0.0, 0.0), Vec2::new(2.0, 0.0));
        assert_eq!(p, Vec2::ZERO);

        let w = frame_to_world(&Pose2D::new(0.0, 0.0, 0.0), Vec2::new(1.0, 1.0));
        assert_eq!(w, Vec2::new(1.0, 1.0));
        let w = frame_to_world(&Pose2D::new(1.0, 2.0, PI), Vec2::new(1.0, 0.0));
        assert!((w.x - 0.0).abs() < 1e-12 && (w.y - 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_thousand_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let f = Pose2D::new(
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-PI..PI),
            );
            let p = Vec2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
            worst = worst.max(frame_to_world(&f, world_to_frame(&f, p)).distance(p));
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    fn unit_box() -> OrientedBox {
        OrientedBox::new(Pose2D::new(0.0, 0.0, 0.0), 2.25, 1.0).unwrap()
    }

    #[test]
    fn collision_examples() {
        let b = unit_box();
        let r = collide_box_circle(&b, Vec2::ZERO, 0.35).unwrap();
        assert_eq!(r.contact.unwrap().zone, Zone::Side);

        assert!(!collide_box_circle(&b, Vec2::new(10.0, 10.0), 0.35).unwrap().hit());

        let c = collide_box_circle(&b, Vec2::new(2.6, 0.0), 0.35)
            .unwrap()
            .contact
            .unwrap();
        assert!((c.point.x - 2.25).abs() < 1e-12 && c.point.y.abs() < 1e-12);
        assert_eq!(c.zone, Zone::Front);

        // Dense boundary sampling puts the nearest boundary sample at the same spot.
        let n = 20_000;
        let best = boundary_samples(&b, n)
            .into_iter()
            .min_by(|a, b| {
                a.distance(Vec2::new(2.6, 0.0))
                    .total_cmp(&b.distance(Vec2::new(2.6, 0.0)))
            })
            .unwrap();
        assert!(best.distance(c.point) < 1e-3);
    }

    #[test]
    fn collision_errors() {
        let b = unit_box();
        assert!(collide_box_circle(&b, Vec2::ZERO, 0.0).is_err());
        let bad = OrientedBox {
            center: Pose2D::default(),
            half_length: 0.0,
            half_width: 1.0,
        };
        assert!(matches!(
            collide_box_circle(&bad, Vec2::ZERO, 0.3),
            Err(GeomError::DegenerateBox { .. })
        ));
        assert!(OrientedBox::new(Pose2D::default(), 1.0, 2.0).is_err());
    }

    #[test]
    fn zone_bands() {
        let b = unit_box();
        assert_eq!(b.zone_of(Vec2::new(2.21, 1.0)), Zone::Front);
        assert_eq!(b.zone_of(Vec2::new(2.19, 1.0)), Zone::Side);
        assert_eq!(b.zone_of(Vec2::new(-2.2, -1.0)), Zone::Rear);
        // rotated box: front face follows the heading
        let r = OrientedBox::new(Pose2D::new(5.0, 5.0, PI / 2.0), 2.25, 1.0).unwrap();
        assert_eq!(r.zone_of(Vec2::new(5.0, 7.25)), Zone::Front);
        assert_eq!(r.zone_of(Vec2::new(5.0, 2.75)), Zone::Rear);
    }

    /// Perimeter points plus a regular interior grid.
    fn boundary_samples(b: &OrientedBox, n: usize) -> Vec<Vec2> {
        let (l, w) = (b.half_length, b.half_width);
        let per = 2.0 * (2.0 * l + 2.0 * w);
        let mut pts = Vec::with_capacity(n + 400);
        for i in 0..n {
            let mut s = per * i as f64 / n as f64;
            let local = if s < 2.0 * l {
                Vec2::new(-l + s, -w)
            } else if {
                s -= 2.0 * l;
                s < 2.0 * w
            } {
                Vec2::new(l, -w + s)
            } else if {
                s -= 2.0 * w;
                s < 2.0 * l
            } {
                Vec2::new(l - s, w)
            } else {
                s -= 2.0 * l;
                Vec2::new(-l, w - s)
            };
            pts.push(frame_to_world(&b.center, local));
        }
        for i in 0..=20 {
            for j in 0..=20 {
                let local = Vec2::new(
                    -l + 2.0 * l * i as f64 / 20.0,
                    -w + 2.0 * w * j as f64 / 20.0,
                );
                pts.push(frame_to_world(&b.center, local));
            }
        }
        pts
    }

    #[test]
    fn collision_matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        while checked < 1000 {
            let hl = rng.random_range(0.5..4.0);
            let hw = rng.random_range(0.2..hl);
            let b = OrientedBox::new(
                Pose2D::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-PI..PI),
                ),
                hl,
                hw,
            )
            .unwrap();
            let c = Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let r = rng.random_range(0.1..3.0);
            let samples = boundary_samples(&b, 10_000);
            let spacing = 4.0 * (hl + hw) / 10_000.0;
            let nearest = samples
                .iter()
                .map(|p| p.distance(c))
                .fold(f64::INFINITY, f64::min);
            let inside = b.contains(c);
            // skip configurations the sampling cannot resolve
            if !inside && (nearest - r).abs() < spacing {
                continue;
            }
            let oracle = inside || nearest <= r;
            let report = collide_box_circle(&b, c, r).unwrap();
            assert_eq!(report.hit(), oracle, "box {b:?} circle {c:?} r {r}");
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_in_range(a in -1e4f64..1e4) {
            let w = wrap_angle(a).unwrap();
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
            prop_assert!(((a - w) / TAU - ((a - w) / TAU).round()).abs() < 1e-9);
        }

        #[test]
        fn frame_round_trip(fx in -1e3f64..1e3, fy in -1e3f64..1e3, h in -PI..PI,
                            px in -1e3f64..1e3, py in -1e3f64..1e3) {
            let f = Pose2D::new(fx, fy, h);
            let p = Vec2::new(px, py);
            prop_assert!(frame_to_world(&f, world_to_frame(&f, p)).distance(p) < 1e-9);
        }

        #[test]
        fn world_to_frame_is_isometry(fx in -1e2f64..1e2, fy in -1e2f64..1e2, h in -PI..PI,
                                      a in prop::array::uniform2(-1e2f64..1e2),
                                      b in prop::array::uniform2(-1e2f64..1e2),
                                      c in prop::array::uniform2(-1e2f64..1e2)) {
            let f = Pose2D::new(fx, fy, h);
            let pts = [a, b, c].map(|p| Vec2::new(p[0], p[1]));
            let loc = pts.map(|p| world_to_frame(&f, p));
            for i in 0..3 {
                for j in 0..3 {
                    let d0 = pts[i].distance(pts[j]);
                    let d1 = loc[i].distance(loc[j]);
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }
}
