//! The pedestrian decision process.
//!
//! One decision holds the pedestrian's command for `action_repeat` simulator
//! ticks while the vehicle's driver is queried every tick. An episode ends at
//! the first contact or after `episode_ticks` ticks.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    step_pedestrian, step_vehicle, DrivingParams, DrivingPolicy, DrivingPolicyId,
    PedestrianState, RuleDriver, VehicleState, MAX_PEDESTRIAN_SPEED,
};
use crate::geom::{collide_box_circle, wrap, world_to_frame, Pose2D, Zone};
use crate::world::{build_town, sample_route, sample_spawn, Route, SpawnSpec, TownMap, WorldError};

/// Scale of each observation component in the normalized network input.
pub const OBS_SCALE: [f64; 4] = [PI, 30.0, PI, 15.0];
pub const RESET_RETRIES: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("could not place vehicle and pedestrian after {0} route samples")]
    ResetFailed(usize),
}

/// Pedestrian-centric view of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    /// Bearing of the vehicle from the pedestrian's heading.
    pub alpha: f64,
    /// Pedestrian–vehicle distance.
    pub d: f64,
    /// Direction of the relative velocity (vehicle minus pedestrian) in the pedestrian frame.
    pub beta: f64,
    /// Magnitude of the relative velocity.
    pub v: f64,
}

impl Observation {
    pub fn normalized(&self) -> [f64; 4] {
        [
            self.alpha / OBS_SCALE[0],
            self.d / OBS_SCALE[1],
            self.beta / OBS_SCALE[2],
            self.v / OBS_SCALE[3],
        ]
    }
}

/// Walking command in the pedestrian frame: a turn relative to the current
/// heading and a scalar speed. Both are clamped to their ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianAction {
    pub theta: f64,
    pub speed: f64,
}

impl PedestrianAction {
    pub fn new(theta: f64, speed: f64) -> Self {
        Self {
            theta: theta.clamp(-PI, PI),
            speed: speed.clamp(0.0, MAX_PEDESTRIAN_SPEED),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub zone: Zone,
    /// Vehicle speed at the contact tick.
    pub v_c: f64,
    pub tick: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardId {
    R1,
    R2,
}

impl RewardId {
    pub fn score(self, e: Option<&CollisionEvent>) -> f64 {
        match self {
            RewardId::R1 => reward_r1(e),
            RewardId::R2 => reward_r2(e),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RewardId::R1 => "R1",
            RewardId::R2 => "R2",
        }
    }
}

/// 1 for any contact, else 0.
pub fn reward_r1(e: Option<&CollisionEvent>) -> f64 {
    if e.is_some() {
        1.0
    } else {
        0.0
    }
}

/// Speed-shaped reward: frontal contacts pay `max(3, 1.5 v_c)`, other contacts
/// `max(1, 0.5 v_c)`.
pub fn reward_r2(e: Option<&CollisionEvent>) -> f64 {
    match e {
        None => 0.0,
        Some(c) if c.zone == Zone::Front => (1.5 * c.v_c).max(3.0),
        Some(c) => (0.5 * c.v_c).max(1.0),
    }
}

fn default_episode_ticks() -> u32 {
    600
}
fn default_ticks_per_second() -> u32 {
    20
}
fn default_action_repeat() -> u32 {
    20
}
fn default_route_length() -> f64 {
    400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub town: String,
    pub driving_policy: DrivingPolicyId,
    pub reward: RewardId,
    #[serde(default)]
    pub spawn: SpawnSpec,
    #[serde(default = "default_episode_ticks")]
    pub episode_ticks: u32,
    #[serde(default = "default_ticks_per_second")]
    pub ticks_per_second: u32,
    #[serde(default = "default_action_repeat")]
    pub action_repeat: u32,
    #[serde(default)]
    pub seed: u64,
    /// Minimum length of the vehicle's sampled route (m).
    #[serde(default = "default_route_length")]
    pub route_length: f64,
    #[serde(default)]
    pub driving: DrivingParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            town: "TownA".into(),
            driving_policy: DrivingPolicyId::Baseline,
            reward: RewardId::R2,
            spawn: SpawnSpec::default(),
            episode_ticks: default_episode_ticks(),
            ticks_per_second: default_ticks_per_second(),
            action_repeat: default_action_repeat(),
            seed: 0,
            route_length: default_route_length(),
            driving: DrivingParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.action_repeat == 0 || self.ticks_per_second == 0 || self.episode_ticks == 0 {
            return bad("tick counts must be positive");
        }
        if self.episode_ticks % self.action_repeat != 0 {
            return bad("episode_ticks must be divisible by action_repeat");
        }
        if !(self.route_length > 0.0) {
            return bad("route_length must be positive");
        }
        self.spawn.validate()?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.ticks_per_second as f64
    }

    pub fn horizon(&self) -> u32 {
        self.episode_ticks / self.action_repeat
    }

    /// SHA-256 over the canonical JSON encoding; identifies the simulation semantics of a log.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub vehicle: VehicleState,
    pub pedestrian: PedestrianState,
    pub route: Arc<Route>,
    pub tick: u32,
    pub done: bool,
    pub collision: Option<CollisionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Episode ended by the time limit rather than by a collision.
    pub truncated: bool,
    pub collision: Option<CollisionEvent>,
}

/// Computes the observation of a state. Invariant under any rigid motion of the world.
pub fn observe(s: &EnvState) -> Observation {
    let ped = s.pedestrian.pose();
    let rel = world_to_frame(&ped, s.vehicle.pose.position());
    let w = s.vehicle.velocity() - s.pedestrian.velocity();
    let speed = w.norm();
    let beta = if speed < 1e-6 {
        0.0
    } else {
        wrap(w.angle() - ped.heading)
    };
    Observation {
        alpha: wrap(rel.angle()),
        d: rel.norm(),
        beta,
        v: speed,
    }
}

/// One environment: configuration, the town and the vehicle's driver.
pub struct Env {
    cfg: EnvConfig,
    map: Arc<TownMap>,
    driver: Box<dyn DrivingPolicy + Send + Sync>,
}

impl std::fmt::Debug for Env {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Env")
            .field("cfg", &self.cfg)
            .field("town", &self.map.name)
            .finish_non_exhaustive()
    }
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let map = Arc::new(build_town(&cfg.town)?);
        Ok(Self::with_map(cfg, map))
    }

    /// Uses a caller-provided town instead of a built-in one.
    pub fn with_map(cfg: EnvConfig, map: Arc<TownMap>) -> Self {
        let driver = Box::new(RuleDriver::new(cfg.driving_policy, cfg.driving));
        Self { cfg, map, driver }
    }

    /// Swaps in any driving policy.
    pub fn with_driver(mut self, driver: Box<dyn DrivingPolicy + Send + Sync>) -> Self {
        self.driver = driver;
        self
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn map(&self) -> &TownMap {
        &self.map
    }

    /// Samples a route, puts the vehicle at rest at its start and spawns the
    /// pedestrian in the sector ahead. Spawn rejections trigger a new route.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(EnvState, Observation), EnvError> {
        for _ in 0..RESET_RETRIES {
            let route = sample_route(&self.map, rng, self.cfg.route_length, self.cfg.driving.cruise_speed)?;
            let start = route.waypoints[0].position;
            let pose = Pose2D::new(start.x, start.y, route.direction_at(0.0).angle());
            let spawn = match sample_spawn(&pose, &self.cfg.spawn, &self.map, rng) {
                Ok(p) => p,
                Err(WorldError::SpawnRejected(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let state = EnvState {
                vehicle: VehicleState {
                    pose,
                    speed: 0.0,
                    route_progress: 0.0,
                },
                pedestrian: PedestrianState::new(spawn.position(), spawn.heading),
                route: Arc::new(route),
                tick: 0,
                done: false,
                collision: None,
            };
            let obs = observe(&state);
            return Ok((state, obs));
        }
        Err(EnvError::ResetFailed(RESET_RETRIES))
    }

    pub fn step(&self, s: &EnvState, a: PedestrianAction) -> Result<StepOutcome, EnvError> {
        self.step_with(s, a, |_| {})
    }

    /// Like [`Env::step`], calling `on_tick` with the state after every simulator tick.
    pub fn step_with(
        &self,
        s: &EnvState,
        a: PedestrianAction,
        mut on_tick: impl FnMut(&EnvState),
    ) -> Result<StepOutcome, EnvError> {
        if s.done {
            return Err(EnvError::EpisodeDone);
        }
        let a = PedestrianAction::new(a.theta, a.speed);
        let dt = self.cfg.dt();
        let mut st = s.clone();
        st.pedestrian.heading = wrap(st.pedestrian.heading + a.theta);
        st.pedestrian.speed = a.speed;

        for _ in 0..self.cfg.action_repeat {
            if st.tick >= self.cfg.episode_ticks {
                break;
            }
            let u = self.driver.control(&st.vehicle, &st.route, &st.pedestrian);
            st.vehicle = step_vehicle(&st.vehicle, u, dt);
            st.vehicle.update_progress(&st.route);
            st.pedestrian = step_pedestrian(&st.pedestrian, dt, &self.map.walkable_bounds);
            st.tick += 1;
            let contact = collide_box_circle(
                &st.vehicle.footprint(),
                st.pedestrian.position,
                st.pedestrian.radius,
            )
            .expect("vehicle footprint and pedestrian radius are valid");
            if let Some(c) = contact.contact {
                st.collision = Some(CollisionEvent {
                    zone: c.zone,
                    v_c: st.vehicle.speed,
                    tick: st.tick,
                });
            }
            st.done = st.collision.is_some() || st.tick >= self.cfg.episode_ticks;
            on_tick(&st);
            if st.collision.is_some() {
                break;
            }
        }

        let collision = st.collision;
        let reward = self.cfg.reward.score(collision.as_ref());
        let observation = observe(&st);
        Ok(StepOutcome {
            done: st.done,
            truncated: st.done && collision.is_none(),
            state: st,
            observation,
            reward,
            collision,
        })
    }
}
