//! Adversarial pedestrian scenario generation on a deterministic 2D traffic
//! micro-simulator.
//!
//! A pedestrian agent is trained with PPO to collide with a vehicle driven by
//! a rule-based policy. The crate contains the simulator ([`geom`],
//! [`world`], [`agents`], [`env`]), a small actor-critic network core
//! ([`nn`]), the trainer ([`ppo`]) and the evaluation harness ([`evalrig`]).

pub mod agents;
pub mod env;
pub mod evalrig;
pub mod geom;
pub mod nn;
pub mod ppo;
pub mod world;
