//! Evaluation harness: episode logs, replay, metrics, the town × driving
//! policy matrix and SVG trajectory plots.
//!
//! An episode log is JSON Lines: one `header` object, then `tick` and
//! `decision` objects in simulation order (tick 0 first; each decision
//! precedes the ticks it drives), then one `outcome` object.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::DrivingPolicyId;
use crate::env::{reward_r2, CollisionEvent, Env, EnvConfig, EnvError, EnvState, Observation, PedestrianAction, RewardId};
use crate::geom::{OrientedBox, Pose2D, Zone};
use crate::nn::{policy_mean, policy_sample, to_env_action, NnError, PolicyParams, ACT_DIM};
use crate::world::{build_town, TownMap};

pub const LOG_VERSION: u32 = 1;
pub const MOVING_THRESHOLD: f64 = 0.5;
/// Stream id for the stochastic evaluation policy's sampler.
const STREAM_POLICY: u64 = 7;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed episode log: {0}")]
    MalformedLog(String),
    #[error("invalid eval spec: {0}")]
    Spec(String),
    #[error("no episodes to aggregate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    /// SHA-256 of the env config the episode ran under.
    pub config_hash: String,
    /// Seed of the reset random source.
    pub env_seed: u64,
    /// Seed of the action sampler, when the policy was stochastic.
    pub policy_seed: Option<u64>,
    pub town: String,
    pub policy: DrivingPolicyId,
    pub reward_id: RewardId,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRow {
    pub tick: u32,
    pub vx: f64,
    pub vy: f64,
    pub v_heading: f64,
    pub v_speed: f64,
    pub px: f64,
    pub py: f64,
    pub p_heading: f64,
    pub p_speed: f64,
}

impl TickRow {
    pub fn of(s: &EnvState) -> Self {
        Self {
            tick: s.tick,
            vx: s.vehicle.pose.x,
            vy: s.vehicle.pose.y,
            v_heading: s.vehicle.pose.heading,
            v_speed: s.vehicle.speed,
            px: s.pedestrian.position.x,
            py: s.pedestrian.position.y,
            p_heading: s.pedestrian.heading,
            p_speed: s.pedestrian.speed,
        }
    }

    const FIELDS: [&'static str; 8] = ["vx", "vy", "v_heading", "v_speed", "px", "py", "p_heading", "p_speed"];

    fn values(&self) -> [f64; 8] {
        [
            self.vx,
            self.vy,
            self.v_heading,
            self.v_speed,
            self.px,
            self.py,
            self.p_heading,
            self.p_speed,
        ]
    }

    /// First field whose bit pattern differs.
    pub fn first_difference(&self, other: &TickRow) -> Option<&'static str> {
        if self.tick != other.tick {
            return Some("tick");
        }
        let (a, b) = (self.values(), other.values());
        (0..8).find(|&i| a[i].to_bits() != b[i].to_bits()).map(|i| Self::FIELDS[i])
    }

    pub fn vehicle_pose(&self) -> Pose2D {
        Pose2D {
            x: self.vx,
            y: self.vy,
            heading: self.v_heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub index: usize,
    /// Tick at which the command takes effect.
    pub tick: u32,
    pub observation: Observation,
    /// Raw network output, absent for scripted actors.
    pub action_raw: Option<[f64; ACT_DIM]>,
    pub action: PedestrianAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub collision: Option<CollisionEvent>,
    pub ticks: u32,
    pub decisions: usize,
    /// Return under the env's configured reward.
    pub reward: f64,
    /// Set when the episode could not run; such episodes are not scored.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(LogHeader),
    Tick(TickRow),
    Decision(DecisionRow),
    Outcome(Outcome),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRow>,
    pub decisions: Vec<DecisionRow>,
    pub outcome: Outcome,
}

impl EpisodeLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: Line| {
            out.push_str(&serde_json::to_string(&l).expect("log rows serialize"));
            out.push('\n');
        };
        push(Line::Header(self.header.clone()));
        let mut d = self.decisions.iter().peekable();
        for t in &self.ticks {
            push(Line::Tick(*t));
            while let Some(row) = d.next_if(|row| row.tick == t.tick) {
                push(Line::Decision(*row));
            }
        }
        for row in d {
            push(Line::Decision(*row));
        }
        push(Line::Outcome(self.outcome.clone()));
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn from_lines(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Self, EvalError> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut decisions = Vec::new();
        let mut outcome = None;
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| EvalError::MalformedLog(format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Header(h) if header.is_none() && n == 0 => header = Some(h),
                Line::Tick(t) if header.is_some() && outcome.is_none() => ticks.push(t),
                Line::Decision(d) if header.is_some() && outcome.is_none() => decisions.push(d),
                Line::Outcome(o) if header.is_some() && outcome.is_none() => outcome = Some(o),
                _ => return Err(EvalError::MalformedLog(format!("unexpected row at line {}", n + 1))),
            }
        }
        let log = Self {
            header: header.ok_or_else(|| EvalError::MalformedLog("missing header".into()))?,
            ticks,
            decisions,
            outcome: outcome.ok_or_else(|| EvalError::MalformedLog("missing outcome".into()))?,
        };
        log.check_structure()?;
        Ok(log)
    }

    /// Tick rows contiguous from 0; decision k applied at tick k·action_repeat.
    pub fn check_structure(&self) -> Result<(), EvalError> {
        if self.outcome.aborted.is_some() {
            return Ok(());
        }
        for (i, t) in self.ticks.iter().enumerate() {
            if t.tick as usize != i {
                return Err(EvalError::MalformedLog(format!("tick rows not contiguous at row {i}")));
            }
        }
        let repeat = self.header.env.action_repeat;
        for (k, d) in self.decisions.iter().enumerate() {
            if d.index != k || d.tick != k as u32 * repeat {
                return Err(EvalError::MalformedLog(format!("decision {k} misaligned")));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Self::from_lines(BufReader::new(fs::File::open(path)?).lines())
    }
}

/// Chooses the pedestrian's next command.
pub trait Actor {
    /// Returns the raw network output (if any) and the env action.
    fn act(&mut self, s: &EnvState, obs: &Observation) -> Result<(Option<[f64; ACT_DIM]>, PedestrianAction), EvalError>;

    /// Seed of the actor's own random source, recorded in the log header.
    fn seed(&self) -> Option<u64> {
        None
    }
}

/// A trained policy acting at its mean or by sampling.
pub struct PolicyActor<'a> {
    params: &'a PolicyParams,
    sampler: Option<(u64, ChaCha8Rng)>,
}

impl<'a> PolicyActor<'a> {
    pub fn deterministic(params: &'a PolicyParams) -> Self {
        Self { params, sampler: None }
    }

    pub fn stochastic(params: &'a PolicyParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_POLICY);
        Self {
            params,
            sampler: Some((seed, rng)),
        }
    }
}

impl Actor for PolicyActor<'_> {
    fn act(&mut self, _: &EnvState, obs: &Observation) -> Result<(Option<[f64; ACT_DIM]>, PedestrianAction), EvalError> {
        let x = obs.normalized();
        let raw = match &mut self.sampler {
            None => policy_mean(self.params, &x)?,
            Some((_, rng)) => policy_sample(self.params, &x, rng)?.raw,
        };
        Ok((Some(raw), to_env_action(&raw)))
    }

    fn seed(&self) -> Option<u64> {
        self.sampler.as_ref().map(|s| s.0)
    }
}

/// Any closure of the state is an actor.
impl<F> Actor for F
where
    F: FnMut(&EnvState, &Observation) -> PedestrianAction,
{
    fn act(&mut self, s: &EnvState, obs: &Observation) -> Result<(Option<[f64; ACT_DIM]>, PedestrianAction), EvalError> {
        Ok((None, self(s, obs)))
    }
}

/// Runs one episode from `seed`. Env failures produce an aborted log rather than an error.
pub fn run_episode_with(env: &Env, seed: u64, actor: &mut dyn Actor) -> Result<EpisodeLog, EvalError> {
    let cfg = env.config();
    let header = LogHeader {
        version: LOG_VERSION,
        config_hash: cfg.hash(),
        env_seed: seed,
        policy_seed: actor.seed(),
        town: cfg.town.clone(),
        policy: cfg.driving_policy,
        reward_id: cfg.reward,
        env: cfg.clone(),
    };
    let mut log = EpisodeLog {
        header,
        ticks: Vec::new(),
        decisions: Vec::new(),
        outcome: Outcome {
            collision: None,
            ticks: 0,
            decisions: 0,
            reward: 0.0,
            aborted: None,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut obs) = match env.reset(&mut rng) {
        Ok(x) => x,
        Err(e) => {
            log.outcome.aborted = Some(e.to_string());
            return Ok(log);
        }
    };
    log.ticks.push(TickRow::of(&s));
    while !s.done {
        let (raw, action) = actor.act(&s, &obs)?;
        log.decisions.push(DecisionRow {
            index: log.decisions.len(),
            tick: s.tick,
            observation: obs,
            action_raw: raw,
            action,
        });
        let ticks = &mut log.ticks;
        let out = match env.step_with(&s, action, |st| ticks.push(TickRow::of(st))) {
            Ok(o) => o,
            Err(e) => {
                log.outcome.aborted = Some(e.to_string());
                return Ok(log);
            }
        };
        log.outcome.reward += out.reward;
        s = out.state;
        obs = out.observation;
    }
    log.outcome.collision = s.collision;
    log.outcome.ticks = s.tick;
    log.outcome.decisions = log.decisions.len();
    Ok(log)
}

pub fn run_episode(env: &Env, params: &PolicyParams, seed: u64, deterministic: bool) -> Result<EpisodeLog, EvalError> {
    let mut actor = if deterministic {
        PolicyActor::deterministic(params)
    } else {
        PolicyActor::stochastic(params, seed)
    };
    run_episode_with(env, seed, &mut actor)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayVerdict {
    Pass,
    /// The log was produced under a different env config.
    ConfigMismatch { logged: String, current: String },
    /// First regenerated tick that differs from the log.
    Diverged { tick: u32, field: String },
}

impl ReplayVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, ReplayVerdict::Pass)
    }
}

/// Re-simulates a log under the config stored in its header.
pub fn replay(log: &EpisodeLog) -> Result<ReplayVerdict, EvalError> {
    replay_with_config(log, &log.header.env)
}

/// Re-simulates a log under `cfg`, refusing if `cfg` differs from the logged config.
pub fn replay_with_config(log: &EpisodeLog, cfg: &EnvConfig) -> Result<ReplayVerdict, EvalError> {
    let current = cfg.hash();
    if current != log.header.config_hash {
        return Ok(ReplayVerdict::ConfigMismatch {
            logged: log.header.config_hash.clone(),
            current,
        });
    }
    log.check_structure()?;
    let env = Env::new(cfg.clone())?;
    let mut regenerated = Vec::with_capacity(log.ticks.len());
    let (mut s, _) = env.reset(&mut ChaCha8Rng::seed_from_u64(log.header.env_seed))?;
    regenerated.push(TickRow::of(&s));
    for d in &log.decisions {
        if s.done {
            break;
        }
        let out = env.step_with(&s, d.action, |st| regenerated.push(TickRow::of(st)))?;
        s = out.state;
    }
    for (i, want) in log.ticks.iter().enumerate() {
        match regenerated.get(i) {
            None => {
                return Ok(ReplayVerdict::Diverged {
                    tick: want.tick,
                    field: "missing".into(),
                })
            }
            Some(got) => {
                if let Some(field) = got.first_difference(want) {
                    return Ok(ReplayVerdict::Diverged {
                        tick: want.tick,
                        field: field.into(),
                    });
                }
            }
        }
    }
    if regenerated.len() != log.ticks.len() {
        return Ok(ReplayVerdict::Diverged {
            tick: log.ticks.len() as u32,
            field: "length".into(),
        });
    }
    if s.collision != log.outcome.collision {
        return Ok(ReplayVerdict::Diverged {
            tick: s.tick,
            field: "collision".into(),
        });
    }
    Ok(ReplayVerdict::Pass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_episodes: usize,
    /// Episodes that could not run; not part of any rate.
    pub n_aborted: usize,
    pub collision_rate: f64,
    pub collision_se: f64,
    pub front_rate: f64,
    pub front_se: f64,
    pub moving_rate: f64,
    pub moving_se: f64,
    /// Fraction of collisions that hit the front (None without collisions).
    pub front_share: Option<f64>,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Per-episode rates over the scored (non-aborted) outcomes.
pub fn compute_metrics<'a>(
    outcomes: impl IntoIterator<Item = &'a Outcome>,
    moving_threshold: f64,
) -> Result<Metrics, EvalError> {
    let (mut n, mut aborted, mut hits, mut front, mut moving) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for o in outcomes {
        if o.aborted.is_some() {
            aborted += 1;
            continue;
        }
        n += 1;
        if let Some(c) = &o.collision {
            hits += 1;
            front += (c.zone == Zone::Front) as usize;
            moving += (c.v_c > moving_threshold) as usize;
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let rate = |k: usize| k as f64 / n as f64;
    Ok(Metrics {
        n_episodes: n,
        n_aborted: aborted,
        collision_rate: rate(hits),
        collision_se: binomial_se(rate(hits), n),
        front_rate: rate(front),
        front_se: binomial_se(rate(front), n),
        moving_rate: rate(moving),
        moving_se: binomial_se(rate(moving), n),
        front_share: (hits > 0).then(|| front as f64 / hits as f64),
    })
}

pub fn metrics_of_logs(logs: &[EpisodeLog], moving_threshold: f64) -> Result<Metrics, EvalError> {
    compute_metrics(logs.iter().map(|l| &l.outcome), moving_threshold)
}

fn d_towns() -> Vec<String> {
    vec!["TownA".into(), "TownB".into()]
}
fn d_policies() -> Vec<DrivingPolicyId> {
    DrivingPolicyId::ALL.to_vec()
}
fn d_episodes() -> usize {
    100
}
fn d_true() -> bool {
    true
}
fn d_moving() -> f64 {
    MOVING_THRESHOLD
}
fn d_logs_per_cell() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "d_towns")]
    pub towns: Vec<String>,
    #[serde(default = "d_policies")]
    pub policies: Vec<DrivingPolicyId>,
    #[serde(default = "d_episodes")]
    pub episodes_per_cell: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Act at the Gaussian mean instead of sampling.
    #[serde(default = "d_true")]
    pub deterministic_policy: bool,
    #[serde(default = "d_moving")]
    pub moving_threshold: f64,
    /// Episode logs kept per cell (the first ones by seed).
    #[serde(default = "d_logs_per_cell")]
    pub logs_per_cell: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.episodes_per_cell == 0 {
            return Err(EvalError::Spec("episodes_per_cell must be at least 1".into()));
        }
        if self.towns.is_empty() || self.policies.is_empty() {
            return Err(EvalError::Spec("need at least one town and one policy".into()));
        }
        if !(self.moving_threshold >= 0.0) {
            return Err(EvalError::Spec("moving_threshold must be non-negative".into()));
        }
        Ok(())
    }

    /// Seed of episode `i` in cell `cell`; cells use disjoint consecutive blocks.
    pub fn seed_for(&self, cell: usize, i: usize) -> u64 {
        self.base_seed + (cell * self.episodes_per_cell + i) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub town: String,
    pub policy: DrivingPolicyId,
    /// Reward the evaluated env was configured with.
    pub reward_id: RewardId,
    pub seed: u64,
    pub collided: bool,
    pub zone: Option<Zone>,
    pub v_c: Option<f64>,
    pub episode_ticks: u32,
    /// Pedestrian return scored with the speed-shaped reward.
    pub pedestrian_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub town: String,
    pub policy: DrivingPolicyId,
    pub metrics: Metrics,
    pub mean_reward: f64,
    pub mean_reward_se: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CrossReport {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellReport>,
    /// Logs kept for replay and rendering.
    pub logs: Vec<EpisodeLog>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Evaluates `params` in every (town, policy) cell. `base` supplies all
/// other env settings. Episodes run in parallel; results keep seed order.
pub fn cross_matrix(spec: &EvalSpec, base: &EnvConfig, params: &PolicyParams) -> Result<CrossReport, EvalError> {
    spec.validate()?;
    let mut report = CrossReport::default();
    let mut cell = 0;
    for town in &spec.towns {
        for &policy in &spec.policies {
            let env = Env::new(EnvConfig {
                town: town.clone(),
                driving_policy: policy,
                ..base.clone()
            })?;
            let logs: Vec<EpisodeLog> = (0..spec.episodes_per_cell)
                .into_par_iter()
                .map(|i| run_episode(&env, params, spec.seed_for(cell, i), spec.deterministic_policy))
                .collect::<Result<_, _>>()?;
            let metrics = metrics_of_logs(&logs, spec.moving_threshold)?;
            let mut rewards = Vec::new();
            for log in &logs {
                if log.outcome.aborted.is_some() {
                    continue;
                }
                let c = log.outcome.collision;
                let r = reward_r2(c.as_ref());
                rewards.push(r);
                report.rows.push(ResultRow {
                    town: town.clone(),
                    policy,
                    reward_id: base.reward,
                    seed: log.header.env_seed,
                    collided: c.is_some(),
                    zone: c.map(|c| c.zone),
                    v_c: c.map(|c| c.v_c),
                    episode_ticks: log.outcome.ticks,
                    pedestrian_reward: r,
                });
            }
            let (mean_reward, mean_reward_se) = mean_se(&rewards);
            report.cells.push(CellReport {
                town: town.clone(),
                policy,
                metrics,
                mean_reward,
                mean_reward_se,
            });
            report.logs.extend(logs.into_iter().take(spec.logs_per_cell));
            cell += 1;
        }
    }
    Ok(report)
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv(path: &Path, cells: &[CellReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "town",
        "policy",
        "n",
        "collision_rate",
        "se",
        "front_rate",
        "se",
        "moving_rate",
        "se",
        "mean_reward",
        "se",
    ])?;
    for c in cells {
        let m = &c.metrics;
        w.write_record([
            c.town.clone(),
            c.policy.as_str().to_string(),
            m.n_episodes.to_string(),
            m.collision_rate.to_string(),
            m.collision_se.to_string(),
            m.front_rate.to_string(),
            m.front_se.to_string(),
            m.moving_rate.to_string(),
            m.moving_se.to_string(),
            c.mean_reward.to_string(),
            c.mean_reward_se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table of the aggregate rows.
pub fn format_table(cells: &[CellReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<10} {:>5}  {:>13}  {:>13}  {:>13}  {:>13}",
        "town", "policy", "n", "collision", "front", "moving", "ped. reward"
    );
    for c in cells {
        let m = &c.metrics;
        let _ = writeln!(
            s,
            "{:<8} {:<10} {:>5}  {:>5.2} ± {:<5.2}  {:>5.2} ± {:<5.2}  {:>5.2} ± {:<5.2}  {:>5.2} ± {:<5.2}",
            c.town,
            c.policy.as_str(),
            m.n_episodes,
            m.collision_rate,
            m.collision_se,
            m.front_rate,
            m.front_se,
            m.moving_rate,
            m.moving_se,
            c.mean_reward,
            c.mean_reward_se
        );
    }
    s
}

/// Writes results.csv, aggregate.csv, table.txt and the kept logs under `dir/logs`.
pub fn write_report(dir: &Path, report: &CrossReport) -> Result<(), EvalError> {
    fs::create_dir_all(dir.join("logs"))?;
    write_results_csv(&dir.join("results.csv"), &report.rows)?;
    write_aggregate_csv(&dir.join("aggregate.csv"), &report.cells)?;
    fs::write(dir.join("table.txt"), format_table(&report.cells))?;
    for log in &report.logs {
        let h = &log.header;
        let name = format!("{}_{}_{}.jsonl", h.town, h.policy.as_str(), h.env_seed);
        log.write(&dir.join("logs").join(name))?;
    }
    Ok(())
}

/// Draws the town, the vehicle every 10 ticks, the pedestrian path with a
/// heading arrow at each decision and a marker at the collision point.
pub fn render_svg(log: &EpisodeLog, path: &Path) -> Result<(), EvalError> {
    let map = build_town(&log.header.town).map_err(EnvError::from)?;
    let svg = svg_document(log, &map);
    let mut f = fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

pub fn svg_document(log: &EpisodeLog, map: &TownMap) -> String {
    let b = &map.walkable_bounds;
    // world y grows upward; flip into SVG coordinates
    let tx = |x: f64| x - b.min_x;
    let ty = |y: f64| b.max_y - y;
    let pt = |x: f64, y: f64| format!("{:.3},{:.3}", tx(x), ty(y));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {:.3} {:.3}" width="{:.0}" height="{:.0}">"#,
        b.width(),
        b.height(),
        b.width() * 4.0,
        b.height() * 4.0
    );
    s.push_str(concat!(
        r#"<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="4" markerHeight="4" orient="auto">"#,
        r##"<path d="M0,0 L10,5 L0,10 z" fill="#d62728"/></marker></defs>"##,
        "\n"
    ));
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{:.3}" height="{:.3}" fill="#f4f4ef"/>"##, b.width(), b.height());

    s.push_str(r#"<g id="lanes" fill="none" stroke-linejoin="round" stroke-linecap="round">"#);
    s.push('\n');
    for lane in &map.lanes {
        let pts: Vec<String> = lane.points.iter().map(|p| pt(p.x, p.y)).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" stroke="#c8c8c8" stroke-width="{:.3}"/>"##,
            pts.join(" "),
            lane.width
        );
    }
    for lane in &map.lanes {
        let pts: Vec<String> = lane.points.iter().map(|p| pt(p.x, p.y)).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" stroke="#ffffff" stroke-width="0.2" stroke-dasharray="1,1"/>"##,
            pts.join(" ")
        );
    }
    s.push_str("</g>\n");

    s.push_str(r#"<g id="obstacles">"#);
    s.push('\n');
    for o in &map.static_obstacles {
        let pts: Vec<String> = o.corners().iter().map(|c| pt(c.x, c.y)).collect();
        let _ = writeln!(s, r##"<polygon points="{}" fill="#8c8c8c"/>"##, pts.join(" "));
    }
    s.push_str("</g>\n");

    s.push_str(r#"<g id="vehicle">"#);
    s.push('\n');
    for row in log.ticks.iter().filter(|r| r.tick % 10 == 0) {
        let fp = OrientedBox {
            center: row.vehicle_pose(),
            half_length: crate::agents::VEHICLE_HALF_LENGTH,
            half_width: crate::agents::VEHICLE_HALF_WIDTH,
        };
        let pts: Vec<String> = fp.corners().iter().map(|c| pt(c.x, c.y)).collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="#1f77b4" stroke-width="0.1"/>"##,
            pts.join(" ")
        );
    }
    s.push_str("</g>\n");

    let path: Vec<String> = log.ticks.iter().map(|r| pt(r.px, r.py)).collect();
    let _ = writeln!(
        s,
        r##"<polyline id="pedestrian" points="{}" fill="none" stroke="#d62728" stroke-width="0.3"/>"##,
        path.join(" ")
    );

    s.push_str(r#"<g id="decisions">"#);
    s.push('\n');
    for d in &log.decisions {
        let Some(row) = log.ticks.get(d.tick as usize) else {
            continue;
        };
        let heading = row.p_heading + d.action.theta;
        let len = 1.0 + d.action.speed;
        let (x2, y2) = (row.px + len * heading.cos(), row.py + len * heading.sin());
        let _ = writeln!(
            s,
            r##"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="#d62728" stroke-width="0.25" marker-end="url(#arrow)"/>"##,
            tx(row.px),
            ty(row.py),
            tx(x2),
            ty(y2)
        );
    }
    s.push_str("</g>\n");

    if let (Some(_), Some(last)) = (log.outcome.collision, log.ticks.last()) {
        let _ = writeln!(
            s,
            r##"<circle id="collision" cx="{:.3}" cy="{:.3}" r="1.5" fill="none" stroke="#000000" stroke-width="0.4"/>"##,
            tx(last.px),
            ty(last.py)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{VehicleState, VEHICLE_HALF_LENGTH};
    use crate::geom::wrap_angle;
    use proptest::prelude::*;

    fn outcome(collision: Option<(Zone, f64)>) -> Outcome {
        Outcome {
            collision: collision.map(|(zone, v_c)| CollisionEvent { zone, v_c, tick: 10 }),
            ticks: 10,
            decisions: 1,
            reward: 0.0,
            aborted: None,
        }
    }

    #[test]
    fn metrics_counting() {
        let mut o = Vec::new();
        for i in 0..10 {
            o.push(match i {
                0..=4 => outcome(Some((Zone::Front, 3.0))),
                5..=7 => outcome(Some((Zone::Front, 0.2))),
                8 => outcome(Some((Zone::Side, 0.0))),
                _ => outcome(None),
            });
        }
        let m = compute_metrics(&o, 0.5).unwrap();
        assert_eq!((m.collision_rate, m.front_rate, m.moving_rate), (0.9, 0.8, 0.5));
        assert_eq!(m.n_episodes, 10);
        assert!((m.collision_se - (0.9f64 * 0.1 / 10.0).sqrt()).abs() < 1e-15);
        assert!((m.front_share.unwrap() - 8.0 / 9.0).abs() < 1e-15);

        let clean: Vec<Outcome> = (0..5).map(|_| outcome(None)).collect();
        let m = compute_metrics(&clean, 0.5).unwrap();
        assert_eq!((m.collision_rate, m.front_rate, m.moving_rate), (0.0, 0.0, 0.0));
        assert_eq!(m.front_share, None);
        assert!(matches!(compute_metrics(&[], 0.5), Err(EvalError::Empty)));

        let mut aborted = outcome(None);
        aborted.aborted = Some("reset failed".into());
        let m = compute_metrics(&[outcome(Some((Zone::Rear, 1.0))), aborted], 0.5).unwrap();
        assert_eq!((m.n_episodes, m.n_aborted, m.collision_rate), (1, 1, 1.0));
    }

    fn zone_strategy() -> impl Strategy<Value = Option<(Zone, f64)>> {
        prop_oneof![
            Just(None),
            (prop_oneof![Just(Zone::Front), Just(Zone::Side), Just(Zone::Rear)], 0.0..15.0f64).prop_map(Some),
        ]
    }

    proptest! {
        #[test]
        fn metrics_invariants(events in prop::collection::vec(zone_strategy(), 1..60)) {
            let o: Vec<Outcome> = events.iter().map(|e| outcome(*e)).collect();
            let m = compute_metrics(&o, 0.5).unwrap();
            prop_assert!(m.front_rate <= m.collision_rate && m.moving_rate <= m.collision_rate);
            for r in [m.collision_rate, m.front_rate, m.moving_rate] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            let mut more = o.clone();
            more.push(outcome(None));
            let m2 = compute_metrics(&more, 0.5).unwrap();
            prop_assert!(m2.collision_rate <= m.collision_rate);
            prop_assert!(m2.front_rate <= m.front_rate);
            prop_assert!(m2.moving_rate <= m.moving_rate);
        }
    }

    fn env(policy: DrivingPolicyId) -> Env {
        Env::new(EnvConfig {
            driving_policy: policy,
            ..Default::default()
        })
        .unwrap()
    }

    fn params() -> PolicyParams {
        PolicyParams::init(16, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn episodes_are_reproducible_and_well_formed() {
        let e = env(DrivingPolicyId::Baseline);
        let p = params();
        for det in [true, false] {
            let a = run_episode(&e, &p, 17, det).unwrap();
            let b = run_episode(&e, &p, 17, det).unwrap();
            assert_eq!(a.to_jsonl(), b.to_jsonl());
            assert!(a.outcome.ticks <= 600);
            assert_eq!(a.ticks.len() as u32, a.outcome.ticks + 1);
            a.check_structure().unwrap();
            if a.outcome.collision.is_none() {
                assert_eq!(a.outcome.ticks, 20 * a.decisions.len() as u32);
            }
            let back = EpisodeLog::from_jsonl(&a.to_jsonl()).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn scripted_intercept_hits_oblivious_vehicle() {
        let e = env(DrivingPolicyId::Oblivious);
        let (mut hits, mut feasible) = (0, 0);
        for seed in 0..80 {
            // Stand on the route at the first point the pedestrian can reach
            // before the vehicle's front could: the vehicle needs at least the
            // time of a 3 m/s² ramp to 8.5 m/s followed by cruising.
            let earliest = |dist: f64| {
                let ramp = 8.5f64 * 8.5 / (2.0 * 3.0);
                if dist <= ramp {
                    (2.0 * dist / 3.0).sqrt()
                } else {
                    8.5 / 3.0 + (dist - ramp) / 8.5
                }
            };
            // goals within 120 m are passed well before the episode ends
            let intercept = |s: &EnvState| {
                (1..120)
                    .map(|k| s.route.point_at(s.vehicle.route_progress + VEHICLE_HALF_LENGTH + k as f64))
                    .enumerate()
                    .find(|(k, q)| q.distance(s.pedestrian.position) / 3.5 + 1.0 < earliest(*k as f64 + 1.0 - 0.35))
                    .map(|(_, q)| q)
            };
            let (s0, _) = e.reset(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let Some(goal) = intercept(&s0) else {
                continue;
            };
            let mut actor = |s: &EnvState, _: &Observation| {
                let to = goal - s.pedestrian.position;
                let turn = wrap_angle(to.angle() - s.pedestrian.heading).unwrap();
                PedestrianAction::new(turn, to.norm().min(3.5))
            };
            let log = run_episode_with(&e, seed, &mut actor).unwrap();
            feasible += 1;
            hits += log.outcome.collision.is_some() as usize;
        }
        assert!(feasible >= 20, "{feasible}");
        assert_eq!(hits, feasible);
    }

    #[test]
    fn replay_detects_tampering_and_config_changes() {
        let e = env(DrivingPolicyId::Baseline);
        let log = run_episode(&e, &params(), 4, false).unwrap();
        assert_eq!(replay(&log).unwrap(), ReplayVerdict::Pass);

        let mut bad = log.clone();
        bad.ticks[37].vx += 1e-12;
        assert_eq!(
            replay(&bad).unwrap(),
            ReplayVerdict::Diverged {
                tick: 37,
                field: "vx".into()
            }
        );

        let mut cfg = log.header.env.clone();
        cfg.driving.baseline.time_gap += 0.1;
        assert!(matches!(
            replay_with_config(&log, &cfg).unwrap(),
            ReplayVerdict::ConfigMismatch { .. }
        ));
        let mut edited = log.clone();
        edited.header.env = cfg;
        assert!(matches!(replay(&edited).unwrap(), ReplayVerdict::ConfigMismatch { .. }));
    }

    #[test]
    fn malformed_logs_are_rejected() {
        let e = env(DrivingPolicyId::Cautious);
        let text = run_episode(&e, &params(), 1, true).unwrap().to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert!(EpisodeLog::from_jsonl(&lines[1..].join("\n")).is_err());
        assert!(EpisodeLog::from_jsonl(&lines[..lines.len() - 1].join("\n")).is_err());
        let mut skipped = lines.clone();
        skipped.remove(5);
        assert!(EpisodeLog::from_jsonl(&skipped.join("\n")).is_err());
        assert!(EpisodeLog::from_jsonl("{\"kind\":\"nope\"}").is_err());
    }

    #[test]
    fn cross_matrix_cardinality_and_seed_blocks() {
        let spec = EvalSpec {
            episodes_per_cell: 4,
            base_seed: 100,
            logs_per_cell: 1,
            ..Default::default()
        };
        let r = cross_matrix(&spec, &EnvConfig::default(), &params()).unwrap();
        assert_eq!(r.rows.len(), 24);
        assert_eq!(r.cells.len(), 6);
        assert_eq!(r.logs.len(), 6);
        let mut seeds: Vec<u64> = r.rows.iter().map(|x| x.seed).collect();
        assert_eq!(seeds[..4], [100, 101, 102, 103]);
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 24);
        for row in &r.rows {
            assert_eq!(row.pedestrian_reward, reward_r2(row.zone.map(|zone| CollisionEvent { zone, v_c: row.v_c.unwrap(), tick: 0 }).as_ref()));
        }

        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &r).unwrap();
        let again = cross_matrix(&spec, &EnvConfig::default(), &params()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_report(dir2.path(), &again).unwrap();
        for f in ["results.csv", "aggregate.csv", "table.txt"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
        let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(
            agg.lines().next().unwrap(),
            "town,policy,n,collision_rate,se,front_rate,se,moving_rate,se,mean_reward,se"
        );
        let res = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(
            res.lines().next().unwrap(),
            "town,policy,reward_id,seed,collided,zone,v_c,episode_ticks,pedestrian_reward"
        );
        assert!(EvalSpec {
            episodes_per_cell: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let e = env(DrivingPolicyId::Oblivious);
        let dir = tempfile::tempdir().unwrap();
        // a collision episode: pedestrian placed on the road ahead, standing still
        let mut hit = None;
        for seed in 0..50 {
            let mut wait = |_: &EnvState, _: &Observation| PedestrianAction::new(0.0, 0.0);
            let log = run_episode_with(&e, seed, &mut wait).unwrap();
            if log.outcome.collision.is_some() {
                hit = Some(log);
                break;
            }
        }
        let hit = hit.expect("some spawn lies on the route");
        let miss = run_episode(&e, &params(), 3, true).unwrap();
        for (log, markers) in [(&hit, 1), (&miss, miss.outcome.collision.is_some() as usize)] {
            let p = dir.path().join("a.svg");
            render_svg(log, &p).unwrap();
            let text = fs::read_to_string(&p).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            let n = doc.descendants().filter(|n| n.attribute("id") == Some("collision")).count();
            assert_eq!(n, markers);
            let arrows = doc.descendants().filter(|n| n.has_tag_name("line")).count();
            assert_eq!(arrows, log.decisions.len());
            render_svg(log, &dir.path().join("b.svg")).unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("b.svg")).unwrap());
        }
        assert!(render_svg(&hit, &dir.path().join("missing/dir/x.svg")).is_err());
        let _ = VehicleState {
            pose: Pose2D::default(),
            speed: 0.0,
            route_progress: 0.0,
        };
    }
}
