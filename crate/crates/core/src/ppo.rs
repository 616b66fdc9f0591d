//! PPO trainer for the pedestrian policy.
//!
//! One training step is one pedestrian decision. Each update collects
//! `steps_per_update` decisions from a single environment, computes GAE
//! advantages and runs `epochs` passes of shuffled minibatch Adam steps on
//! the clipped-surrogate loss.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{Env, EnvConfig, EnvError, EnvState, Observation};
use crate::nn::{
    adam_step, gaussian_entropy, policy_sample, to_env_action, value, AdamState, NnError, PolicyParams,
    ACT_DIM, HIDDEN, LOG_STD_MAX, LOG_STD_MIN, OBS_DIM,
};

/// RNG stream ids derived from the trainer seed.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid ppo config: {0}")]
    Config(String),
    #[error("non-finite loss at update {update}, epoch {epoch}")]
    NonFiniteLoss { update: usize, epoch: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn d_total_steps() -> usize {
    70_000
}
fn d_epochs() -> usize {
    10
}
fn d_steps_per_update() -> usize {
    150
}
fn d_batch_size() -> usize {
    64
}
fn d_lr() -> f64 {
    3e-4
}
fn d_gamma() -> f64 {
    0.98
}
fn d_lambda() -> f64 {
    0.95
}
fn d_clip() -> f64 {
    0.2
}
fn d_value_coef() -> f64 {
    0.5
}
fn d_entropy_coef() -> f64 {
    0.01
}
fn d_hidden() -> usize {
    HIDDEN
}
fn d_checkpoint_every() -> usize {
    50
}
fn d_log_std_init() -> [f64; 2] {
    // half-widths of the action box: pi rad and 1.75 m/s
    [-std::f64::consts::PI.ln(), -(crate::agents::MAX_PEDESTRIAN_SPEED / 2.0).ln()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_steps_per_update")]
    pub steps_per_update: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default = "d_value_coef")]
    pub value_coef: f64,
    #[serde(default = "d_entropy_coef")]
    pub entropy_coef: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    /// Write a checkpoint every this many updates (0 = only at the end).
    #[serde(default = "d_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Initial policy log-std per action dimension, in normalized units.
    /// The default is a unit std in physical units (1 rad, 1 m/s).
    #[serde(default = "d_log_std_init")]
    pub log_std_init: [f64; 2],
}

impl Default for PpoConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if self.total_steps == 0 || self.epochs == 0 || self.steps_per_update == 0 || self.batch_size == 0 {
            return bad("step counts must be positive");
        }
        if self.log_std_init.iter().any(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(v)) {
            return bad("log_std_init outside the clamp range");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if !(self.lr > 0.0 && self.value_coef > 0.0 && self.entropy_coef >= 0.0) {
            return bad("coefficients must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma must be in (0, 1] and lambda in [0, 1]");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must be in (0, 1)");
        }
        Ok(())
    }

    pub fn n_updates(&self) -> usize {
        self.total_steps.div_ceil(self.steps_per_update)
    }
}

/// One recorded decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub raw: [f64; ACT_DIM],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// The episode ended after this decision (collision or time limit).
    pub done: bool,
    /// Value of the following state used in the TD error: the next stored
    /// value inside an episode, V(s_next) on truncation or at the end of the
    /// buffer, 0 after a collision.
    pub next_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<Transition>,
    /// (return, length in decisions) of every episode finished in this rollout.
    pub episodes: Vec<(f64, usize)>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Recursive GAE. Returns (advantages, returns) before standardization.
pub fn compute_gae(buf: &[Transition], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = vec![0.0; buf.len()];
    let mut next_adv = 0.0;
    for t in (0..buf.len()).rev() {
        let s = &buf[t];
        let delta = s.reward + gamma * s.next_value - s.value;
        let carry = if s.done { 0.0 } else { next_adv };
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    let ret = adv.iter().zip(buf).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0, std 1 (population std, eps 1e-8).
pub fn standardize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    for v in x {
        *v = (*v - mean) / sd;
    }
}

/// Drives one environment with the current policy across updates; an
/// unfinished episode carries over into the next rollout.
#[derive(Debug)]
pub struct Collector {
    env: Env,
    env_rng: ChaCha8Rng,
    state: EnvState,
    obs: Observation,
    ep_return: f64,
    ep_len: usize,
}

impl Collector {
    pub fn new(env: Env, seed: u64) -> Result<Self, PpoError> {
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, obs) = env.reset(&mut env_rng)?;
        Ok(Self {
            env,
            env_rng,
            state,
            obs,
            ep_return: 0.0,
            ep_len: 0,
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn collect<R: Rng + ?Sized>(
        &mut self,
        params: &PolicyParams,
        n: usize,
        rng: &mut R,
    ) -> Result<RolloutBuffer, PpoError> {
        let mut buf = RolloutBuffer::default();
        for i in 0..n {
            let x = self.obs.normalized();
            let v = value(params, &x)?;
            let sample = policy_sample(params, &x, rng)?;
            let out = self.env.step(&self.state, to_env_action(&sample.raw))?;
            self.ep_return += out.reward;
            self.ep_len += 1;
            let next_x = out.observation.normalized();
            let next_value = if out.collision.is_some() {
                0.0
            } else if out.done || i + 1 == n {
                value(params, &next_x)?
            } else {
                f64::NAN // filled from the next step's value below
            };
            buf.steps.push(Transition {
                obs: x,
                raw: sample.raw,
                log_prob: sample.log_prob,
                value: v,
                reward: out.reward,
                done: out.done,
                next_value,
            });
            if out.done {
                buf.episodes.push((self.ep_return, self.ep_len));
                self.ep_return = 0.0;
                self.ep_len = 0;
                let (s, o) = self.env.reset(&mut self.env_rng)?;
                self.state = s;
                self.obs = o;
            } else {
                self.state = out.state;
                self.obs = out.observation;
            }
        }
        for t in 0..buf.steps.len().saturating_sub(1) {
            if buf.steps[t].next_value.is_nan() {
                buf.steps[t].next_value = buf.steps[t + 1].value;
            }
        }
        Ok(buf)
    }
}

/// One training sample after advantage estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub obs: [f64; OBS_DIM],
    pub raw: [f64; ACT_DIM],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    /// Mean squared value error (before the coefficient).
    pub value: f64,
    /// Mean policy entropy.
    pub entropy: f64,
    pub clip_frac: f64,
}

/// Clipped surrogate for one sample: min(ρA, clip(ρ, 1−ε, 1+ε)A).
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// PPO loss over a minibatch and its exact gradient w.r.t. every parameter.
pub fn minibatch_loss_and_grad(
    params: &PolicyParams,
    batch: &[Sample],
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<(LossParts, Vec<f64>), NnError> {
    let actor = PolicyParams::actor_net(params.hidden);
    let critic = PolicyParams::critic_net(params.hidden);
    let log_std = params.log_std();
    let sigma = [log_std[0].exp(), log_std[1].exp()];
    let n = batch.len() as f64;

    let mut grad = vec![0.0; params.flat.len()];
    let (g_actor, g_log_std, g_critic) = params.split_mut(&mut grad);
    let mut parts = LossParts::default();

    for s in batch {
        let (mean, mut tape) = actor.forward_tape(params.actor(), &s.obs)?;
        let z = [(s.raw[0] - mean[0]) / sigma[0], (s.raw[1] - mean[1]) / sigma[1]];
        let log_prob = crate::nn::gaussian_log_prob(&[mean[0], mean[1]], &log_std, &s.raw);
        let ratio = (log_prob - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let surrogate = clipped_surrogate(ratio, s.advantage, clip);
        parts.policy -= surrogate / n;
        if (ratio - 1.0).abs() > clip {
            parts.clip_frac += 1.0 / n;
        }
        // gradient flows only through the unclipped branch when it is the minimum
        let d_logp = if unclipped <= surrogate { -unclipped / n } else { 0.0 };
        let d_mean: Vec<f64> = (0..ACT_DIM).map(|k| d_logp * z[k] / sigma[k]).collect();
        for k in 0..ACT_DIM {
            g_log_std[k] += d_logp * (z[k] * z[k] - 1.0);
        }
        actor.backward(params.actor(), &mut tape, &d_mean, g_actor)?;

        let (v, mut tape) = critic.forward_tape(params.critic(), &s.obs)?;
        let err = v[0] - s.ret;
        parts.value += err * err / n;
        critic.backward(params.critic(), &mut tape, &[2.0 * value_coef * err / n], g_critic)?;
    }
    parts.entropy = gaussian_entropy(&log_std);
    for g in g_log_std.iter_mut() {
        *g -= entropy_coef;
    }
    parts.total = parts.policy + value_coef * parts.value - entropy_coef * parts.entropy;
    Ok((parts, grad))
}

/// Loss of a minibatch without gradients (for finite-difference checks).
pub fn minibatch_loss(
    params: &PolicyParams,
    batch: &[Sample],
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<f64, NnError> {
    let log_std = params.log_std();
    let n = batch.len() as f64;
    let mut total = -entropy_coef * gaussian_entropy(&log_std);
    for s in batch {
        let mean = crate::nn::policy_mean(params, &s.obs)?;
        let ratio = (crate::nn::gaussian_log_prob(&mean, &log_std, &s.raw) - s.old_log_prob).exp();
        total -= clipped_surrogate(ratio, s.advantage, clip) / n;
        let v = value(params, &s.obs)?;
        total += value_coef * (v - s.ret).powi(2) / n;
    }
    Ok(total)
}

/// Turns a rollout into training samples with standardized advantages.
pub fn prepare_samples(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> Vec<Sample> {
    let (mut adv, ret) = compute_gae(&buf.steps, gamma, lambda);
    standardize(&mut adv);
    buf.steps
        .iter()
        .zip(adv.iter().zip(&ret))
        .map(|(t, (a, r))| Sample {
            obs: t.obs,
            raw: t.raw,
            old_log_prob: t.log_prob,
            advantage: *a,
            ret: *r,
        })
        .collect()
}

/// Optimization statistics averaged over all minibatches of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

/// `epochs` passes of shuffled minibatch Adam steps.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    adam: &mut AdamState,
    samples: &[Sample],
    cfg: &PpoConfig,
    rng: &mut R,
    update_index: usize,
) -> Result<UpdateLosses, PpoError> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut acc = UpdateLosses::default();
    let mut count = 0.0;
    for epoch in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let (parts, grad) =
                minibatch_loss_and_grad(params, &batch, cfg.clip, cfg.value_coef, cfg.entropy_coef)?;
            if !parts.total.is_finite() {
                return Err(PpoError::NonFiniteLoss {
                    update: update_index,
                    epoch,
                });
            }
            adam_step(&mut params.flat, &grad, adam)?;
            params.clamp_log_std();
            acc.policy_loss += parts.policy;
            acc.value_loss += parts.value;
            acc.entropy += parts.entropy;
            acc.clip_frac += parts.clip_frac;
            count += 1.0;
        }
    }
    acc.policy_loss /= count;
    acc.value_loss /= count;
    acc.entropy /= count;
    acc.clip_frac /= count;
    Ok(acc)
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub update: usize,
    pub steps: usize,
    /// Mean return of episodes finished during this rollout (empty if none).
    pub mean_reward: Option<f64>,
    pub mean_ep_len: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

pub fn write_stats_csv(path: &Path, stats: &[TrainStats]) -> Result<(), PpoError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Full training state.
#[derive(Debug)]
pub struct Trainer {
    pub env_cfg: EnvConfig,
    pub cfg: PpoConfig,
    pub params: PolicyParams,
    adam: AdamState,
    collector: Collector,
    sample_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    updates_done: usize,
    steps_done: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(env_cfg: EnvConfig, cfg: PpoConfig) -> Result<Self, PpoError> {
        cfg.validate()?;
        let env = Env::new(env_cfg.clone())?;
        let mut params = PolicyParams::init(cfg.hidden, &mut stream(cfg.seed, STREAM_INIT));
        params.set_log_std(cfg.log_std_init);
        let adam = AdamState::new(params.flat.len(), cfg.lr);
        Ok(Self {
            collector: Collector::new(env, env_cfg.seed)?,
            env_cfg,
            params,
            adam,
            sample_rng: stream(cfg.seed, STREAM_SAMPLE),
            shuffle_rng: stream(cfg.seed, STREAM_SHUFFLE),
            updates_done: 0,
            steps_done: 0,
            cfg,
        })
    }

    pub fn updates_done(&self) -> usize {
        self.updates_done
    }

    pub fn finished(&self) -> bool {
        self.updates_done >= self.cfg.n_updates()
    }

    /// Collects one rollout and optimizes on it.
    pub fn update(&mut self) -> Result<TrainStats, PpoError> {
        let buf = self
            .collector
            .collect(&self.params, self.cfg.steps_per_update, &mut self.sample_rng)?;
        let samples = prepare_samples(&buf, self.cfg.gamma, self.cfg.gae_lambda);
        self.updates_done += 1;
        self.steps_done += buf.len();
        let losses = ppo_update(
            &mut self.params,
            &mut self.adam,
            &samples,
            &self.cfg,
            &mut self.shuffle_rng,
            self.updates_done,
        )?;
        let n_ep = buf.episodes.len() as f64;
        let mean = |f: fn(&(f64, usize)) -> f64| (n_ep > 0.0).then(|| buf.episodes.iter().map(f).sum::<f64>() / n_ep);
        Ok(TrainStats {
            update: self.updates_done,
            steps: self.steps_done,
            mean_reward: mean(|e| e.0),
            mean_ep_len: mean(|e| e.1 as f64),
            policy_loss: losses.policy_loss,
            value_loss: losses.value_loss,
            entropy: losses.entropy,
            clip_frac: losses.clip_frac,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub env_seed: u64,
    pub ppo_seed: u64,
    pub config_hash: String,
    pub updates: usize,
    pub steps: usize,
    pub final_checkpoint: String,
    pub checkpoints: Vec<String>,
}

/// SHA-256 of the canonical JSON of both configs.
pub fn training_hash(env_cfg: &EnvConfig, cfg: &PpoConfig) -> String {
    let doc = serde_json::json!({ "env": env_cfg, "ppo": cfg });
    hex::encode(Sha256::digest(serde_json::to_vec(&doc).expect("configs serialize")))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub stats: Vec<TrainStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs every update. With `out_dir`, writes periodic and final
/// checkpoints, `stats.csv` and `manifest.json` there.
pub fn train(
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&TrainStats),
) -> Result<TrainOutput, PpoError> {
    let mut trainer = Trainer::new(env_cfg.clone(), cfg.clone())?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut stats = Vec::with_capacity(cfg.n_updates());
    let mut checkpoints = Vec::new();
    while !trainer.finished() {
        let s = trainer.update()?;
        progress(&s);
        stats.push(s);
        let u = trainer.updates_done();
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && u % cfg.checkpoint_every == 0 {
                let p = d.join(format!("checkpoint_{u:05}.json"));
                trainer.params.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(d) = out_dir {
        let final_path = d.join("final.json");
        trainer.params.save(&final_path)?;
        checkpoints.push(final_path.clone());
        write_stats_csv(&d.join("stats.csv"), &stats)?;
        let name = |p: &PathBuf| p.file_name().unwrap().to_string_lossy().into_owned();
        let manifest = TrainManifest {
            env_seed: env_cfg.seed,
            ppo_seed: cfg.seed,
            config_hash: training_hash(env_cfg, cfg),
            updates: trainer.updates_done(),
            steps: trainer.steps_done,
            final_checkpoint: name(&final_path),
            checkpoints: checkpoints.iter().map(name).collect(),
        };
        fs::write(
            d.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
    }
    Ok(TrainOutput {
        params: trainer.params,
        stats,
        checkpoints,
    })
}
