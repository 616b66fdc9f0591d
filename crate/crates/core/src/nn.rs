//! Actor-critic network core.
//!
//! Parameters live in flat `f64` vectors. Each layer stores its weights
//! row-major as `[out][in]` followed by its `out` biases; layers are
//! concatenated from input to output. Hidden layers use tanh, the output
//! layer is linear.
//!
//! [`PolicyParams`] concatenates actor, `log_std` and critic in that order,
//! and gradient buffers share the same layout.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::MAX_PEDESTRIAN_SPEED;
use crate::env::PedestrianAction;

pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;
pub const HIDDEN: usize = 64;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const CHECKPOINT_FORMAT: &str = "pedsim-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// ½·ln(2πe), the entropy of a unit normal.
const HALF_LOG_2PI_E: f64 = 1.4189385332046727;
/// ½·ln(2π).
const HALF_LOG_2PI: f64 = 0.9189385332046727;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

fn check_dim(expected: usize, got: usize) -> Result<(), NnError> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::Dim { expected, got })
    }
}

/// Layer widths of a fully connected network, input first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

/// Intermediates of one forward pass: the input and every layer's output
/// (post-activation for hidden layers).
#[derive(Debug, Clone)]
pub struct GradTape {
    acts: Vec<Vec<f64>>,
    consumed: bool,
}

impl GradTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has input")
    }
}

impl Mlp {
    pub fn new(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Self {
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn run(&self, w: &[f64], x: &[f64], mut tape: Option<&mut Vec<Vec<f64>>>) -> Result<Vec<f64>, NnError> {
        check_dim(self.n_params(), w.len())?;
        check_dim(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        let mut off = 0;
        for (l, dims) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (dims[0], dims[1]);
            let weights = &w[off..off + n_out * n_in];
            let bias = &w[off + n_out * n_in..off + n_out * n_in + n_out];
            off += n_out * n_in + n_out;
            let last = l + 1 == self.n_layers();
            let next: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &weights[j * n_in..(j + 1) * n_in];
                    let z = bias[j] + row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            if let Some(t) = tape.as_deref_mut() {
                t.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        if let Some(t) = tape {
            t.push(cur.clone());
        }
        Ok(cur)
    }

    /// Forward pass without recording.
    pub fn forward(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.run(w, x, None)
    }

    pub fn forward_tape(&self, w: &[f64], x: &[f64]) -> Result<(Vec<f64>, GradTape), NnError> {
        let mut acts = Vec::with_capacity(self.sizes.len());
        let out = self.run(w, x, Some(&mut acts))?;
        Ok((
            out,
            GradTape {
                acts,
                consumed: false,
            },
        ))
    }

    /// Back-propagates `d_out` (gradient of a scalar loss w.r.t. the output),
    /// adding parameter gradients into `grad`. Returns the input gradient.
    pub fn backward(
        &self,
        w: &[f64],
        tape: &mut GradTape,
        d_out: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if tape.consumed {
            return Err(NnError::TapeConsumed);
        }
        check_dim(self.n_params(), w.len())?;
        check_dim(self.n_params(), grad.len())?;
        check_dim(self.output_dim(), d_out.len())?;
        tape.consumed = true;
        let acts = std::mem::take(&mut tape.acts);

        let mut delta = d_out.to_vec();
        let mut off = self.n_params();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            off -= n_out * n_in + n_out;
            if l + 1 != self.n_layers() {
                // through tanh: d/dz = 1 - y²
                for (d, y) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &acts[l];
            let (gw, gb) = grad[off..off + n_out * n_in + n_out].split_at_mut(n_out * n_in);
            let weights = &w[off..off + n_out * n_in];
            let mut d_in = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                gb[j] += dj;
                let grow = &mut gw[j * n_in..(j + 1) * n_in];
                let wrow = &weights[j * n_in..(j + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += dj * input[i];
                    d_in[i] += dj * wrow[i];
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }

    /// Orthogonal weights scaled by `hidden_gain` (hidden layers) or
    /// `out_gain` (last layer); zero biases.
    pub fn init_orthogonal<R: Rng + ?Sized>(&self, rng: &mut R, hidden_gain: f64, out_gain: f64) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_params());
        for (l, dims) in self.sizes.windows(2).enumerate() {
            let gain = if l + 1 == self.n_layers() { out_gain } else { hidden_gain };
            w.extend(orthogonal(dims[1], dims[0], gain, rng));
            w.extend(std::iter::repeat_n(0.0, dims[1]));
        }
        w
    }
}

/// A `rows × cols` matrix (row-major) with orthonormal rows or columns,
/// whichever is fewer, times `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m column vectors of length n, orthonormalized by modified Gram–Schmidt
    let mut q: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for k in 0..m {
        for j in 0..k {
            let (done, rest) = q.split_at_mut(k);
            let r: f64 = done[j].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (x, y) in rest[0].iter_mut().zip(&done[j]) {
                *x -= r * y;
            }
        }
        let norm = q[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut q[k] {
            *x /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { q[c][r] } else { q[r][c] };
        }
    }
    out
}

/// Actor, state-independent `log_std` and critic in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub hidden: usize,
    pub flat: Vec<f64>,
}

impl PolicyParams {
    pub fn actor_net(hidden: usize) -> Mlp {
        Mlp::new(&[OBS_DIM, hidden, hidden, ACT_DIM])
    }

    pub fn critic_net(hidden: usize) -> Mlp {
        Mlp::new(&[OBS_DIM, hidden, hidden, 1])
    }

    pub fn len_for(hidden: usize) -> usize {
        Self::actor_net(hidden).n_params() + ACT_DIM + Self::critic_net(hidden).n_params()
    }

    /// Orthogonal init: gain √2 on hidden layers, 0.01 on the policy output,
    /// 1 on the value output; `log_std` = 0.
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut flat = Self::actor_net(hidden).init_orthogonal(rng, 2f64.sqrt(), 0.01);
        flat.extend([0.0; ACT_DIM]);
        flat.extend(Self::critic_net(hidden).init_orthogonal(rng, 2f64.sqrt(), 1.0));
        Self { hidden, flat }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            flat: vec![0.0; Self::len_for(hidden)],
        }
    }

    fn actor_len(&self) -> usize {
        Self::actor_net(self.hidden).n_params()
    }

    pub fn actor(&self) -> &[f64] {
        &self.flat[..self.actor_len()]
    }

    pub fn log_std(&self) -> [f64; ACT_DIM] {
        let a = self.actor_len();
        [self.flat[a], self.flat[a + 1]]
    }

    pub fn critic(&self) -> &[f64] {
        &self.flat[self.actor_len() + ACT_DIM..]
    }

    /// Splits a buffer with this layout into (actor, log_std, critic).
    pub fn split_mut<'a>(&self, buf: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let (a, rest) = buf.split_at_mut(self.actor_len());
        let (s, c) = rest.split_at_mut(ACT_DIM);
        (a, s, c)
    }

    pub fn set_log_std(&mut self, v: [f64; ACT_DIM]) {
        let a = self.actor_len();
        self.flat[a..a + ACT_DIM].copy_from_slice(&v);
    }

    pub fn clamp_log_std(&mut self) {
        let a = self.actor_len();
        for s in &mut self.flat[a..a + ACT_DIM] {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checkpoint document; same parameters always give the same bytes.
    pub fn to_json(&self) -> String {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            obs_dim: OBS_DIM,
            act_dim: ACT_DIM,
            hidden: self.hidden,
            layout: "per layer: weights [out][in] row-major, then biases".into(),
            actor: self.actor().to_vec(),
            log_std: self.log_std().to_vec(),
            critic: self.critic().to_vec(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| NnError::Format(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(NnError::Format(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        if c.obs_dim != OBS_DIM || c.act_dim != ACT_DIM {
            return Err(NnError::Format("observation/action dimensions differ".into()));
        }
        check_dim(Self::actor_net(c.hidden).n_params(), c.actor.len())?;
        check_dim(ACT_DIM, c.log_std.len())?;
        check_dim(Self::critic_net(c.hidden).n_params(), c.critic.len())?;
        let mut flat = c.actor;
        flat.extend(c.log_std);
        flat.extend(c.critic);
        let p = Self {
            hidden: c.hidden,
            flat,
        };
        if !p.is_finite() {
            return Err(NnError::NonFinite("checkpoint"));
        }
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    obs_dim: usize,
    act_dim: usize,
    hidden: usize,
    layout: String,
    actor: Vec<f64>,
    log_std: Vec<f64>,
    critic: Vec<f64>,
}

/// Action mean in normalized space.
pub fn policy_mean(p: &PolicyParams, obs: &[f64]) -> Result<[f64; ACT_DIM], NnError> {
    let out = PolicyParams::actor_net(p.hidden).forward(p.actor(), obs)?;
    Ok([out[0], out[1]])
}

/// Log-density of `x` under N(mean, exp(log_std)²), summed over dimensions.
pub fn gaussian_log_prob(mean: &[f64; ACT_DIM], log_std: &[f64; ACT_DIM], x: &[f64; ACT_DIM]) -> f64 {
    (0..ACT_DIM)
        .map(|i| {
            let z = (x[i] - mean[i]) / log_std[i].exp();
            -0.5 * z * z - log_std[i] - HALF_LOG_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64; ACT_DIM]) -> f64 {
    log_std.iter().map(|s| s + HALF_LOG_2PI_E).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub raw: [f64; ACT_DIM],
    pub log_prob: f64,
}

pub fn policy_sample<R: Rng + ?Sized>(p: &PolicyParams, obs: &[f64], rng: &mut R) -> Result<PolicySample, NnError> {
    if obs.iter().any(|x| !x.is_finite()) {
        return Err(NnError::NonFinite("observation"));
    }
    let mean = policy_mean(p, obs)?;
    let log_std = p.log_std();
    let mut raw = [0.0; ACT_DIM];
    for i in 0..ACT_DIM {
        let eps: f64 = StandardNormal.sample(rng);
        raw[i] = mean[i] + log_std[i].exp() * eps;
    }
    Ok(PolicySample {
        raw,
        log_prob: gaussian_log_prob(&mean, &log_std, &raw),
    })
}

pub fn policy_logprob_entropy(p: &PolicyParams, obs: &[f64], raw: &[f64; ACT_DIM]) -> Result<(f64, f64), NnError> {
    let mean = policy_mean(p, obs)?;
    let log_std = p.log_std();
    Ok((gaussian_log_prob(&mean, &log_std, raw), gaussian_entropy(&log_std)))
}

pub fn value(p: &PolicyParams, obs: &[f64]) -> Result<f64, NnError> {
    Ok(PolicyParams::critic_net(p.hidden).forward(p.critic(), obs)?[0])
}

/// Maps a raw normalized action to the environment: both components are
/// clipped to [−1, 1], then scaled to a turn in [−π, π] and a speed in
/// [0, 3.5] m/s.
pub fn to_env_action(raw: &[f64; ACT_DIM]) -> PedestrianAction {
    let t = raw[0].clamp(-1.0, 1.0);
    let s = raw[1].clamp(-1.0, 1.0);
    PedestrianAction::new(t * PI, (s + 1.0) * 0.5 * MAX_PEDESTRIAN_SPEED)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place. Non-finite gradients leave
/// everything untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState) -> Result<(), NnError> {
    check_dim(params.len(), grads.len())?;
    check_dim(params.len(), st.m.len())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NnError::NonFinite("gradient"));
    }
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        params[i] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
    }
    Ok(())
}
