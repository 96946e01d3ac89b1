//! Exact finite-horizon analysis of latent reward models on small discrete MDPs.
//!
//! For a deterministic MDP and a tabular latent model this module computes
//! the optimal `n`-step action values in both, the worst-case multi-step
//! reward error `epsilon` over every start state and action sequence, and the
//! value gap and planning suboptimality that the error is supposed to bound.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{angle_normalize, pendulum_reward, pendulum_step, EnvConfig, PendulumState};
use crate::error::{check_dim, Error, Result};
use crate::model::{LatentModel, TrajectorySegment};
use crate::nn::{Activation, Dense, Mlp};
use crate::planner::RolloutModel;

/// Largest number of (start state, action sequence) pairs [`measure_epsilon`] will enumerate.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// A deterministic finite system with tabulated transitions and rewards.
pub trait TabularSystem {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn next(&self, s: usize, a: usize) -> usize;
    fn reward(&self, s: usize, a: usize) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Indexed `s * n_actions + a`.
    pub next_state: Vec<usize>,
    /// Indexed `s * n_actions + a`.
    pub reward: Vec<f64>,
    pub gamma: f64,
}

fn validate_tables(what: &str, n_states: usize, n_actions: usize, next: &[usize], reward: &[f64]) -> Result<()> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidConfig(format!("{what}: needs at least one state and one action")));
    }
    let n = n_states * n_actions;
    if next.len() != n || reward.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{what}: tables must have {n} entries, got {} transitions and {} rewards",
            next.len(),
            reward.len()
        )));
    }
    if let Some(bad) = next.iter().find(|&&s| s >= n_states) {
        return Err(Error::InvalidConfig(format!("{what}: transition target {bad} out of range")));
    }
    if let Some(bad) = reward.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidConfig(format!("{what}: non-finite reward {bad}")));
    }
    Ok(())
}

impl DiscreteMdp {
    pub fn new(n_states: usize, n_actions: usize, next_state: Vec<usize>, reward: Vec<f64>, gamma: f64) -> Result<Self> {
        validate_tables("mdp", n_states, n_actions, &next_state, &reward)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("mdp: gamma must be in (0, 1], got {gamma}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            next_state,
            reward,
            gamma,
        })
    }

    /// Uniformly random transitions and rewards in `[-1, 1]`.
    pub fn random<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        let n = n_states * n_actions;
        let next = (0..n).map(|_| rng.random_range(0..n_states.max(1))).collect();
        let reward = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(n_states, n_actions, next, reward, gamma)
    }

    /// The latent model that is the MDP itself under the identity encoding.
    pub fn exact_latent(&self) -> TabularLatentModel {
        TabularLatentModel {
            encode_map: (0..self.n_states).collect(),
            n_latents: self.n_states,
            n_actions: self.n_actions,
            latent_next: self.next_state.clone(),
            latent_reward: self.reward.clone(),
        }
    }

    pub fn one_hot_state(&self, s: usize) -> Vec<f64> {
        one_hot(self.n_states, s)
    }

    pub fn one_hot_action(&self, a: usize) -> Vec<f64> {
        one_hot(self.n_actions, a)
    }

    /// Networks that reproduce the MDP exactly on one-hot states and actions.
    ///
    /// The encoder is the identity. Dynamics and reward share a hidden relu
    /// layer with one unit per `(s, a)` pair, `relu(z_s + a_a - 1)`, which is 1
    /// exactly for the active pair; the output layer reads off the table.
    pub fn exact_networks(&self) -> Result<LatentModel> {
        let (ns, na) = (self.n_states, self.n_actions);
        let pairs = ns * na;
        let hidden = || {
            let mut w = Array2::zeros((pairs, ns + na));
            for s in 0..ns {
                for a in 0..na {
                    w[[s * na + a, s]] = 1.0;
                    w[[s * na + a, ns + a]] = 1.0;
                }
            }
            Dense {
                weight: w,
                bias: Array1::from_elem(pairs, -1.0),
                activation: Activation::Relu,
            }
        };
        let mut next_w = Array2::zeros((ns, pairs));
        let mut reward_w = Array2::zeros((1, pairs));
        for p in 0..pairs {
            next_w[[self.next_state[p], p]] = 1.0;
            reward_w[[0, p]] = self.reward[p];
        }
        let encoder = Mlp::from_layers(vec![Dense {
            weight: Array2::eye(ns),
            bias: Array1::zeros(ns),
            activation: Activation::Identity,
        }])?;
        let dynamics = Mlp::from_layers(vec![
            hidden(),
            Dense {
                weight: next_w,
                bias: Array1::zeros(ns),
                activation: Activation::Identity,
            },
        ])?;
        let reward_head = Mlp::from_layers(vec![
            hidden(),
            Dense {
                weight: reward_w,
                bias: Array1::zeros(1),
                activation: Activation::Identity,
            },
        ])?;
        LatentModel::from_parts(encoder, dynamics, reward_head, self.gamma)
    }

    /// The one-hot trajectory segment obtained by following `actions` from `s0`.
    pub fn segment(&self, s0: usize, actions: &[usize]) -> Result<TrajectorySegment> {
        let h = actions.len();
        let mut states = Array2::zeros((h, self.n_states));
        let mut acts = Array2::zeros((h, self.n_actions));
        let mut rewards = Array1::zeros(h);
        let mut s = s0;
        for (k, &a) in actions.iter().enumerate() {
            states[[k, s]] = 1.0;
            acts[[k, a]] = 1.0;
            rewards[k] = self.reward(s, a);
            s = self.next(s, a);
        }
        TrajectorySegment::new(states, acts, rewards)
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

impl TabularSystem for DiscreteMdp {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn next(&self, s: usize, a: usize) -> usize {
        self.next_state[s * self.n_actions + a]
    }
    fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }
}

/// A tabular latent model: an encoding of MDP states plus latent transition and reward tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularLatentModel {
    /// Latent index of each MDP state.
    pub encode_map: Vec<usize>,
    pub n_latents: usize,
    pub n_actions: usize,
    /// Indexed `z * n_actions + a`.
    pub latent_next: Vec<usize>,
    /// Indexed `z * n_actions + a`.
    pub latent_reward: Vec<f64>,
}

impl TabularLatentModel {
    pub fn new(
        encode_map: Vec<usize>,
        n_latents: usize,
        n_actions: usize,
        latent_next: Vec<usize>,
        latent_reward: Vec<f64>,
    ) -> Result<Self> {
        validate_tables("latent model", n_latents, n_actions, &latent_next, &latent_reward)?;
        if let Some(bad) = encode_map.iter().find(|&&z| z >= n_latents) {
            return Err(Error::InvalidConfig(format!("latent model: encoding {bad} out of range")));
        }
        Ok(Self {
            encode_map,
            n_latents,
            n_actions,
            latent_next,
            latent_reward,
        })
    }

    pub fn encode(&self, s: usize) -> usize {
        self.encode_map[s]
    }

    fn check_against(&self, mdp: &DiscreteMdp) -> Result<()> {
        check_dim("latent encode map", mdp.n_states, self.encode_map.len())?;
        check_dim("latent action count", mdp.n_actions, self.n_actions)
    }
}

impl TabularSystem for TabularLatentModel {
    fn n_states(&self) -> usize {
        self.n_latents
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn next(&self, z: usize, a: usize) -> usize {
        self.latent_next[z * self.n_actions + a]
    }
    fn reward(&self, z: usize, a: usize) -> f64 {
        self.latent_reward[z * self.n_actions + a]
    }
}

/// Optimal `horizon`-step action values, `values[[s, a]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub horizon: usize,
    pub values: Array2<f64>,
}

impl QTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[[s, a]]
    }

    pub fn max(&self, s: usize) -> f64 {
        self.values.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lowest-index maximizing action.
    pub fn argmax(&self, s: usize) -> usize {
        let row = self.values.row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }
}

/// `Q*_n` for every `n` in `1..=horizon` by backward induction; element `n - 1` holds `Q*_n`.
pub fn q_tables<T: TabularSystem + ?Sized>(sys: &T, gamma: f64, horizon: usize) -> Result<Vec<QTable>> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be >= 1".into()));
    }
    let (ns, na) = (sys.n_states(), sys.n_actions());
    let mut out: Vec<QTable> = Vec::with_capacity(horizon);
    for n in 1..=horizon {
        let values = Array2::from_shape_fn((ns, na), |(s, a)| {
            let future = out.last().map_or(0.0, |q| q.max(sys.next(s, a)));
            sys.reward(s, a) + gamma * future
        });
        out.push(QTable { horizon: n, values });
    }
    Ok(out)
}

pub fn q_n_exact(mdp: &DiscreteMdp, horizon: usize) -> Result<QTable> {
    Ok(q_tables(mdp, mdp.gamma, horizon)?.pop().expect("horizon >= 1"))
}

pub fn latent_q_n_exact(latent: &TabularLatentModel, gamma: f64, horizon: usize) -> Result<QTable> {
    Ok(q_tables(latent, gamma, horizon)?.pop().expect("horizon >= 1"))
}

fn enumeration_size(n_states: usize, n_actions: usize, horizon: usize) -> u128 {
    let mut total = n_states as u128;
    for _ in 0..horizon {
        total = total.saturating_mul(n_actions as u128);
        if total > ENUMERATION_CAP {
            break;
        }
    }
    total
}

/// `sqrt(max L_H)` over every start state and every length-`horizon` action sequence.
pub fn measure_epsilon(mdp: &DiscreteMdp, latent: &TabularLatentModel, horizon: usize) -> Result<f64> {
    latent.check_against(mdp)?;
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be >= 1".into()));
    }
    let requested = enumeration_size(mdp.n_states, mdp.n_actions, horizon);
    if requested > ENUMERATION_CAP {
        return Err(Error::EnumerationCap {
            requested,
            cap: ENUMERATION_CAP,
        });
    }
    let na = mdp.n_actions;
    let mut worst: f64 = 0.0;
    let mut seq = vec![0usize; horizon];
    for s0 in 0..mdp.n_states {
        seq.iter_mut().for_each(|a| *a = 0);
        loop {
            let (mut s, mut z, mut disc, mut total) = (s0, latent.encode(s0), 1.0, 0.0);
            for &a in &seq {
                let e = disc * (mdp.reward(s, a) - latent.reward(z, a));
                total += e * e;
                s = mdp.next(s, a);
                z = latent.next(z, a);
                disc *= mdp.gamma;
            }
            worst = worst.max(total / horizon as f64);
            // Odometer increment over base-|A| digits.
            let mut i = 0;
            while i < horizon {
                seq[i] += 1;
                if seq[i] < na {
                    break;
                }
                seq[i] = 0;
                i += 1;
            }
            if i == horizon {
                break;
            }
        }
    }
    Ok(worst.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub horizon: usize,
    pub max_gap: f64,
    pub max_subopt: f64,
    /// `H * epsilon`, the gap bound that follows from Cauchy-Schwarz.
    pub bound_cs_gap: f64,
    /// `2 H * epsilon`.
    pub bound_cs_subopt: f64,
    /// `sqrt(H) * epsilon`, the tighter gap bound as originally stated.
    pub bound_sqrt_gap: f64,
    /// `2 sqrt(H) * epsilon`.
    pub bound_sqrt_subopt: f64,
    /// Whether either `sqrt(H)` bound was exceeded. Informational only.
    pub sqrt_bound_violated: bool,
    pub instance_descriptor: String,
}

impl BoundReport {
    fn slack(&self) -> f64 {
        1e-9 * (1.0 + self.bound_cs_subopt.abs() + self.max_gap.abs() + self.max_subopt.abs())
    }

    /// Whether the gap and suboptimality respect the `H * epsilon` bounds, up to rounding.
    pub fn cs_bound_holds(&self) -> bool {
        let tol = self.slack();
        self.max_gap <= self.bound_cs_gap + tol && self.max_subopt <= self.bound_cs_subopt + tol
    }
}

/// Realized `horizon`-step return in the MDP of taking `a0` in `s0`, then the latent-optimal
/// actions chosen along the latent rollout (open loop).
pub fn latent_greedy_return(
    mdp: &DiscreteMdp,
    latent: &TabularLatentModel,
    latent_q: &[QTable],
    s0: usize,
    a0: usize,
) -> f64 {
    let h = latent_q.len();
    let (mut s, mut z, mut a) = (s0, latent.encode(s0), a0);
    let (mut disc, mut total) = (1.0, 0.0);
    for t in 0..h {
        total += disc * mdp.reward(s, a);
        disc *= mdp.gamma;
        s = mdp.next(s, a);
        z = latent.next(z, a);
        if t + 1 < h {
            // Steps remaining after this one: h - t - 1.
            a = latent_q[h - t - 2].argmax(z);
        }
    }
    total
}

/// Measures epsilon, the worst value gap `Q*_H - Q^z_H`, and the worst suboptimality of
/// latent-greedy planning over every start state and first action.
pub fn check_bound(
    mdp: &DiscreteMdp,
    latent: &TabularLatentModel,
    horizon: usize,
    instance_descriptor: impl Into<String>,
) -> Result<BoundReport> {
    let epsilon = measure_epsilon(mdp, latent, horizon)?;
    let q = q_n_exact(mdp, horizon)?;
    let lq = q_tables(latent, mdp.gamma, horizon)?;
    let qz = lq.last().expect("horizon >= 1");
    let mut max_gap = f64::NEG_INFINITY;
    let mut max_subopt = f64::NEG_INFINITY;
    for s in 0..mdp.n_states {
        let z = latent.encode(s);
        for a in 0..mdp.n_actions {
            max_gap = max_gap.max(q.get(s, a) - qz.get(z, a));
            max_subopt = max_subopt.max(q.get(s, a) - latent_greedy_return(mdp, latent, &lq, s, a));
        }
    }
    let h = horizon as f64;
    let mut report = BoundReport {
        epsilon,
        horizon,
        max_gap,
        max_subopt,
        bound_cs_gap: h * epsilon,
        bound_cs_subopt: 2.0 * h * epsilon,
        bound_sqrt_gap: h.sqrt() * epsilon,
        bound_sqrt_subopt: 2.0 * h.sqrt() * epsilon,
        sqrt_bound_violated: false,
        instance_descriptor: instance_descriptor.into(),
    };
    let tol = report.slack();
    report.sqrt_bound_violated =
        report.max_gap > report.bound_sqrt_gap + tol || report.max_subopt > report.bound_sqrt_subopt + tol;
    Ok(report)
}

/// Exact latent model whose rewards are all shifted down by `delta`.
///
/// With `gamma = 1` every `H`-step latent value drops by exactly `H * delta`
/// while `epsilon = delta`, so the value gap meets `H * epsilon` with equality.
pub fn offset_latent(mdp: &DiscreteMdp, delta: f64) -> TabularLatentModel {
    let mut latent = mdp.exact_latent();
    latent.latent_reward.iter_mut().for_each(|r| *r -= delta);
    latent
}

/// How [`random_instance`] corrupts the exact latent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    RewardNoise,
    TransitionEdits,
    StateMerge,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: DiscreteMdp,
    pub latent: TabularLatentModel,
    pub horizon: usize,
    pub perturbation: Perturbation,
}

impl Instance {
    pub fn descriptor(&self) -> String {
        format!(
            "|S|={} |A|={} H={} gamma={} perturbation={:?}",
            self.mdp.n_states, self.mdp.n_actions, self.horizon, self.mdp.gamma, self.perturbation
        )
    }
}

/// A random MDP with `2..=max_states` states, `2..=max_actions` actions and an imperfect latent model.
pub fn random_instance<R: Rng>(rng: &mut R, max_states: usize, max_actions: usize, max_horizon: usize) -> Result<Instance> {
    if max_states < 2 || max_actions < 2 || max_horizon < 1 {
        return Err(Error::InvalidConfig("random instance needs >= 2 states, >= 2 actions, horizon >= 1".into()));
    }
    let ns = rng.random_range(2..=max_states);
    let na = rng.random_range(2..=max_actions);
    let horizon = rng.random_range(1..=max_horizon);
    let gamma = if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.5..1.0) };
    let mdp = DiscreteMdp::random(rng, ns, na, gamma)?;
    let scale = rng.random_range(0.0..0.5);
    let perturbation = match rng.random_range(0..3) {
        0 => Perturbation::RewardNoise,
        1 => Perturbation::TransitionEdits,
        _ => Perturbation::StateMerge,
    };
    let mut latent = mdp.exact_latent();
    match perturbation {
        Perturbation::RewardNoise => {
            for r in &mut latent.latent_reward {
                *r += rng.random_range(-scale..=scale);
            }
        }
        Perturbation::TransitionEdits => {
            for t in &mut latent.latent_next {
                if rng.random_bool(0.3) {
                    *t = rng.random_range(0..ns);
                }
            }
        }
        Perturbation::StateMerge => {
            let nz = rng.random_range(1..=ns);
            let encode_map: Vec<usize> = (0..ns).map(|s| if s < nz { s } else { rng.random_range(0..nz) }).collect();
            let mut next = vec![0; nz * na];
            let mut reward = vec![0.0; nz * na];
            for z in 0..nz {
                for a in 0..na {
                    // Representative state z is encoded as itself.
                    next[z * na + a] = encode_map[mdp.next(z, a)];
                    reward[z * na + a] = mdp.reward(z, a) + rng.random_range(-scale..=scale);
                }
            }
            latent = TabularLatentModel::new(encode_map, nz, na, next, reward)?;
        }
    }
    Ok(Instance {
        mdp,
        latent,
        horizon,
        perturbation,
    })
}

/// Grid discretization of a single pendulum: `n_theta x n_vel` cells, one action per torque.
///
/// Cell centers are the representative states; successors snap to the cell containing
/// the exact successor of the center.
pub fn discretize_pendulum(cfg: &EnvConfig, n_theta: usize, n_vel: usize, torques: &[f64], gamma: f64) -> Result<DiscreteMdp> {
    if n_theta == 0 || n_vel == 0 || torques.is_empty() {
        return Err(Error::InvalidConfig("discretization needs at least one cell and one torque".into()));
    }
    cfg.validate()?;
    let tw = 2.0 * std::f64::consts::PI / n_theta as f64;
    let vw = 2.0 * cfg.max_speed / n_vel as f64;
    let center = |i: usize, j: usize| {
        PendulumState::new(
            -std::f64::consts::PI + (i as f64 + 0.5) * tw,
            -cfg.max_speed + (j as f64 + 0.5) * vw,
        )
    };
    let cell = |s: PendulumState| {
        let i = (((angle_normalize(s.theta) + std::f64::consts::PI) / tw) as usize).min(n_theta - 1);
        let j = (((s.theta_dot + cfg.max_speed) / vw).max(0.0) as usize).min(n_vel - 1);
        i * n_vel + j
    };
    let na = torques.len();
    let n = n_theta * n_vel;
    let mut next = Vec::with_capacity(n * na);
    let mut reward = Vec::with_capacity(n * na);
    for i in 0..n_theta {
        for j in 0..n_vel {
            let s = center(i, j);
            for &u in torques {
                let u = u.clamp(-cfg.max_torque, cfg.max_torque);
                next.push(cell(pendulum_step(s, u, cfg)));
                reward.push(pendulum_reward(s, u));
            }
        }
    }
    DiscreteMdp::new(n, na, next, reward, gamma)
}

/// Lets the continuous planner search a tabular system.
///
/// Observations are a single state index, actions a single value in
/// `[0, n_actions)` projected to `floor(a)`, latents a single index.
pub struct TabularRollout<'a, T: TabularSystem + Sync + ?Sized> {
    pub system: &'a T,
    /// Maps an observed state index to the system's own index.
    pub encode: Option<&'a [usize]>,
}

impl<'a, T: TabularSystem + Sync + ?Sized> TabularRollout<'a, T> {
    pub fn new(system: &'a T) -> Self {
        Self { system, encode: None }
    }

    fn action_index(&self, a: f64) -> usize {
        (a.max(0.0) as usize).min(self.system.n_actions() - 1)
    }
}

impl<T: TabularSystem + Sync + ?Sized> RolloutModel for TabularRollout<'_, T> {
    fn obs_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn latent_dim(&self) -> usize {
        1
    }

    fn initial_latent(&self, observation: &[f64]) -> Result<Array1<f64>> {
        check_dim("tabular observation", 1, observation.len())?;
        let s = observation[0] as usize;
        let z = self.encode.map_or(s, |m| m[s]);
        Ok(Array1::from(vec![z as f64]))
    }

    fn step(
        &self,
        latents: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        advance: bool,
    ) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
        check_dim("latent rows", latents.nrows(), actions.nrows())?;
        let n = latents.nrows();
        let mut r = Array1::zeros(n);
        let mut next = advance.then(|| Array2::zeros((n, 1)));
        for i in 0..n {
            let z = latents[[i, 0]] as usize;
            let a = self.action_index(actions[[i, 0]]);
            r[i] = self.system.reward(z, a);
            if let Some(next) = next.as_mut() {
                next[[i, 0]] = self.system.next(z, a) as f64;
            }
        }
        Ok((r, next))
    }
}
