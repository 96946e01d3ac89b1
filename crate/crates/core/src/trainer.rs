//! Data collection, the replay dataset, and offline and online training loops.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, MultiPendulumEnv};
use crate::error::{check_dim, Error, Result};
use crate::model::{AnyModel, LatentModel, StatePredModel, TrajectorySegment, Transition};
use crate::nn::{clip_grad_norm, AdamConfig, AdamState, ByteReader};
use crate::planner::{observation_seed, CemConfig, MpcPolicy, Policy};

pub const DATASET_MAGIC: &[u8; 5] = b"LRPD1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub env_config_hash: String,
    pub policy: String,
}

/// Transitions in insertion order, grouped into episodes by their `done` flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDataset {
    d_s: usize,
    d_a: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    episode_starts: Vec<usize>,
    pub metadata: DatasetMetadata,
}

impl ReplayDataset {
    pub fn new(d_s: usize, d_a: usize, metadata: DatasetMetadata) -> Self {
        Self {
            d_s,
            d_a,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            episode_starts: Vec::new(),
            metadata,
        }
    }

    pub fn for_env(config: &EnvConfig, policy: &str) -> Self {
        Self::new(
            config.obs_dim(),
            config.action_dim(),
            DatasetMetadata {
                env_config_hash: env_config_hash(config),
                policy: policy.to_string(),
            },
        )
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_starts(&self) -> &[usize] {
        &self.episode_starts
    }

    pub fn episode_count(&self) -> usize {
        self.episode_starts.len()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.d_s..(i + 1) * self.d_s]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.d_a..(i + 1) * self.d_a]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.d_s..(i + 1) * self.d_s]
    }

    pub fn done(&self, i: usize) -> bool {
        self.dones[i]
    }

    /// Appends one transition; the first transition after a `done` opens a new episode.
    pub fn push(&mut self, state: &[f64], action: &[f64], reward: f64, next_state: &[f64], done: bool) -> Result<()> {
        check_dim("dataset state", self.d_s, state.len())?;
        check_dim("dataset action", self.d_a, action.len())?;
        check_dim("dataset next state", self.d_s, next_state.len())?;
        if self.dones.last().is_none_or(|&d| d) {
            self.episode_starts.push(self.len());
        }
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.next_states.extend_from_slice(next_state);
        self.dones.push(done);
        Ok(())
    }

    /// Appends every transition of `other`, which must hold complete episodes.
    pub fn extend(&mut self, other: &ReplayDataset) -> Result<()> {
        check_dim("dataset state", self.d_s, other.d_s)?;
        check_dim("dataset action", self.d_a, other.d_a)?;
        if self.dones.last() == Some(&false) {
            return Err(Error::InvalidConfig("cannot append to a dataset with an unfinished episode".into()));
        }
        for i in 0..other.len() {
            self.push(other.state(i), other.action(i), other.reward(i), other.next_state(i), other.done(i))?;
        }
        Ok(())
    }

    /// Checks that every episode, including the last, ends with `done`.
    pub fn validate(&self) -> Result<()> {
        if self.dones.last() == Some(&false) {
            return Err(Error::InvalidConfig("dataset ends inside an episode".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidConfig("dataset contains non-finite rewards".into()));
        }
        Ok(())
    }

    fn episode_ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.episode_starts.iter().enumerate().map(|(e, &start)| {
            let end = self.episode_starts.get(e + 1).copied().unwrap_or(self.len());
            (start, end)
        })
    }

    /// Every start index whose `horizon`-step window stays inside one episode.
    pub fn valid_starts(&self, horizon: usize) -> Vec<usize> {
        if horizon == 0 {
            return Vec::new();
        }
        self.episode_ranges()
            .filter(|(s, e)| e - s >= horizon)
            .flat_map(|(s, e)| s..=e - horizon)
            .collect()
    }

    pub fn segment_at(&self, start: usize, horizon: usize) -> Result<TrajectorySegment> {
        let end = start + horizon;
        let states = Array2::from_shape_vec((horizon, self.d_s), self.states[start * self.d_s..end * self.d_s].to_vec())
            .expect("row-major slice");
        let actions = Array2::from_shape_vec((horizon, self.d_a), self.actions[start * self.d_a..end * self.d_a].to_vec())
            .expect("row-major slice");
        TrajectorySegment::new(states, actions, Array1::from(self.rewards[start..end].to_vec()))
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            reward: self.reward(i),
            next_state: self.next_state(i).to_vec(),
        }
    }

    fn longest_episode(&self) -> usize {
        self.episode_ranges().map(|(s, e)| e - s).max().unwrap_or(0)
    }

    /// Binary body: `LRPD1`, `u32 d_s`, `u32 d_a`, `u64 count`, then per transition
    /// `s, a, r, s', done` as little-endian `f64` (done is 0 or 1).
    pub fn to_bytes(&self) -> Vec<u8> {
        let rec = 2 * self.d_s + self.d_a + 2;
        let mut out = Vec::with_capacity(21 + self.len() * rec * 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.d_s as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_a as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            let done = if self.done(i) { 1.0 } else { 0.0 };
            let fields = [self.state(i), self.action(i), &[self.reward(i)], self.next_state(i), &[done]];
            for v in fields.into_iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], metadata: DatasetMetadata) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dataset");
        if r.take(DATASET_MAGIC.len())? != DATASET_MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let d_s = r.u32()? as usize;
        let d_a = r.u32()? as usize;
        let count = r.u64()? as usize;
        if d_s == 0 || d_a == 0 {
            return Err(r.corrupt_at(5, "zero state or action dimension"));
        }
        let mut out = Self::new(d_s, d_a, metadata);
        for _ in 0..count {
            let at = r.pos();
            let s = r.f64s(d_s)?;
            let a = r.f64s(d_a)?;
            let reward = r.f64()?;
            let s2 = r.f64s(d_s)?;
            let done = match r.f64()? {
                0.0 => false,
                1.0 => true,
                _ => return Err(r.corrupt_at(at, "done flag must be 0 or 1")),
            };
            out.push(&s, &a, reward, &s2, done)?;
        }
        r.finish()?;
        Ok(out)
    }

    /// Writes the binary file and its JSON metadata sidecar (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.metadata)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let metadata: DatasetMetadata = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        Self::from_bytes(&std::fs::read(path)?, metadata)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Stable hex digest of an environment configuration, ignoring its seed.
pub fn env_config_hash(config: &EnvConfig) -> String {
    let text = serde_json::to_string(&EnvConfig { seed: 0, ..*config }).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Uniformly sampled `horizon`-step segments, each inside a single episode.
pub fn sample_segments<R: Rng>(
    dataset: &ReplayDataset,
    batch_size: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<TrajectorySegment>> {
    let starts = dataset.valid_starts(horizon);
    sample_from_starts(dataset, &starts, batch_size, horizon, rng)
}

fn sample_from_starts<R: Rng>(
    dataset: &ReplayDataset,
    starts: &[usize],
    batch_size: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<TrajectorySegment>> {
    if starts.is_empty() {
        return Err(Error::NoValidSegment {
            horizon,
            longest: dataset.longest_episode(),
        });
    }
    (0..batch_size)
        .map(|_| dataset.segment_at(starts[rng.random_range(0..starts.len())], horizon))
        .collect()
}

pub fn sample_transitions<R: Rng>(dataset: &ReplayDataset, batch_size: usize, rng: &mut R) -> Result<Vec<Transition>> {
    if dataset.is_empty() {
        return Err(Error::NoValidSegment { horizon: 1, longest: 0 });
    }
    Ok((0..batch_size)
        .map(|_| dataset.transition(rng.random_range(0..dataset.len())))
        .collect())
}

/// Discrete Ornstein-Uhlenbeck process `a <- a - theta a + sigma N(0, 1)`, clipped to bounds.
#[derive(Debug, Clone)]
pub struct NoiseProcess {
    pub theta_ou: f64,
    pub sigma_ou: f64,
    pub low: f64,
    pub high: f64,
    state: Vec<f64>,
    rng: ChaCha8Rng,
}

impl NoiseProcess {
    pub fn new(theta_ou: f64, sigma_ou: f64, d_a: usize, low: f64, high: f64, seed: u64) -> Self {
        Self {
            theta_ou,
            sigma_ou,
            low,
            high,
            state: vec![0.0; d_a],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `theta = 0.15`, `sigma = 0.3 * max_torque`.
    pub fn for_env(config: &EnvConfig, seed: u64) -> Self {
        Self::new(
            0.15,
            0.3 * config.max_torque,
            config.action_dim(),
            -config.max_torque,
            config.max_torque,
            seed,
        )
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|a| *a = 0.0);
    }

    pub fn sample(&mut self) -> Vec<f64> {
        for a in &mut self.state {
            let n: f64 = self.rng.sample(StandardNormal);
            *a = (*a - self.theta_ou * *a + self.sigma_ou * n).clamp(self.low, self.high);
        }
        self.state.clone()
    }
}

/// `n_steps` transitions of OU-noise control; the noise restarts at zero with each episode.
pub fn collect_random(env: &mut MultiPendulumEnv, n_steps: usize, noise: &mut NoiseProcess) -> Result<ReplayDataset> {
    if n_steps == 0 {
        return Err(Error::InvalidConfig("n_steps must be >= 1".into()));
    }
    let config = *env.config();
    let mut data = ReplayDataset::for_env(&config, "ou_noise");
    let mut obs = env.reset(None);
    noise.reset();
    for t in 0..n_steps {
        let action = noise.sample();
        let step = env.step(action[0])?;
        data.push(&obs, &action, step.reward, &step.observation, step.done || t + 1 == n_steps)?;
        if step.done {
            obs = env.reset(None);
            noise.reset();
        } else {
            obs = step.observation;
        }
    }
    Ok(data)
}

/// Replaces the wrapped policy's action by a uniform random one with probability `epsilon`.
pub struct EpsilonGreedy<P> {
    inner: P,
    epsilon: f64,
    low: Vec<f64>,
    high: Vec<f64>,
    rng: ChaCha8Rng,
    random_actions: usize,
    steps: usize,
}

impl<P: Policy> EpsilonGreedy<P> {
    pub fn new(inner: P, epsilon: f64, low: Vec<f64>, high: Vec<f64>, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon must be in [0, 1], got {epsilon}")));
        }
        check_dim("epsilon-greedy bounds", low.len(), high.len())?;
        Ok(Self {
            inner,
            epsilon,
            low,
            high,
            rng: ChaCha8Rng::seed_from_u64(seed),
            random_actions: 0,
            steps: 0,
        })
    }

    pub fn random_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.random_actions as f64 / self.steps as f64
        }
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Policy> Policy for EpsilonGreedy<P> {
    fn act(&mut self, observation: &[f64]) -> Result<Vec<f64>> {
        self.steps += 1;
        if self.rng.random_bool(self.epsilon) {
            self.random_actions += 1;
            Ok(self
                .low
                .iter()
                .zip(&self.high)
                .map(|(&l, &h)| self.rng.random_range(l..=h))
                .collect())
        } else {
            self.inner.act(observation)
        }
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single episode.
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = if returns.len() < 2 {
            0.0
        } else {
            (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, returns }
    }
}

/// Seed of evaluation episode `i`; shared by every method evaluated with the same base seed.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    observation_seed(seed, &[i as f64])
}

/// Undiscounted returns of `n_episodes` noise-free episodes, each from its own derived seed.
pub fn evaluate(config: &EnvConfig, policy: &mut dyn Policy, n_episodes: usize, seed: u64) -> Result<EvalStats> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be >= 1".into()));
    }
    let mut env = MultiPendulumEnv::new(*config)?;
    let mut returns = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        returns.push(run_episode(&mut env, policy, Some(episode_seed(seed, i)), None)?);
    }
    Ok(EvalStats::from_returns(returns))
}

/// Runs one episode to completion, optionally recording it. Returns the undiscounted return.
pub fn run_episode(
    env: &mut MultiPendulumEnv,
    policy: &mut dyn Policy,
    seed: Option<u64>,
    mut record: Option<&mut ReplayDataset>,
) -> Result<f64> {
    let mut obs = env.reset(seed);
    policy.reset();
    let mut total = 0.0;
    loop {
        let action = policy.act(&obs)?;
        let step = env.step(action[0])?;
        total += step.reward;
        if let Some(data) = record.as_deref_mut() {
            let applied = [action[0].clamp(-env.config().max_torque, env.config().max_torque)];
            data.push(&obs, &applied, step.reward, &step.observation, step.done)?;
        }
        if step.done {
            return Ok(total);
        }
        obs = step.observation;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub env_steps: u64,
    pub train_loss: f64,
    pub eval_loss_10step: f64,
    pub explore_return: Option<f64>,
    pub eval_return: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "iteration,env_steps,train_loss,eval_loss_10step,explore_return,eval_return,seconds";

impl TrainLog {
    pub fn push(&mut self, record: LogRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.env_steps <= record.env_steps));
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    /// CSV text. With `wall_clock = false` the `seconds` column is left empty, which makes
    /// the output a pure function of seed and configuration.
    pub fn to_csv(&self, wall_clock: bool) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let secs = if wall_clock { format!("{:.3}", r.seconds) } else { String::new() };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.env_steps,
                r.train_loss,
                r.eval_loss_10step,
                opt(r.explore_return),
                opt(r.eval_return),
                secs
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Corrupt {
                what: "train log",
                offset: 0,
                reason: "unexpected header".into(),
            });
        }
        let mut log = TrainLog::default();
        for (n, line) in lines.enumerate() {
            let bad = |reason: &str| Error::Corrupt {
                what: "train log",
                offset: n + 1,
                reason: reason.into(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 columns"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            log.records.push(LogRecord {
                iteration: f[0].parse().map_err(|_| bad("bad iteration"))?,
                env_steps: f[1].parse().map_err(|_| bad("bad env_steps"))?,
                train_loss: num(f[2])?,
                eval_loss_10step: num(f[3])?,
                explore_return: opt(f[4])?,
                eval_return: opt(f[5])?,
                seconds: opt(f[6])?.unwrap_or(0.0),
            });
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub eval_horizon: usize,
    pub eval_segments: usize,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            horizon: 12,
            eval_horizon: 10,
            eval_segments: 1024,
            grad_clip: 10.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidConfig(format!("{what} must be >= 1")));
    }
    Ok(())
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        positive("batch_size", self.batch_size)?;
        positive("horizon", self.horizon)?;
        positive("eval_horizon", self.eval_horizon)?;
        positive("eval_segments", self.eval_segments)?;
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub n_iterations: usize,
    pub init_random_steps: usize,
    /// Epochs of offline training on the seed data before the first planned episode.
    pub init_epochs: usize,
    pub train_iters_per_episode: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub horizon: usize,
    pub eval_horizon: usize,
    pub eval_segments: usize,
    /// Noise-free evaluation every this many iterations (and after the last); 0 disables it.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            n_iterations: 106,
            init_random_steps: 2500,
            init_epochs: 100,
            train_iters_per_episode: 100,
            batch_size: 256,
            epsilon: 0.7,
            horizon: 12,
            eval_horizon: 10,
            eval_segments: 1024,
            eval_every: 25,
            eval_episodes: 2,
            grad_clip: 10.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        positive("init_random_steps", self.init_random_steps)?;
        positive("train_iters_per_episode", self.train_iters_per_episode)?;
        positive("batch_size", self.batch_size)?;
        positive("horizon", self.horizon)?;
        positive("eval_horizon", self.eval_horizon)?;
        positive("eval_segments", self.eval_segments)?;
        if self.eval_every > 0 {
            positive("eval_episodes", self.eval_episodes)?;
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon must be in [0, 1], got {}", self.epsilon)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be > 0".into()));
        }
        Ok(())
    }

    fn offline(&self, epochs: usize) -> OfflineConfig {
        OfflineConfig {
            epochs,
            batch_size: self.batch_size,
            horizon: self.horizon,
            eval_horizon: self.eval_horizon,
            eval_segments: self.eval_segments,
            grad_clip: self.grad_clip,
            adam: self.adam,
            seed: self.seed,
        }
    }
}

/// Optimizer state for one model; persists across calls so online training keeps its moments.
pub struct Trainer {
    pub model: AnyModel,
    grad_clip: f64,
    adam: AdamState,
    /// Reward-head optimizer of the state-prediction baseline.
    head_adam: Option<AdamState>,
}

/// Which objective a training pass optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// The variant's own objective: multi-step reward, state prediction, or the DeepMDP loss.
    Main,
    /// Reward head on frozen latents (state-prediction baseline only).
    RewardHead,
}

impl Trainer {
    pub fn new(model: AnyModel, adam: AdamConfig, grad_clip: f64) -> Self {
        let (main, head_adam) = match &model {
            AnyModel::StatePred(m) => (
                AdamState::new(&[&m.latent.encoder, &m.latent.dynamics, &m.decoder], adam),
                Some(AdamState::new(&[&m.latent.reward_head], adam)),
            ),
            other => (AdamState::new(&other.latent().nets(), adam), None),
        };
        Self {
            model,
            grad_clip,
            adam: main,
            head_adam,
        }
    }

    pub fn into_model(self) -> AnyModel {
        self.model
    }

    /// Phases an offline run goes through, in order.
    pub fn phases(&self) -> &'static [Phase] {
        match self.model {
            AnyModel::StatePred(_) => &[Phase::Main, Phase::RewardHead],
            _ => &[Phase::Main],
        }
    }

    /// Whether the main phase trains on single transitions rather than segments.
    pub fn uses_transitions(&self) -> bool {
        matches!(self.model, AnyModel::DeepMdp(_))
    }

    /// One optimizer step on a segment batch. Returns the pre-step batch loss.
    pub fn step_segments(&mut self, phase: Phase, segs: &[TrajectorySegment]) -> Result<f64> {
        match (&mut self.model, phase) {
            (AnyModel::Reward(m), Phase::Main) => {
                let (loss, mut g) = m.loss_gradient(segs)?;
                clip_grad_norm(&mut [&mut g.encoder, &mut g.dynamics, &mut g.reward_head], self.grad_clip);
                self.adam.step(&mut m.nets_mut(), &[&g.encoder, &g.dynamics, &g.reward_head])?;
                Ok(loss)
            }
            (AnyModel::StatePred(m), Phase::Main) => {
                let (loss, mut g) = m.state_pred_gradient(segs)?;
                clip_grad_norm(&mut [&mut g.encoder, &mut g.dynamics, &mut g.decoder], self.grad_clip);
                let StatePredModel { latent, decoder } = m;
                let LatentModel { encoder, dynamics, .. } = latent;
                self.adam.step(&mut [encoder, dynamics, decoder], &[&g.encoder, &g.dynamics, &g.decoder])?;
                Ok(loss)
            }
            (AnyModel::StatePred(m), Phase::RewardHead) => {
                let (loss, mut g) = m.reward_head_gradient(segs)?;
                clip_grad_norm(&mut [&mut g], self.grad_clip);
                let adam = self.head_adam.as_mut().expect("state-prediction head optimizer");
                adam.step(&mut [&mut m.latent.reward_head], &[&g])?;
                Ok(loss)
            }
            (AnyModel::DeepMdp(_), _) => Err(Error::InvalidConfig("the DeepMDP loss trains on transitions".into())),
            (_, Phase::RewardHead) => Err(Error::InvalidConfig("only the state-prediction baseline has a separate reward-head phase".into())),
        }
    }

    pub fn step_transitions(&mut self, ts: &[Transition]) -> Result<f64> {
        let AnyModel::DeepMdp(m) = &mut self.model else {
            return Err(Error::InvalidConfig("only the DeepMDP variant trains on transitions".into()));
        };
        let (loss, mut g) = m.loss_gradient(ts)?;
        clip_grad_norm(&mut [&mut g.encoder, &mut g.dynamics, &mut g.reward_head], self.grad_clip);
        self.adam.step(&mut m.latent.nets_mut(), &[&g.encoder, &g.dynamics, &g.reward_head])?;
        Ok(loss)
    }

    /// One optimizer step per phase on freshly sampled batches; returns the mean loss over phases.
    pub fn step_sampled<R: Rng>(&mut self, data: &Sampler<'_>, batch_size: usize, rng: &mut R) -> Result<f64> {
        let mut total = 0.0;
        let phases = self.phases();
        for &phase in phases {
            total += if phase == Phase::Main && self.uses_transitions() {
                let ts = sample_transitions(data.dataset, batch_size, rng)?;
                self.step_transitions(&ts)?
            } else {
                let segs = sample_from_starts(data.dataset, &data.starts, batch_size, data.horizon, rng)?;
                self.step_segments(phase, &segs)?
            };
        }
        Ok(total / phases.len() as f64)
    }

    /// One pass over a shuffled dataset for `phase`: `max(1, n / batch_size)` optimizer steps,
    /// where `n` counts valid segments (or transitions for the DeepMDP loss). Returns the mean loss.
    pub fn epoch<R: Rng>(&mut self, phase: Phase, data: &Sampler<'_>, batch_size: usize, rng: &mut R) -> Result<f64> {
        let transitions = phase == Phase::Main && self.uses_transitions();
        let mut order: Vec<usize> = if transitions {
            (0..data.dataset.len()).collect()
        } else {
            data.starts.clone()
        };
        if order.is_empty() {
            return Err(Error::NoValidSegment {
                horizon: data.horizon,
                longest: data.dataset.longest_episode(),
            });
        }
        order.shuffle(rng);
        let steps = (order.len() / batch_size).max(1);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size).take(steps) {
            total += if transitions {
                let ts: Vec<Transition> = chunk.iter().map(|&i| data.dataset.transition(i)).collect();
                self.step_transitions(&ts)?
            } else {
                let segs = chunk
                    .iter()
                    .map(|&s| data.dataset.segment_at(s, data.horizon))
                    .collect::<Result<Vec<_>>>()?;
                self.step_segments(phase, &segs)?
            };
        }
        Ok(total / steps as f64)
    }
}

/// A dataset with its valid training-segment starts precomputed.
pub struct Sampler<'a> {
    pub dataset: &'a ReplayDataset,
    pub horizon: usize,
    pub starts: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(dataset: &'a ReplayDataset, horizon: usize) -> Self {
        Self {
            dataset,
            horizon,
            starts: dataset.valid_starts(horizon),
        }
    }
}

/// Fixed evaluation segments for the multi-step reward loss, drawn once per run.
pub fn eval_segments(dataset: &ReplayDataset, count: usize, horizon: usize, seed: u64) -> Result<Vec<TrajectorySegment>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    sample_segments(dataset, count, horizon, &mut rng)
}

/// Trains `model` on a fixed dataset. Each phase runs `epochs` epochs and logs one row per epoch,
/// so the state-prediction baseline produces `2 * epochs` rows (state phase, then reward head).
pub fn train_offline(model: &mut AnyModel, dataset: &ReplayDataset, config: &OfflineConfig) -> Result<TrainLog> {
    config.validate()?;
    dataset.validate()?;
    check_dim("dataset state dim", model.latent().d_s(), dataset.d_s())?;
    check_dim("dataset action dim", model.latent().d_a(), dataset.d_a())?;
    let mut trainer = Trainer::new(model.clone(), config.adam, config.grad_clip);
    let log = offline_epochs(&mut trainer, dataset, config, 0)?;
    *model = trainer.into_model();
    Ok(log)
}

fn offline_epochs(trainer: &mut Trainer, dataset: &ReplayDataset, config: &OfflineConfig, env_steps: u64) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    let eval = eval_segments(dataset, config.eval_segments, config.eval_horizon, config.seed)?;
    let sampler = Sampler::new(dataset, config.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let started = Instant::now();
    let env_steps = if env_steps == 0 { dataset.len() as u64 } else { env_steps };
    let mut iteration = 0;
    for &phase in trainer.phases() {
        for _ in 0..config.epochs {
            let train_loss = trainer.epoch(phase, &sampler, config.batch_size, &mut rng)?;
            iteration += 1;
            log.push(LogRecord {
                iteration,
                env_steps,
                train_loss,
                eval_loss_10step: trainer.model.latent().batch_loss(&eval)?,
                explore_return: None,
                eval_return: None,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub log: TrainLog,
    pub dataset: ReplayDataset,
}

/// Iterative training: OU-noise seed data and an initial offline phase, then repeatedly one
/// epsilon-greedy MPC episode followed by `train_iters_per_episode` optimizer steps.
///
/// Row 0 of the log summarizes the initialization phase. The env-step column is the
/// training environment's own counter; evaluation episodes run on separate instances.
pub fn train_online(
    env: &mut MultiPendulumEnv,
    model: &mut AnyModel,
    planner: &CemConfig,
    config: &OnlineConfig,
) -> Result<OnlineOutcome> {
    config.validate()?;
    planner.validate()?;
    let env_config = *env.config();
    check_dim("model state dim", env_config.obs_dim(), model.latent().d_s())?;
    let started = Instant::now();
    let mut noise = NoiseProcess::for_env(&env_config, config.seed);
    let mut data = collect_random(env, config.init_random_steps, &mut noise)?;
    let eval = eval_segments(&data, config.eval_segments, config.eval_horizon, config.seed)?;

    let mut trainer = Trainer::new(model.clone(), config.adam, config.grad_clip);
    let init_log = offline_epochs(&mut trainer, &data, &config.offline(config.init_epochs), env.total_steps())?;
    let mut log = TrainLog::default();
    log.push(LogRecord {
        iteration: 0,
        env_steps: env.total_steps(),
        train_loss: init_log.last().map_or(f64::NAN, |r| r.train_loss),
        eval_loss_10step: trainer.model.latent().batch_loss(&eval)?,
        explore_return: None,
        eval_return: None,
        seconds: started.elapsed().as_secs_f64(),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let bounds = (planner.action_low.clone(), planner.action_high.clone());
    for iteration in 1..=config.n_iterations {
        let mut episode = ReplayDataset::for_env(&env_config, "epsilon_greedy_mpc");
        let cem = CemConfig {
            seed: planner.seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..planner.clone()
        };
        let mpc = MpcPolicy::new(trainer.model.latent(), cem)?;
        let mut policy = EpsilonGreedy::new(
            mpc,
            config.epsilon,
            bounds.0.clone(),
            bounds.1.clone(),
            rng.random(),
        )?;
        let explore_return = run_episode(env, &mut policy, None, Some(&mut episode))?;
        data.extend(&episode)?;

        let sampler = Sampler::new(&data, config.horizon);
        let mut total = 0.0;
        for _ in 0..config.train_iters_per_episode {
            total += trainer.step_sampled(&sampler, config.batch_size, &mut rng)?;
        }

        let eval_return = if config.eval_every > 0 && (iteration % config.eval_every == 0 || iteration == config.n_iterations) {
            let mut policy = MpcPolicy::new(trainer.model.latent(), planner.clone())?;
            Some(evaluate(&env_config, &mut policy, config.eval_episodes, config.seed)?.mean)
        } else {
            None
        };
        log.push(LogRecord {
            iteration,
            env_steps: env.total_steps(),
            train_loss: total / config.train_iters_per_episode as f64,
            eval_loss_10step: trainer.model.latent().batch_loss(&eval)?,
            explore_return: Some(explore_return),
            eval_return,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    *model = trainer.into_model();
    Ok(OnlineOutcome { log, dataset: data })
}
