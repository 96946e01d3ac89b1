//! Cross-entropy-method model predictive control.
//!
//! The planner only needs a [`RolloutModel`]: a way to map an observation to
//! an initial latent and to advance a batch of latents while emitting rewards.
//! The learned [`LatentModel`] and the ground-truth pendulum ([`TrueDynamics`])
//! both implement it, so the same optimizer serves the learned-model agent and
//! the oracle baseline.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{pendulum_reward, pendulum_step, EnvConfig, PendulumState};
use crate::error::{check_dim, Error, Result};
use crate::model::LatentModel;

/// Upper bound on candidate rows per parallel rollout shard. Candidates are split into
/// equal-sized shards; a short trailing shard measurably slows the matrix products.
const ROLLOUT_SHARD: usize = 256;

pub trait RolloutModel: Sync {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;

    fn initial_latent(&self, observation: &[f64]) -> Result<Array1<f64>>;

    /// Rewards for each `(latent, action)` row and, if `advance`, the next latents.
    fn step(
        &self,
        latents: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        advance: bool,
    ) -> Result<(Array1<f64>, Option<Array2<f64>>)>;
}

impl<T: RolloutModel + ?Sized> RolloutModel for &T {
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn initial_latent(&self, observation: &[f64]) -> Result<Array1<f64>> {
        (**self).initial_latent(observation)
    }
    fn step(
        &self,
        latents: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        advance: bool,
    ) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
        (**self).step(latents, actions, advance)
    }
}

impl RolloutModel for LatentModel {
    fn obs_dim(&self) -> usize {
        self.d_s()
    }
    fn action_dim(&self) -> usize {
        self.d_a()
    }
    fn latent_dim(&self) -> usize {
        self.d_z()
    }

    fn initial_latent(&self, observation: &[f64]) -> Result<Array1<f64>> {
        check_dim("observation", self.d_s(), observation.len())?;
        let view = ArrayView2::from_shape((1, observation.len()), observation).expect("contiguous");
        Ok(self.encode(view)?.row(0).to_owned())
    }

    fn step(
        &self,
        latents: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        advance: bool,
    ) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
        check_dim("latent rows", latents.nrows(), actions.nrows())?;
        check_dim("latent dim", self.d_z(), latents.ncols())?;
        let x = ndarray::concatenate(Axis(1), &[latents, actions]).expect("row counts agree");
        let r = self.reward_head.predict(x.view())?.column(0).to_owned();
        let next = if advance { Some(self.dynamics.predict(x.view())?) } else { None };
        Ok((r, next))
    }
}

/// Exact single-pendulum dynamics and reward, read from the first observation triple.
///
/// Distractor pendulums never influence the reward, so planning against
/// pendulum 1 alone is the true objective.
#[derive(Debug, Clone)]
pub struct TrueDynamics {
    config: EnvConfig,
}

impl TrueDynamics {
    pub fn new(config: EnvConfig) -> Self {
        Self { config }
    }
}

impl RolloutModel for TrueDynamics {
    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn latent_dim(&self) -> usize {
        2
    }

    fn initial_latent(&self, observation: &[f64]) -> Result<Array1<f64>> {
        check_dim("observation", self.config.obs_dim(), observation.len())?;
        let s = PendulumState::from_observation(&observation[..3]);
        Ok(Array1::from(vec![s.theta, s.theta_dot]))
    }

    fn step(
        &self,
        latents: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        advance: bool,
    ) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
        check_dim("latent rows", latents.nrows(), actions.nrows())?;
        let n = latents.nrows();
        let mut rewards = Array1::zeros(n);
        let mut next = advance.then(|| Array2::zeros((n, 2)));
        let max = self.config.max_torque;
        for i in 0..n {
            let state = PendulumState::new(latents[[i, 0]], latents[[i, 1]]);
            let torque = actions[[i, 0]].clamp(-max, max);
            rewards[i] = pendulum_reward(state, torque);
            if let Some(next) = next.as_mut() {
                let s = pendulum_step(state, torque, &self.config);
                next[[i, 0]] = s.theta;
                next[[i, 1]] = s.theta_dot;
            }
        }
        Ok((rewards, next))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub horizon: usize,
    pub n_samples: usize,
    pub n_elites: usize,
    pub n_iterations: usize,
    /// Initial standard deviation as a fraction of half the action range.
    pub init_std: f64,
    /// Lower bound on refitted standard deviations, as a fraction of the action range.
    pub min_std: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub gamma: f64,
    pub seed: u64,
    /// Start each call from the previous plan shifted by one step. Off by default: on the
    /// pendulum it keeps re-selecting a constant push that leaves the pole hanging at an angle.
    pub warm_start: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            n_samples: 1000,
            n_elites: 100,
            n_iterations: 5,
            init_std: 0.5,
            min_std: 0.05,
            action_low: vec![-2.0],
            action_high: vec![2.0],
            gamma: 0.99,
            seed: 0,
            warm_start: false,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("planner: {msg}")));
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if self.n_iterations == 0 {
            return bad("n_iterations must be >= 1".into());
        }
        if self.n_elites == 0 || self.n_elites > self.n_samples {
            return bad(format!("need 1 <= n_elites <= n_samples, got {} of {}", self.n_elites, self.n_samples));
        }
        if self.action_low.is_empty() || self.action_low.len() != self.action_high.len() {
            return bad("action bounds must be non-empty and equally sized".into());
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return bad("action_low must be < action_high in every dimension".into());
        }
        if !(self.init_std > 0.0) || !(self.min_std >= 0.0) {
            return bad("init_std must be > 0 and min_std >= 0".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    fn range(&self, d: usize) -> f64 {
        self.action_high[d] - self.action_low[d]
    }

    fn clip(&self, d: usize, v: f64) -> f64 {
        v.clamp(self.action_low[d], self.action_high[d])
    }
}

/// Per-step diagonal Gaussian over action sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// `H x d_a`
    pub mean: Array2<f64>,
    /// `H x d_a`, elementwise positive.
    pub std: Array2<f64>,
}

impl Plan {
    pub fn initial(config: &CemConfig) -> Self {
        let (h, d) = (config.horizon, config.action_dim());
        Self {
            mean: Array2::from_shape_fn((h, d), |(_, j)| config.clip(j, 0.0)),
            std: Array2::from_shape_fn((h, d), |(_, j)| config.init_std * config.range(j) / 2.0),
        }
    }

    /// Drops the executed first step and repeats the last one; std starts over.
    pub fn shifted(&self, config: &CemConfig) -> Self {
        let mut next = Self::initial(config);
        let h = self.mean.nrows().min(config.horizon);
        if h == 0 {
            return next;
        }
        for k in 0..config.horizon {
            let src = (k + 1).min(h - 1);
            next.mean.row_mut(k).assign(&self.mean.row(src));
        }
        next
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub action: Vec<f64>,
    pub plan: Plan,
    /// Return of the best sequence evaluated during the call.
    pub best_return: f64,
    pub best_sequence: Array2<f64>,
    /// Best evaluated return in each iteration; non-decreasing because the incumbent is re-evaluated.
    pub iteration_best: Vec<f64>,
    pub rollouts: usize,
}

/// Discounted returns of `K x H x d_a` candidate sequences from one observation.
///
/// The observation is mapped to its initial latent once; all candidates roll out from it.
pub fn evaluate_sequences<M: RolloutModel + ?Sized>(
    model: &M,
    observation: &[f64],
    sequences: &Array3<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    let (k, h, d_a) = sequences.dim();
    check_dim("sequence action dim", model.action_dim(), d_a)?;
    if h == 0 {
        return Err(Error::InvalidConfig("sequence horizon must be >= 1".into()));
    }
    let z0 = model.initial_latent(observation)?;
    let n_shards = k.div_ceil(ROLLOUT_SHARD).max(1);
    let shard = k.div_ceil(n_shards).max(1);
    let starts: Vec<usize> = (0..k).step_by(shard).collect();
    let parts: Vec<Result<Array1<f64>>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + shard).min(k);
            let n = hi - lo;
            let mut z = z0.broadcast((n, z0.len())).expect("broadcast row").to_owned();
            let mut returns = Array1::zeros(n);
            let mut disc = 1.0;
            for step in 0..h {
                let actions = sequences.slice(s![lo..hi, step, ..]);
                let (r, next) = model.step(z.view(), actions, step + 1 < h)?;
                returns.scaled_add(disc, &r);
                disc *= gamma;
                if let Some(next) = next {
                    z = next;
                }
            }
            Ok(returns)
        })
        .collect();
    let mut out = Array1::zeros(k);
    for (lo, part) in starts.into_iter().zip(parts) {
        let part = part?;
        out.slice_mut(s![lo..lo + part.len()]).assign(&part);
    }
    Ok(out)
}

/// One receding-horizon CEM optimization from `observation`.
pub fn cem_plan<M: RolloutModel + ?Sized, R: Rng>(
    model: &M,
    observation: &[f64],
    config: &CemConfig,
    prev_plan: Option<&Plan>,
    rng: &mut R,
) -> Result<PlanOutcome> {
    config.validate()?;
    check_dim("planner action dim", model.action_dim(), config.action_dim())?;
    let (h, d_a, k) = (config.horizon, config.action_dim(), config.n_samples);

    let mut plan = match prev_plan {
        Some(p) if config.warm_start => p.shifted(config),
        _ => Plan::initial(config),
    };
    let floor: Vec<f64> = (0..d_a).map(|d| config.min_std * config.range(d)).collect();

    let mut best: Option<(f64, Array2<f64>)> = None;
    let mut iteration_best = Vec::with_capacity(config.n_iterations);
    let mut rollouts = 0;
    let mut samples = Array3::zeros((k, h, d_a));
    let mut order: Vec<usize> = (0..k).collect();

    for _ in 0..config.n_iterations {
        for i in 0..k {
            for t in 0..h {
                for d in 0..d_a {
                    let eps: f64 = rng.sample(StandardNormal);
                    samples[[i, t, d]] = config.clip(d, plan.mean[[t, d]] + plan.std[[t, d]] * eps);
                }
            }
        }
        if let Some((_, seq)) = &best {
            samples.index_axis_mut(Axis(0), 0).assign(seq);
        }
        let returns = evaluate_sequences(model, observation, &samples, config.gamma)?;
        rollouts += k;
        if let Some((i, &v)) = returns.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteReturn { index: i, value: v });
        }

        order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
        let top = order[0];
        iteration_best.push(returns[top]);
        if best.as_ref().is_none_or(|(v, _)| returns[top] > *v) {
            best = Some((returns[top], samples.index_axis(Axis(0), top).to_owned()));
        }

        let elites = &order[..config.n_elites];
        let n = elites.len() as f64;
        for t in 0..h {
            for d in 0..d_a {
                let mean = elites.iter().map(|&i| samples[[i, t, d]]).sum::<f64>() / n;
                let var = elites.iter().map(|&i| (samples[[i, t, d]] - mean).powi(2)).sum::<f64>() / n;
                plan.mean[[t, d]] = config.clip(d, mean);
                plan.std[[t, d]] = var.sqrt().max(floor[d]).max(f64::MIN_POSITIVE);
            }
        }
    }

    let (best_return, best_sequence) = best.expect("at least one iteration");
    let action = (0..d_a).map(|d| config.clip(d, plan.mean[[0, d]])).collect();
    Ok(PlanOutcome {
        action,
        plan,
        best_return,
        best_sequence,
        iteration_best,
        rollouts,
    })
}

pub trait Policy {
    fn act(&mut self, observation: &[f64]) -> Result<Vec<f64>>;

    /// Clears per-episode state.
    fn reset(&mut self) {}
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn act(&mut self, observation: &[f64]) -> Result<Vec<f64>> {
        (**self).act(observation)
    }
    fn reset(&mut self) {
        (**self).reset()
    }
}

/// Re-plans at every step and executes only the first action.
///
/// Sampling noise for each call is seeded from the configured seed and the
/// observation's bits, so actions depend only on the seed, the observation
/// and (with warm starts) the previous plan.
pub struct MpcPolicy<M> {
    model: M,
    config: CemConfig,
    plan: Option<Plan>,
    last: Option<PlanOutcome>,
}

impl<M: RolloutModel> MpcPolicy<M> {
    pub fn new(model: M, config: CemConfig) -> Result<Self> {
        config.validate()?;
        check_dim("planner action dim", model.action_dim(), config.action_dim())?;
        Ok(Self {
            model,
            config,
            plan: None,
            last: None,
        })
    }

    pub fn config(&self) -> &CemConfig {
        &self.config
    }

    pub fn last_outcome(&self) -> Option<&PlanOutcome> {
        self.last.as_ref()
    }
}

impl<M: RolloutModel> Policy for MpcPolicy<M> {
    fn act(&mut self, observation: &[f64]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(observation_seed(self.config.seed, observation));
        let outcome = cem_plan(&self.model, observation, &self.config, self.plan.as_ref(), &mut rng)?;
        let action = outcome.action.clone();
        self.plan = self.config.warm_start.then(|| outcome.plan.clone());
        self.last = Some(outcome);
        Ok(action)
    }

    fn reset(&mut self) {
        self.plan = None;
        self.last = None;
    }
}

/// Mixes a seed with the exact bit patterns of an observation (FNV-1a then splitmix64 finalizer).
pub fn observation_seed(seed: u64, observation: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for v in observation {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    /// `r = -(a - target)^2`, latent unused.
    struct Quadratic {
        target: f64,
    }

    impl RolloutModel for Quadratic {
        fn obs_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn latent_dim(&self) -> usize {
            1
        }
        fn initial_latent(&self, _: &[f64]) -> Result<Array1<f64>> {
            Ok(Array1::zeros(1))
        }
        fn step(
            &self,
            latents: ArrayView2<f64>,
            actions: ArrayView2<f64>,
            advance: bool,
        ) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
            let r = actions.column(0).mapv(|a| -(a - self.target).powi(2));
            Ok((r, advance.then(|| latents.to_owned())))
        }
    }

    struct Exploding;

    impl RolloutModel for Exploding {
        fn obs_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn latent_dim(&self) -> usize {
            1
        }
        fn initial_latent(&self, _: &[f64]) -> Result<Array1<f64>> {
            Ok(Array1::zeros(1))
        }
        fn step(
            &self,
            latents: ArrayView2<f64>,
            actions: ArrayView2<f64>,
            advance: bool,
        ) -> Result<(Array1<f64>, Option<Array2<f64>>)> {
            let r = actions.column(0).mapv(|a| if a > 1.0 { f64::NAN } else { a });
            Ok((r, advance.then(|| latents.to_owned())))
        }
    }

    fn one_dim(h: usize) -> CemConfig {
        CemConfig {
            horizon: h,
            ..CemConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(CemConfig::default().validate().is_ok());
        for bad in [
            CemConfig { horizon: 0, ..Default::default() },
            CemConfig { n_elites: 0, ..Default::default() },
            CemConfig { n_elites: 1001, ..Default::default() },
            CemConfig { n_iterations: 0, ..Default::default() },
            CemConfig { action_low: vec![2.0], ..Default::default() },
            CemConfig { gamma: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn quadratic_optimum_found() {
        let cfg = CemConfig {
            warm_start: false,
            ..one_dim(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = cem_plan(&Quadratic { target: 0.7 }, &[0.0], &cfg, None, &mut rng).unwrap();
        assert!((out.plan.mean[[0, 0]] - 0.7).abs() < 0.02, "{}", out.plan.mean[[0, 0]]);
        assert!((out.action[0] - 0.7).abs() < 0.02);
        assert_eq!(out.rollouts, 5 * 1000);
    }

    #[test]
    fn degenerate_search_returns_known_optimum() {
        let cfg = CemConfig {
            init_std: 1e-12,
            min_std: 0.0,
            n_iterations: 2,
            warm_start: true,
            ..one_dim(1)
        };
        let prev = Plan {
            mean: Array2::from_elem((1, 1), -1.3),
            std: Array2::from_elem((1, 1), 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = cem_plan(&Quadratic { target: -1.3 }, &[0.0], &cfg, Some(&prev), &mut rng).unwrap();
        assert!((out.action[0] + 1.3).abs() < 1e-9);
    }

    #[test]
    fn incumbent_is_monotone_and_actions_in_bounds() {
        let model = TrueDynamics::new(EnvConfig::default());
        let obs = crate::env::observe(&[PendulumState::new(2.5, -0.4)]);
        let cfg = CemConfig {
            n_samples: 200,
            n_elites: 20,
            ..CemConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = cem_plan(&model, &obs, &cfg, None, &mut rng).unwrap();
        assert!(out.iteration_best.windows(2).all(|w| w[1] >= w[0]), "{:?}", out.iteration_best);
        assert_eq!(out.best_return, *out.iteration_best.last().unwrap());
        assert!(out.plan.mean.iter().all(|&a| (-2.0..=2.0).contains(&a)));
        assert!(out.plan.std.iter().all(|&s| s > 0.0));
        assert!(out.best_sequence.iter().all(|&a| (-2.0..=2.0).contains(&a)));
        assert_eq!(out.rollouts, cfg.n_iterations * cfg.n_samples);
    }

    #[test]
    fn non_finite_return_reported() {
        let cfg = one_dim(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        match cem_plan(&Exploding, &[0.0], &cfg, None, &mut rng) {
            Err(Error::NonFiniteReturn { index, .. }) => assert!(index < cfg.n_samples),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn horizon_one_returns_are_immediate_rewards() {
        let model = LatentModel::new(6, 1, 3, 0.9, &Architecture { hidden: vec![8], ..Default::default() }, 5).unwrap();
        let obs = vec![0.1, 0.9, -0.3, 0.5, 0.2, 1.0];
        let seqs = Array3::from_shape_fn((7, 1, 1), |(i, _, _)| -2.0 + i as f64 * 0.6);
        let returns = evaluate_sequences(&model, &obs, &seqs, 0.9).unwrap();
        let z = model.initial_latent(&obs).unwrap();
        for i in 0..7 {
            let a = Array2::from_elem((1, 1), seqs[[i, 0, 0]]);
            let expect = model.predict_reward(z.view().insert_axis(Axis(0)), a.view()).unwrap()[0];
            assert_eq!(returns[i], expect);
        }
    }

    #[test]
    fn duplicated_rows_give_duplicated_returns() {
        let model = TrueDynamics::new(EnvConfig::with_pendulums(2));
        let obs = crate::env::observe(&[PendulumState::new(1.0, 0.5), PendulumState::new(-1.0, 2.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Array3::from_shape_simple_fn((300, 12, 1), || rng.random_range(-2.0..2.0));
        let doubled = ndarray::concatenate(Axis(0), &[base.view(), base.view()]).unwrap();
        let r = evaluate_sequences(&model, &obs, &doubled, 0.99).unwrap();
        for i in 0..300 {
            assert_eq!(r[i], r[i + 300]);
        }
    }

    #[test]
    fn true_dynamics_matches_environment_rollout() {
        let cfg = EnvConfig::with_pendulums(3);
        let mut env = crate::env::MultiPendulumEnv::new(cfg).unwrap();
        let obs = env.reset(Some(8));
        let actions: Vec<f64> = (0..12).map(|t| ((t * 5 % 7) as f64 - 3.0) * 0.6).collect();
        let seq = Array3::from_shape_fn((1, 12, 1), |(_, t, _)| actions[t]);
        let planned = evaluate_sequences(&TrueDynamics::new(cfg), &obs, &seq, 1.0).unwrap()[0];
        let realized: f64 = actions.iter().map(|&a| env.step(a).unwrap().reward).sum();
        assert!((planned - realized).abs() < 1e-9, "{planned} vs {realized}");
    }

    #[test]
    fn policy_is_deterministic_and_history_free_without_warm_start() {
        let cfg = CemConfig {
            n_samples: 100,
            n_elites: 10,
            warm_start: false,
            seed: 9,
            ..CemConfig::default()
        };
        let model = TrueDynamics::new(EnvConfig::default());
        let obs_a = crate::env::observe(&[PendulumState::new(3.0, 0.0)]);
        let obs_b = crate::env::observe(&[PendulumState::new(-1.0, 1.0)]);
        let mut fresh = MpcPolicy::new(&model, cfg.clone()).unwrap();
        let mut used = MpcPolicy::new(&model, cfg.clone()).unwrap();
        used.act(&obs_a).unwrap();
        used.act(&obs_a).unwrap();
        assert_eq!(fresh.act(&obs_b).unwrap(), used.act(&obs_b).unwrap());
    }

    #[test]
    fn identical_policies_produce_identical_action_streams() {
        let cfg = CemConfig {
            n_samples: 100,
            n_elites: 10,
            warm_start: true,
            ..CemConfig::default()
        };
        let run = || {
            let mut env = crate::env::MultiPendulumEnv::new(EnvConfig::default()).unwrap();
            let mut obs = env.reset(Some(4));
            let mut policy = MpcPolicy::new(TrueDynamics::new(EnvConfig::default()), cfg.clone()).unwrap();
            let mut acts = Vec::new();
            for _ in 0..15 {
                let a = policy.act(&obs).unwrap();
                obs = env.step(a[0]).unwrap().observation;
                acts.push(a[0]);
            }
            acts
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warm_start_shift_repeats_last_step() {
        let cfg = one_dim(3);
        let p = Plan {
            mean: Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.3]).unwrap(),
            std: Array2::from_elem((3, 1), 0.01),
        };
        let s = p.shifted(&cfg);
        assert_eq!(s.mean.column(0).to_vec(), vec![0.2, 0.3, 0.3]);
        assert!(s.std.iter().all(|&v| v == 1.0));
    }
}
