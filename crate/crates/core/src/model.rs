//! Latent reward-prediction models.
//!
//! A [`LatentModel`] embeds an observation once, then rolls forward purely in
//! latent space, predicting one reward per action. It is trained end to end on
//! the discounted multi-step reward error along open-loop rollouts. Two
//! baselines share the same three networks but learn them differently:
//! [`StatePredModel`] learns its latent space by reconstructing observations
//! and fits the reward head afterwards, [`DeepMdpModel`] uses a one-step
//! reward loss plus a latent transition-consistency loss.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, ByteReader, ForwardTape, Mlp, MlpGrads};

pub const MODEL_MAGIC: &[u8; 5] = b"LRPC1";

/// Segments per parallel gradient shard. Fixed so results do not depend on thread count.
const SHARD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Reward,
    StatePred,
    #[serde(rename = "deepmdp")]
    DeepMdp,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Reward => "reward",
            ModelVariant::StatePred => "state_pred",
            ModelVariant::DeepMdp => "deepmdp",
        }
    }

    fn tag(self) -> u8 {
        match self {
            ModelVariant::Reward => 0,
            ModelVariant::StatePred => 1,
            ModelVariant::DeepMdp => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelVariant::Reward),
            1 => Some(ModelVariant::StatePred),
            2 => Some(ModelVariant::DeepMdp),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward" => Ok(ModelVariant::Reward),
            "state_pred" => Ok(ModelVariant::StatePred),
            "deepmdp" => Ok(ModelVariant::DeepMdp),
            other => Err(Error::InvalidConfig(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Hidden layer widths and activation shared by every network of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.hidden.len() + 2);
        v.push(input);
        v.extend(&self.hidden);
        v.push(output);
        v
    }

    /// A network from `input` to `output` through these hidden layers.
    pub fn build(&self, input: usize, output: usize, seed: u64) -> Result<Mlp> {
        Mlp::new(&self.sizes(input, output), self.activation, seed)
    }
}

/// An H-step contiguous slice of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    /// `H x d_s`
    pub states: Array2<f64>,
    /// `H x d_a`
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
}

impl TrajectorySegment {
    pub fn new(states: Array2<f64>, actions: Array2<f64>, rewards: Array1<f64>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::InvalidConfig("segment horizon must be >= 1".into()));
        }
        check_dim("segment states", rewards.len(), states.nrows())?;
        check_dim("segment actions", rewards.len(), actions.nrows())?;
        Ok(Self {
            states,
            actions,
            rewards,
        })
    }

    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }
}

/// One environment transition `(s, a, r, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Column-stacked view of a batch of equal-horizon segments.
struct SegmentBatch {
    /// Per step, `B x d_s`. Only the first entry is filled unless states were requested.
    states: Vec<Array2<f64>>,
    /// Per step, `B x d_a`.
    actions: Vec<Array2<f64>>,
    /// `B x H`
    rewards: Array2<f64>,
}

impl SegmentBatch {
    fn assemble(segs: &[TrajectorySegment], d_s: usize, d_a: usize, all_states: bool) -> Result<Self> {
        let Some(first) = segs.first() else {
            return Err(Error::InvalidConfig("empty segment batch".into()));
        };
        let h = first.horizon();
        if h == 0 {
            return Err(Error::InvalidConfig("segment horizon must be >= 1".into()));
        }
        let b = segs.len();
        for seg in segs {
            check_dim("segment horizon", h, seg.horizon())?;
            check_dim("segment state dim", d_s, seg.states.ncols())?;
            check_dim("segment action dim", d_a, seg.actions.ncols())?;
        }
        let n_states = if all_states { h } else { 1 };
        let states = (0..n_states)
            .map(|k| Array2::from_shape_fn((b, d_s), |(i, j)| segs[i].states[[k, j]]))
            .collect();
        let actions = (0..h)
            .map(|k| Array2::from_shape_fn((b, d_a), |(i, j)| segs[i].actions[[k, j]]))
            .collect();
        let rewards = Array2::from_shape_fn((b, h), |(i, k)| segs[i].rewards[k]);
        Ok(Self {
            states,
            actions,
            rewards,
        })
    }

    fn horizon(&self) -> usize {
        self.actions.len()
    }
}

fn concat_cols(z: &ArrayView2<f64>, a: &ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[z.view(), a.view()]).expect("row counts agree")
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("contiguous slice")
}

/// Splits `segs` into fixed shards, evaluates `f` on each in parallel and sums in shard order.
fn sharded<T, F>(segs: &[T], f: F) -> Result<(f64, Vec<MlpGrads>)>
where
    T: Sync,
    F: Fn(&[T]) -> Result<(f64, Vec<MlpGrads>)> + Sync,
{
    let parts: Vec<Result<(f64, Vec<MlpGrads>)>> = segs.par_chunks(SHARD).map(&f).collect();
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    Ok((loss, grads))
}

/// Encoder, latent dynamics and reward head, plus the discount used by the loss and planner.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub reward_head: Mlp,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrads {
    pub encoder: MlpGrads,
    pub dynamics: MlpGrads,
    pub reward_head: MlpGrads,
}

impl LatentGrads {
    fn from_vec(mut v: Vec<MlpGrads>) -> Self {
        let reward_head = v.pop().unwrap();
        let dynamics = v.pop().unwrap();
        let encoder = v.pop().unwrap();
        Self {
            encoder,
            dynamics,
            reward_head,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.encoder.is_zero() && self.dynamics.is_zero() && self.reward_head.is_zero()
    }
}

impl LatentModel {
    pub fn new(d_s: usize, d_a: usize, d_z: usize, gamma: f64, arch: &Architecture, seed: u64) -> Result<Self> {
        Self::from_parts(
            arch.build(d_s, d_z, seed)?,
            arch.build(d_z + d_a, d_z, seed.wrapping_add(1))?,
            arch.build(d_z + d_a, 1, seed.wrapping_add(2))?,
            gamma,
        )
    }

    pub fn from_parts(encoder: Mlp, dynamics: Mlp, reward_head: Mlp, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {gamma}")));
        }
        let d_z = encoder.output_dim();
        check_dim("dynamics latent output", d_z, dynamics.output_dim())?;
        check_dim("reward head output", 1, reward_head.output_dim())?;
        check_dim("reward head input", dynamics.input_dim(), reward_head.input_dim())?;
        if dynamics.input_dim() <= d_z {
            return Err(Error::InvalidConfig("dynamics input must hold latent and action".into()));
        }
        Ok(Self {
            encoder,
            dynamics,
            reward_head,
            gamma,
        })
    }

    pub fn d_s(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn d_z(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn d_a(&self) -> usize {
        self.dynamics.input_dim() - self.d_z()
    }

    pub fn nets(&self) -> [&Mlp; 3] {
        [&self.encoder, &self.dynamics, &self.reward_head]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.encoder, &mut self.dynamics, &mut self.reward_head]
    }

    /// Batch encode, `B x d_s -> B x d_z`.
    pub fn encode(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.encoder.predict(states)
    }

    pub fn latent_step(&self, z: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("latent rows", z.nrows(), a.nrows())?;
        check_dim("latent dim", self.d_z(), z.ncols())?;
        self.dynamics.predict(concat_cols(&z, &a).view())
    }

    pub fn predict_reward(&self, z: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_dim("latent rows", z.nrows(), a.nrows())?;
        check_dim("latent dim", self.d_z(), z.ncols())?;
        Ok(self.reward_head.predict(concat_cols(&z, &a).view())?.column(0).to_owned())
    }

    /// Encodes `state` once and rolls the latent dynamics along `actions` (`H x d_a`).
    ///
    /// Returns the `H x d_z` latents and the `H` predicted rewards.
    pub fn unroll(&self, state: &[f64], actions: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let h = actions.nrows();
        if h == 0 {
            return Err(Error::InvalidConfig("unroll horizon must be >= 1".into()));
        }
        check_dim("unroll state", self.d_s(), state.len())?;
        check_dim("unroll action dim", self.d_a(), actions.ncols())?;
        let mut latents = Array2::zeros((h, self.d_z()));
        let mut rewards = Array1::zeros(h);
        let mut z = self.encode(row(state))?;
        for k in 0..h {
            let a = actions.slice(s![k..k + 1, ..]);
            latents.row_mut(k).assign(&z.row(0));
            rewards[k] = self.predict_reward(z.view(), a)?[0];
            if k + 1 < h {
                z = self.latent_step(z.view(), a)?;
            }
        }
        Ok((latents, rewards))
    }

    /// Discounted multi-step reward loss of one segment,
    /// `(1/H) sum_k (gamma^k (r_k - rhat_k))^2` with `rhat` from an open-loop unroll of `states[0]`.
    pub fn multi_step_loss(&self, seg: &TrajectorySegment) -> Result<f64> {
        let (_, predicted) = self.unroll(
            seg.states.row(0).as_slice().expect("standard layout"),
            seg.actions.view(),
        )?;
        Ok(discounted_mse(&seg.rewards, &predicted, self.gamma))
    }

    /// Mean multi-step loss over a batch of equal-horizon segments.
    pub fn batch_loss(&self, segs: &[TrajectorySegment]) -> Result<f64> {
        let parts: Vec<Result<f64>> = segs
            .par_chunks(SHARD)
            .map(|chunk| {
                let batch = SegmentBatch::assemble(chunk, self.d_s(), self.d_a(), false)?;
                let predicted = self.rollout_rewards(&batch)?;
                Ok(per_row_losses(&batch.rewards, &predicted, self.gamma).sum())
            })
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total / segs.len() as f64)
    }

    fn rollout_rewards(&self, batch: &SegmentBatch) -> Result<Array2<f64>> {
        let h = batch.horizon();
        let mut z = self.encode(batch.states[0].view())?;
        let mut out = Array2::zeros((batch.rewards.nrows(), h));
        for k in 0..h {
            let x = concat_cols(&z.view(), &batch.actions[k].view());
            out.column_mut(k).assign(&self.reward_head.predict(x.view())?.column(0));
            if k + 1 < h {
                z = self.dynamics.predict(x.view())?;
            }
        }
        Ok(out)
    }

    /// Batch-mean multi-step loss and its exact gradient, backpropagated through the whole unroll.
    pub fn loss_gradient(&self, segs: &[TrajectorySegment]) -> Result<(f64, LatentGrads)> {
        if segs.is_empty() {
            return Err(Error::InvalidConfig("empty segment batch".into()));
        }
        let scale = 1.0 / segs.len() as f64;
        let (loss, grads) = sharded(segs, |chunk| self.shard_gradient(chunk, scale))?;
        Ok((loss * scale, LatentGrads::from_vec(grads)))
    }

    fn shard_gradient(&self, segs: &[TrajectorySegment], scale: f64) -> Result<(f64, Vec<MlpGrads>)> {
        let batch = SegmentBatch::assemble(segs, self.d_s(), self.d_a(), false)?;
        let h = batch.horizon();
        let d_z = self.d_z();

        let (z0, enc_tape) = self.encoder.forward(batch.states[0].view())?;
        let mut reward_tapes = Vec::with_capacity(h);
        let mut dyn_tapes = Vec::with_capacity(h.saturating_sub(1));
        let mut predicted = Array2::zeros(batch.rewards.raw_dim());
        let mut z = z0;
        for k in 0..h {
            let x = concat_cols(&z.view(), &batch.actions[k].view());
            let (r, tape) = self.reward_head.forward(x.view())?;
            predicted.column_mut(k).assign(&r.column(0));
            reward_tapes.push(tape);
            if k + 1 < h {
                let (next, tape) = self.dynamics.forward(x.view())?;
                dyn_tapes.push(tape);
                z = next;
            }
        }
        let loss = per_row_losses(&batch.rewards, &predicted, self.gamma).sum();

        let mut g_enc = MlpGrads::zeros_like(&self.encoder);
        let mut g_dyn = MlpGrads::zeros_like(&self.dynamics);
        let mut g_rew = MlpGrads::zeros_like(&self.reward_head);
        let reward_grad = discounted_mse_grad(&batch.rewards, &predicted, self.gamma, scale);
        let mut gz_next: Option<Array2<f64>> = None;
        for k in (0..h).rev() {
            let dr = reward_grad.slice(s![.., k..k + 1]);
            let mut gx = self
                .reward_head
                .backward_accumulate(&reward_tapes[k], dr, &mut g_rew, true)?
                .expect("input grad");
            if let Some(gz) = gz_next.take() {
                gx += &self
                    .dynamics
                    .backward_accumulate(&dyn_tapes[k], gz.view(), &mut g_dyn, true)?
                    .expect("input grad");
            }
            gz_next = Some(gx.slice(s![.., ..d_z]).to_owned());
        }
        let gz0 = gz_next.expect("horizon >= 1");
        self.encoder.backward_accumulate(&enc_tape, gz0.view(), &mut g_enc, false)?;
        Ok((loss, vec![g_enc, g_dyn, g_rew]))
    }
}

fn per_row_losses(target: &Array2<f64>, predicted: &Array2<f64>, gamma: f64) -> Array1<f64> {
    let h = target.ncols();
    let mut out = Array1::zeros(target.nrows());
    for (i, (t, p)) in target.outer_iter().zip(predicted.outer_iter()).enumerate() {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for k in 0..h {
            let e = disc * (t[k] - p[k]);
            acc += e * e;
            disc *= gamma;
        }
        out[i] = acc / h as f64;
    }
    out
}

fn discounted_mse(target: &Array1<f64>, predicted: &Array1<f64>, gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut disc = 1.0;
    for (t, p) in target.iter().zip(predicted) {
        let e = disc * (t - p);
        acc += e * e;
        disc *= gamma;
    }
    acc / target.len() as f64
}

/// d/d(predicted) of `scale * sum_rows per_row_losses`.
fn discounted_mse_grad(target: &Array2<f64>, predicted: &Array2<f64>, gamma: f64, scale: f64) -> Array2<f64> {
    let h = target.ncols();
    let mut out = Array2::zeros(target.raw_dim());
    let mut disc2 = 1.0;
    for k in 0..h {
        for i in 0..target.nrows() {
            out[[i, k]] = -2.0 * disc2 * (target[[i, k]] - predicted[[i, k]]) * scale / h as f64;
        }
        disc2 *= gamma * gamma;
    }
    out
}

/// Baseline whose latent space is learned by observation reconstruction only.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePredModel {
    pub latent: LatentModel,
    pub decoder: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePredGrads {
    pub encoder: MlpGrads,
    pub dynamics: MlpGrads,
    pub decoder: MlpGrads,
}

impl StatePredModel {
    pub fn new(d_s: usize, d_a: usize, d_z: usize, gamma: f64, arch: &Architecture, seed: u64) -> Result<Self> {
        let latent = LatentModel::new(d_s, d_a, d_z, gamma, arch, seed)?;
        let decoder = arch.build(d_z, d_s, seed.wrapping_add(3))?;
        Self::from_parts(latent, decoder)
    }

    pub fn from_parts(latent: LatentModel, decoder: Mlp) -> Result<Self> {
        check_dim("decoder input", latent.d_z(), decoder.input_dim())?;
        check_dim("decoder output", latent.d_s(), decoder.output_dim())?;
        Ok(Self { latent, decoder })
    }

    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.decoder.predict(z)
    }

    /// `(1/H) sum_k ||s_k - decode(zhat_k)||^2` along the open-loop latent rollout.
    pub fn state_pred_loss(&self, seg: &TrajectorySegment) -> Result<f64> {
        let m = &self.latent;
        let (latents, _) = m.unroll(seg.states.row(0).as_slice().expect("standard layout"), seg.actions.view())?;
        check_dim("segment state dim", m.d_s(), seg.states.ncols())?;
        let decoded = self.decode(latents.view())?;
        let sq: f64 = (&seg.states - &decoded).iter().map(|e| e * e).sum();
        Ok(sq / seg.horizon() as f64)
    }

    pub fn state_pred_batch_loss(&self, segs: &[TrajectorySegment]) -> Result<f64> {
        let mut total = 0.0;
        for seg in segs {
            total += self.state_pred_loss(seg)?;
        }
        Ok(total / segs.len() as f64)
    }

    /// Gradient of the batch-mean state-prediction loss for encoder, dynamics and decoder.
    pub fn state_pred_gradient(&self, segs: &[TrajectorySegment]) -> Result<(f64, StatePredGrads)> {
        if segs.is_empty() {
            return Err(Error::InvalidConfig("empty segment batch".into()));
        }
        let scale = 1.0 / segs.len() as f64;
        let (loss, mut g) = sharded(segs, |chunk| self.state_pred_shard(chunk, scale))?;
        let decoder = g.pop().unwrap();
        let dynamics = g.pop().unwrap();
        let encoder = g.pop().unwrap();
        Ok((
            loss * scale,
            StatePredGrads {
                encoder,
                dynamics,
                decoder,
            },
        ))
    }

    fn state_pred_shard(&self, segs: &[TrajectorySegment], scale: f64) -> Result<(f64, Vec<MlpGrads>)> {
        let m = &self.latent;
        let batch = SegmentBatch::assemble(segs, m.d_s(), m.d_a(), true)?;
        let h = batch.horizon();
        let d_z = m.d_z();
        let (mut z, enc_tape) = m.encoder.forward(batch.states[0].view())?;
        let mut dec_tapes: Vec<ForwardTape> = Vec::with_capacity(h);
        let mut dyn_tapes = Vec::with_capacity(h);
        let mut residuals = Vec::with_capacity(h);
        let mut loss = 0.0;
        for k in 0..h {
            let (decoded, tape) = self.decoder.forward(z.view())?;
            let resid = &batch.states[k] - &decoded;
            loss += resid.iter().map(|e| e * e).sum::<f64>() / h as f64;
            residuals.push(resid);
            dec_tapes.push(tape);
            if k + 1 < h {
                let x = concat_cols(&z.view(), &batch.actions[k].view());
                let (next, tape) = m.dynamics.forward(x.view())?;
                dyn_tapes.push(tape);
                z = next;
            }
        }

        let mut g_enc = MlpGrads::zeros_like(&m.encoder);
        let mut g_dyn = MlpGrads::zeros_like(&m.dynamics);
        let mut g_dec = MlpGrads::zeros_like(&self.decoder);
        let mut gz_next: Option<Array2<f64>> = None;
        for k in (0..h).rev() {
            let d_out = residuals[k].mapv(|e| -2.0 * e * scale / h as f64);
            let mut gz = self
                .decoder
                .backward_accumulate(&dec_tapes[k], d_out.view(), &mut g_dec, true)?
                .expect("input grad");
            if let Some(gn) = gz_next.take() {
                let gx = m
                    .dynamics
                    .backward_accumulate(&dyn_tapes[k], gn.view(), &mut g_dyn, true)?
                    .expect("input grad");
                gz += &gx.slice(s![.., ..d_z]);
            }
            gz_next = Some(gz);
        }
        let gz0 = gz_next.expect("horizon >= 1");
        m.encoder.backward_accumulate(&enc_tape, gz0.view(), &mut g_enc, false)?;
        Ok((loss, vec![g_enc, g_dyn, g_dec]))
    }

    /// Reward loss over the frozen latent rollout; identical in form to the multi-step loss.
    pub fn reward_head_loss(&self, seg: &TrajectorySegment) -> Result<f64> {
        self.latent.multi_step_loss(seg)
    }

    /// Gradient of the batch-mean reward-head loss; only the reward head receives gradient.
    pub fn reward_head_gradient(&self, segs: &[TrajectorySegment]) -> Result<(f64, MlpGrads)> {
        if segs.is_empty() {
            return Err(Error::InvalidConfig("empty segment batch".into()));
        }
        let scale = 1.0 / segs.len() as f64;
        let (loss, mut g) = sharded(segs, |chunk| self.reward_head_shard(chunk, scale))?;
        Ok((loss * scale, g.pop().unwrap()))
    }

    fn reward_head_shard(&self, segs: &[TrajectorySegment], scale: f64) -> Result<(f64, Vec<MlpGrads>)> {
        let m = &self.latent;
        let batch = SegmentBatch::assemble(segs, m.d_s(), m.d_a(), false)?;
        let h = batch.horizon();
        let mut z = m.encode(batch.states[0].view())?;
        let mut tapes = Vec::with_capacity(h);
        let mut predicted = Array2::zeros(batch.rewards.raw_dim());
        for k in 0..h {
            let x = concat_cols(&z.view(), &batch.actions[k].view());
            let (r, tape) = m.reward_head.forward(x.view())?;
            predicted.column_mut(k).assign(&r.column(0));
            tapes.push(tape);
            if k + 1 < h {
                z = m.dynamics.predict(x.view())?;
            }
        }
        let loss = per_row_losses(&batch.rewards, &predicted, m.gamma).sum();
        let dr = discounted_mse_grad(&batch.rewards, &predicted, m.gamma, scale);
        let mut g = MlpGrads::zeros_like(&m.reward_head);
        for (k, tape) in tapes.iter().enumerate() {
            m.reward_head
                .backward_accumulate(tape, dr.slice(s![.., k..k + 1]), &mut g, false)?;
        }
        Ok((loss, vec![g]))
    }
}

/// One-step reward loss plus weighted latent transition consistency.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepMdpModel {
    pub latent: LatentModel,
    pub lambda: f64,
    /// Treat `encode(s')` as a constant target instead of backpropagating into it.
    pub stop_target_gradient: bool,
}

impl DeepMdpModel {
    pub fn new(latent: LatentModel, lambda: f64, stop_target_gradient: bool) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("deepmdp lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            latent,
            lambda,
            stop_target_gradient,
        })
    }

    /// `(r - R(phi(s), a))^2 + lambda ||f(phi(s), a) - phi(s')||^2`
    pub fn deepmdp_loss(&self, t: &Transition) -> Result<f64> {
        let m = &self.latent;
        check_dim("transition state", m.d_s(), t.state.len())?;
        check_dim("transition next state", m.d_s(), t.next_state.len())?;
        let z = m.encode(row(&t.state))?;
        let z_next = m.encode(row(&t.next_state))?;
        let a = row(&t.action);
        let r_hat = m.predict_reward(z.view(), a)?[0];
        let z_pred = m.latent_step(z.view(), a)?;
        let latent_err: f64 = (&z_pred - &z_next).iter().map(|e| e * e).sum();
        Ok((t.reward - r_hat).powi(2) + self.lambda * latent_err)
    }

    pub fn batch_loss(&self, ts: &[Transition]) -> Result<f64> {
        let mut total = 0.0;
        for t in ts {
            total += self.deepmdp_loss(t)?;
        }
        Ok(total / ts.len() as f64)
    }

    pub fn loss_gradient(&self, ts: &[Transition]) -> Result<(f64, LatentGrads)> {
        if ts.is_empty() {
            return Err(Error::InvalidConfig("empty transition batch".into()));
        }
        let scale = 1.0 / ts.len() as f64;
        let (loss, g) = sharded(ts, |chunk| self.shard_gradient(chunk, scale))?;
        Ok((loss * scale, LatentGrads::from_vec(g)))
    }

    fn shard_gradient(&self, ts: &[Transition], scale: f64) -> Result<(f64, Vec<MlpGrads>)> {
        let m = &self.latent;
        let (b, d_s, d_a, d_z) = (ts.len(), m.d_s(), m.d_a(), m.d_z());
        for t in ts {
            check_dim("transition state", d_s, t.state.len())?;
            check_dim("transition next state", d_s, t.next_state.len())?;
            check_dim("transition action", d_a, t.action.len())?;
        }
        // both encoder applications share one forward pass: rows [s; s']
        let stacked = Array2::from_shape_fn((2 * b, d_s), |(i, j)| {
            if i < b {
                ts[i].state[j]
            } else {
                ts[i - b].next_state[j]
            }
        });
        let actions = Array2::from_shape_fn((b, d_a), |(i, j)| ts[i].action[j]);
        let (zz, enc_tape) = m.encoder.forward(stacked.view())?;
        let z = zz.slice(s![..b, ..]);
        let z_next = zz.slice(s![b.., ..]);
        let x = concat_cols(&z, &actions.view());
        let (r_hat, rew_tape) = m.reward_head.forward(x.view())?;
        let (z_pred, dyn_tape) = m.dynamics.forward(x.view())?;

        let rewards = Array1::from_iter(ts.iter().map(|t| t.reward));
        let r_err = &rewards - &r_hat.column(0);
        let z_err = &z_pred - &z_next;
        let loss = r_err.iter().map(|e| e * e).sum::<f64>() + self.lambda * z_err.iter().map(|e| e * e).sum::<f64>();

        let mut g_enc = MlpGrads::zeros_like(&m.encoder);
        let mut g_dyn = MlpGrads::zeros_like(&m.dynamics);
        let mut g_rew = MlpGrads::zeros_like(&m.reward_head);
        let dr = r_err.mapv(|e| -2.0 * e * scale).insert_axis(Axis(1));
        let dz_pred = z_err.mapv(|e| 2.0 * self.lambda * e * scale);
        let mut gx = m
            .reward_head
            .backward_accumulate(&rew_tape, dr.view(), &mut g_rew, true)?
            .expect("input grad");
        gx += &m
            .dynamics
            .backward_accumulate(&dyn_tape, dz_pred.view(), &mut g_dyn, true)?
            .expect("input grad");
        let mut gzz = Array2::zeros((2 * b, d_z));
        gzz.slice_mut(s![..b, ..]).assign(&gx.slice(s![.., ..d_z]));
        if !self.stop_target_gradient {
            gzz.slice_mut(s![b.., ..]).assign(&dz_pred.mapv(|v| -v));
        }
        m.encoder.backward_accumulate(&enc_tape, gzz.view(), &mut g_enc, false)?;
        Ok((loss, vec![g_enc, g_dyn, g_rew]))
    }
}

/// Any trained model variant; all of them plan through their [`LatentModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Reward(LatentModel),
    StatePred(StatePredModel),
    DeepMdp(DeepMdpModel),
}

impl AnyModel {
    pub fn variant(&self) -> ModelVariant {
        match self {
            AnyModel::Reward(_) => ModelVariant::Reward,
            AnyModel::StatePred(_) => ModelVariant::StatePred,
            AnyModel::DeepMdp(_) => ModelVariant::DeepMdp,
        }
    }

    pub fn latent(&self) -> &LatentModel {
        match self {
            AnyModel::Reward(m) => m,
            AnyModel::StatePred(m) => &m.latent,
            AnyModel::DeepMdp(m) => &m.latent,
        }
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut v = self.latent().nets().to_vec();
        if let AnyModel::StatePred(m) = self {
            v.push(&m.decoder);
        }
        v
    }

    /// Checkpoint: `LRPC1`, variant tag, `d_z`, `gamma`, `lambda`, stop-gradient flag,
    /// then the network count and each network as a length-prefixed `LRPM1` blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.latent();
        let (lambda, stop) = match self {
            AnyModel::DeepMdp(d) => (d.lambda, d.stop_target_gradient),
            _ => (0.0, false),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(self.variant().tag());
        out.extend_from_slice(&(m.d_z() as u32).to_le_bytes());
        out.extend_from_slice(&m.gamma.to_le_bytes());
        out.extend_from_slice(&lambda.to_le_bytes());
        out.push(stop as u8);
        let nets = self.nets();
        out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
        for net in nets {
            let blob = net.to_bytes();
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "model checkpoint");
        if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
            return Err(r.corrupt_at(0, "bad magic"));
        }
        let tag_at = 5;
        let variant = ModelVariant::from_tag(r.u8()?).ok_or_else(|| r.corrupt_at(tag_at, "unknown variant tag"))?;
        let d_z = r.u32()? as usize;
        let gamma = r.f64()?;
        let lambda = r.f64()?;
        let stop = r.u8()? != 0;
        let count_at = 23;
        let n_nets = r.u32()? as usize;
        let expected = if variant == ModelVariant::StatePred { 4 } else { 3 };
        if n_nets != expected {
            return Err(r.corrupt_at(count_at, &format!("expected {expected} networks, found {n_nets}")));
        }
        let mut nets = Vec::with_capacity(n_nets);
        for _ in 0..n_nets {
            let len = r.u64()? as usize;
            let start = r.pos();
            let blob = r.take(len)?;
            let mut inner = ByteReader::new(blob, "model checkpoint");
            let net = Mlp::read_from(&mut inner).map_err(|e| offset_error(e, start))?;
            inner.finish().map_err(|e| offset_error(e, start))?;
            nets.push(net);
        }
        r.finish()?;
        let mut nets = nets.into_iter();
        let (enc, dynm, rew) = (nets.next().unwrap(), nets.next().unwrap(), nets.next().unwrap());
        let at = r.pos();
        let latent = LatentModel::from_parts(enc, dynm, rew, gamma).map_err(|e| r.corrupt_at(at, &e.to_string()))?;
        if latent.d_z() != d_z {
            return Err(r.corrupt_at(9, "header latent dimension disagrees with encoder"));
        }
        Ok(match variant {
            ModelVariant::Reward => AnyModel::Reward(latent),
            ModelVariant::StatePred => AnyModel::StatePred(
                StatePredModel::from_parts(latent, nets.next().unwrap()).map_err(|e| r.corrupt_at(at, &e.to_string()))?,
            ),
            ModelVariant::DeepMdp => {
                AnyModel::DeepMdp(DeepMdpModel::new(latent, lambda, stop).map_err(|e| r.corrupt_at(at, &e.to_string()))?)
            }
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn offset_error(e: Error, base: usize) -> Error {
    match e {
        Error::Corrupt { offset, reason, .. } => Error::Corrupt {
            what: "model checkpoint",
            offset: base + offset,
            reason,
        },
        other => other,
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::DiscreteMdp;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn random_segment(h: usize, d_s: usize, d_a: usize, rng: &mut ChaCha8Rng) -> TrajectorySegment {
        let rewards = Array1::from_shape_simple_fn(h, || rng.random_range(-2.0..1.0));
        TrajectorySegment::new(random_matrix(h, d_s, rng), random_matrix(h, d_a, rng), rewards).unwrap()
    }

    fn random_transition(d_s: usize, d_a: usize, rng: &mut ChaCha8Rng) -> Transition {
        Transition {
            state: (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: (0..d_a).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reward: rng.random_range(-2.0..1.0),
            next_state: (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn small_arch(rng: &mut ChaCha8Rng) -> Architecture {
        Architecture {
            hidden: vec![rng.random_range(2..=6)],
            activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu },
        }
    }

    /// Moves every parameter, biases included, off the zero-initialized values so that
    /// no relu sits exactly on its kink.
    fn jitter(nets: Vec<&mut Mlp>, rng: &mut ChaCha8Rng) {
        for net in nets {
            let flat: Vec<f64> = net.flatten().into_iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            net.set_flat(&flat).unwrap();
        }
    }

    fn close(a: f64, n: f64) -> bool {
        (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) || (a - n).abs() < 1e-8
    }

    /// Checks `analytic` against central differences of `loss` for every parameter of one network.
    ///
    /// A probe whose step straddles a relu kink is retried with smaller steps; a wrong
    /// gradient disagrees at every step size.
    fn fd_compare<M: Clone>(
        model: &M,
        net: impl Fn(&mut M) -> &mut Mlp,
        analytic: &MlpGrads,
        loss: impl Fn(&M) -> f64,
        label: &str,
    ) {
        let mut probe = model.clone();
        let flat = net(&mut probe).flatten();
        let analytic = analytic.flatten();
        for i in 0..flat.len() {
            let mut numeric = f64::NAN;
            for h in [1e-5, 1e-6, 1e-7] {
                let mut p = flat.clone();
                p[i] += h;
                net(&mut probe).set_flat(&p).unwrap();
                let up = loss(&probe);
                p[i] -= 2.0 * h;
                net(&mut probe).set_flat(&p).unwrap();
                let down = loss(&probe);
                numeric = (up - down) / (2.0 * h);
                if close(analytic[i], numeric) {
                    break;
                }
            }
            net(&mut probe).set_flat(&flat).unwrap();
            assert!(close(analytic[i], numeric), "{label} param {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn discounted_loss_examples() {
        assert_eq!(discounted_mse(&array![1.0, 2.0], &array![0.5, 2.0], 1.0), 0.125);
        assert!((discounted_mse(&array![1.0, 1.0], &array![1.0, 0.0], 0.9) - 0.405).abs() < 1e-15);
    }

    #[test]
    fn multi_step_loss_on_tabular_networks() {
        // Two states; action 0 stays, action 1 switches. The model's rewards are
        // (0.5, 2.0) along the walk 0 -a1-> 1 while the recorded rewards are (1.0, 2.0).
        let mdp = DiscreteMdp::new(2, 2, vec![0, 1, 1, 0], vec![0.0, 0.5, 2.0, 0.0], 1.0).unwrap();
        let model = mdp.exact_networks().unwrap();
        let mut seg = mdp.segment(0, &[1, 0]).unwrap();
        assert_eq!(model.multi_step_loss(&seg).unwrap(), 0.0);
        seg.rewards = array![1.0, 2.0];
        assert!((model.multi_step_loss(&seg).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn unroll_reproduces_table_walk() {
        let mdp = DiscreteMdp::new(2, 2, vec![0, 1, 1, 0], vec![0.0, 0.5, 2.0, -1.0], 0.9).unwrap();
        let model = mdp.exact_networks().unwrap();
        let seg = mdp.segment(1, &[1, 1, 0, 1, 0]).unwrap();
        let (latents, rewards) = model.unroll(&mdp.one_hot_state(1), seg.actions.view()).unwrap();
        assert_eq!(rewards.to_vec(), vec![-1.0, 0.5, 2.0, -1.0, 0.0]);
        assert_eq!(latents, seg.states);
    }

    #[test]
    fn unroll_first_reward_is_encode_then_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = LatentModel::new(4, 2, 3, 0.99, &Architecture::default(), 7).unwrap();
        let seg = random_segment(1, 4, 2, &mut rng);
        let (_, r) = model.unroll(seg.states.row(0).as_slice().unwrap(), seg.actions.view()).unwrap();
        let z = model.encode(seg.states.slice(s![0..1, ..])).unwrap();
        let direct = model.predict_reward(z.view(), seg.actions.view()).unwrap()[0];
        assert_eq!(r[0], direct);
    }

    #[test]
    fn zero_horizon_and_bad_dims_rejected() {
        let model = LatentModel::new(3, 1, 2, 0.9, &Architecture::default(), 0).unwrap();
        assert!(model.unroll(&[0.0; 3], Array2::zeros((0, 1)).view()).is_err());
        assert!(model.unroll(&[0.0; 2], Array2::zeros((2, 1)).view()).is_err());
        assert!(model.unroll(&[0.0; 3], Array2::zeros((2, 2)).view()).is_err());
        assert!(TrajectorySegment::new(Array2::zeros((0, 3)), Array2::zeros((0, 1)), Array1::zeros(0)).is_err());
        assert!(TrajectorySegment::new(Array2::zeros((2, 3)), Array2::zeros((1, 1)), Array1::zeros(2)).is_err());
        assert!(LatentModel::new(3, 1, 2, 0.0, &Architecture::default(), 0).is_err());
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        for seed in 0..12 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d_s, d_a, d_z) = (rng.random_range(1..=4), rng.random_range(1..=2), 2);
            let h = [1, 3, 12][seed as usize % 3];
            let mut model = LatentModel::new(d_s, d_a, d_z, rng.random_range(0.5..=1.0), &small_arch(&mut rng), seed).unwrap();
            jitter(model.nets_mut().into(), &mut rng);
            let segs: Vec<_> = (0..rng.random_range(1..=3)).map(|_| random_segment(h, d_s, d_a, &mut rng)).collect();
            let (loss, g) = model.loss_gradient(&segs).unwrap();
            assert!((loss - model.batch_loss(&segs).unwrap()).abs() < 1e-12);
            let f = |m: &LatentModel| m.batch_loss(&segs).unwrap();
            fd_compare(&model, |m| &mut m.encoder, &g.encoder, f, "encoder");
            fd_compare(&model, |m| &mut m.dynamics, &g.dynamics, f, "dynamics");
            fd_compare(&model, |m| &mut m.reward_head, &g.reward_head, f, "reward");
        }
    }

    #[test]
    fn horizon_one_leaves_dynamics_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LatentModel::new(3, 1, 3, 0.99, &Architecture::default(), 3).unwrap();
        let segs: Vec<_> = (0..5).map(|_| random_segment(1, 3, 1, &mut rng)).collect();
        let (_, g) = model.loss_gradient(&segs).unwrap();
        assert!(g.dynamics.is_zero());
        assert!(!g.encoder.is_zero());
        assert!(!g.reward_head.is_zero());
    }

    #[test]
    fn perfect_model_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = DiscreteMdp::random(&mut rng, 5, 2, 0.9).unwrap();
        let model = mdp.exact_networks().unwrap();
        let segs: Vec<_> = (0..4)
            .map(|_| {
                let acts: Vec<usize> = (0..6).map(|_| rng.random_range(0..2)).collect();
                mdp.segment(rng.random_range(0..5), &acts).unwrap()
            })
            .collect();
        let (loss, g) = model.loss_gradient(&segs).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
    }

    #[test]
    fn gradient_does_not_depend_on_shard_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LatentModel::new(3, 1, 3, 0.99, &Architecture::default(), 5).unwrap();
        let segs: Vec<_> = (0..150).map(|_| random_segment(4, 3, 1, &mut rng)).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| model.loss_gradient(&segs).unwrap());
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| model.loss_gradient(&segs).unwrap());
        assert_eq!(single.0, multi.0);
        assert_eq!(single.1.encoder, multi.1.encoder);
        assert_eq!(single.1.dynamics, multi.1.dynamics);
    }

    #[test]
    fn state_pred_hand_value() {
        // Identity maps with d_s = d_z = 2; dynamics adds the action to the first coordinate.
        let id = |n: usize, act| {
            Mlp::from_layers(vec![crate::nn::Dense {
                weight: Array2::eye(n),
                bias: Array1::zeros(n),
                activation: act,
            }])
            .unwrap()
        };
        let dynamics = Mlp::from_layers(vec![crate::nn::Dense {
            weight: array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
            bias: Array1::zeros(2),
            activation: Activation::Identity,
        }])
        .unwrap();
        let reward = Mlp::from_layers(vec![crate::nn::Dense {
            weight: Array2::zeros((1, 3)),
            bias: Array1::zeros(1),
            activation: Activation::Identity,
        }])
        .unwrap();
        let latent = LatentModel::from_parts(id(2, Activation::Identity), dynamics, reward, 1.0).unwrap();
        let model = StatePredModel::from_parts(latent, id(2, Activation::Identity)).unwrap();
        // Predicted states: (1, 2) then (1.5, 2). Recorded: (1, 2) then (2, 1).
        let seg = TrajectorySegment::new(array![[1.0, 2.0], [2.0, 1.0]], array![[0.5], [0.0]], array![0.0, 0.0]).unwrap();
        assert!((model.state_pred_loss(&seg).unwrap() - (0.25 + 1.0) / 2.0).abs() < 1e-15);
        let constant = TrajectorySegment::new(array![[1.0, 2.0], [1.0, 2.0]], array![[0.0], [0.0]], array![0.0, 0.0]).unwrap();
        assert_eq!(model.state_pred_loss(&constant).unwrap(), 0.0);
    }

    #[test]
    fn state_pred_gradients_match_finite_differences() {
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (d_s, d_a) = (rng.random_range(1..=4), 1);
            let h = rng.random_range(1..=4);
            let mut model = StatePredModel::new(d_s, d_a, 2, 0.9, &small_arch(&mut rng), seed).unwrap();
            let [e, d, r] = model.latent.nets_mut();
            jitter(vec![e, d, r, &mut model.decoder], &mut rng);
            let segs: Vec<_> = (0..2).map(|_| random_segment(h, d_s, d_a, &mut rng)).collect();
            let (loss, g) = model.state_pred_gradient(&segs).unwrap();
            assert!((loss - model.state_pred_batch_loss(&segs).unwrap()).abs() < 1e-12);
            let f = |m: &StatePredModel| m.state_pred_batch_loss(&segs).unwrap();
            fd_compare(&model, |m| &mut m.latent.encoder, &g.encoder, f, "encoder");
            fd_compare(&model, |m| &mut m.latent.dynamics, &g.dynamics, f, "dynamics");
            fd_compare(&model, |m| &mut m.decoder, &g.decoder, f, "decoder");

            let (rloss, rg) = model.reward_head_gradient(&segs).unwrap();
            assert!((rloss - model.latent.batch_loss(&segs).unwrap()).abs() < 1e-12);
            let f = |m: &StatePredModel| m.latent.batch_loss(&segs).unwrap();
            fd_compare(&model, |m| &mut m.latent.reward_head, &rg, f, "reward head");
        }
    }

    #[test]
    fn deepmdp_gradients_match_finite_differences() {
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (d_s, d_a) = (rng.random_range(1..=4), rng.random_range(1..=2));
            let mut latent = LatentModel::new(d_s, d_a, 2, 0.99, &small_arch(&mut rng), seed).unwrap();
            jitter(latent.nets_mut().into(), &mut rng);
            let model = DeepMdpModel::new(latent, rng.random_range(0.0..2.0), false).unwrap();
            let ts: Vec<_> = (0..3).map(|_| random_transition(d_s, d_a, &mut rng)).collect();
            let (loss, g) = model.loss_gradient(&ts).unwrap();
            assert!((loss - model.batch_loss(&ts).unwrap()).abs() < 1e-12);
            let f = |m: &DeepMdpModel| m.batch_loss(&ts).unwrap();
            fd_compare(&model, |m| &mut m.latent.encoder, &g.encoder, f, "encoder");
            fd_compare(&model, |m| &mut m.latent.dynamics, &g.dynamics, f, "dynamics");
            fd_compare(&model, |m| &mut m.latent.reward_head, &g.reward_head, f, "reward");
        }
    }

    #[test]
    fn deepmdp_without_transition_term_is_one_step_reward_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for gamma in [0.5, 1.0] {
            let latent = LatentModel::new(3, 1, 3, gamma, &Architecture::default(), 6).unwrap();
            let model = DeepMdpModel::new(latent.clone(), 0.0, false).unwrap();
            let t = random_transition(3, 1, &mut rng);
            let seg = TrajectorySegment::new(
                Array2::from_shape_vec((1, 3), t.state.clone()).unwrap(),
                Array2::from_shape_vec((1, 1), t.action.clone()).unwrap(),
                array![t.reward],
            )
            .unwrap();
            assert!((model.deepmdp_loss(&t).unwrap() - latent.multi_step_loss(&seg).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn deepmdp_hand_value_and_stop_gradient() {
        let mdp = DiscreteMdp::new(2, 1, vec![1, 0], vec![1.0, -1.0], 0.9).unwrap();
        let latent = mdp.exact_networks().unwrap();
        let t = Transition {
            state: vec![1.0, 0.0],
            action: vec![1.0],
            reward: 0.5,
            next_state: vec![1.0, 0.0],
        };
        // r_hat = 1, z_pred = (0, 1), target = (1, 0): 0.25 + 2 * 2.
        let model = DeepMdpModel::new(latent.clone(), 2.0, false).unwrap();
        assert!((model.deepmdp_loss(&t).unwrap() - 4.25).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let latent = LatentModel::new(2, 1, 2, 0.9, &Architecture::default(), 7).unwrap();
        let ts: Vec<_> = (0..4).map(|_| random_transition(2, 1, &mut rng)).collect();
        let live = DeepMdpModel::new(latent.clone(), 1.0, false).unwrap().loss_gradient(&ts).unwrap().1;
        let stopped = DeepMdpModel::new(latent, 1.0, true).unwrap().loss_gradient(&ts).unwrap().1;
        assert_eq!(live.dynamics, stopped.dynamics);
        assert_eq!(live.reward_head, stopped.reward_head);
        assert_ne!(live.encoder, stopped.encoder);
    }

    #[test]
    fn checkpoint_round_trip_all_variants() {
        let arch = Architecture {
            hidden: vec![8, 8],
            ..Default::default()
        };
        let latent = LatentModel::new(6, 1, 3, 0.99, &arch, 1).unwrap();
        let models = [
            AnyModel::Reward(latent.clone()),
            AnyModel::StatePred(StatePredModel::new(6, 1, 3, 0.99, &arch, 2).unwrap()),
            AnyModel::DeepMdp(DeepMdpModel::new(latent, 0.5, true).unwrap()),
        ];
        let dir = tempfile::tempdir().unwrap();
        for m in models {
            let path = dir.path().join(format!("{}.bin", m.variant().as_str()));
            m.save(&path).unwrap();
            let back = AnyModel::load(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes(), m.to_bytes());
            let bytes = m.to_bytes();
            match AnyModel::from_bytes(&bytes[..bytes.len() - 3]) {
                Err(Error::Corrupt { .. }) => {}
                other => panic!("truncated checkpoint accepted: {other:?}"),
            }
            let mut bad = bytes.clone();
            bad[5] = 9;
            match AnyModel::from_bytes(&bad) {
                Err(Error::Corrupt { offset, .. }) => assert_eq!(offset, 5),
                other => panic!("bad tag accepted: {other:?}"),
            }
        }
    }

    #[test]
    fn variant_names_parse() {
        for v in [ModelVariant::Reward, ModelVariant::StatePred, ModelVariant::DeepMdp] {
            assert_eq!(v.as_str().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("sac".parse::<ModelVariant>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn unroll_is_prefix_compositional(seed in any::<u64>(), h in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = LatentModel::new(3, 2, 3, 0.9, &Architecture { hidden: vec![16], ..Default::default() }, seed).unwrap();
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = random_matrix(h, 2, &mut rng);
            let (zl, rl) = model.unroll(&s, a.view()).unwrap();
            let (zs, rs) = model.unroll(&s, a.slice(s![..h - 1, ..])).unwrap();
            prop_assert_eq!(zl.slice(s![..h - 1, ..]), zs);
            prop_assert_eq!(rl.slice(s![..h - 1]), rs);
        }

        #[test]
        fn later_errors_shrink_with_discount(errs in proptest::collection::vec(0.01f64..2.0, 1..10), g1 in 0.1f64..1.0, g2 in 0.1f64..1.0) {
            prop_assume!((g1 - g2).abs() > 1e-6);
            let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
            let mut predicted = vec![0.0];
            predicted.extend(errs.iter().map(|e| -e));
            let target = Array1::zeros(predicted.len());
            let predicted = Array1::from(predicted);
            prop_assert!(discounted_mse(&target, &predicted, lo) < discounted_mse(&target, &predicted, hi));
        }

        #[test]
        fn tabular_embedding_is_exact(seed in any::<u64>(), ns in 1usize..=8, na in 1usize..=3, h in 1usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gamma = rng.random_range(0.5..=1.0);
            let mdp = DiscreteMdp::random(&mut rng, ns, na, gamma).unwrap();
            let model = mdp.exact_networks().unwrap();
            let acts: Vec<usize> = (0..h).map(|_| rng.random_range(0..na)).collect();
            let seg = mdp.segment(rng.random_range(0..ns), &acts).unwrap();
            prop_assert_eq!(model.multi_step_loss(&seg).unwrap(), 0.0);
        }

        #[test]
        fn losses_are_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = StatePredModel::new(2, 1, 2, 0.95, &Architecture { hidden: vec![8], ..Default::default() }, seed).unwrap();
            let seg = random_segment(3, 2, 1, &mut rng);
            prop_assert!(model.latent.multi_step_loss(&seg).unwrap() >= 0.0);
            prop_assert!(model.state_pred_loss(&seg).unwrap() >= 0.0);
            let dm = DeepMdpModel::new(model.latent.clone(), 1.0, false).unwrap();
            prop_assert!(dm.deepmdp_loss(&random_transition(2, 1, &mut rng)).unwrap() >= 0.0);
        }
    }
}
