//! The three training drivers: baseline multi-agent policy gradient on even
//! demand, the contextual-bandit worst-case demand estimator, and robust
//! fine-tuning under the frozen estimator; plus the replay buffer, window
//! scheduling, and warm-up.
//!
//! Rollouts within an iteration run on parallel workers, each owning an
//! independent simulation and pre-derived sub-seeds; results merge in
//! rollout order, so training is bitwise reproducible for a fixed seed.

use crate::demand::{make_even_demand, mix, ODMatrix, ScenarioSet, WeightVector, NUM_SCENARIOS};
use crate::grid::{Network, NUM_INTERSECTIONS};
use crate::obs::{
    encode_tl_observation, encode_wce_observation, team_reward, ObsParams, RewardWeights,
    TlObservation, WceObservation, WindowStats,
};
use crate::policy::{AdamState, DensePolicy, PolicyError, Transition, WceTransition};
use crate::sim::{derive_seed, SimParams, SimState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

const STAGE_BASELINE: u64 = 0xB0;
const STAGE_WCE: u64 = 0xCE;
const STAGE_DR: u64 = 0xD0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Per-stage training sizes and rates.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainerParams {
    /// Episode horizon, seconds (excludes warm-up).
    pub horizon: u64,
    pub rollouts_per_iter: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Window length for the windowed trainers, seconds.
    pub window: u64,
    /// Warm-up duration before the horizon clock starts, seconds.
    pub warmup: u64,
    /// Replay capacity; 0 means one iteration's worth of records.
    pub buffer_capacity: usize,
}

impl Default for TrainerParams {
    fn default() -> Self {
        TrainerParams {
            horizon: 900,
            rollouts_per_iter: 10,
            iterations: 3000,
            learning_rate: 0.002,
            batch_size: 4096,
            window: 600,
            warmup: 0,
            buffer_capacity: 0,
        }
    }
}

impl TrainerParams {
    pub fn validate(&self, windowed: bool) -> Result<(), TrainError> {
        if self.horizon == 0 || self.rollouts_per_iter == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "horizon, rollouts_per_iter, and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if windowed {
            if self.window == 0 {
                return Err(TrainError::Config("window must be positive".into()));
            }
            if self.horizon % self.window != 0 {
                return Err(TrainError::Config(format!(
                    "window {} must divide the horizon {}",
                    self.window, self.horizon
                )));
            }
        }
        Ok(())
    }

    /// Scale horizons and iterations by `factor`, rounding the horizon up to
    /// a whole number of windows (windowed stages) and keeping at least one
    /// iteration and rollout.
    pub fn scaled(&self, factor: f64, windowed: bool) -> TrainerParams {
        let mut out = self.clone();
        out.iterations = ((self.iterations as f64 * factor).round() as usize).max(1);
        let horizon = (self.horizon as f64 * factor).round() as u64;
        out.horizon = if windowed {
            let windows = horizon.div_ceil(self.window).max(1);
            windows * self.window
        } else {
            horizon.max(1)
        };
        out
    }
}

/// Optimizer choice for the ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Reward credit multiplying each record's score gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditMode {
    /// The per-step team reward r_t, exactly as the flat policy-gradient
    /// objective writes it.
    Instant,
    /// Discounted within-episode return-to-go sum_{s>=t} gamma^(s-t) r_s,
    /// the score-function gradient of the discounted global objective.
    ToGo,
}

/// Reward preprocessing before the score-function update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Subtract the batch mean and divide by the batch std.
    Batch,
    /// Subtract the mean of same-step records first (a state-independent
    /// per-step baseline that removes the episode fill-curve component),
    /// then scale by the residual std.
    PerStep,
}

/// Knobs shared by every stage.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub seed: u64,
    pub gamma: f64,
    pub reward_weights: RewardWeights,
    pub obs_params: ObsParams,
    pub sim_params: SimParams,
    pub optimizer: OptimizerKind,
    /// Second-moment decay for the adaptive optimizer. With one update per
    /// iteration the horizon is short, so faster decay than the usual
    /// 0.999 adapts the step size within a run.
    pub adam_beta2: f64,
    pub advantage: AdvantageMode,
    pub credit: CreditMode,
    /// Entropy-bonus coefficient for the phase-policy update (0 = the
    /// plain score-function objective).
    pub entropy_bonus: f64,
    /// When set, one extra reuse epoch with ratio clipping at this value
    /// follows the plain score-function update.
    pub ppo_clip: Option<f64>,
}

impl TrainContext {
    pub fn new(seed: u64) -> TrainContext {
        TrainContext {
            seed,
            gamma: 0.99,
            reward_weights: RewardWeights::default(),
            obs_params: ObsParams::default(),
            sim_params: SimParams::default(),
            optimizer: OptimizerKind::Sgd,
            adam_beta2: 0.999,
            advantage: AdvantageMode::Batch,
            credit: CreditMode::Instant,
            entropy_bonus: 0.0,
            ppo_clip: None,
        }
    }
}

/// FIFO replay buffer with uniform without-replacement batch sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    records: VecDeque<T>,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> ReplayBuffer<T> {
        ReplayBuffer {
            capacity: capacity.max(1),
            records: VecDeque::new(),
        }
    }

    pub fn push(&mut self, record: T) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, idx: usize) -> &T {
        &self.records[idx]
    }

    /// Uniform sample of distinct indices (the whole buffer when it is
    /// smaller than the batch).
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, batch: usize) -> Vec<usize> {
        let n = self.records.len();
        let k = batch.min(n);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        indices.truncate(k);
        indices
    }
}

/// One training-curve record, emitted per iteration.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean discounted episode return (reporting only; updates use per-step rewards).
    pub mean_return: f64,
    pub mean_queue: f64,
    pub mean_speed: f64,
    pub records_added: usize,
    pub wall_time_s: f64,
}

/// Optional progress sinks: periodic checkpoints and a JSONL curve stream.
pub struct TrainHooks {
    pub out_dir: Option<PathBuf>,
    pub checkpoint_interval: usize,
    pub stage: &'static str,
    pub verbose: bool,
}

impl TrainHooks {
    pub fn none() -> TrainHooks {
        TrainHooks {
            out_dir: None,
            checkpoint_interval: 0,
            stage: "train",
            verbose: false,
        }
    }

    fn on_iteration(&self, point: &CurvePoint, policy: &DensePolicy) -> Result<(), TrainError> {
        if self.verbose {
            eprintln!(
                "[{}] iter {:>5} return {:>10.2} queue {:>8.2} speed {:>6.2} ({:.1}s)",
                self.stage,
                point.iteration,
                point.mean_return,
                point.mean_queue,
                point.mean_speed,
                point.wall_time_s
            );
        }
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let io_err = |path: &PathBuf| {
            let p = path.display().to_string();
            move |source| TrainError::Io {
                path: p.clone(),
                source,
            }
        };
        let curve_path = dir.join(format!("{}_curve.jsonl", self.stage));
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&curve_path)
            .map_err(io_err(&curve_path))?;
        use std::io::Write;
        let line = serde_json::to_string(point).expect("curve point serializes");
        writeln!(file, "{line}").map_err(io_err(&curve_path))?;
        if self.checkpoint_interval > 0 && point.iteration % self.checkpoint_interval == 0 {
            let ckpt = dir.join(format!("{}_iter{:05}.ckpt", self.stage, point.iteration));
            policy.save(&ckpt)?;
        }
        Ok(())
    }
}

/// Normalize rewards in place to zero mean and unit scale (per batch).
fn normalize_rewards(rewards: &mut [f64]) {
    let n = rewards.len() as f64;
    if n == 0.0 {
        return;
    }
    let mean: f64 = rewards.iter().sum::<f64>() / n;
    let var: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    for r in rewards.iter_mut() {
        *r = (*r - mean) / denom;
    }
}

/// Advantages for a sampled batch: plain batch normalization, or a
/// per-step baseline (the mean reward of records sharing the same episode
/// second) followed by global scaling.
fn compute_advantages(rewards: &[f64], steps: &[u32], mode: AdvantageMode) -> Vec<f64> {
    let mut adv = rewards.to_vec();
    if mode == AdvantageMode::PerStep {
        let mut sums: std::collections::HashMap<u32, (f64, f64)> = std::collections::HashMap::new();
        for (&r, &t) in rewards.iter().zip(steps.iter()) {
            let entry = sums.entry(t).or_insert((0.0, 0.0));
            entry.0 += r;
            entry.1 += 1.0;
        }
        for (a, &t) in adv.iter_mut().zip(steps.iter()) {
            let (sum, count) = sums[&t];
            *a -= sum / count;
        }
    }
    normalize_rewards(&mut adv);
    adv
}

enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    fn new(kind: OptimizerKind, num_params: usize, beta2: f64) -> Optimizer {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let mut state = AdamState::new(num_params);
                state.beta2 = beta2;
                Optimizer::Adam(state)
            }
        }
    }

    fn step(
        &mut self,
        policy: &mut DensePolicy,
        grad: &[f64],
        lr: f64,
    ) -> Result<(), PolicyError> {
        match self {
            Optimizer::Sgd => policy.apply_update(grad, lr),
            Optimizer::Adam(state) => state.step(policy, grad, lr),
        }
    }
}

/// Score-function update over a sampled batch of phase transitions:
/// grad = mean_j r_hat_j * grad log pi(a_j | o_j), ascended at `lr`.
/// With `ppo_clip` set, one additional reuse epoch follows in which records
/// whose probability ratio left the clip band contribute zero gradient.
fn update_theta(
    policy: &mut DensePolicy,
    optimizer: &mut Optimizer,
    buffer: &ReplayBuffer<Transition>,
    batch_size: usize,
    lr: f64,
    advantage: AdvantageMode,
    credit: CreditMode,
    entropy_bonus: f64,
    ppo_clip: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    if buffer.is_empty() {
        return Ok(());
    }
    let indices = buffer.sample_indices(rng, batch_size);
    let raw: Vec<f64> = indices
        .iter()
        .map(|&j| {
            let t = buffer.get(j);
            match credit {
                CreditMode::Instant => t.reward,
                CreditMode::ToGo => t.credit,
            }
        })
        .collect();
    let steps: Vec<u32> = indices.iter().map(|&j| buffer.get(j).step).collect();
    let rewards = compute_advantages(&raw, &steps, advantage);

    let old_logps: Option<Vec<f64>> = ppo_clip.map(|_| {
        indices
            .iter()
            .map(|&j| {
                let t = buffer.get(j);
                policy.logprob_phase(&t.obs, t.action).expect("stored obs valid")
            })
            .collect()
    });

    let mut grad = vec![0.0; policy.num_params()];
    let scale = 1.0 / indices.len() as f64;
    for (&j, &adv) in indices.iter().zip(rewards.iter()) {
        let t = buffer.get(j);
        let g = policy.grad_phase_objective(&t.obs, t.action, adv, entropy_bonus)?;
        for (acc, gi) in grad.iter_mut().zip(g.iter()) {
            *acc += scale * gi;
        }
    }
    optimizer.step(policy, &grad, lr)?;

    if let (Some(clip), Some(old_logps)) = (ppo_clip, old_logps) {
        let mut grad = vec![0.0; policy.num_params()];
        for ((&j, &adv), &old_logp) in indices.iter().zip(rewards.iter()).zip(old_logps.iter()) {
            let t = buffer.get(j);
            let new_logp = policy.logprob_phase(&t.obs, t.action)?;
            let ratio = (new_logp - old_logp).exp();
            let clipped_out =
                (adv > 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip);
            if clipped_out {
                continue;
            }
            let g = policy.grad_logprob_phase(&t.obs, t.action)?;
            for (acc, gi) in grad.iter_mut().zip(g.iter()) {
                *acc += scale * adv * ratio * gi;
            }
        }
        optimizer.step(policy, &grad, lr)?;
    }
    Ok(())
}

/// Score-function update for the mixture policy over window records.
fn update_psi(
    policy: &mut DensePolicy,
    optimizer: &mut Optimizer,
    buffer: &ReplayBuffer<WceTransition>,
    batch_size: usize,
    lr: f64,
    advantage: AdvantageMode,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    if buffer.is_empty() {
        return Ok(());
    }
    let indices = buffer.sample_indices(rng, batch_size);
    let raw: Vec<f64> = indices.iter().map(|&j| buffer.get(j).reward).collect();
    let steps: Vec<u32> = indices.iter().map(|&j| buffer.get(j).step).collect();
    let rewards = compute_advantages(&raw, &steps, advantage);
    let mut grad = vec![0.0; policy.num_params()];
    let scale = 1.0 / indices.len() as f64;
    for (&j, &adv) in indices.iter().zip(rewards.iter()) {
        let t = buffer.get(j);
        let g = policy.grad_logprob_weights(&t.obs, &t.weights)?;
        for (acc, gi) in grad.iter_mut().zip(g.iter()) {
            *acc += scale * adv * gi;
        }
    }
    optimizer.step(policy, &grad, lr)?;
    Ok(())
}

/// Fill the discounted return-to-go for one rollout's transitions
/// (ordered by step, NUM_INTERSECTIONS records per step sharing r_t).
fn fill_return_to_go(transitions: &mut [Transition], gamma: f64) {
    let mut to_go = 0.0;
    let mut last_step = u32::MAX;
    for t in transitions.iter_mut().rev() {
        if t.step != last_step {
            to_go = t.reward + gamma * to_go;
            last_step = t.step;
        }
        t.credit = to_go;
    }
}

fn encode_all(state: &SimState, obs_params: &ObsParams) -> [TlObservation; NUM_INTERSECTIONS] {
    std::array::from_fn(|i| encode_tl_observation(state, i, obs_params))
}

/// Draw a symmetric Dirichlet(1,...,1) mixture (uniform over the simplex).
pub fn sample_uniform_mixture<R: Rng>(rng: &mut R) -> WeightVector {
    let gamma = Gamma::new(1.0f64, 1.0).expect("unit gamma");
    let mut draws = [0.0f64; NUM_SCENARIOS];
    for d in draws.iter_mut() {
        let sample: f64 = gamma.sample(rng);
        *d = sample.max(1e-300);
    }
    let total: f64 = draws.iter().sum();
    let mut w = [0.0f64; NUM_SCENARIOS];
    for k in 0..NUM_SCENARIOS {
        w[k] = draws[k] / total;
    }
    w[7] = 1.0 - w[..7].iter().sum::<f64>();
    WeightVector::new(w).expect("normalized draws form a simplex point")
}

/// Populate the network before a windowed episode: a single random mixture
/// of the base scenarios applied for `duration` seconds with signals driven
/// by the given phase policy. Returns the warm-up window statistics, which
/// seed the estimator's initial observation. No transitions are recorded.
pub fn warmup(
    state: &mut SimState,
    scenarios: &ScenarioSet,
    rng: &mut ChaCha8Rng,
    duration: u64,
    theta: &DensePolicy,
    obs_params: &ObsParams,
) -> Result<WindowStats, TrainError> {
    let mut stats = WindowStats::new();
    if duration == 0 {
        return Ok(stats);
    }
    let od = mix(&sample_uniform_mixture(rng), scenarios);
    for _ in 0..duration {
        let obs = encode_all(state, obs_params);
        let actions =
            std::array::from_fn(|i| theta.sample_phase(&obs[i].values, rng).expect("theta").0);
        state.step(&actions, &od)?;
        stats.record(state);
    }
    Ok(stats)
}

/// Chooses the demand mixture at each window boundary.
pub trait MixtureScheduler: Send + Sync {
    fn sample(&self, obs: &WceObservation, rng: &mut ChaCha8Rng) -> WeightVector;
}

/// Frozen estimator policy as a scheduler.
pub struct PolicyScheduler<'a>(pub &'a DensePolicy);

impl MixtureScheduler for PolicyScheduler<'_> {
    fn sample(&self, obs: &WceObservation, rng: &mut ChaCha8Rng) -> WeightVector {
        self.0.sample_weights(&obs.values, rng).expect("dirichlet policy").0
    }
}

/// Always emits the same weights (degenerate scheduling, handy for tests).
pub struct ConstantScheduler(pub WeightVector);

impl MixtureScheduler for ConstantScheduler {
    fn sample(&self, _obs: &WceObservation, _rng: &mut ChaCha8Rng) -> WeightVector {
        self.0.clone()
    }
}

/// Ignores the observation and draws Dirichlet(1,...,1) every window.
pub struct UniformScheduler;

impl MixtureScheduler for UniformScheduler {
    fn sample(&self, _obs: &WceObservation, rng: &mut ChaCha8Rng) -> WeightVector {
        sample_uniform_mixture(rng)
    }
}

struct RolloutAccum {
    reward_sum: f64,
    discounted: f64,
    gamma_pow: f64,
    queue_sum: f64,
    speed_sum: f64,
    seconds: u64,
}

impl RolloutAccum {
    fn new() -> RolloutAccum {
        RolloutAccum {
            reward_sum: 0.0,
            discounted: 0.0,
            gamma_pow: 1.0,
            queue_sum: 0.0,
            speed_sum: 0.0,
            seconds: 0,
        }
    }

    fn record(&mut self, state: &SimState, reward: f64, gamma: f64) {
        self.reward_sum += reward;
        self.discounted += self.gamma_pow * reward;
        self.gamma_pow *= gamma;
        self.queue_sum += state.queue_count() as f64;
        self.speed_sum += state.mean_speed();
        self.seconds += 1;
    }
}

/// One even-demand baseline rollout: H seconds, per-agent flattened
/// transitions carrying the shared team reward.
fn baseline_rollout(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    theta: &DensePolicy,
    od: &ODMatrix,
    rollout_seed: u64,
) -> Result<(Vec<Transition>, RolloutAccum), TrainError> {
    let mut state = SimState::new(network.clone(), ctx.sim_params.clone(), rollout_seed);
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(rollout_seed, 7));
    let mut transitions = Vec::with_capacity(params.horizon as usize * NUM_INTERSECTIONS);
    let mut accum = RolloutAccum::new();
    let mut obs = encode_all(&state, &ctx.obs_params);
    for t in 0..params.horizon {
        let mut actions = [0usize; NUM_INTERSECTIONS];
        for i in 0..NUM_INTERSECTIONS {
            actions[i] = theta.sample_phase(&obs[i].values, &mut action_rng)?.0;
        }
        state.step(&actions, od)?;
        let reward = team_reward(&state, &ctx.reward_weights, &ctx.obs_params);
        let next_obs = encode_all(&state, &ctx.obs_params);
        for i in 0..NUM_INTERSECTIONS {
            transitions.push(Transition {
                obs: obs[i].values,
                action: actions[i],
                reward,
                next_obs: next_obs[i].values,
                step: t as u32,
                credit: 0.0,
            });
        }
        obs = next_obs;
        accum.record(&state, reward, ctx.gamma);
    }
    fill_return_to_go(&mut transitions, ctx.gamma);
    Ok((transitions, accum))
}

/// Train the baseline phase policy on the fixed even demand pattern.
pub fn train_baseline(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    hidden: &[usize],
    hooks: &TrainHooks,
) -> Result<(DensePolicy, Vec<CurvePoint>), TrainError> {
    params.validate(false)?;
    let stage_seed = derive_seed(ctx.seed, STAGE_BASELINE);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, 0));
    let theta = DensePolicy::tl_policy(hidden, &mut init_rng);
    train_baseline_from(network, ctx, params, theta, hooks)
}

/// Baseline training from an existing policy (used by fine-tuning tests).
pub fn train_baseline_from(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    mut theta: DensePolicy,
    hooks: &TrainHooks,
) -> Result<(DensePolicy, Vec<CurvePoint>), TrainError> {
    params.validate(false)?;
    let stage_seed = derive_seed(ctx.seed, STAGE_BASELINE);
    let od = make_even_demand();
    let per_iter = params.horizon as usize * params.rollouts_per_iter * NUM_INTERSECTIONS;
    let capacity = if params.buffer_capacity == 0 {
        per_iter
    } else {
        params.buffer_capacity
    };
    let mut buffer = ReplayBuffer::new(capacity);
    let mut optimizer = Optimizer::new(ctx.optimizer, theta.num_params(), ctx.adam_beta2);
    let mut curve = Vec::with_capacity(params.iterations);
    let started = Instant::now();
    for it in 0..params.iterations {
        let iter_seed = derive_seed(stage_seed, 1 + it as u64);
        let results: Result<Vec<(Vec<Transition>, RolloutAccum)>, TrainError> = (0..params
            .rollouts_per_iter)
            .into_par_iter()
            .map(|r| {
                baseline_rollout(network, ctx, params, &theta, &od, derive_seed(iter_seed, r as u64))
            })
            .collect();
        let results = results?;
        let mut records_added = 0;
        let mut returns = 0.0;
        let mut queue = 0.0;
        let mut speed = 0.0;
        let mut seconds = 0u64;
        for (transitions, accum) in results {
            records_added += transitions.len();
            for t in transitions {
                buffer.push(t);
            }
            returns += accum.discounted;
            queue += accum.queue_sum;
            speed += accum.speed_sum;
            seconds += accum.seconds;
        }
        let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(iter_seed, 0xFFFF));
        update_theta(
            &mut theta,
            &mut optimizer,
            &buffer,
            params.batch_size,
            params.learning_rate,
            ctx.advantage,
            ctx.credit,
            ctx.entropy_bonus,
            ctx.ppo_clip,
            &mut update_rng,
        )?;
        let point = CurvePoint {
            iteration: it + 1,
            mean_return: returns / params.rollouts_per_iter as f64,
            mean_queue: queue / seconds.max(1) as f64,
            mean_speed: speed / seconds.max(1) as f64,
            records_added,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        hooks.on_iteration(&point, &theta)?;
        curve.push(point);
    }
    Ok((theta, curve))
}

/// Outcome of one windowed episode.
struct WindowedEpisode {
    theta_transitions: Vec<Transition>,
    wce_transitions: Vec<WceTransition>,
    weights_log: Vec<WeightVector>,
    accum: RolloutAccum,
}

/// Run one multi-window episode: warm up under a random mixture, then per
/// window sample mixture weights, apply the mixed demand for `window`
/// seconds under the phase policy, and accumulate the window waiting time.
#[allow(clippy::too_many_arguments)]
fn windowed_episode(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    theta: &DensePolicy,
    sample_mixture: &mut dyn FnMut(&WceObservation, &mut ChaCha8Rng) -> WeightVector,
    scenarios: &ScenarioSet,
    episode_seed: u64,
    collect_theta: bool,
    collect_wce: bool,
) -> Result<WindowedEpisode, TrainError> {
    let mut state = SimState::new(network.clone(), ctx.sim_params.clone(), episode_seed);
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, 7));
    let mut mixture_rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, 8));
    let mut warm_rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, 9));

    let warm_stats = warmup(
        &mut state,
        scenarios,
        &mut warm_rng,
        params.warmup,
        theta,
        &ctx.obs_params,
    )?;
    let mut window_obs = encode_wce_observation(&warm_stats);

    let windows = params.horizon / params.window;
    let mut episode = WindowedEpisode {
        theta_transitions: Vec::new(),
        wce_transitions: Vec::new(),
        weights_log: Vec::with_capacity(windows as usize),
        accum: RolloutAccum::new(),
    };
    let mut obs = encode_all(&state, &ctx.obs_params);
    let mut second = 0u32;
    for window_index in 0..windows {
        let weights = sample_mixture(&window_obs, &mut mixture_rng);
        let od = mix(&weights, scenarios);
        let mut stats = WindowStats::new();
        for _ in 0..params.window {
            let mut actions = [0usize; NUM_INTERSECTIONS];
            for i in 0..NUM_INTERSECTIONS {
                actions[i] = theta.sample_phase(&obs[i].values, &mut action_rng)?.0;
            }
            state.step(&actions, &od)?;
            stats.record(&state);
            let reward = team_reward(&state, &ctx.reward_weights, &ctx.obs_params);
            if collect_theta {
                let next_obs = encode_all(&state, &ctx.obs_params);
                for i in 0..NUM_INTERSECTIONS {
                    episode.theta_transitions.push(Transition {
                        obs: obs[i].values,
                        action: actions[i],
                        reward,
                        next_obs: next_obs[i].values,
                        step: second,
                        credit: 0.0,
                    });
                }
                obs = next_obs;
            } else {
                obs = encode_all(&state, &ctx.obs_params);
            }
            episode.accum.record(&state, reward, ctx.gamma);
            second += 1;
        }
        let next_window_obs = encode_wce_observation(&stats);
        if collect_wce {
            episode.wce_transitions.push(WceTransition {
                obs: window_obs.values,
                weights: weights.clone(),
                reward: stats.waiting_time(),
                next_obs: next_window_obs.values,
                step: window_index as u32,
            });
        }
        episode.weights_log.push(weights);
        window_obs = next_window_obs;
    }
    fill_return_to_go(&mut episode.theta_transitions, ctx.gamma);
    Ok(episode)
}

/// Train the worst-case demand estimator against a frozen phase policy.
/// Per iteration: collect rollouts of multi-window episodes, then ascend
/// the contextual-bandit objective on a sampled batch.
pub fn train_wce(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    frozen_theta: &DensePolicy,
    scenarios: &ScenarioSet,
    hidden: &[usize],
    hooks: &TrainHooks,
) -> Result<(DensePolicy, Vec<CurvePoint>), TrainError> {
    params.validate(true)?;
    let stage_seed = derive_seed(ctx.seed, STAGE_WCE);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, 0));
    let mut psi = DensePolicy::wce_policy(hidden, &mut init_rng);

    let windows_per_episode = (params.horizon / params.window) as usize;
    let per_iter = windows_per_episode * params.rollouts_per_iter;
    let capacity = if params.buffer_capacity == 0 {
        per_iter
    } else {
        params.buffer_capacity
    };
    let mut buffer = ReplayBuffer::new(capacity);
    let mut optimizer = Optimizer::new(ctx.optimizer, psi.num_params(), ctx.adam_beta2);
    let mut curve = Vec::with_capacity(params.iterations);
    let started = Instant::now();
    for it in 0..params.iterations {
        let iter_seed = derive_seed(stage_seed, 1 + it as u64);
        let results: Result<Vec<WindowedEpisode>, TrainError> = (0..params.rollouts_per_iter)
            .into_par_iter()
            .map(|r| {
                let episode_seed = derive_seed(iter_seed, r as u64);
                let psi_ref = &psi;
                windowed_episode(
                    network,
                    ctx,
                    params,
                    frozen_theta,
                    &mut |obs, rng| psi_ref.sample_weights(&obs.values, rng).expect("psi").0,
                    scenarios,
                    episode_seed,
                    false,
                    true,
                )
            })
            .collect();
        let results = results?;
        let mut records_added = 0;
        let mut reward_sum = 0.0;
        let mut queue = 0.0;
        let mut speed = 0.0;
        let mut seconds = 0u64;
        for episode in results {
            for t in &episode.wce_transitions {
                reward_sum += t.reward;
            }
            records_added += episode.wce_transitions.len();
            for t in episode.wce_transitions {
                buffer.push(t);
            }
            queue += episode.accum.queue_sum;
            speed += episode.accum.speed_sum;
            seconds += episode.accum.seconds;
        }
        let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(iter_seed, 0xFFFF));
        update_psi(
            &mut psi,
            &mut optimizer,
            &buffer,
            params.batch_size,
            params.learning_rate,
            ctx.advantage,
            &mut update_rng,
        )?;
        let point = CurvePoint {
            iteration: it + 1,
            mean_return: reward_sum / records_added.max(1) as f64,
            mean_queue: queue / seconds.max(1) as f64,
            mean_speed: speed / seconds.max(1) as f64,
            records_added,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        hooks.on_iteration(&point, &psi)?;
        curve.push(point);
    }
    Ok((psi, curve))
}

/// Fine-tune the phase policy under demand scheduled by a frozen estimator:
/// the same windowed structure as estimator training, but transitions are
/// stored every second and the phase policy is updated per iteration while
/// the scheduler only picks mixture weights.
pub fn train_drmarl(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    theta0: DensePolicy,
    scheduler: &dyn MixtureScheduler,
    scenarios: &ScenarioSet,
    hooks: &TrainHooks,
) -> Result<(DensePolicy, Vec<CurvePoint>), TrainError> {
    params.validate(true)?;
    let stage_seed = derive_seed(ctx.seed, STAGE_DR);
    let mut theta = theta0;
    let per_iter =
        params.horizon as usize * params.rollouts_per_iter * NUM_INTERSECTIONS;
    let capacity = if params.buffer_capacity == 0 {
        per_iter
    } else {
        params.buffer_capacity
    };
    let mut buffer = ReplayBuffer::new(capacity);
    let mut optimizer = Optimizer::new(ctx.optimizer, theta.num_params(), ctx.adam_beta2);
    let mut curve = Vec::with_capacity(params.iterations);
    let started = Instant::now();
    for it in 0..params.iterations {
        let iter_seed = derive_seed(stage_seed, 1 + it as u64);
        let results: Result<Vec<WindowedEpisode>, TrainError> = (0..params.rollouts_per_iter)
            .into_par_iter()
            .map(|r| {
                let episode_seed = derive_seed(iter_seed, r as u64);
                windowed_episode(
                    network,
                    ctx,
                    params,
                    &theta,
                    &mut |obs, rng| scheduler.sample(obs, rng),
                    scenarios,
                    episode_seed,
                    true,
                    false,
                )
            })
            .collect();
        let results = results?;
        let mut records_added = 0;
        let mut returns = 0.0;
        let mut queue = 0.0;
        let mut speed = 0.0;
        let mut seconds = 0u64;
        for episode in results {
            records_added += episode.theta_transitions.len();
            for t in episode.theta_transitions {
                buffer.push(t);
            }
            returns += episode.accum.discounted;
            queue += episode.accum.queue_sum;
            speed += episode.accum.speed_sum;
            seconds += episode.accum.seconds;
        }
        let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(iter_seed, 0xFFFF));
        update_theta(
            &mut theta,
            &mut optimizer,
            &buffer,
            params.batch_size,
            params.learning_rate,
            ctx.advantage,
            ctx.credit,
            ctx.entropy_bonus,
            ctx.ppo_clip,
            &mut update_rng,
        )?;
        let point = CurvePoint {
            iteration: it + 1,
            mean_return: returns / params.rollouts_per_iter as f64,
            mean_queue: queue / seconds.max(1) as f64,
            mean_speed: speed / seconds.max(1) as f64,
            records_added,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        hooks.on_iteration(&point, &theta)?;
        curve.push(point);
    }
    Ok((theta, curve))
}

/// Run one windowed evaluation episode under a fixed phase policy and
/// scheduler, returning the per-window waiting times (used to score the
/// adversary against reference schedulers).
pub fn windowed_waiting_times(
    network: &Arc<Network>,
    ctx: &TrainContext,
    params: &TrainerParams,
    theta: &DensePolicy,
    scheduler: &dyn MixtureScheduler,
    scenarios: &ScenarioSet,
    episode_seed: u64,
) -> Result<Vec<f64>, TrainError> {
    let episode = windowed_episode(
        network,
        ctx,
        params,
        theta,
        &mut |obs, rng| scheduler.sample(obs, rng),
        scenarios,
        episode_seed,
        false,
        true,
    )?;
    Ok(episode.wce_transitions.iter().map(|t| t.reward).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::SyntheticParams;
    use crate::grid::{build_grid, GridSpec};
    use approx::assert_relative_eq;

    fn network() -> Arc<Network> {
        Arc::new(build_grid(&GridSpec::default()).unwrap())
    }

    fn scenarios(seed: u64) -> ScenarioSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScenarioSet::generate(&mut rng, &SyntheticParams::default())
    }

    fn tiny_params(horizon: u64, rollouts: usize, iterations: usize) -> TrainerParams {
        TrainerParams {
            horizon,
            rollouts_per_iter: rollouts,
            iterations,
            learning_rate: 0.05,
            batch_size: 256,
            window: 60,
            warmup: 30,
            buffer_capacity: 0,
        }
    }

    #[test]
    fn replay_buffer_fifo_and_sampling() {
        let mut buffer = ReplayBuffer::new(3);
        for v in 0..5 {
            buffer.push(v);
        }
        assert_eq!(buffer.len(), 3);
        assert_eq!(*buffer.get(0), 2);
        assert_eq!(*buffer.get(2), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = buffer.sample_indices(&mut rng, 2);
        assert_eq!(idx.len(), 2);
        assert_ne!(idx[0], idx[1]);
        let all = buffer.sample_indices(&mut rng, 10);
        assert_eq!(all.len(), 3);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn reward_normalization_centers_and_scales() {
        let mut r = vec![1.0, 2.0, 3.0, 4.0];
        normalize_rewards(&mut r);
        let mean: f64 = r.iter().sum::<f64>() / 4.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        assert!(r[3] > r[0]);
        let mut constant = vec![5.0; 4];
        normalize_rewards(&mut constant);
        assert!(constant.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_iterations_returns_initial_theta() {
        let net = network();
        let ctx = TrainContext::new(3);
        let params = tiny_params(60, 2, 0);
        let (theta, curve) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        let stage_seed = derive_seed(3, STAGE_BASELINE);
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, 0));
        let expect = DensePolicy::tl_policy(&[16], &mut init_rng);
        assert_eq!(theta.params, expect.params);
        assert!(curve.is_empty());
    }

    #[test]
    fn baseline_buffer_counts_match_flattening() {
        let net = network();
        let ctx = TrainContext::new(5);
        let params = tiny_params(50, 2, 2);
        let (_, curve) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        for point in &curve {
            assert_eq!(point.records_added, 50 * 2 * 9);
        }
    }

    #[test]
    fn baseline_training_is_deterministic() {
        let net = network();
        let ctx = TrainContext::new(11);
        let params = tiny_params(40, 2, 3);
        let (a, _) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        let (b, _) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    #[test]
    fn warmup_zero_duration_is_noop() {
        let net = network();
        let ctx = TrainContext::new(0);
        let mut state = SimState::new(net, ctx.sim_params.clone(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = DensePolicy::zeros(crate::policy::PolicyHead::Categorical, &[79, 8]);
        let stats = warmup(&mut state, &scenarios(1), &mut rng, 0, &theta, &ctx.obs_params).unwrap();
        assert_eq!(state.clock, 0);
        assert_eq!(stats.seconds(), 0);
    }

    #[test]
    fn warmup_populates_network_deterministically() {
        let net = network();
        let ctx = TrainContext::new(0);
        let theta = DensePolicy::zeros(crate::policy::PolicyHead::Categorical, &[79, 8]);
        let run = |seed: u64| {
            let mut state = SimState::new(net.clone(), ctx.sim_params.clone(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let stats =
                warmup(&mut state, &scenarios(1), &mut rng, 300, &theta, &ctx.obs_params).unwrap();
            (
                state.clock,
                state.num_in_network(),
                state.spawned_total,
                stats.waiting_time().to_bits(),
            )
        };
        let a = run(5);
        assert_eq!(a.0, 300);
        assert!(a.1 > 0, "warm-up should populate the network");
        assert_eq!(a, run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn wce_keeps_theta_frozen_and_counts_windows() {
        let net = network();
        let ctx = TrainContext::new(21);
        let mut params = tiny_params(120, 2, 2);
        params.window = 60;
        params.warmup = 30;
        params.batch_size = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = DensePolicy::tl_policy(&[16], &mut rng);
        let theta_before = theta.params.clone();
        let (psi, curve) = train_wce(
            &net,
            &ctx,
            &params,
            &theta,
            &scenarios(2),
            &[16],
            &TrainHooks::none(),
        )
        .unwrap();
        assert_eq!(theta.params, theta_before);
        assert_eq!(psi.head, crate::policy::PolicyHead::Dirichlet);
        for point in &curve {
            // 120/60 = 2 windows per episode, 2 rollouts.
            assert_eq!(point.records_added, 4);
            assert!(point.mean_return >= 0.0, "waiting time is non-negative");
        }
    }

    #[test]
    fn drmarl_stub_scheduler_pins_demand_to_vertex() {
        let net = network();
        let ctx = TrainContext::new(33);
        let mut params = tiny_params(120, 1, 1);
        params.window = 60;
        params.warmup = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = DensePolicy::tl_policy(&[16], &mut rng);
        let scen = scenarios(3);
        let episode = windowed_episode(
            &net,
            &ctx,
            &params,
            &theta,
            &mut |obs, rng| ConstantScheduler(WeightVector::one_hot(0)).sample(obs, rng),
            &scen,
            77,
            true,
            false,
        )
        .unwrap();
        assert_eq!(episode.weights_log.len(), 2);
        for w in &episode.weights_log {
            assert_eq!(*w, WeightVector::one_hot(0));
        }
        assert_eq!(episode.theta_transitions.len(), 120 * 9);
    }

    #[test]
    fn drmarl_counts_and_determinism() {
        let net = network();
        let ctx = TrainContext::new(44);
        let mut params = tiny_params(120, 2, 2);
        params.window = 60;
        params.warmup = 30;
        params.batch_size = 128;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta0 = DensePolicy::tl_policy(&[16], &mut rng);
        let mut psi_rng = ChaCha8Rng::seed_from_u64(11);
        let psi = DensePolicy::wce_policy(&[16], &mut psi_rng);
        let psi_before = psi.params.clone();
        let scen = scenarios(4);
        let run = || {
            train_drmarl(
                &net,
                &ctx,
                &params,
                theta0.clone(),
                &PolicyScheduler(&psi),
                &scen,
                &TrainHooks::none(),
            )
            .unwrap()
        };
        let (a, curve) = run();
        let (b, _) = run();
        assert_eq!(psi.params, psi_before);
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
        for point in &curve {
            assert_eq!(point.records_added, 120 * 2 * 9);
        }
        // Fine-tuning must have changed the policy.
        assert_ne!(a.params, theta0.params);
    }

    #[test]
    fn scheduled_mixtures_stay_in_hull() {
        let net = network();
        let ctx = TrainContext::new(55);
        let mut params = tiny_params(120, 1, 1);
        params.window = 60;
        params.warmup = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = DensePolicy::tl_policy(&[16], &mut rng);
        let scen = scenarios(5);
        let episode = windowed_episode(
            &net,
            &ctx,
            &params,
            &theta,
            &mut |obs, rng| UniformScheduler.sample(obs, rng),
            &scen,
            91,
            false,
            true,
        )
        .unwrap();
        for w in &episode.weights_log {
            let od = mix(w, &scen);
            assert!((od.total() - 5000.0).abs() / 5000.0 <= 1e-6);
        }
    }

    #[test]
    fn trainer_params_validation_and_scaling() {
        let params = TrainerParams {
            horizon: 9600,
            window: 600,
            ..TrainerParams::default()
        };
        assert!(params.validate(true).is_ok());
        let bad = TrainerParams {
            horizon: 9500,
            window: 600,
            ..TrainerParams::default()
        };
        assert!(bad.validate(true).is_err());
        let scaled = params.scaled(0.1, true);
        assert_eq!(scaled.horizon, 1200); // 960 rounded up to 2 windows
        assert_eq!(scaled.iterations, 300);
        let unwindowed = TrainerParams {
            horizon: 900,
            iterations: 3000,
            ..TrainerParams::default()
        };
        let s = unwindowed.scaled(0.1, false);
        assert_eq!(s.horizon, 90);
        assert_eq!(s.iterations, 300);
    }

    #[test]
    fn ppo_clip_variant_runs_and_differs() {
        let net = network();
        let mut ctx = TrainContext::new(66);
        let params = tiny_params(40, 2, 3);
        let (plain, _) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        ctx.ppo_clip = Some(0.2);
        let (clipped, _) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        assert_ne!(plain.params, clipped.params);
    }

    #[test]
    fn adam_variant_runs() {
        let net = network();
        let mut ctx = TrainContext::new(67);
        ctx.optimizer = OptimizerKind::Adam;
        let params = tiny_params(40, 1, 2);
        let (theta, curve) = train_baseline(&net, &ctx, &params, &[16], &TrainHooks::none()).unwrap();
        assert_eq!(curve.len(), 2);
        assert!(theta.params.iter().all(|p| p.is_finite()));
    }
}
