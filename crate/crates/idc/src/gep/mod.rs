//! Offline training: policy evaluation and policy improvement on model
//! rollouts, with an amplifying exterior penalty on constraint violations.
//! The trainer interleaves environment sampling into a replay buffer with
//! gradient steps on actor and critic; every `interval` iterations the
//! penalty factor is multiplied by the amplifier.

pub mod toy;

use crate::config::TrainConfig;
use crate::dynamics::{step_ego, Action, EgoState};
use crate::map::Approach;
use crate::nn::{adam_update, lr_schedule, ActorNet, AdamState, CriticNet, Tape};
use crate::rollout::{build_rollout, Snapshot, TapeDriver, TapeRollout};
use crate::scenario::{
    movement_permitted, spawn_traffic, step_traffic, EgoView, ScenarioCtx, SignalPhase,
    SignalState, TrafficState, STATE_DIM,
};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at iteration {0}")]
    Diverged(usize),
    #[error("dynamics error during sampling: {0}")]
    Dynamics(#[from] crate::dynamics::DynamicsError),
}

/// Sum of squared one-sided constraint violations.
pub fn penalty_term(set: &crate::scenario::ConstraintSet) -> f64 {
    crate::rollout::penalty_of_set(set)
}

/// The exterior penalty factor: starts at 1 and is multiplied by the
/// amplifier every `interval` iterations, so after k amplifications it
/// equals amplifier^k exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PenaltySchedule {
    pub amplifier: f64,
    pub interval: usize,
    amplifications: i32,
}

impl PenaltySchedule {
    pub fn new(amplifier: f64, interval: usize) -> Self {
        PenaltySchedule { amplifier, interval, amplifications: 0 }
    }

    pub fn rho(&self) -> f64 {
        self.amplifier.powi(self.amplifications)
    }

    /// Amplify when the iteration counter hits a multiple of the interval.
    pub fn observe_iteration(&mut self, iteration: usize) {
        if iteration > 0 && self.interval > 0 && iteration % self.interval == 0 {
            self.amplifications += 1;
        }
    }
}

/// FIFO replay buffer of rollout snapshots with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: VecDeque<Snapshot>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { data: VecDeque::new(), capacity }
    }

    pub fn push(&mut self, s: Snapshot) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Snapshot> {
        (0..n)
            .map(|_| self.data[rng.random_range(0..self.data.len())].clone())
            .collect()
    }
}

/// Mean penalized actor objective of a batch: tracking utility plus
/// rho-weighted violation penalty along T-step virtual rollouts driven by
/// the actor. Returns (J_p, J_actor, J_penalty).
pub fn actor_loss(
    ctx: &ScenarioCtx,
    batch: &[Snapshot],
    actor: &ActorNet,
    horizon: usize,
    rho: f64,
) -> (f64, f64, f64) {
    let mut built = batch_rollout(ctx, batch, actor, horizon);
    let j_actor = built.tape.scalar(built.j_actor);
    let j_penalty = built.tape.scalar(built.j_penalty);
    let loss = built.penalized_loss(rho);
    (built.tape.scalar(loss), j_actor, j_penalty)
}

/// Mean squared error between the T-step rollout objective under the
/// current actor (no penalty) and the critic prediction at the batch
/// states.
pub fn critic_loss(
    ctx: &ScenarioCtx,
    batch: &[Snapshot],
    critic: &CriticNet,
    actor: &ActorNet,
    horizon: usize,
) -> f64 {
    let built = batch_rollout(ctx, batch, actor, horizon);
    let (mut tape, v, _) = critic_prediction_tape(ctx, batch, critic);
    let targets = tape.constant_col(&built.returns);
    let diff = tape.sub(v, targets);
    let sq = tape.square(diff);
    let loss = tape.mean_all(sq);
    tape.scalar(loss)
}

/// Build the differentiable batch rollout for a snapshot batch.
pub fn batch_rollout(
    ctx: &ScenarioCtx,
    batch: &[Snapshot],
    actor: &ActorNet,
    horizon: usize,
) -> TapeRollout {
    let elements: Vec<_> = batch
        .iter()
        .map(|s| (&ctx.candidates[s.path_id as usize], s.ego, s.slots))
        .collect();
    build_rollout(ctx, &elements, TapeDriver::Actor(actor), horizon)
}

/// Critic forward pass over a batch on a fresh tape: returns the tape, the
/// prediction column and the parameter leaves.
fn critic_prediction_tape(
    ctx: &ScenarioCtx,
    batch: &[Snapshot],
    critic: &CriticNet,
) -> (Tape, crate::nn::Tid, Vec<crate::nn::Tid>) {
    let mut tape = Tape::new();
    let leaves = critic.mlp.leaves(&mut tape);
    let states = critic_input_matrix(ctx, batch);
    let x = tape.constant(states);
    let v = critic.value_tape(&mut tape, &leaves, x);
    (tape, v, leaves)
}

fn critic_input_matrix(ctx: &ScenarioCtx, batch: &[Snapshot]) -> Array2<f64> {
    let mut m = Array2::zeros((batch.len(), STATE_DIM));
    for (k, s) in batch.iter().enumerate() {
        let state = ctx.state_from_slots(&ctx.candidates[s.path_id as usize], &s.ego, &s.slots);
        for (j, v) in state.0.iter().enumerate() {
            m[[k, j]] = *v;
        }
    }
    m
}

/// One policy-evaluation step: regress the critic onto the per-element
/// rollout returns; returns the loss before the update.
pub fn critic_update(
    ctx: &ScenarioCtx,
    batch: &[Snapshot],
    critic: &mut CriticNet,
    adam: &mut AdamState,
    targets: &[f64],
    lr: f64,
) -> f64 {
    let (mut tape, v, leaves) = critic_prediction_tape(ctx, batch, critic);
    let t = tape.constant_col(targets);
    let diff = tape.sub(v, t);
    let sq = tape.square(diff);
    let loss = tape.mean_all(sq);
    let j_critic = tape.scalar(loss);
    let mut grads = tape.backward(loss);
    let glist: Vec<Array2<f64>> = critic
        .mlp
        .layers
        .iter()
        .enumerate()
        .flat_map(|(li, l)| {
            [
                grads.take_or_zeros(leaves[2 * li], l.w.dim()),
                grads.take_or_zeros(leaves[2 * li + 1], l.b.dim()),
            ]
        })
        .collect();
    adam_update(&mut critic.mlp, &glist, adam, lr);
    j_critic
}

/// One policy-improvement step on an already-built batch rollout.
pub fn actor_update(
    built: &mut TapeRollout,
    actor: &mut ActorNet,
    adam: &mut AdamState,
    rho: f64,
    lr: f64,
) {
    let loss = built.penalized_loss(rho);
    let mut grads = built.tape.backward(loss);
    let glist: Vec<Array2<f64>> = actor
        .mlp
        .layers
        .iter()
        .enumerate()
        .flat_map(|(li, l)| {
            [
                grads.take_or_zeros(built.leaves[2 * li], l.w.dim()),
                grads.take_or_zeros(built.leaves[2 * li + 1], l.b.dim()),
            ]
        })
        .collect();
    adam_update(&mut actor.mlp, &glist, adam, lr);
}

/// One point of the training curves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub j_actor: f64,
    pub j_penalty: f64,
    pub j_critic: f64,
    pub rho: f64,
}

/// Trained artifacts and diagnostics.
pub struct TrainOutput {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub adam_actor: AdamState,
    pub adam_critic: AdamState,
    pub curves: Vec<CurvePoint>,
    pub rho: f64,
    pub iterations: usize,
    pub env_steps: usize,
    pub episodes: usize,
}

/// Environment sampler: runs episodes with the current actor plus
/// exploration noise, storing rollout snapshots.
struct Sampler {
    traffic: TrafficState,
    signal: SignalState,
    ego: EgoState,
    path_id: u32,
    steps_in_episode: usize,
    rng: ChaCha8Rng,
    episodes: usize,
}

impl Sampler {
    fn new(ctx: &ScenarioCtx, seed: u64) -> Self {
        let mut s = Sampler {
            traffic: spawn_traffic(ctx, seed, 0.0),
            signal: SignalState::new(SignalPhase::NorthSouth, 0.0),
            ego: EgoState::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
            path_id: 0,
            steps_in_episode: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episodes: 0,
        };
        s.reset(ctx);
        s
    }

    fn reset(&mut self, ctx: &ScenarioCtx) {
        self.episodes += 1;
        self.steps_in_episode = 0;
        self.path_id = self.rng.random_range(0..ctx.candidates.len()) as u32;
        let entry = ctx.cfg.map.entry_point(Approach::South, ctx.task.entry_lane());
        let back = self.rng.random_range(25.0..60.0);
        let lateral: f64 = self.rng.random_range(-0.3..0.3);
        self.ego = EgoState::new(
            entry[0] + lateral,
            -ctx.cfg.map.half_width - back,
            self.rng.random_range(3.0..7.0),
            0.0,
            std::f64::consts::FRAC_PI_2 + self.rng.random_range(-0.05..0.05),
            0.0,
        );
        let phase = if self.rng.random_range(0.0..1.0) < 0.5 {
            SignalPhase::NorthSouth
        } else {
            SignalPhase::EastWest
        };
        let t_max = match phase {
            SignalPhase::NorthSouth => ctx.cfg.signal.ns_green,
            SignalPhase::EastWest => ctx.cfg.signal.ew_green,
        };
        self.signal = SignalState::new(phase, self.rng.random_range(0.0..t_max));
        // Fresh seeded traffic, pre-rolled so the junction is populated.
        let traffic_seed = self.rng.random_range(0..u64::MAX / 2);
        self.traffic = spawn_traffic(ctx, traffic_seed, ctx.cfg.traffic.flow);
        let warmup_steps = (ctx.cfg.traffic.warmup / ctx.cfg.vehicle.dt) as usize;
        for _ in 0..warmup_steps {
            self.traffic = step_traffic(ctx, &self.traffic, &self.signal, None, ctx.cfg.vehicle.dt);
            self.signal = self.signal.step(&ctx.cfg.signal, ctx.cfg.vehicle.dt);
        }
    }

    /// One environment step; pushes a snapshot, applies a noisy actor
    /// action, steps traffic and signal, resets on episode end.
    fn step(
        &mut self,
        ctx: &ScenarioCtx,
        actor: &ActorNet,
        explore_std: f64,
        episode_cap: usize,
        buffer: &mut ReplayBuffer,
    ) -> Result<(), TrainError> {
        let slots = ctx.interested_vehicles(&self.ego, &self.traffic, &self.signal);
        buffer.push(Snapshot { ego: self.ego, slots, path_id: self.path_id });

        let path = &ctx.candidates[self.path_id as usize];
        let state = ctx.state_from_slots(path, &self.ego, &slots);
        let mut u = actor.act(&state);
        if explore_std > 0.0 {
            let b = &actor.bounds;
            let nd = Normal::new(0.0, explore_std * 2.0 * b.delta_max).unwrap();
            let na = Normal::new(0.0, explore_std * (b.a_max - b.a_min)).unwrap();
            u = b.clamp(Action::new(
                u.delta + nd.sample(&mut self.rng),
                u.a + na.sample(&mut self.rng),
            ));
        }

        let was_before_line = ctx
            .cfg
            .map
            .progress_past_stop_line(Approach::South, [self.ego.p_x, self.ego.p_y])
            < 0.0;
        self.ego = step_ego(&self.ego, &u, &ctx.cfg.vehicle)?;
        let ego_view = EgoView { state: self.ego };
        self.traffic =
            step_traffic(ctx, &self.traffic, &self.signal, Some(&ego_view), ctx.cfg.vehicle.dt);
        self.signal = self.signal.step(&ctx.cfg.signal, ctx.cfg.vehicle.dt);
        self.steps_in_episode += 1;

        // Episode termination: collision, red-light crossing, completion,
        // or the step cap.
        let crossed_on_red = was_before_line
            && ctx
                .cfg
                .map
                .progress_past_stop_line(Approach::South, [self.ego.p_x, self.ego.p_y])
                >= 0.0
            && !movement_permitted(&self.signal, Approach::South, ctx.task);
        let collided = ctx.realized_collision(&self.ego, &self.traffic, &self.signal);
        let done_arc = path.length() - ctx.cfg.map.exit_len + 15.0;
        let passed = path.project([self.ego.p_x, self.ego.p_y]).0 >= done_arc;
        if collided || crossed_on_red || passed || self.steps_in_episode >= episode_cap {
            self.reset(ctx);
        }
        Ok(())
    }
}

/// Run the offline training loop. Deterministic for a fixed (config, seed).
pub fn train(ctx: &ScenarioCtx, cfg: &TrainConfig, seed: u64) -> Result<TrainOutput, TrainError> {
    let mut rng_init = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut actor = ActorNet::init(&mut rng_init, ctx.cfg.bounds);
    let mut critic = CriticNet::init(&mut rng_init);
    let mut adam_actor = AdamState::new(&actor.mlp);
    let mut adam_critic = AdamState::new(&critic.mlp);
    let mut schedule = PenaltySchedule::new(cfg.penalty_amplifier, cfg.penalty_interval);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut sampler = Sampler::new(ctx, seed.wrapping_add(1));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut curves = Vec::new();
    let mut env_steps = 0usize;

    while buffer.len() < cfg.warmup_steps.max(cfg.batch) {
        sampler.step(ctx, &actor, cfg.explore_std, cfg.episode_cap, &mut buffer)?;
        env_steps += 1;
    }

    for iteration in 0..cfg.total_iters {
        schedule.observe_iteration(iteration);
        let rho = schedule.rho();

        for _ in 0..cfg.steps_per_iter {
            sampler.step(ctx, &actor, cfg.explore_std, cfg.episode_cap, &mut buffer)?;
            env_steps += 1;
        }

        let batch = buffer.sample(&mut batch_rng, cfg.batch);
        let mut built = batch_rollout(ctx, &batch, &actor, cfg.horizon);
        let j_actor = built.tape.scalar(built.j_actor);
        let j_penalty = built.tape.scalar(built.j_penalty);
        let j_p = j_actor + rho * j_penalty;
        if !j_p.is_finite() {
            return Err(TrainError::Diverged(iteration));
        }

        // PEV: critic regression towards the rollout returns.
        let clr = lr_schedule(iteration, cfg.total_iters, cfg.critic_lr_start, cfg.critic_lr_end);
        let j_critic =
            critic_update(ctx, &batch, &mut critic, &mut adam_critic, &built.returns, clr);

        // PIM: actor descent on the penalized objective.
        let alr = lr_schedule(iteration, cfg.total_iters, cfg.actor_lr_start, cfg.actor_lr_end);
        actor_update(&mut built, &mut actor, &mut adam_actor, rho, alr);

        if iteration % cfg.eval_every == 0 || iteration + 1 == cfg.total_iters {
            curves.push(CurvePoint { iteration, j_actor, j_penalty, j_critic, rho });
        }
    }

    Ok(TrainOutput {
        actor,
        critic,
        adam_actor,
        adam_critic,
        curves,
        rho: schedule.rho(),
        iterations: cfg.total_iters,
        env_steps,
        episodes: sampler.episodes,
    })
}

#[cfg(test)]
mod tests;
