//! A one-dimensional double-integrator tracking toy: the same
//! penalty-amplified gradient-descent training applied to a linear policy
//! head, small enough to compare against the analytic finite-horizon
//! optimum and to drive the constrained variant to near-zero violations.

use crate::nn::{adam_update, AdamState, MlpParams, Tape};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dt: f64,
    pub horizon: usize,
    pub q_p: f64,
    pub q_v: f64,
    pub r: f64,
    /// Speed bound of the constrained variant: |v| <= v_max.
    pub v_max: f64,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub amplifier: f64,
    pub interval: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dt: 0.1,
            horizon: 25,
            q_p: 1.0,
            q_v: 0.1,
            r: 0.01,
            v_max: 0.6,
            batch: 64,
            iters: 4000,
            lr: 0.05,
            amplifier: 2.0,
            interval: 250,
        }
    }
}

/// A trained linear policy a = w_p * p + w_v * v + b.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub head: MlpParams,
}

impl ToyPolicy {
    pub fn act(&self, p: f64, v: f64) -> f64 {
        self.head.forward(&[p, v]).unwrap()[0]
    }
}

pub struct ToyOutput {
    pub policy: ToyPolicy,
    pub final_penalty: f64,
    pub curves: Vec<(usize, f64, f64)>,
}

/// Closed-loop cost of a policy from one start, tracking the origin.
pub fn toy_policy_cost(policy: &ToyPolicy, cfg: &ToyConfig, start: (f64, f64)) -> f64 {
    let (mut p, mut v) = start;
    let mut cost = 0.0;
    for _ in 0..cfg.horizon {
        let a = policy.act(p, v);
        cost += cfg.q_p * p * p + cfg.q_v * v * v + cfg.r * a * a;
        p += cfg.dt * v;
        v += cfg.dt * a;
    }
    cost
}

/// Fraction of steps violating |v| <= v_max over a closed-loop run.
pub fn toy_policy_violation(policy: &ToyPolicy, cfg: &ToyConfig, start: (f64, f64)) -> f64 {
    let (mut p, mut v) = start;
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.horizon {
        let a = policy.act(p, v);
        p += cfg.dt * v;
        v += cfg.dt * a;
        worst = worst.max(v.abs() - cfg.v_max);
    }
    worst
}

/// Train the linear head by gradient descent on batched rollouts; when
/// `constrained` is set, a |v| bound enters through the amplified exterior
/// penalty.
pub fn train_toy(cfg: &ToyConfig, constrained: bool, seed: u64) -> ToyOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = MlpParams::init(&[2, 1], &mut rng);
    let mut adam = AdamState::new(&head);
    let mut curves = Vec::new();
    let mut final_penalty = 0.0;

    for it in 0..cfg.iters {
        let rho = if constrained {
            cfg.amplifier.powi((it / cfg.interval) as i32)
        } else {
            0.0
        };
        let starts: Vec<(f64, f64)> = (0..cfg.batch)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)))
            .collect();

        let mut tape = Tape::new();
        let leaves = head.leaves(&mut tape);
        let mut p = tape.constant_col(&starts.iter().map(|s| s.0).collect::<Vec<_>>());
        let mut v = tape.constant_col(&starts.iter().map(|s| s.1).collect::<Vec<_>>());
        let mut cost_acc: Option<crate::nn::Tid> = None;
        let mut pen_acc: Option<crate::nn::Tid> = None;
        for _ in 0..cfg.horizon {
            let state = tape.concat_cols(&[p, v]);
            let a = head.forward_tape(&mut tape, &leaves, state);
            let p2 = tape.square(p);
            let p2 = tape.scale(p2, cfg.q_p);
            let v2 = tape.square(v);
            let v2 = tape.scale(v2, cfg.q_v);
            let a2 = tape.square(a);
            let a2 = tape.scale(a2, cfg.r);
            let mut util = tape.add(p2, v2);
            util = tape.add(util, a2);
            cost_acc = Some(match cost_acc {
                None => util,
                Some(acc) => tape.add(acc, util),
            });
            let dv = tape.scale(v, cfg.dt);
            p = tape.add(p, dv);
            let da = tape.scale(a, cfg.dt);
            v = tape.add(v, da);
            if constrained {
                // g1 = v_max - v >= 0 and g2 = v + v_max >= 0 on the
                // successor state.
                let over = tape.offset(v, -cfg.v_max);
                let over = tape.relu(over);
                let over2 = tape.square(over);
                let neg = tape.scale(v, -1.0);
                let under = tape.offset(neg, -cfg.v_max);
                let under = tape.relu(under);
                let under2 = tape.square(under);
                let pen = tape.add(over2, under2);
                pen_acc = Some(match pen_acc {
                    None => pen,
                    Some(acc) => tape.add(acc, pen),
                });
            }
        }
        let j_actor = {
            let acc = cost_acc.unwrap();
            tape.mean_all(acc)
        };
        let j_penalty = pen_acc.map(|acc| tape.mean_all(acc));
        let loss = match j_penalty {
            Some(jp) => {
                let s = tape.scale(jp, rho);
                tape.add(j_actor, s)
            }
            None => j_actor,
        };
        let mut grads = tape.backward(loss);
        let glist: Vec<Array2<f64>> = head
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
        adam_update(&mut head, &glist, &mut adam, cfg.lr);

        let jp_val = j_penalty.map(|t| tape.scalar(t)).unwrap_or(0.0);
        final_penalty = jp_val;
        if it % 50 == 0 {
            curves.push((it, tape.scalar(j_actor), jp_val));
        }
    }

    ToyOutput { policy: ToyPolicy { head }, final_penalty, curves }
}
