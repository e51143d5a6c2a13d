use super::*;
use crate::config::Config;
use crate::dynamics::{step_prediction, ActionBounds, Region, VehicleKind, VehicleState};
use crate::map::Turn;
use crate::scenario::{
    constraints_from_slots, tracking_residual, utility, Constraint, ConstraintId, ConstraintSet,
    InterestedSlot, SlotSource, UtilityWeights, N_SLOTS,
};
use std::f64::consts::FRAC_PI_2;

fn ctx(task: Turn) -> ScenarioCtx {
    ScenarioCtx::new(Config::default(), task)
}

fn set_of(gs: &[f64]) -> ConstraintSet {
    ConstraintSet {
        values: gs
            .iter()
            .enumerate()
            .map(|(i, g)| Constraint {
                id: ConstraintId::VehiclePair { slot: i as u8, pair: 0 },
                g: *g,
            })
            .collect(),
    }
}

#[test]
fn penalty_term_reference_values() {
    assert_eq!(penalty_term(&set_of(&[2.0, 0.0])), 0.0);
    assert!((penalty_term(&set_of(&[1.0, -2.0, -0.5])) - 4.25).abs() < 1e-15);
}

#[test]
fn penalty_term_quadratic_homogeneity() {
    let base = [-0.7, 0.3, -1.9, 0.0];
    let doubled: Vec<f64> = base.iter().map(|g| if *g < 0.0 { 2.0 * g } else { *g }).collect();
    let p1 = penalty_term(&set_of(&base));
    let p2 = penalty_term(&set_of(&doubled));
    assert!((p2 - 4.0 * p1).abs() < 1e-12);
}

fn padding_only_snapshot(ctx: &ScenarioCtx, path_id: u32) -> Snapshot {
    let ego = EgoState::new(1.875, -50.0, 5.0, 0.0, FRAC_PI_2, 0.0);
    let slots = [InterestedSlot {
        vehicle: ctx.padding_vehicle(&ego),
        source: SlotSource::Padding,
    }; N_SLOTS];
    Snapshot { ego, slots, path_id }
}

#[test]
fn actor_loss_is_rho_independent_without_constraints() {
    let ctx = ctx(Turn::Left);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let actor = ActorNet::init(&mut rng, ActionBounds::default());
    let batch = vec![padding_only_snapshot(&ctx, 0), padding_only_snapshot(&ctx, 2)];
    let (jp0, ja0, pen0) = actor_loss(&ctx, &batch, &actor, 10, 0.0);
    let (jp5, ja5, pen5) = actor_loss(&ctx, &batch, &actor, 10, 5.0);
    assert_eq!(pen0, 0.0);
    assert_eq!(pen5, 0.0);
    assert_eq!(jp0, ja0);
    assert_eq!(jp5, ja5);
    assert!((ja0 - ja5).abs() < 1e-15);
}

#[test]
fn actor_loss_single_state_one_step_expansion() {
    // T=1: J_p must equal utility(s0, pi(s0)) + rho * penalty(s1), with the
    // right-hand side recomputed by composing the plain operations.
    let ctx = ctx(Turn::Left);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let actor = ActorNet::init(&mut rng, ActionBounds::default());

    let ego = EgoState::new(1.875, -40.0, 5.0, 0.0, FRAC_PI_2, 0.0);
    let mut slots = [InterestedSlot {
        vehicle: ctx.padding_vehicle(&ego),
        source: SlotSource::Padding,
    }; N_SLOTS];
    // A vehicle close ahead so the one-step successor state violates.
    slots[0] = InterestedSlot {
        vehicle: VehicleState {
            p_x: 1.875,
            p_y: -34.0,
            v_lon: 1.0,
            phi: FRAC_PI_2,
            kind: VehicleKind::LeftTurning,
            region: Region::OutOfIntersection,
        },
        source: SlotSource::Real(1),
    };
    let snapshot = Snapshot { ego, slots, path_id: 1 };
    let rho = 3.7;
    let (j_p, j_actor, j_penalty) = actor_loss(&ctx, &[snapshot], &actor, 1, rho);

    // Independent expansion.
    let path = &ctx.candidates[1];
    let state = ctx.state_from_slots(path, &ego, &slots);
    let u = actor.act(&state);
    let near = path.nearest_reference([ego.p_x, ego.p_y]);
    let util = utility(&tracking_residual(&ego, &near), &u, &UtilityWeights::default());
    let next = step_ego(&ego, &u, &ctx.cfg.vehicle).unwrap();
    let mut next_slots = slots;
    for s in next_slots.iter_mut() {
        s.vehicle = step_prediction(&s.vehicle, ctx.cfg.vehicle.dt);
    }
    let pen = penalty_term(&constraints_from_slots(&next, &next_slots, &ctx.cfg.map));
    assert!(pen > 0.0, "fixture should bind a constraint");
    assert!((j_actor - util).abs() < 1e-12, "{j_actor} vs {util}");
    assert!((j_penalty - pen).abs() < 1e-12, "{j_penalty} vs {pen}");
    assert!((j_p - (util + rho * pen)).abs() < 1e-12);
}

fn constant_critic(c: f64) -> CriticNet {
    let mut critic = CriticNet {
        mlp: crate::nn::MlpParams {
            layers: vec![
                crate::nn::LayerParams {
                    w: Array2::zeros((STATE_DIM, crate::nn::HIDDEN)),
                    b: Array2::zeros((1, crate::nn::HIDDEN)),
                },
                crate::nn::LayerParams {
                    w: Array2::zeros((crate::nn::HIDDEN, crate::nn::HIDDEN)),
                    b: Array2::zeros((1, crate::nn::HIDDEN)),
                },
                crate::nn::LayerParams {
                    w: Array2::zeros((crate::nn::HIDDEN, 1)),
                    b: Array2::zeros((1, 1)),
                },
            ],
        },
    };
    critic.mlp.layers[2].b[[0, 0]] = c;
    critic
}

#[test]
fn critic_loss_zero_when_critic_equals_return() {
    let ctx = ctx(Turn::Left);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let actor = ActorNet::init(&mut rng, ActionBounds::default());
    let snap = padding_only_snapshot(&ctx, 0);
    let horizon = 6;
    let built = batch_rollout(&ctx, &[snap.clone()], &actor, horizon);
    let g = built.returns[0];

    let exact = constant_critic(g);
    let loss = critic_loss(&ctx, &[snap.clone()], &exact, &actor, horizon);
    assert!(loss.abs() < 1e-18, "loss {loss}");

    let zero = constant_critic(0.0);
    let loss = critic_loss(&ctx, &[snap], &zero, &actor, horizon);
    assert!((loss - g * g).abs() < 1e-12, "loss {loss} vs {}", g * g);
}

#[test]
fn critic_update_descends_on_frozen_batch() {
    let ctx = ctx(Turn::Left);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let actor = ActorNet::init(&mut rng, ActionBounds::default());
    let mut critic = CriticNet::init(&mut rng);
    let batch: Vec<Snapshot> = (0..6)
        .map(|i| {
            let mut s = padding_only_snapshot(&ctx, (i % 3) as u32);
            s.ego.p_x += 3.0;
            s.ego.p_y -= i as f64 * 3.0;
            s.ego.v_lon += i as f64 * 0.3;
            s
        })
        .collect();
    let built = batch_rollout(&ctx, &batch, &actor, 8);
    let before = critic_loss(&ctx, &batch, &critic, &actor, 8);
    let mut adam = AdamState::new(&critic.mlp);
    critic_update(&ctx, &batch, &mut critic, &mut adam, &built.returns, 1e-6);
    let after = critic_loss(&ctx, &batch, &critic, &actor, 8);
    assert!(after < before, "critic loss {before} -> {after}");
}

#[test]
fn penalty_schedule_is_exactly_geometric() {
    let m = 7;
    let mut sched = PenaltySchedule::new(1.1, m);
    assert_eq!(sched.rho(), 1.0);
    for it in 0..=3 * m {
        sched.observe_iteration(it);
    }
    assert_eq!(sched.rho(), 1.1f64.powi(3));
    assert!((sched.rho() - 1.331).abs() < 1e-12);
    // Re-observing a non-multiple changes nothing.
    sched.observe_iteration(3 * m + 1);
    assert_eq!(sched.rho(), 1.1f64.powi(3));
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        horizon: 5,
        batch: 16,
        total_iters: 8,
        warmup_steps: 16,
        steps_per_iter: 2,
        eval_every: 2,
        episode_cap: 100,
        penalty_interval: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn train_is_deterministic_and_penalty_free_on_empty_road() {
    let mut cfg = Config::default();
    cfg.traffic.flow = 0.0;
    cfg.traffic.warmup = 2.0;
    // Pin the signal effectively always green for the south approach.
    cfg.signal.ns_green = 1e6;
    cfg.signal.ew_green = 1e-4;
    let ctx = ScenarioCtx::new(cfg, Turn::Left);
    let tc = tiny_train_cfg();
    let a = train(&ctx, &tc, 97).unwrap();
    let b = train(&ctx, &tc, 97).unwrap();
    assert_eq!(a.curves.len(), b.curves.len());
    for (x, y) in a.curves.iter().zip(b.curves.iter()) {
        assert_eq!(x.j_actor.to_bits(), y.j_actor.to_bits());
        assert_eq!(x.j_penalty.to_bits(), y.j_penalty.to_bits());
        assert_eq!(x.j_critic.to_bits(), y.j_critic.to_bits());
    }
    assert_eq!(a.actor.mlp.to_vector(), b.actor.mlp.to_vector());
    // No traffic, rights never face red: nothing can violate.
    assert!(a.curves.iter().all(|c| c.j_penalty == 0.0));
}

#[test]
fn replay_buffer_fifo_and_capacity() {
    let ctx = ctx(Turn::Left);
    let mut buf = ReplayBuffer::new(3);
    for i in 0..5 {
        let mut s = padding_only_snapshot(&ctx, 0);
        s.ego.p_x = i as f64;
        buf.push(s);
    }
    assert_eq!(buf.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = buf.sample(&mut rng, 32);
    assert!(sample.iter().all(|s| s.ego.p_x >= 2.0), "oldest entries must be evicted");
}
