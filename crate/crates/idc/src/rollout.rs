//! Model rollouts through the ego dynamics, the surrounding-vehicle
//! prediction and the constraint set. Two routes share one set of
//! semantics: a plain f64 evaluator used online (shield, evaluation,
//! oracles) and a tape-backed differentiable builder used by the trainer
//! and the shooting baseline. The plain route is kept independent of the
//! tape so each can check the other.

use crate::dynamics::{step_ego, step_prediction, Action, EgoState, VehicleParams, VehicleState};
use crate::nn::tape::{Tape, Tid};
use crate::nn::ActorNet;
use crate::pathgen::ReferencePath;
use crate::scenario::{
    constraints_from_slots, tracking_residual, utility, InterestedSlot, ScenarioCtx, UtilityWeights,
    N_SLOTS,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A frozen rollout start: the ego, the interested set materialized at
/// snapshot time, and the candidate path being tracked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub ego: EgoState,
    pub slots: [InterestedSlot; N_SLOTS],
    pub path_id: u32,
}

/// Plain rollout record. `states` has T+1 entries; `utilities` one per step
/// (on states 0..T-1); `penalties` and `min_g` one per successor state
/// (states 1..T).
#[derive(Debug, Clone)]
pub struct PlainRollout {
    pub states: Vec<EgoState>,
    pub actions: Vec<Action>,
    pub utilities: Vec<f64>,
    pub penalties: Vec<f64>,
    pub min_g: Vec<f64>,
}

impl PlainRollout {
    pub fn total_utility(&self) -> f64 {
        self.utilities.iter().sum()
    }

    pub fn total_penalty(&self) -> f64 {
        self.penalties.iter().sum()
    }

    pub fn all_safe(&self) -> bool {
        self.min_g.iter().all(|g| *g >= 0.0)
    }
}

/// Sum of squared one-sided violations of a constraint set.
pub fn penalty_of_set(set: &crate::scenario::ConstraintSet) -> f64 {
    set.values
        .iter()
        .map(|c| {
            let v = (-c.g).max(0.0);
            v * v
        })
        .sum()
}

enum Driver<'a> {
    Actor(&'a ActorNet),
    /// First action fixed, actor closes the loop afterwards.
    FirstThenActor(Action, &'a ActorNet),
    Sequence(&'a [Action]),
}

fn rollout_plain(
    ctx: &ScenarioCtx,
    path: &ReferencePath,
    ego0: &EgoState,
    slots0: &[InterestedSlot; N_SLOTS],
    driver: Driver,
    horizon: usize,
) -> PlainRollout {
    let params = &ctx.cfg.vehicle;
    let weights = UtilityWeights::default();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut utilities = Vec::with_capacity(horizon);
    let mut penalties = Vec::with_capacity(horizon);
    let mut min_g = Vec::with_capacity(horizon);

    let mut ego = *ego0;
    let mut slots = *slots0;
    let mut hint = path.nearest_reference([ego.p_x, ego.p_y]).index;
    states.push(ego);

    for i in 0..horizon {
        let near = path.nearest_from_hint([ego.p_x, ego.p_y], hint);
        hint = near.index;
        let u = match &driver {
            Driver::Actor(actor) => actor.act(&ctx.state_from_slots(path, &ego, &slots)),
            Driver::FirstThenActor(first, actor) => {
                if i == 0 {
                    *first
                } else {
                    actor.act(&ctx.state_from_slots(path, &ego, &slots))
                }
            }
            Driver::Sequence(seq) => seq[i],
        };
        utilities.push(utility(&tracking_residual(&ego, &near), &u, &weights));
        actions.push(u);
        ego = step_ego(&ego, &u, params).expect("finite rollout state");
        for s in slots.iter_mut() {
            s.vehicle = step_prediction(&s.vehicle, params.dt);
        }
        let set = constraints_from_slots(&ego, &slots, &ctx.cfg.map);
        penalties.push(penalty_of_set(&set));
        min_g.push(set.min_clearance());
        states.push(ego);
    }
    PlainRollout { states, actions, utilities, penalties, min_g }
}

/// Closed-loop rollout driven by the actor.
pub fn closed_loop_rollout(
    ctx: &ScenarioCtx,
    path: &ReferencePath,
    ego: &EgoState,
    slots: &[InterestedSlot; N_SLOTS],
    actor: &ActorNet,
    horizon: usize,
) -> PlainRollout {
    rollout_plain(ctx, path, ego, slots, Driver::Actor(actor), horizon)
}

/// Closed-loop rollout whose first action is pinned (a shield candidate),
/// with the actor driving the remaining steps.
pub fn shielded_candidate_rollout(
    ctx: &ScenarioCtx,
    path: &ReferencePath,
    ego: &EgoState,
    slots: &[InterestedSlot; N_SLOTS],
    first: Action,
    actor: &ActorNet,
    horizon: usize,
) -> PlainRollout {
    rollout_plain(ctx, path, ego, slots, Driver::FirstThenActor(first, actor), horizon)
}

/// Open-loop rollout of an explicit action sequence.
pub fn sequence_rollout(
    ctx: &ScenarioCtx,
    path: &ReferencePath,
    ego: &EgoState,
    slots: &[InterestedSlot; N_SLOTS],
    actions: &[Action],
) -> PlainRollout {
    rollout_plain(ctx, path, ego, slots, Driver::Sequence(actions), actions.len())
}

// --- differentiable route ---------------------------------------------------

/// Ego state as six batch columns on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EgoCols {
    pub px: Tid,
    pub py: Tid,
    pub vlon: Tid,
    pub vlat: Tid,
    pub phi: Tid,
    pub omega: Tid,
}

fn ego_cols_from_states(tape: &mut Tape, egos: &[EgoState]) -> EgoCols {
    let col = |tape: &mut Tape, f: &dyn Fn(&EgoState) -> f64| {
        let v: Vec<f64> = egos.iter().map(|e| f(e)).collect();
        tape.constant_col(&v)
    };
    EgoCols {
        px: col(tape, &|e| e.p_x),
        py: col(tape, &|e| e.p_y),
        vlon: col(tape, &|e| e.v_lon),
        vlat: col(tape, &|e| e.v_lat),
        phi: col(tape, &|e| e.phi),
        omega: col(tape, &|e| e.omega),
    }
}

/// One Euler step of the bicycle model on the tape, matching
/// [`crate::dynamics::step_ego`] including the speed clamp.
pub fn step_ego_tape(
    tape: &mut Tape,
    c: &EgoCols,
    delta: Tid,
    a: Tid,
    p: &VehicleParams,
) -> EgoCols {
    let dt = p.dt;
    let sin_phi = tape.sin(c.phi);
    let cos_phi = tape.cos(c.phi);

    let vx = tape.mul(c.vlon, cos_phi);
    let vy_l = tape.mul(c.vlat, sin_phi);
    let dpx = tape.sub(vx, vy_l);
    let dpx = tape.scale(dpx, dt);
    let px = tape.add(c.px, dpx);

    let vx_s = tape.mul(c.vlon, sin_phi);
    let vy_c = tape.mul(c.vlat, cos_phi);
    let dpy = tape.add(vx_s, vy_c);
    let dpy = tape.scale(dpy, dt);
    let py = tape.add(c.py, dpy);

    let lat_cent = tape.mul(c.vlat, c.omega);
    let dv = tape.add(a, lat_cent);
    let dv = tape.scale(dv, dt);
    let vlon_raw = tape.add(c.vlon, dv);
    let vlon = tape.relu(vlon_raw);

    let stiff = p.l_f * p.k_f - p.l_r * p.k_r;
    let t1 = tape.mul(c.vlon, c.vlat);
    let t1 = tape.scale(t1, p.mass);
    let t2 = tape.scale(c.omega, stiff);
    let dv_steer = tape.mul(delta, c.vlon);
    let t3 = tape.scale(dv_steer, p.k_f);
    let v2 = tape.square(c.vlon);
    let v2o = tape.mul(v2, c.omega);
    let t4 = tape.scale(v2o, p.mass);
    let inner = tape.sub(t2, t3);
    let inner = tape.sub(inner, t4);
    let inner = tape.scale(inner, dt);
    let num_vlat = tape.add(t1, inner);
    let den_vlat_v = tape.scale(c.vlon, p.mass);
    let den_vlat = tape.offset(den_vlat_v, -dt * (p.k_f + p.k_r));
    let vlat = tape.div(num_vlat, den_vlat);

    let dphi = tape.scale(c.omega, dt);
    let phi = tape.add(c.phi, dphi);

    let ov = tape.mul(c.omega, c.vlon);
    let o1 = tape.scale(ov, -p.i_z);
    let u1 = tape.scale(c.vlat, stiff);
    let u2 = tape.scale(dv_steer, p.l_f * p.k_f);
    let u3 = tape.sub(u1, u2);
    let u3 = tape.scale(u3, dt);
    let num_om = tape.sub(o1, u3);
    let den_om_v = tape.scale(c.vlon, -p.i_z);
    let den_om = tape.offset(den_om_v, dt * (p.l_f * p.l_f * p.k_f + p.l_r * p.l_r * p.k_r));
    let omega = tape.div(num_om, den_om);

    EgoCols { px, py, vlon, vlat, phi, omega }
}

/// Signed distance of a batch of points to the drivable-area boundary on
/// the tape. The inside/outside sign is read from the current values and
/// treated as locally constant.
fn road_distance_tape(tape: &mut Tape, ctx: &ScenarioCtx, x: Tid, y: Tid) -> Tid {
    let fx = tape.abs(x);
    let fy = tape.abs(y);
    let mut best: Option<Tid> = None;
    for seg in ctx.cfg.map.boundary_segments() {
        let (a, b) = (seg[0], seg[1]);
        let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
        let len2 = abx * abx + aby * aby;
        let rx = tape.offset(fx, -a[0]);
        let ry = tape.offset(fy, -a[1]);
        let tx = tape.scale(rx, abx / len2);
        let ty = tape.scale(ry, aby / len2);
        let tsum = tape.add(tx, ty);
        let t = tape.clamp(tsum, 0.0, 1.0);
        let px = tape.scale(t, abx);
        let py = tape.scale(t, aby);
        let dx = tape.sub(rx, px);
        let dy = tape.sub(ry, py);
        let dx2 = tape.square(dx);
        let dy2 = tape.square(dy);
        let d2 = tape.add(dx2, dy2);
        let d = tape.sqrt_guard(d2);
        best = Some(match best {
            None => d,
            Some(m) => tape.min(m, d),
        });
    }
    let dist = best.unwrap();
    let signs: Vec<f64> = {
        let xs = tape.value(x).clone();
        let ys = tape.value(y).clone();
        xs.iter()
            .zip(ys.iter())
            .map(|(px, py)| if ctx.cfg.map.contains([*px, *py]) { 1.0 } else { -1.0 })
            .collect()
    };
    let sign_col = tape.constant_col(&signs);
    tape.mul(dist, sign_col)
}

/// A differentiable batch rollout: the tape, the driving-parameter leaves,
/// and the loss heads.
pub struct TapeRollout {
    pub tape: Tape,
    /// Leaves of the driving parameters, in the order the caller supplied
    /// them (actor parameters, or the flattened action sequence).
    pub leaves: Vec<Tid>,
    /// Mean tracking-plus-control objective over the batch.
    pub j_actor: Tid,
    /// Mean summed violation penalty over the batch.
    pub j_penalty: Tid,
    /// Per-element tracking objective (the critic's regression target).
    pub returns: Vec<f64>,
}

impl TapeRollout {
    /// Scalar loss J_p = J_actor + rho * J_penalty as a new tape node.
    pub fn penalized_loss(&mut self, rho: f64) -> Tid {
        let scaled = self.tape.scale(self.j_penalty, rho);
        self.tape.add(self.j_actor, scaled)
    }
}

/// What drives the rollout on the tape.
pub enum TapeDriver<'a> {
    /// The actor network; leaves are its parameters.
    Actor(&'a ActorNet),
    /// A free action sequence; leaves are [delta_0, a_0, delta_1, a_1, ...].
    /// Batch must be a single element.
    Sequence(&'a [Action]),
}

/// Build a differentiable batched rollout of `horizon` steps. Per step i
/// the tracking utility is charged on state i, and the constraint penalty
/// on the successor state i+1.
pub fn build_rollout(
    ctx: &ScenarioCtx,
    elements: &[(&ReferencePath, EgoState, [InterestedSlot; N_SLOTS])],
    driver: TapeDriver,
    horizon: usize,
) -> TapeRollout {
    let b = elements.len();
    let params = &ctx.cfg.vehicle;
    let weights = UtilityWeights::default();
    let mut tape = Tape::new();

    let (leaves, actor_ref) = match &driver {
        TapeDriver::Actor(actor) => (actor.mlp.leaves(&mut tape), Some(*actor)),
        TapeDriver::Sequence(seq) => {
            assert_eq!(b, 1, "sequence rollouts are single-element");
            assert_eq!(seq.len(), horizon);
            let mut ls = Vec::with_capacity(2 * horizon);
            for u in *seq {
                ls.push(tape.leaf(Array2::from_elem((1, 1), u.delta)));
                ls.push(tape.leaf(Array2::from_elem((1, 1), u.a)));
            }
            (ls, None)
        }
    };

    // Surrounding vehicles never depend on the driving parameters: their
    // predicted states become per-step constants.
    let mut others: Vec<[VehicleState; N_SLOTS]> = elements
        .iter()
        .map(|(_, _, slots)| {
            let mut vs = [slots[0].vehicle; N_SLOTS];
            for (k, s) in slots.iter().enumerate() {
                vs[k] = s.vehicle;
            }
            vs
        })
        .collect();

    let egos: Vec<EgoState> = elements.iter().map(|(_, e, _)| *e).collect();
    let mut cols = ego_cols_from_states(&mut tape, &egos);
    let mut hints: Vec<usize> = elements
        .iter()
        .map(|(path, e, _)| path.nearest_reference([e.p_x, e.p_y]).index)
        .collect();

    let mut j_actor_acc: Option<Tid> = None;
    let mut j_pen_acc: Option<Tid> = None;

    for i in 0..horizon {
        // Reference lookup per element from the current tape values.
        let (rx, ry, rphi, rvref, rsign) = {
            let pxv = tape.value(cols.px).clone();
            let pyv = tape.value(cols.py).clone();
            let mut rx = Vec::with_capacity(b);
            let mut ry = Vec::with_capacity(b);
            let mut rphi = Vec::with_capacity(b);
            let mut rvref = Vec::with_capacity(b);
            let mut rsign = Vec::with_capacity(b);
            for (k, (path, _, _)) in elements.iter().enumerate() {
                let q = [pxv[[k, 0]], pyv[[k, 0]]];
                let near = path.nearest_from_hint(q, hints[k]);
                hints[k] = near.index;
                rx.push(near.point.x);
                ry.push(near.point.y);
                rphi.push(near.point.phi);
                rvref.push(near.v_ref);
                let cross = near.point.phi.cos() * (q[1] - near.point.y)
                    - near.point.phi.sin() * (q[0] - near.point.x);
                rsign.push(if cross >= 0.0 { 1.0 } else { -1.0 });
            }
            (
                tape.constant_col(&rx),
                tape.constant_col(&ry),
                tape.constant_col(&rphi),
                tape.constant_col(&rvref),
                tape.constant_col(&rsign),
            )
        };

        // Action for this step.
        let (delta, a) = match (&driver, actor_ref) {
            (TapeDriver::Sequence(_), _) => (leaves[2 * i], leaves[2 * i + 1]),
            (_, Some(actor)) => {
                // Assemble the 41-channel observation.
                let mut channels: Vec<Tid> = Vec::with_capacity(41);
                channels.extend_from_slice(&[
                    cols.px, cols.py, cols.vlon, cols.vlat, cols.phi, cols.omega,
                ]);
                for slot in 0..N_SLOTS {
                    for ch in 0..4 {
                        let vals: Vec<f64> = others
                            .iter()
                            .map(|vs| match ch {
                                0 => vs[slot].p_x,
                                1 => vs[slot].p_y,
                                2 => vs[slot].phi,
                                _ => vs[slot].v_lon,
                            })
                            .collect();
                        channels.push(tape.constant_col(&vals));
                    }
                }
                // Tracking-error block.
                let dxe = tape.sub(cols.px, rx);
                let dye = tape.sub(cols.py, ry);
                let dx2 = tape.square(dxe);
                let dy2 = tape.square(dye);
                let d2 = tape.add(dx2, dy2);
                let dist = tape.sqrt_guard(d2);
                let dp = tape.mul(dist, rsign);
                let dphi_raw = tape.sub(cols.phi, rphi);
                let dphi = tape.wrap_angle(dphi_raw);
                let dv = tape.sub(cols.vlon, rvref);
                channels.push(dp);
                channels.push(dphi);
                channels.push(dv);
                let state = tape.concat_cols(&channels);
                actor.act_tape(&mut tape, &leaves, state)
            }
            _ => unreachable!(),
        };

        // Utility on the current state.
        let resx = tape.sub(rx, cols.px);
        let resy = tape.sub(ry, cols.py);
        let resv = tape.sub(rvref, cols.vlon);
        let resphi_raw = tape.sub(rphi, cols.phi);
        let resphi = tape.wrap_angle(resphi_raw);
        let mut util = {
            let s = tape.square(resx);
            tape.scale(s, weights.q[0])
        };
        for (t, w) in [
            (resy, weights.q[1]),
            (resv, weights.q[2]),
            (cols.vlat, weights.q[3]),
            (resphi, weights.q[4]),
            (cols.omega, weights.q[5]),
            (delta, weights.r[0]),
            (a, weights.r[1]),
        ] {
            let s = tape.square(t);
            let s = tape.scale(s, w);
            util = tape.add(util, s);
        }
        j_actor_acc = Some(match j_actor_acc {
            None => util,
            Some(acc) => tape.add(acc, util),
        });

        // Advance the model.
        cols = step_ego_tape(&mut tape, &cols, delta, a, params);
        for vs in others.iter_mut() {
            for v in vs.iter_mut() {
                *v = step_prediction(v, params.dt);
            }
        }

        // Constraint penalty on the successor state.
        let sin_phi = tape.sin(cols.phi);
        let cos_phi = tape.cos(cols.phi);
        let off = crate::scenario::CIRCLE_OFFSET;
        let fx_off = tape.scale(cos_phi, off);
        let fy_off = tape.scale(sin_phi, off);
        let exf = tape.add(cols.px, fx_off);
        let eyf = tape.add(cols.py, fy_off);
        let exr = tape.sub(cols.px, fx_off);
        let eyr = tape.sub(cols.py, fy_off);

        let mut pen_acc: Option<Tid> = None;
        for slot in 0..N_SLOTS {
            for oc in 0..2 {
                let (ox, oy): (Vec<f64>, Vec<f64>) = others
                    .iter()
                    .map(|vs| {
                        let v = &vs[slot];
                        let (s, c) = v.phi.sin_cos();
                        let sgn = if oc == 0 { 1.0 } else { -1.0 };
                        (v.p_x + sgn * off * c, v.p_y + sgn * off * s)
                    })
                    .unzip();
                let oxc = tape.constant_col(&ox);
                let oyc = tape.constant_col(&oy);
                for (ex, ey) in [(exf, eyf), (exr, eyr)] {
                    let dx = tape.sub(ex, oxc);
                    let dy = tape.sub(ey, oyc);
                    let dx2 = tape.square(dx);
                    let dy2 = tape.square(dy);
                    let d2 = tape.add(dx2, dy2);
                    let d = tape.sqrt_guard(d2);
                    let g = tape.offset(d, -crate::scenario::D_SAFE);
                    let viol_neg = tape.scale(g, -1.0);
                    let viol = tape.relu(viol_neg);
                    let v2 = tape.square(viol);
                    pen_acc = Some(match pen_acc {
                        None => v2,
                        Some(acc) => tape.add(acc, v2),
                    });
                }
            }
        }
        for (ex, ey) in [(exf, eyf), (exr, eyr)] {
            let sd = road_distance_tape(&mut tape, ctx, ex, ey);
            let g = tape.offset(sd, -crate::scenario::R_EGO);
            let viol_neg = tape.scale(g, -1.0);
            let viol = tape.relu(viol_neg);
            let v2 = tape.square(viol);
            pen_acc = Some(match pen_acc {
                None => v2,
                Some(acc) => tape.add(acc, v2),
            });
        }
        let pen = pen_acc.unwrap();
        j_pen_acc = Some(match j_pen_acc {
            None => pen,
            Some(acc) => tape.add(acc, pen),
        });
    }

    let j_actor_vec = j_actor_acc.expect("horizon >= 1");
    let j_pen_vec = j_pen_acc.expect("horizon >= 1");
    let returns: Vec<f64> = tape.value(j_actor_vec).column(0).to_vec();
    let j_actor = tape.mean_all(j_actor_vec);
    let j_penalty = tape.mean_all(j_pen_vec);

    TapeRollout { tape, leaves, j_actor, j_penalty, returns }
}
