//! Scripted surrounding traffic. Each vehicle follows its route centerline
//! under a constant-time-headway car-following rule, stops for red, yields
//! at route conflicts, and despawns past its exit. Arrivals are Poisson per
//! entrance lane. Everything is deterministic under the spawn seed.

use super::{movement_permitted, ScenarioCtx, SignalState, VEHICLE_LEN};
use crate::dynamics::{EgoState, Region, VehicleKind, VehicleState};
use crate::map::{RouteId, Turn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Standing gap of the car-following rule [m].
const STANDING_GAP: f64 = 2.0;
/// Time headway of the car-following rule [s].
const TIME_HEADWAY: f64 = 1.5;
/// Proportional speed-control gain [1/s].
const SPEED_GAIN: f64 = 2.0;
/// Scripted acceleration envelope [m/s^2].
const ACCEL_MIN: f64 = -4.5;
const ACCEL_MAX: f64 = 2.0;
/// Stop this far before a stop line or yield point [m].
const LINE_MARGIN: f64 = 1.0;
/// Yield point distance upstream of a conflict [m].
const YIELD_SETBACK: f64 = 8.0;
/// A conflict zone extends this far around the conflict point [m].
const ZONE_HALF: f64 = 6.0;
/// Approaching vehicles within this time of a conflict trigger a yield [s].
const TTC_YIELD: f64 = 4.0;
/// Lateral tolerance for treating the ego as an on-route leader [m].
const EGO_LANE_TOL: f64 = 2.2;
/// Entrances are blocked for spawning while a vehicle sits this close [m].
const SPAWN_CLEAR: f64 = 10.0;

/// Movement priority at conflicts: straights beat lefts beat rights.
pub(crate) fn priority(turn: Turn) -> u8 {
    match turn {
        Turn::Straight => 2,
        Turn::Left => 1,
        Turn::Right => 0,
    }
}

/// One scripted vehicle, tracked by arc position along its route path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedVehicle {
    pub id: u64,
    pub route: RouteId,
    /// Arc position along the route reference path [m].
    pub arc: f64,
    pub speed: f64,
    /// Free-flow target speed of this vehicle [m/s].
    pub cruise: f64,
}

/// The ego as seen by scripted traffic.
#[derive(Debug, Clone, Copy)]
pub struct EgoView {
    pub state: EgoState,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Snapshot of the scripted traffic. Stepping clones the snapshot; the
/// spawn RNG state rides along, so a (seeded) snapshot chain is fully
/// deterministic. Serialized snapshots are for replay rendering only and do
/// not carry the RNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrafficState {
    pub time: f64,
    pub vehicles: Vec<ScriptedVehicle>,
    /// Demand per entrance lane [veh/h].
    pub flow: f64,
    /// Per-route time of the next pending arrival [s].
    next_arrival: Vec<f64>,
    next_id: u64,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

impl TrafficState {
    /// Materialize the full vehicle state of a scripted vehicle.
    pub fn vehicle_state(&self, v: &ScriptedVehicle, ctx: &ScenarioCtx) -> VehicleState {
        let route_idx = ctx.route_index(v.route);
        let pose = ctx.routes[route_idx].1.pose_at_arc(v.arc);
        let kind = match v.route.turn {
            Turn::Left => VehicleKind::LeftTurning,
            Turn::Straight => VehicleKind::StraightGoing,
            Turn::Right => VehicleKind::RightTurning,
        };
        let region = if ctx.cfg.map.within_junction([pose.x, pose.y]) {
            Region::WithinIntersection
        } else {
            Region::OutOfIntersection
        };
        VehicleState {
            p_x: pose.x,
            p_y: pose.y,
            v_lon: v.speed,
            phi: pose.phi,
            kind,
            region,
        }
    }
}

/// Draw an exponential inter-arrival time for the given lane demand.
pub(crate) fn draw_interarrival(rng: &mut ChaCha8Rng, flow_veh_per_hour: f64) -> f64 {
    if flow_veh_per_hour <= 0.0 {
        return f64::INFINITY;
    }
    let rate = flow_veh_per_hour / 3600.0;
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -u.ln() / rate
}

/// Fresh traffic with no vehicles and seeded per-lane arrival clocks.
pub fn spawn_traffic(ctx: &ScenarioCtx, seed: u64, flow: f64) -> TrafficState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let next_arrival = (0..ctx.routes.len())
        .map(|_| draw_interarrival(&mut rng, flow))
        .collect();
    TrafficState {
        time: 0.0,
        vehicles: Vec::new(),
        flow,
        next_arrival,
        next_id: 1,
        rng,
    }
}

/// Constant-time-headway safe speed for a gap to a leader's rear bumper.
fn headway_speed(gap: f64) -> f64 {
    ((gap - STANDING_GAP) / TIME_HEADWAY).max(0.0)
}

/// Safe speed for stopping `dist` short of a line.
fn line_speed(dist: f64) -> f64 {
    ((dist - LINE_MARGIN) / TIME_HEADWAY).max(0.0)
}

/// Advance the scripted traffic by one step. Decisions are made
/// synchronously from the previous snapshot, so the per-vehicle iteration
/// order does not matter. The ego (when given) acts as a leader on any
/// route it is laterally close to, and as a conflict party on its own task
/// route.
pub fn step_traffic(
    ctx: &ScenarioCtx,
    traffic: &TrafficState,
    signal: &SignalState,
    ego: Option<&EgoView>,
    dt: f64,
) -> TrafficState {
    let mut next = traffic.clone();
    next.time += dt;

    // Ego projected onto every route once, as (arc, lateral, speed).
    let ego_on_route: Option<Vec<(f64, f64, f64)>> = ego.map(|e| {
        ctx.routes
            .iter()
            .map(|(_, path)| {
                let (arc, lat) = path.project([e.state.p_x, e.state.p_y]);
                (arc, lat, e.state.v_lon)
            })
            .collect()
    });
    let ego_route_idx = ctx.ego_route_index();

    let new_speeds: Vec<f64> = traffic
        .vehicles
        .iter()
        .map(|v| {
            let route_idx = ctx.route_index(v.route);
            let mut target = v.cruise;

            // Same-route leader.
            for w in &traffic.vehicles {
                if w.id != v.id && w.route == v.route && w.arc > v.arc {
                    target = target.min(headway_speed(w.arc - v.arc - VEHICLE_LEN));
                }
            }
            // Merged exit lane: routes sharing the exit leg and lane share
            // arc progress past the exit start.
            let exit_start = ctx.exit_start_arc(route_idx);
            let my_exit = (v.route.exit(), v.route.turn.entry_lane());
            if v.arc > exit_start - 10.0 {
                for w in &traffic.vehicles {
                    if w.id == v.id || w.route == v.route {
                        continue;
                    }
                    if (w.route.exit(), w.route.turn.entry_lane()) != my_exit {
                        continue;
                    }
                    let w_prog = w.arc - ctx.exit_start_arc(ctx.route_index(w.route));
                    let my_prog = v.arc - exit_start;
                    if w_prog > my_prog && w_prog > -10.0 {
                        target = target.min(headway_speed(w_prog - my_prog - VEHICLE_LEN));
                    }
                }
            }
            // Ego as leader.
            if let Some(eor) = &ego_on_route {
                let (e_arc, e_lat, _) = eor[route_idx];
                if e_lat < EGO_LANE_TOL && e_arc > v.arc - 2.0 {
                    target = target.min(headway_speed(e_arc - v.arc - VEHICLE_LEN));
                }
            }
            // Red light.
            if !movement_permitted(signal, v.route.from, v.route.turn) && v.arc < ctx.stop_arc {
                target = target.min(line_speed(ctx.stop_arc - v.arc));
            }
            // Conflict yielding.
            for c in ctx.conflicts.iter().filter(|c| c.a == route_idx) {
                let yield_point = c.s_a - YIELD_SETBACK;
                if v.arc >= c.s_a - 3.0 {
                    continue; // committed through the zone
                }
                let b_turn = ctx.routes[c.b].0.turn;
                let must_approach_yield = priority(v.route.turn) < priority(b_turn);
                let mut blocked = false;
                for w in traffic.vehicles.iter().filter(|w| ctx.route_index(w.route) == c.b) {
                    // Anyone inside the zone blocks the crossing outright.
                    if (w.arc - c.s_b).abs() < ZONE_HALF {
                        blocked = true;
                        break;
                    }
                    if must_approach_yield && w.arc < c.s_b {
                        let tta = (c.s_b - w.arc) / w.speed.max(1.0);
                        let moving = w.speed > 0.5;
                        if moving && tta < TTC_YIELD {
                            blocked = true;
                            break;
                        }
                    }
                }
                // The ego participates on its own task route.
                if !blocked && c.b == ego_route_idx {
                    if let Some(eor) = &ego_on_route {
                        let (e_arc, e_lat, e_speed) = eor[ego_route_idx];
                        if e_lat < 6.0 {
                            if (e_arc - c.s_b).abs() < ZONE_HALF + 2.0 {
                                blocked = true;
                            } else if priority(v.route.turn) < priority(ctx.task)
                                && e_arc < c.s_b
                                && e_speed > 0.5
                                && (c.s_b - e_arc) / e_speed.max(1.0) < TTC_YIELD
                            {
                                blocked = true;
                            }
                        }
                    }
                }
                if blocked && v.arc < yield_point {
                    target = target.min(line_speed(yield_point - v.arc));
                } else if blocked {
                    // Between yield point and commit point: stop hard.
                    target = 0.0;
                }
            }

            let accel = (SPEED_GAIN * (target - v.speed)).clamp(ACCEL_MIN, ACCEL_MAX);
            (v.speed + accel * dt).max(0.0)
        })
        .collect();

    for (v, speed) in next.vehicles.iter_mut().zip(new_speeds) {
        v.speed = speed;
        v.arc += speed * dt;
    }
    // Despawn past the route end.
    next.vehicles.retain(|v| {
        let route_idx = ctx.route_index(v.route);
        v.arc < ctx.routes[route_idx].1.length() - 0.5
    });

    // Arrivals, in fixed route order. A blocked entrance holds the arrival
    // until it clears.
    for (route_idx, (route, _)) in ctx.routes.iter().enumerate() {
        if next.next_arrival[route_idx] > next.time {
            continue;
        }
        let entrance_blocked = next
            .vehicles
            .iter()
            .any(|v| v.route == *route && v.arc < SPAWN_CLEAR)
            || ego_on_route
                .as_ref()
                .map(|eor| {
                    let (e_arc, e_lat, _) = eor[route_idx];
                    e_lat < EGO_LANE_TOL && e_arc < SPAWN_CLEAR + 2.0
                })
                .unwrap_or(false);
        if entrance_blocked {
            continue;
        }
        let base = match route.turn {
            Turn::Straight => ctx.cfg.traffic.cruise_straight,
            _ => ctx.cfg.traffic.cruise_turn,
        };
        let jitter = ctx.cfg.traffic.jitter;
        let cruise = base * (1.0 + jitter * next.rng.random_range(-1.0..1.0));
        // Enter no faster than the gap to the nearest leader allows.
        let mut entry_speed = cruise;
        for w in &next.vehicles {
            if w.route == *route {
                entry_speed = entry_speed.min(headway_speed(w.arc - VEHICLE_LEN));
            }
        }
        next.vehicles.push(ScriptedVehicle {
            id: next.next_id,
            route: *route,
            arc: 0.0,
            speed: entry_speed,
            cruise,
        });
        next.next_id += 1;
        let gap = draw_interarrival(&mut next.rng, next.flow);
        next.next_arrival[route_idx] = next.time + gap;
    }
    next
}
