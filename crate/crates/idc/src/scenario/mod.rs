//! Scenario machinery: signal phases, the 41-dimensional encoded
//! observation, safety constraints over two-circle vehicle footprints, the
//! per-step tracking utility, and the interested-vehicle selection that ties
//! them together.

pub mod traffic;

pub use traffic::{spawn_traffic, step_traffic, EgoView, ScriptedVehicle, TrafficState};

use crate::config::Config;
use crate::dynamics::{Action, EgoState, Region, VehicleKind, VehicleState};
use crate::map::{Approach, IntersectionMap, RouteId, Turn};
use crate::pathgen::{candidate_set, route_reference_path, RefLookup, ReferencePath};
use serde::de::{SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Footprint circle radius of the ego and of surrounding vehicles [m].
pub const R_EGO: f64 = 2.5;
pub const R_VEH: f64 = 2.5;
/// Center-to-center clearance two vehicles must keep [m].
pub const D_SAFE: f64 = R_EGO + R_VEH;
/// Offset of the two footprint circles fore/aft of the CG [m]
/// (vehicle length 4.8 m).
pub const CIRCLE_OFFSET: f64 = 1.325;
/// Scripted/ego vehicle body length used by gap logic [m].
pub const VEHICLE_LEN: f64 = 4.8;
/// Padding vehicles sit this far behind the ego [m].
pub const PADDING_BEHIND: f64 = 80.0;

/// Dimension of the encoded observation.
pub const STATE_DIM: usize = 41;
/// Interested-vehicle slots and channels per slot.
pub const N_SLOTS: usize = 8;
pub const SLOT_CHANNELS: usize = 4;
/// Constraints per evaluation: 4 circle pairs per slot plus 2 road edges.
pub const N_CONSTRAINTS: usize = N_SLOTS * 4 + 2;

/// Two-phase signal: north-south movements run, then east-west movements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalPhase {
    NorthSouth,
    EastWest,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SignalState {
    pub phase: SignalPhase,
    /// Time spent in the current phase [s].
    pub time_in_phase: f64,
}

impl SignalState {
    pub fn new(phase: SignalPhase, time_in_phase: f64) -> Self {
        SignalState { phase, time_in_phase }
    }

    /// Advance the signal by `dt` under the configured phase durations.
    pub fn step(&self, cfg: &crate::config::SignalConfig, dt: f64) -> SignalState {
        let mut phase = self.phase;
        let mut t = self.time_in_phase + dt;
        loop {
            let dur = match phase {
                SignalPhase::NorthSouth => cfg.ns_green,
                SignalPhase::EastWest => cfg.ew_green,
            };
            if t < dur {
                return SignalState { phase, time_in_phase: t };
            }
            t -= dur;
            phase = match phase {
                SignalPhase::NorthSouth => SignalPhase::EastWest,
                SignalPhase::EastWest => SignalPhase::NorthSouth,
            };
        }
    }
}

/// Whether a movement may enter the junction. Right turns are never
/// signal-controlled.
pub fn movement_permitted(signal: &SignalState, from: Approach, turn: Turn) -> bool {
    if turn == Turn::Right {
        return true;
    }
    match signal.phase {
        SignalPhase::NorthSouth => from.is_north_south(),
        SignalPhase::EastWest => !from.is_north_south(),
    }
}

/// The 41-dimensional observation fed to the actor and critic:
/// ego block (6), eight interested-vehicle blocks (4 each), tracking-error
/// block (3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RLState(pub [f64; STATE_DIM]);

impl RLState {
    pub const EGO_OFFSET: usize = 0;
    pub const OTHER_OFFSET: usize = 6;
    pub const REF_OFFSET: usize = 6 + N_SLOTS * SLOT_CHANNELS;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Serialize for RLState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(STATE_DIM))?;
        for v in &self.0 {
            seq.serialize_element(v)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for RLState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RLState;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a sequence of {STATE_DIM} numbers")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<RLState, A::Error> {
                let mut out = [0.0; STATE_DIM];
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| serde::de::Error::invalid_length(i, &self))?;
                }
                Ok(RLState(out))
            }
        }
        d.deserialize_seq(V)
    }
}

/// Where a slot vehicle came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotSource {
    /// A scripted vehicle, by id.
    Real(u64),
    /// Far-behind padding for an empty slot.
    Padding,
    /// Stationary stop-line obstacle encoding a red light.
    RedLight,
}

/// One interested-vehicle slot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InterestedSlot {
    pub vehicle: VehicleState,
    pub source: SlotSource,
}

/// Tracking errors relative to a reference path: signed lateral offset
/// (positive left of the path), wrapped heading error, speed error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingErrors {
    pub delta_p: f64,
    pub delta_phi: f64,
    pub delta_v: f64,
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Position, heading and speed errors of the ego against the nearest stored
/// point of the path. The position error carries sign: positive when the
/// ego sits left of the reference tangent.
pub fn tracking_errors(ego: &EgoState, path: &ReferencePath) -> TrackingErrors {
    let near = path.nearest_reference([ego.p_x, ego.p_y]);
    tracking_errors_at(ego, &near)
}

/// Same as [`tracking_errors`] but against an already-located reference.
pub fn tracking_errors_at(ego: &EgoState, near: &RefLookup) -> TrackingErrors {
    let dx = ego.p_x - near.point.x;
    let dy = ego.p_y - near.point.y;
    let dist = (dx * dx + dy * dy).sqrt();
    let cross = near.point.phi.cos() * dy - near.point.phi.sin() * dx;
    let sign = if cross >= 0.0 { 1.0 } else { -1.0 };
    TrackingErrors {
        delta_p: sign * dist,
        delta_phi: wrap_angle(ego.phi - near.point.phi),
        delta_v: ego.v_lon - near.v_ref,
    }
}

/// Residual x_ref - x of the six-dimensional tracking state, with the
/// v_lat and yaw-rate rows of the reference zeroed and the heading row
/// wrapped.
pub fn tracking_residual(ego: &EgoState, near: &RefLookup) -> [f64; 6] {
    [
        near.point.x - ego.p_x,
        near.point.y - ego.p_y,
        near.v_ref - ego.v_lon,
        -ego.v_lat,
        wrap_angle(near.point.phi - ego.phi),
        -ego.omega,
    ]
}

/// Diagonal weights of the per-step utility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityWeights {
    pub q: [f64; 6],
    pub r: [f64; 2],
}

impl Default for UtilityWeights {
    fn default() -> Self {
        UtilityWeights {
            q: [0.04, 0.04, 0.01, 0.01, 0.1, 0.02],
            r: [0.1, 0.005],
        }
    }
}

/// Per-step cost: residual' Q residual + u' R u.
pub fn utility(residual: &[f64; 6], u: &Action, w: &UtilityWeights) -> f64 {
    let mut c = 0.0;
    for i in 0..6 {
        c += w.q[i] * residual[i] * residual[i];
    }
    c + w.r[0] * u.delta * u.delta + w.r[1] * u.a * u.a
}

/// Identity of one constraint value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintId {
    /// Circle pair between the ego and slot vehicle: pair indexes the
    /// (ego front/rear) x (vehicle front/rear) combinations.
    VehiclePair { slot: u8, pair: u8 },
    /// Ego footprint circle against the drivable-area boundary.
    RoadEdge { circle: u8 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Constraint {
    pub id: ConstraintId,
    /// Signed clearance; >= 0 means satisfied.
    pub g: f64,
}

/// All constraint values at one (ego, slots) configuration. The count is
/// fixed: 4 circle pairs per slot and 2 road-edge terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub values: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn min_clearance(&self) -> f64 {
        self.values.iter().map(|c| c.g).fold(f64::INFINITY, f64::min)
    }

    pub fn all_satisfied(&self) -> bool {
        self.values.iter().all(|c| c.g >= 0.0)
    }
}

/// Footprint circle centers of a body at (x, y) with heading phi.
pub fn footprint_circles(x: f64, y: f64, phi: f64) -> [[f64; 2]; 2] {
    let (s, c) = phi.sin_cos();
    [
        [x + CIRCLE_OFFSET * c, y + CIRCLE_OFFSET * s],
        [x - CIRCLE_OFFSET * c, y - CIRCLE_OFFSET * s],
    ]
}

/// Constraint values of the ego against a fixed set of slot vehicles and
/// the road boundary.
pub fn constraints_from_slots(
    ego: &EgoState,
    slots: &[InterestedSlot; N_SLOTS],
    map: &IntersectionMap,
) -> ConstraintSet {
    let ego_circles = footprint_circles(ego.p_x, ego.p_y, ego.phi);
    let mut values = Vec::with_capacity(N_CONSTRAINTS);
    for (j, slot) in slots.iter().enumerate() {
        let v = &slot.vehicle;
        let veh_circles = footprint_circles(v.p_x, v.p_y, v.phi);
        let mut pair = 0u8;
        for ec in &ego_circles {
            for vc in &veh_circles {
                let d = ((ec[0] - vc[0]).powi(2) + (ec[1] - vc[1]).powi(2)).sqrt();
                values.push(Constraint {
                    id: ConstraintId::VehiclePair { slot: j as u8, pair },
                    g: d - D_SAFE,
                });
                pair += 1;
            }
        }
    }
    for (k, ec) in ego_circles.iter().enumerate() {
        values.push(Constraint {
            id: ConstraintId::RoadEdge { circle: k as u8 },
            g: map.boundary_distance(*ec) - R_EGO,
        });
    }
    ConstraintSet { values }
}

/// Scenario context: the task, its pre-generated candidate paths, the
/// scripted-route geometry, route conflict points, and the conflict-route
/// list feeding the interested-vehicle slots.
#[derive(Debug, Clone)]
pub struct ScenarioCtx {
    pub cfg: Config,
    pub task: Turn,
    /// Pre-generated candidate paths of the task (path_id = exit lane).
    pub candidates: Vec<ReferencePath>,
    /// Reference paths of the twelve scripted routes, indexed like
    /// `RouteId::all()`.
    pub routes: Vec<(RouteId, ReferencePath)>,
    /// Crossing/merging points between scripted routes.
    pub conflicts: Vec<Conflict>,
    /// Routes whose vehicles fill the observation slots, in slot order.
    pub interest_routes: [RouteId; 4],
    /// Arc position of the stop line on every route (shared approach
    /// geometry).
    pub stop_arc: f64,
}

/// A crossing or merging point between two scripted routes, by route index.
#[derive(Debug, Clone, Copy)]
pub struct Conflict {
    pub a: usize,
    pub b: usize,
    /// Arc position of the conflict on route a / route b.
    pub s_a: f64,
    pub s_b: f64,
}

/// Conflict-route lists per task. The left-task list is the canonical
/// ordering [own route, same-entrance straight, opposite straight, opposite
/// turn into the shared exit]; the straight and right lists follow the same
/// crossing-or-merging principle from the south entrance.
pub fn interest_routes(task: Turn) -> [RouteId; 4] {
    use Approach::*;
    match task {
        Turn::Left => [
            RouteId::new(South, Turn::Left),
            RouteId::new(South, Turn::Straight),
            RouteId::new(North, Turn::Straight),
            RouteId::new(North, Turn::Right),
        ],
        Turn::Straight => [
            RouteId::new(South, Turn::Straight),
            RouteId::new(South, Turn::Left),
            RouteId::new(North, Turn::Straight),
            RouteId::new(North, Turn::Left),
        ],
        Turn::Right => [
            RouteId::new(South, Turn::Right),
            RouteId::new(South, Turn::Straight),
            RouteId::new(West, Turn::Straight),
            RouteId::new(North, Turn::Left),
        ],
    }
}

impl ScenarioCtx {
    pub fn new(cfg: Config, task: Turn) -> Self {
        let candidates = candidate_set(task, &cfg.map, &cfg.paths);
        let routes: Vec<(RouteId, ReferencePath)> = RouteId::all()
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let v_ref = cfg.paths.v_ref_for(r.turn);
                let path = route_reference_path(
                    &cfg.map,
                    r.from,
                    r.turn.entry_lane(),
                    r.exit(),
                    r.turn.entry_lane(),
                    &cfg.paths,
                    v_ref,
                    i as u32,
                )
                .expect("route geometry is valid");
                (r, path)
            })
            .collect();
        let conflicts = find_conflicts(&routes, &cfg.map);
        let stop_arc = cfg.map.approach_len - cfg.map.stop_line_setback;
        ScenarioCtx {
            interest_routes: interest_routes(task),
            candidates,
            routes,
            conflicts,
            stop_arc,
            cfg,
            task,
        }
    }

    /// Index of the ego's own route in `routes`.
    pub fn ego_route_index(&self) -> usize {
        self.routes
            .iter()
            .position(|(r, _)| *r == RouteId::new(Approach::South, self.task))
            .unwrap()
    }

    pub fn route_index(&self, id: RouteId) -> usize {
        self.routes.iter().position(|(r, _)| *r == id).unwrap()
    }

    /// Arc position where a route's exit straight begins.
    pub fn exit_start_arc(&self, route_idx: usize) -> f64 {
        self.routes[route_idx].1.length() - self.cfg.map.exit_len
    }

    /// The two stationary stop-line obstacles that encode a red light for
    /// the ego's approach, spread across the task's entrance lane.
    pub fn red_light_virtuals(&self) -> [VehicleState; 2] {
        let map = &self.cfg.map;
        let entry = map.entry_point(Approach::South, self.task.entry_lane());
        let y = -map.stop_line_distance();
        let spread = map.lane_width / 2.0;
        let mk = |x: f64| VehicleState {
            p_x: x,
            p_y: y,
            v_lon: 0.0,
            phi: std::f64::consts::PI,
            kind: VehicleKind::StraightGoing,
            region: Region::OutOfIntersection,
        };
        [mk(entry[0] - spread), mk(entry[0] + spread)]
    }

    /// True when the red-light obstacles are active: the ego's movement has
    /// no green and the ego has not crossed the stop line.
    pub fn red_light_active(&self, ego: &EgoState, signal: &SignalState) -> bool {
        !movement_permitted(signal, Approach::South, self.task)
            && self
                .cfg
                .map
                .progress_past_stop_line(Approach::South, [ego.p_x, ego.p_y])
                < 0.0
    }

    /// Padding vehicle for an empty slot: a virtual vehicle far behind the
    /// ego on its own heading, moving at ego speed, too distant to ever
    /// bind a constraint.
    pub fn padding_vehicle(&self, ego: &EgoState) -> VehicleState {
        let (s, c) = ego.phi.sin_cos();
        VehicleState {
            p_x: ego.p_x - PADDING_BEHIND * c,
            p_y: ego.p_y - PADDING_BEHIND * s,
            v_lon: ego.v_lon,
            phi: ego.phi,
            kind: VehicleKind::StraightGoing,
            region: Region::OutOfIntersection,
        }
    }

    /// Fill the eight observation slots: two vehicles per conflict route in
    /// slot order, nearest to leaving the junction first. On the ego's own
    /// route only vehicles ahead of the ego count, and while the ego faces
    /// a red light the own-route pair is replaced by the stop-line
    /// obstacles. Empty slots get padding vehicles.
    pub fn interested_vehicles(
        &self,
        ego: &EgoState,
        traffic: &TrafficState,
        signal: &SignalState,
    ) -> [InterestedSlot; N_SLOTS] {
        let padding = InterestedSlot {
            vehicle: self.padding_vehicle(ego),
            source: SlotSource::Padding,
        };
        let mut slots = [padding; N_SLOTS];

        let ego_route_idx = self.ego_route_index();
        let ego_arc = self.routes[ego_route_idx]
            .1
            .project([ego.p_x, ego.p_y])
            .0;
        let red = self.red_light_active(ego, signal);

        for (r_i, route_id) in self.interest_routes.iter().enumerate() {
            let own_route = *route_id == self.routes[ego_route_idx].0;
            if own_route && red {
                for (k, v) in self.red_light_virtuals().into_iter().enumerate() {
                    slots[r_i * 2 + k] = InterestedSlot {
                        vehicle: v,
                        source: SlotSource::RedLight,
                    };
                }
                continue;
            }
            let route_idx = self.route_index(*route_id);
            let exit_arc = self.routes[route_idx].1.length() - self.cfg.map.exit_len;
            // Remaining arc to the junction exit orders candidates; vehicles
            // well past the exit no longer matter.
            let mut cands: Vec<(f64, &ScriptedVehicle)> = traffic
                .vehicles
                .iter()
                .filter(|v| self.route_index(v.route) == route_idx)
                .filter(|v| v.arc < exit_arc + 10.0)
                .filter(|v| !own_route || v.arc > ego_arc - 2.0)
                .map(|v| (exit_arc - v.arc, v))
                .collect();
            cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.id.cmp(&b.1.id)));
            for (k, (_, v)) in cands.iter().take(2).enumerate() {
                slots[r_i * 2 + k] = InterestedSlot {
                    vehicle: traffic.vehicle_state(v, self),
                    source: SlotSource::Real(v.id),
                };
            }
        }
        slots
    }

    /// Constraint values of the ego against the current interested set and
    /// the road boundary.
    pub fn constraint_values(
        &self,
        ego: &EgoState,
        traffic: &TrafficState,
        signal: &SignalState,
    ) -> ConstraintSet {
        let slots = self.interested_vehicles(ego, traffic, signal);
        constraints_from_slots(ego, &slots, &self.cfg.map)
    }

    /// Encode the observation for one candidate path.
    pub fn build_state(
        &self,
        path: &ReferencePath,
        ego: &EgoState,
        traffic: &TrafficState,
        signal: &SignalState,
    ) -> RLState {
        let slots = self.interested_vehicles(ego, traffic, signal);
        self.state_from_slots(path, ego, &slots)
    }

    /// Encode the observation from an already-selected slot set.
    pub fn state_from_slots(
        &self,
        path: &ReferencePath,
        ego: &EgoState,
        slots: &[InterestedSlot; N_SLOTS],
    ) -> RLState {
        let mut s = [0.0; STATE_DIM];
        s[0] = ego.p_x;
        s[1] = ego.p_y;
        s[2] = ego.v_lon;
        s[3] = ego.v_lat;
        s[4] = ego.phi;
        s[5] = ego.omega;
        for (j, slot) in slots.iter().enumerate() {
            let base = RLState::OTHER_OFFSET + j * SLOT_CHANNELS;
            s[base] = slot.vehicle.p_x;
            s[base + 1] = slot.vehicle.p_y;
            s[base + 2] = slot.vehicle.phi;
            s[base + 3] = slot.vehicle.v_lon;
        }
        let err = tracking_errors(ego, path);
        s[RLState::REF_OFFSET] = err.delta_p;
        s[RLState::REF_OFFSET + 1] = err.delta_phi;
        s[RLState::REF_OFFSET + 2] = err.delta_v;
        RLState(s)
    }

    /// Collision ground truth: a realized violation of any vehicle-pair
    /// clearance against a real (non-virtual) slot vehicle, using the same
    /// two-circle geometry the constraints use.
    pub fn realized_collision(
        &self,
        ego: &EgoState,
        traffic: &TrafficState,
        signal: &SignalState,
    ) -> bool {
        let slots = self.interested_vehicles(ego, traffic, signal);
        let set = constraints_from_slots(ego, &slots, &self.cfg.map);
        set.values.iter().any(|c| match c.id {
            ConstraintId::VehiclePair { slot, .. } => {
                matches!(slots[slot as usize].source, SlotSource::Real(_)) && c.g < 0.0
            }
            ConstraintId::RoadEdge { .. } => false,
        })
    }
}

/// Find crossing/merging points between scripted-route centerlines inside
/// (and just around) the junction square.
fn find_conflicts(routes: &[(RouteId, ReferencePath)], map: &IntersectionMap) -> Vec<Conflict> {
    let margin = map.half_width + 6.0;
    let mut out = Vec::new();
    for a in 0..routes.len() {
        for b in 0..routes.len() {
            if a == b || routes[a].0.from == routes[b].0.from {
                continue;
            }
            let pa = &routes[a].1;
            let pb = &routes[b].1;
            // First meeting point along route a: the smallest s_a with any
            // near pass; ties resolve to the closest pass.
            let mut best: Option<(f64, f64, f64)> = None;
            'outer: for (i, qa) in pa.points.iter().enumerate() {
                if qa.x.abs() > margin || qa.y.abs() > margin {
                    continue;
                }
                for (j, qb) in pb.points.iter().enumerate() {
                    if qb.x.abs() > margin || qb.y.abs() > margin {
                        continue;
                    }
                    let d2 = (qa.x - qb.x).powi(2) + (qa.y - qb.y).powi(2);
                    if d2 < 2.0 * 2.0 {
                        match best {
                            Some((s_a, _, bd)) if pa.arcs[i] <= s_a + 1e-9 => {
                                if d2 < bd {
                                    best = Some((pa.arcs[i], pb.arcs[j], d2));
                                }
                            }
                            Some(_) => break 'outer,
                            None => best = Some((pa.arcs[i], pb.arcs[j], d2)),
                        }
                    }
                }
            }
            if let Some((s_a, s_b, _)) = best {
                out.push(Conflict { a, b, s_a, s_b });
            }
        }
    }
    out
}
