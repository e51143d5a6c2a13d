//! Vehicle models: the ego bicycle model with linear tires, discretized by
//! first-order Euler, and the constant-speed constant-turn-rate prediction
//! model used for surrounding vehicles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite ego state or control input")]
    NonFinite,
}

/// Ego vehicle state: CG position, body-frame velocities, heading, yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    /// CG x position [m]
    pub p_x: f64,
    /// CG y position [m]
    pub p_y: f64,
    /// Longitudinal speed [m/s], kept >= 0 by the step function
    pub v_lon: f64,
    /// Lateral speed [m/s]
    pub v_lat: f64,
    /// Heading [rad]
    pub phi: f64,
    /// Yaw rate [rad/s]
    pub omega: f64,
}

impl EgoState {
    pub fn new(p_x: f64, p_y: f64, v_lon: f64, v_lat: f64, phi: f64, omega: f64) -> Self {
        EgoState { p_x, p_y, v_lon, v_lat, phi, omega }
    }

    pub fn is_finite(&self) -> bool {
        self.p_x.is_finite()
            && self.p_y.is_finite()
            && self.v_lon.is_finite()
            && self.v_lat.is_finite()
            && self.phi.is_finite()
            && self.omega.is_finite()
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.p_x, self.p_y, self.v_lon, self.v_lat, self.phi, self.omega]
    }
}

/// Control input: front-wheel angle and acceleration command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Front wheel angle [rad]
    pub delta: f64,
    /// Acceleration command [m/s^2]
    pub a: f64,
}

impl Action {
    pub fn new(delta: f64, a: f64) -> Self {
        Action { delta, a }
    }

    pub fn zero() -> Self {
        Action { delta: 0.0, a: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite() && self.a.is_finite()
    }
}

/// Box bounds on the control input.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionBounds {
    /// Maximum front wheel angle magnitude [rad]
    pub delta_max: f64,
    /// Acceleration command range [m/s^2]
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        ActionBounds { delta_max: 0.4, a_min: -3.0, a_max: 1.5 }
    }
}

impl ActionBounds {
    pub fn clamp(&self, u: Action) -> Action {
        Action {
            delta: u.delta.clamp(-self.delta_max, self.delta_max),
            a: u.a.clamp(self.a_min, self.a_max),
        }
    }

    pub fn contains(&self, u: Action) -> bool {
        u.delta.abs() <= self.delta_max + 1e-12 && u.a >= self.a_min - 1e-12 && u.a <= self.a_max + 1e-12
    }
}

/// Movement type of a surrounding vehicle, as seen by the prediction model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    LeftTurning,
    StraightGoing,
    RightTurning,
}

/// Position of a surrounding vehicle relative to the junction square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    OutOfIntersection,
    WithinIntersection,
}

/// Surrounding-vehicle state used by prediction and constraints. The lateral
/// speed and yaw-rate rows of the full state are identically zero for
/// surrounding vehicles, so they are not stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub p_x: f64,
    pub p_y: f64,
    pub v_lon: f64,
    pub phi: f64,
    pub kind: VehicleKind,
    pub region: Region,
}

/// Fixed ego parameters for the bicycle model. Cornering stiffnesses are
/// negative by the sign convention of the tire model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Front cornering stiffness [N/rad]
    pub k_f: f64,
    /// Rear cornering stiffness [N/rad]
    pub k_r: f64,
    /// CG to front axle [m]
    pub l_f: f64,
    /// CG to rear axle [m]
    pub l_r: f64,
    /// Mass [kg]
    pub mass: f64,
    /// Polar moment of inertia at CG [kg m^2]
    pub i_z: f64,
    /// Step length [s]
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            k_f: -155495.0,
            k_r: -155495.0,
            l_f: 1.19,
            l_r: 1.46,
            mass: 1520.0,
            i_z: 2640.0,
            dt: 0.1,
        }
    }
}

/// One Euler step of the ego bicycle model. The longitudinal speed of the
/// result is clamped at zero: the tire model is undefined in reverse.
pub fn step_ego(x: &EgoState, u: &Action, p: &VehicleParams) -> Result<EgoState, DynamicsError> {
    if !x.is_finite() || !u.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    let dt = p.dt;
    let (sin_phi, cos_phi) = x.phi.sin_cos();
    let p_x = x.p_x + dt * (x.v_lon * cos_phi - x.v_lat * sin_phi);
    let p_y = x.p_y + dt * (x.v_lon * sin_phi + x.v_lat * cos_phi);
    let v_lon = x.v_lon + dt * (u.a + x.v_lat * x.omega);
    let v_lat = (p.mass * x.v_lon * x.v_lat
        + dt * ((p.l_f * p.k_f - p.l_r * p.k_r) * x.omega
            - p.k_f * u.delta * x.v_lon
            - p.mass * x.v_lon * x.v_lon * x.omega))
        / (p.mass * x.v_lon - dt * (p.k_f + p.k_r));
    let phi = x.phi + dt * x.omega;
    let omega = (-p.i_z * x.omega * x.v_lon
        - dt * ((p.l_f * p.k_f - p.l_r * p.k_r) * x.v_lat - p.l_f * p.k_f * u.delta * x.v_lon))
        / (dt * (p.l_f * p.l_f * p.k_f + p.l_r * p.l_r * p.k_r) - p.i_z * x.v_lon);
    Ok(EgoState {
        p_x,
        p_y,
        v_lon: v_lon.max(0.0),
        v_lat,
        phi,
        omega,
    })
}

/// Predicted turn rate of a surrounding vehicle [rad/s]. Vehicles outside
/// the junction or going straight keep their heading; turning vehicles
/// inside the junction follow the fixed turn radii of the lane connectors
/// (left 26.875 m, right 15.625 m).
pub fn predicted_turn_rate(v: &VehicleState) -> f64 {
    match (v.region, v.kind) {
        (Region::OutOfIntersection, _) => 0.0,
        (_, VehicleKind::StraightGoing) => 0.0,
        (_, VehicleKind::LeftTurning) => v.v_lon / 26.875,
        (_, VehicleKind::RightTurning) => -v.v_lon / 15.625,
    }
}

/// One step of the surrounding-vehicle prediction model: constant speed,
/// constant turn rate. `kind` and `region` are carried over unchanged, so a
/// chained prediction keeps the turn rate it started with; callers that
/// track vehicles across real time steps refresh `region` themselves.
pub fn step_prediction(v: &VehicleState, dt: f64) -> VehicleState {
    let omega = predicted_turn_rate(v);
    let (sin_phi, cos_phi) = v.phi.sin_cos();
    VehicleState {
        p_x: v.p_x + dt * v.v_lon * cos_phi,
        p_y: v.p_y + dt * v.v_lon * sin_phi,
        v_lon: v.v_lon,
        phi: v.phi + dt * omega,
        kind: v.kind,
        region: v.region,
    }
}

/// Roll the ego and the surrounding vehicles forward through a control
/// sequence. Element 0 of the result is the input; element i+1 is one model
/// step after element i, so the output has `controls.len() + 1` entries.
pub fn rollout(
    x0: &EgoState,
    others0: &[VehicleState],
    controls: &[Action],
    p: &VehicleParams,
) -> Result<Vec<(EgoState, Vec<VehicleState>)>, DynamicsError> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push((*x0, others0.to_vec()));
    for u in controls {
        let (ego, others) = out.last().unwrap();
        let next_ego = step_ego(ego, u, p)?;
        let next_others: Vec<VehicleState> =
            others.iter().map(|v| step_prediction(v, p.dt)).collect();
        out.push((next_ego, next_others));
    }
    Ok(out)
}
