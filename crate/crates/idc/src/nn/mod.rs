//! Function approximators and their training machinery: the 41-256-256
//! ELU networks for actor and critic, input scaling, bounded actor output,
//! Adam with bias correction, the linear learning-rate decay, and the
//! checkpoint container.

pub mod tape;

pub use tape::{Gradients, Tape, Tid};

use crate::dynamics::{Action, ActionBounds};
use crate::scenario::{RLState, N_SLOTS, SLOT_CHANNELS, STATE_DIM};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input dimension {got} does not match network input {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),
}

/// Hidden width of both networks.
pub const HIDDEN: usize = 256;

/// Per-dimension input scaling applied before the first layer. Positions
/// are measured in junction half-widths, speeds against a ~10 m/s envelope,
/// angles against pi. Fixed constants; they are part of the architecture
/// and ride along in checkpoints.
pub fn state_scale() -> [f64; STATE_DIM] {
    let mut s = [1.0; STATE_DIM];
    // ego: p_x, p_y, v_lon, v_lat, phi, omega
    s[0] = 1.0 / 50.0;
    s[1] = 1.0 / 50.0;
    s[2] = 1.0 / 10.0;
    s[3] = 1.0 / 2.0;
    s[4] = 1.0 / std::f64::consts::PI;
    s[5] = 2.0;
    for j in 0..N_SLOTS {
        let base = 6 + j * SLOT_CHANNELS;
        s[base] = 1.0 / 50.0;
        s[base + 1] = 1.0 / 50.0;
        s[base + 2] = 1.0 / std::f64::consts::PI;
        s[base + 3] = 1.0 / 10.0;
    }
    let r = RLState::REF_OFFSET;
    s[r] = 1.0 / 5.0;
    s[r + 1] = 2.0 / std::f64::consts::PI;
    s[r + 2] = 1.0 / 10.0;
    s
}

/// One affine layer; weights are (fan_in x fan_out), bias (1 x fan_out).
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// A feed-forward stack with ELU on all but the last layer.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

impl MlpParams {
    /// Scaled-uniform fan-in initialization: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpParams {
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    rng.random_range(-bound..bound)
                });
                LayerParams { w, b: Array2::zeros((1, fan_out)) }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.w.ncols()));
        d
    }

    /// Plain single-sample forward pass (pre-squash output).
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimMismatch { got: input.len(), want: self.input_dim() });
        }
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.w.ncols()];
            for (j, yj) in y.iter_mut().enumerate() {
                let mut acc = layer.b[[0, j]];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * layer.w[[i, j]];
                }
                *yj = acc;
            }
            if li != last {
                for v in &mut y {
                    *v = elu(*v);
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Register all parameters as tape leaves, in the canonical
    /// [w0, b0, w1, b1, ...] order used by gradients and Adam.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Tid> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(tape.leaf(l.w.clone()));
            out.push(tape.leaf(l.b.clone()));
        }
        out
    }

    /// Batched forward pass on the tape from pre-registered leaves.
    pub fn forward_tape(&self, tape: &mut Tape, leaves: &[Tid], input: Tid) -> Tid {
        let last = self.layers.len() - 1;
        let mut x = input;
        for li in 0..self.layers.len() {
            let z = tape.matmul(x, leaves[2 * li]);
            let z = tape.add_row(z, leaves[2 * li + 1]);
            x = if li != last { tape.elu(z) } else { z };
        }
        x
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flatten all parameters (canonical order) into one vector.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
        }
        v
    }

    /// Overwrite all parameters from a flat vector.
    pub fn set_from_vector(&mut self, v: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for x in l.w.iter_mut() {
                *x = v[k];
                k += 1;
            }
            for x in l.b.iter_mut() {
                *x = v[k];
                k += 1;
            }
        }
        assert_eq!(k, v.len());
    }
}

/// Bounded policy head: tanh squashing into the action box.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub mlp: MlpParams,
    pub bounds: ActionBounds,
}

impl ActorNet {
    pub fn init(rng: &mut ChaCha8Rng, bounds: ActionBounds) -> ActorNet {
        ActorNet { mlp: MlpParams::init(&[STATE_DIM, HIDDEN, HIDDEN, 2], rng), bounds }
    }

    fn a_mid(&self) -> f64 {
        0.5 * (self.bounds.a_min + self.bounds.a_max)
    }

    fn a_half(&self) -> f64 {
        0.5 * (self.bounds.a_max - self.bounds.a_min)
    }

    /// Squash a raw head output into the action box.
    pub fn squash(&self, raw: [f64; 2]) -> Action {
        Action {
            delta: self.bounds.delta_max * raw[0].tanh(),
            a: self.a_mid() + self.a_half() * raw[1].tanh(),
        }
    }

    /// Pre-squash head output for an observation.
    pub fn forward_raw(&self, state: &RLState) -> [f64; 2] {
        let scale = state_scale();
        let mut scaled = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            scaled[i] = state.0[i] * scale[i];
        }
        let y = self.mlp.forward(&scaled).expect("actor input is STATE_DIM");
        [y[0], y[1]]
    }

    /// Bounded action for an observation.
    pub fn act(&self, state: &RLState) -> Action {
        self.squash(self.forward_raw(state))
    }

    /// Tape version of the scaled forward + squash. Returns the two action
    /// columns (delta, a), each (B x 1).
    pub fn act_tape(&self, tape: &mut Tape, leaves: &[Tid], state_cols: Tid) -> (Tid, Tid) {
        let scale_row = {
            let s = state_scale();
            let arr = Array2::from_shape_vec((1, STATE_DIM), s.to_vec()).unwrap();
            tape.constant(arr)
        };
        let scaled = tape.mul_row(state_cols, scale_row);
        let raw = self.mlp.forward_tape(tape, leaves, scaled);
        let d_raw = tape.col(raw, 0);
        let a_raw = tape.col(raw, 1);
        let d_t = tape.tanh(d_raw);
        let delta = tape.scale(d_t, self.bounds.delta_max);
        let a_t = tape.tanh(a_raw);
        let a_s = tape.scale(a_t, self.a_half());
        let a = tape.offset(a_s, self.a_mid());
        (delta, a)
    }
}

/// Value head.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub mlp: MlpParams,
}

impl CriticNet {
    pub fn init(rng: &mut ChaCha8Rng) -> CriticNet {
        CriticNet { mlp: MlpParams::init(&[STATE_DIM, HIDDEN, HIDDEN, 1], rng) }
    }

    pub fn value(&self, state: &RLState) -> f64 {
        let scale = state_scale();
        let mut scaled = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            scaled[i] = state.0[i] * scale[i];
        }
        self.mlp.forward(&scaled).expect("critic input is STATE_DIM")[0]
    }

    pub fn value_tape(&self, tape: &mut Tape, leaves: &[Tid], state_rows: Tid) -> Tid {
        let scale_row = {
            let s = state_scale();
            let arr = Array2::from_shape_vec((1, STATE_DIM), s.to_vec()).unwrap();
            tape.constant(arr)
        };
        let scaled = tape.mul_row(state_rows, scale_row);
        self.mlp.forward_tape(tape, leaves, scaled)
    }
}

/// Adam accumulator state, one moment pair per parameter tensor in the
/// canonical [w0, b0, w1, b1, ...] order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> AdamState {
        let mut m = Vec::new();
        for l in &params.layers {
            m.push(Array2::zeros(l.w.dim()));
            m.push(Array2::zeros(l.b.dim()));
        }
        AdamState { v: m.clone(), m, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step. `grads` follows the canonical tensor
/// order of [`MlpParams::leaves`].
pub fn adam_update(params: &mut MlpParams, grads: &[Array2<f64>], st: &mut AdamState, lr: f64) {
    assert_eq!(grads.len(), params.layers.len() * 2);
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - st.beta1.powi(t);
    let bc2 = 1.0 - st.beta2.powi(t);
    for (k, g) in grads.iter().enumerate() {
        let m = &mut st.m[k];
        let v = &mut st.v[k];
        ndarray::Zip::from(&mut *m).and(g).for_each(|m_, g_| {
            *m_ = st.beta1 * *m_ + (1.0 - st.beta1) * g_;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v_, g_| {
            *v_ = st.beta2 * *v_ + (1.0 - st.beta2) * g_ * g_;
        });
        let target = if k % 2 == 0 {
            &mut params.layers[k / 2].w
        } else {
            &mut params.layers[k / 2].b
        };
        ndarray::Zip::from(target).and(&*m).and(&*v).for_each(|p, m_, v_| {
            let m_hat = m_ / bc1;
            let v_hat = v_ / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + st.eps);
        });
    }
}

/// Linear decay from `lr_start` at iteration 0 to `lr_end` at `total`,
/// clamped beyond.
pub fn lr_schedule(iteration: usize, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if iteration >= total {
        return lr_end;
    }
    let f = iteration as f64 / total as f64;
    lr_start + (lr_end - lr_start) * f
}

// --- checkpoint container -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct LayerData {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamData {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchMeta {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub actor_out: usize,
    pub critic_out: usize,
}

impl ArchMeta {
    pub fn standard() -> ArchMeta {
        ArchMeta {
            input: STATE_DIM,
            hidden: vec![HIDDEN, HIDDEN],
            activation: "elu".to_string(),
            actor_out: 2,
            critic_out: 1,
        }
    }
}

/// Versioned checkpoint with the full training state: both networks, both
/// optimizers, the penalty factor and the iteration counter.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchMeta,
    pub bounds: ActionBounds,
    actor: Vec<LayerData>,
    critic: Vec<LayerData>,
    adam_actor: AdamData,
    adam_critic: AdamData,
    pub rho: f64,
    pub iteration: u64,
}

fn layers_to_data(p: &MlpParams) -> Vec<LayerData> {
    p.layers
        .iter()
        .map(|l| LayerData {
            rows: l.w.nrows(),
            cols: l.w.ncols(),
            w: l.w.iter().cloned().collect(),
            b: l.b.iter().cloned().collect(),
        })
        .collect()
}

fn layers_from_data(data: &[LayerData]) -> Result<MlpParams, NnError> {
    let layers = data
        .iter()
        .map(|d| {
            if d.w.len() != d.rows * d.cols || d.b.len() != d.cols {
                return Err(NnError::ArchMismatch(format!(
                    "layer data {}x{} does not match payload lengths {}/{}",
                    d.rows,
                    d.cols,
                    d.w.len(),
                    d.b.len()
                )));
            }
            Ok(LayerParams {
                w: Array2::from_shape_vec((d.rows, d.cols), d.w.clone()).unwrap(),
                b: Array2::from_shape_vec((1, d.cols), d.b.clone()).unwrap(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MlpParams { layers })
}

fn adam_to_data(a: &AdamState) -> AdamData {
    AdamData {
        step: a.step,
        m: a.m.iter().map(|x| x.iter().cloned().collect()).collect(),
        v: a.v.iter().map(|x| x.iter().cloned().collect()).collect(),
    }
}

fn adam_from_data(d: &AdamData, params: &MlpParams) -> Result<AdamState, NnError> {
    let mut st = AdamState::new(params);
    st.step = d.step;
    if d.m.len() != st.m.len() || d.v.len() != st.v.len() {
        return Err(NnError::ArchMismatch("optimizer tensor count mismatch".into()));
    }
    for (dst, src) in st.m.iter_mut().chain(st.v.iter_mut()).zip(d.m.iter().chain(d.v.iter())) {
        if dst.len() != src.len() {
            return Err(NnError::ArchMismatch("optimizer tensor shape mismatch".into()));
        }
        for (x, y) in dst.iter_mut().zip(src.iter()) {
            *x = *y;
        }
    }
    Ok(st)
}

impl Checkpoint {
    pub fn new(
        actor: &ActorNet,
        critic: &CriticNet,
        adam_actor: &AdamState,
        adam_critic: &AdamState,
        rho: f64,
        iteration: u64,
    ) -> Checkpoint {
        Checkpoint {
            version: 1,
            arch: ArchMeta::standard(),
            bounds: actor.bounds,
            actor: layers_to_data(&actor.mlp),
            critic: layers_to_data(&critic.mlp),
            adam_actor: adam_to_data(adam_actor),
            adam_critic: adam_to_data(adam_critic),
            rho,
            iteration,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != 1 {
            return Err(NnError::ArchMismatch(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.arch != ArchMeta::standard() {
            return Err(NnError::ArchMismatch(format!(
                "checkpoint architecture {:?} differs from expected {:?}",
                ckpt.arch,
                ArchMeta::standard()
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the networks and optimizer states.
    pub fn restore(&self) -> Result<(ActorNet, CriticNet, AdamState, AdamState), NnError> {
        let actor_mlp = layers_from_data(&self.actor)?;
        let critic_mlp = layers_from_data(&self.critic)?;
        let expect_actor = vec![STATE_DIM, HIDDEN, HIDDEN, 2];
        let expect_critic = vec![STATE_DIM, HIDDEN, HIDDEN, 1];
        if actor_mlp.dims() != expect_actor || critic_mlp.dims() != expect_critic {
            return Err(NnError::ArchMismatch(format!(
                "layer shapes {:?}/{:?} differ from {:?}/{:?}",
                actor_mlp.dims(),
                critic_mlp.dims(),
                expect_actor,
                expect_critic
            )));
        }
        let aa = adam_from_data(&self.adam_actor, &actor_mlp)?;
        let ac = adam_from_data(&self.adam_critic, &critic_mlp)?;
        Ok((
            ActorNet { mlp: actor_mlp, bounds: self.bounds },
            CriticNet { mlp: critic_mlp },
            aa,
            ac,
        ))
    }
}

#[cfg(test)]
mod tests;
