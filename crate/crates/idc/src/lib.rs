//! Integrated decision and control for a signalized intersection.
//!
//! The stack is split in two layers. The upper layer plans static candidate
//! paths from the road geometry alone (cubic Bezier lane connectors, three
//! exits per task). The lower layer tracks the best candidate under dynamic
//! traffic: a finite-horizon constrained tracking problem is solved offline
//! by an actor-critic trained with an amplifying exterior penalty
//! ([`gep`]), and applied online with critic-based path selection plus a
//! multi-step safety shield ([`runtime`]). A receding-horizon shooting
//! solver ([`mpc`]) provides the slow oracle the trained networks are
//! checked against.
//!
//! Module map:
//! - [`map`]: intersection geometry, routes, drivable-area distance
//! - [`dynamics`]: ego bicycle model and constant-turn-rate prediction
//! - [`pathgen`]: Bezier candidate paths with headings and expected speed
//! - [`scenario`]: scripted traffic, signal, state encoding, constraints
//! - [`nn`]: MLP approximators, reverse-mode tape, Adam
//! - [`rollout`]: differentiable model rollouts shared by trainer and MPC
//! - [`gep`]: offline training loop (policy evaluation / improvement with
//!   penalty amplification) and its replay buffer
//! - [`runtime`]: online path selection, actor inference, safety shield
//! - [`mpc`]: direct shooting baseline over the same model and constraints
//! - [`harness`]: episodes, metrics, noise injection, logging

extern crate blas_src;

pub mod config;
pub mod dynamics;
pub mod gep;
pub mod harness;
pub mod map;
pub mod mpc;
pub mod nn;
pub mod pathgen;
pub mod rollout;
pub mod runtime;
pub mod scenario;
pub mod svg;
