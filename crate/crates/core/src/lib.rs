//! Distributed optimal control of residential battery fleets.
//!
//! A central entity (CE) coordinates `I` households, each owning a small
//! battery, so that the aggregate demand tracks its own moving average
//! (peak shaving). The library provides:
//!
//! * [`model`]: household battery dynamics condensed over a prediction
//!   horizon into per-agent QP data.
//! * [`qp`]: dense active-set QP kernel, equality-KKT solves, and a
//!   structure-exploiting centralized solver used as reference oracle.
//! * [`aladin`]: the distributed augmented-Lagrangian method with
//!   curvature correction and an l1 merit globalization.
//! * [`admm`]: a consensus ADMM baseline in sharing form.
//! * [`mpc`]: receding-horizon closed loop with warm starting.
//! * [`simnet`]: simulated CE/agent message transport with exact
//!   per-float communication accounting.
//! * [`data`]: scenario configs, synthetic load generation, and run
//!   artifact persistence.

pub mod aladin;
pub mod admm;
pub mod data;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod simnet;
