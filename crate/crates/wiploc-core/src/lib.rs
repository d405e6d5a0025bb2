//! Simulation library for a wirelessly powered indoor localization system.
//!
//! Battery-free anchor nodes harvest energy from RF chargers, wake on a
//! power pulse, and answer ranging requests from mobile devices. Because
//! several anchors answer at once, replies are spread with per-anchor
//! orthogonal codes so a single collided reception can still be separated
//! into individual identifiers.
//!
//! The crate is organized bottom-up:
//!
//! - [`codec`]: orthogonal spreading codes, FEC, multi-packet decoding
//! - [`geom`]: points, rooms, walls, line-of-sight tests
//! - [`phy`]: path loss, collision resolution, RF power harvesting
//! - [`energy`]: duty-cycle power accounting for tag-class receivers
//! - [`protocol`]: packet types and per-role state machines
//! - [`simcore`]: scenario description, discrete-event engine, metrics
//!
//! Entry point for whole-system runs is [`simcore::run`], driven by a
//! scenario file; see the `wiploc` binary for the command-line surface.

pub mod codec;
pub mod energy;
pub mod error;
pub mod geom;
pub mod phy;
pub mod protocol;
pub mod simcore;

pub use error::{Error, Result};
