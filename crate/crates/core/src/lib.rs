//! Cyber-physical plug-and-charge authentication and V2G energy trading.
//!
//! The crate is `no_std` (with `alloc`) and fully deterministic: every random
//! draw comes from a seeded [`crypto::SimRng`]. IO, configuration and reports
//! live in the `pnc-sim` companion crate.

#![no_std]

extern crate alloc;

pub mod actors;
pub mod adversary;
pub mod canonical;
pub mod channels;
pub mod contract;
pub mod crypto;
pub mod ledger;
pub mod pki;
pub mod sim;
