// SPDX-License-Identifier: Apache-2.0

//! Touch-less trust for IoT devices.
//!
//! A user's device checks an unfamiliar IoT device before interacting with
//! it: the IoT device advertises a UUID, the verifier looks the UUID up in a
//! trust store anchored at an authority root certificate, issues a random
//! challenge, and checks that the signed response reports a firmware and
//! configuration state the store knows to be current.
//!
//! Modules, bottom-up:
//!
//! - [`crypto`]: Ed25519/SHA-256 primitives, UUIDs, nonces, seeded entropy.
//! - [`document`]: canonical signed documents and chain verification.
//! - [`transport`]: advertising/data frame codecs and an in-memory channel.
//! - [`device`]: the simulated device.
//! - [`store`]: the append-only trust store and its line protocol.
//! - [`verifier`]: challenge sessions and trust verdicts.
//! - [`threats`]: scripted threat scenarios against the full stack.

pub mod crypto;
pub mod device;
pub mod document;
pub mod store;
pub mod threats;
pub mod transport;
pub mod verifier;
