// SPDX-License-Identifier: Apache-2.0

//! User-side verification: scan, challenge, check the response, decide.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::crypto::{CryptoError, Entropy, Nonce, Uuid};
use crate::device::{ResponseMessage, StateDigest};
use crate::store::{DeviceView, StoreError, StoreQuery};
use crate::transport::{self, DataFrame, MsgType, TransportError};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("no outstanding challenge for device {0}")]
    NoSuchSession(Uuid),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("store query failed: {0}")]
    Store(StoreError),
    #[error("malformed verdict line: {0}")]
    BadVerdict(String),
}

impl VerifierError {
    pub fn code(&self) -> &'static str {
        match self {
            VerifierError::NoSuchSession(_) => "NoSuchSession",
            VerifierError::Crypto(e) => e.code(),
            VerifierError::Transport(e) => e.code(),
            VerifierError::Store(e) => e.code(),
            VerifierError::BadVerdict(_) => "BadVerdict",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateCheck {
    VerifiedCurrent,
    VerifiedStale,
    UnknownState,
    BadSignature,
    ReplayDetected,
    UnknownDevice,
}

impl StateCheck {
    pub const ALL: [StateCheck; 6] = [
        StateCheck::VerifiedCurrent,
        StateCheck::VerifiedStale,
        StateCheck::UnknownState,
        StateCheck::BadSignature,
        StateCheck::ReplayDetected,
        StateCheck::UnknownDevice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StateCheck::VerifiedCurrent => "verified_current",
            StateCheck::VerifiedStale => "verified_stale",
            StateCheck::UnknownState => "unknown_state",
            StateCheck::BadSignature => "bad_signature",
            StateCheck::ReplayDetected => "replay_detected",
            StateCheck::UnknownDevice => "unknown_device",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        StateCheck::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for StateCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustVerdict {
    pub uuid: Uuid,
    pub identity: Option<DeviceView>,
    pub state_check: StateCheck,
    /// Interaction permitted. Only ever true for `verified_current`.
    pub gate: bool,
    pub reason: String,
}

impl TrustVerdict {
    fn new(uuid: Uuid, identity: Option<DeviceView>, state_check: StateCheck, reason: impl Into<String>) -> Self {
        TrustVerdict {
            uuid,
            identity,
            gate: state_check == StateCheck::VerifiedCurrent,
            state_check,
            reason: reason.into(),
        }
    }

    /// `VERDICT uuid=<hex> state=<enum> gate=<0|1> reason=<text>`
    pub fn to_line(&self) -> String {
        format!(
            "VERDICT uuid={} state={} gate={} reason={}",
            self.uuid,
            self.state_check,
            u8::from(self.gate),
            self.reason.replace('\n', " ")
        )
    }

    /// Parses a verdict line. Identity is not carried on the line.
    pub fn parse_line(line: &str) -> Result<Self, VerifierError> {
        let bad = |m: &str| VerifierError::BadVerdict(m.to_string());
        let rest = line.trim_end().strip_prefix("VERDICT ").ok_or_else(|| bad("missing VERDICT prefix"))?;
        let (head, reason) = rest.split_once(" reason=").ok_or_else(|| bad("missing reason"))?;
        let mut it = head.split(' ');
        let uuid = it
            .next()
            .and_then(|s| s.strip_prefix("uuid="))
            .and_then(Uuid::from_hex)
            .ok_or_else(|| bad("bad uuid"))?;
        let state_check = it
            .next()
            .and_then(|s| s.strip_prefix("state="))
            .and_then(StateCheck::parse)
            .ok_or_else(|| bad("bad state"))?;
        let gate = match it.next() {
            Some("gate=1") => true,
            Some("gate=0") => false,
            _ => return Err(bad("bad gate")),
        };
        if it.next().is_some() || gate != (state_check == StateCheck::VerifiedCurrent) {
            return Err(bad("inconsistent verdict"));
        }
        Ok(TrustVerdict { uuid, identity: None, state_check, gate, reason: reason.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChallengeSession {
    pub uuid: Uuid,
    pub challenge: Nonce,
    pub issued_at: u64,
}

pub fn scan(frame: &[u8]) -> Result<Uuid, TransportError> {
    transport::parse_advertisement(frame)
}

/// Holds outstanding challenges, at most one per device. A challenge is
/// consumed by the first response checked against it.
#[derive(Debug)]
pub struct Verifier {
    entropy: Entropy,
    sessions: HashMap<Uuid, ChallengeSession>,
    clock: u64,
}

impl Verifier {
    pub fn new(entropy: Entropy) -> Self {
        Verifier { entropy, sessions: HashMap::new(), clock: 0 }
    }

    pub fn outstanding(&self, uuid: &Uuid) -> Option<&ChallengeSession> {
        self.sessions.get(uuid)
    }

    /// Issues a fresh challenge to `uuid`, replacing any outstanding one.
    pub fn issue_challenge(&mut self, uuid: Uuid) -> Result<(ChallengeSession, Vec<DataFrame>), VerifierError> {
        let challenge = Nonce::generate(&self.entropy)?;
        self.clock += 1;
        let session = ChallengeSession { uuid, challenge, issued_at: self.clock };
        self.sessions.insert(uuid, session);
        let frames = transport::fragment(MsgType::Challenge, challenge.as_bytes(), false)?;
        Ok((session, frames))
    }

    /// Checks a reassembled response payload. Order: device known, signature
    /// under the registered device key, challenge echo, state known, state
    /// current.
    pub fn verify_response(
        &mut self,
        uuid: Uuid,
        payload: &[u8],
        store: &dyn StoreQuery,
    ) -> Result<TrustVerdict, VerifierError> {
        let session = self.sessions.remove(&uuid).ok_or(VerifierError::NoSuchSession(uuid))?;

        let identity = match store.lookup_device(&uuid) {
            Ok(v) => v,
            Err(StoreError::NotFound) => {
                return Ok(TrustVerdict::new(uuid, None, StateCheck::UnknownDevice, "device not registered in trust store"));
            }
            Err(e) => return Err(VerifierError::Store(e)),
        };

        let Some(resp) = ResponseMessage::from_bytes(payload) else {
            let reason = format!("response is {} bytes, expected {}", payload.len(), crate::device::RESPONSE_LEN);
            return Ok(TrustVerdict::new(uuid, Some(identity), StateCheck::BadSignature, reason));
        };
        if !resp.verifies_under(identity.certificate.device_pk()) {
            return Ok(TrustVerdict::new(
                uuid,
                Some(identity),
                StateCheck::BadSignature,
                "response signature does not verify under the registered device key",
            ));
        }
        if resp.challenge != session.challenge {
            return Ok(TrustVerdict::new(
                uuid,
                Some(identity),
                StateCheck::ReplayDetected,
                "response answers a different challenge",
            ));
        }
        let state = StateDigest(resp.state_digest);
        let view = match store.lookup_state(&uuid, &state) {
            Ok(v) => v,
            Err(StoreError::NotFound) => {
                let reason = format!("state {state} has no registered installation/configuration record");
                return Ok(TrustVerdict::new(uuid, Some(identity), StateCheck::UnknownState, reason));
            }
            Err(e) => return Err(VerifierError::Store(e)),
        };
        if !view.expected_current {
            let reason = format!("state {state} ({}) has been superseded", view.firmware_meta());
            return Ok(TrustVerdict::new(uuid, Some(identity), StateCheck::VerifiedStale, reason));
        }
        let reason = match view.configuration_seq {
            Some(seq) => format!("firmware '{}' configuration seq {seq}", view.firmware_meta()),
            None => format!("firmware '{}' unconfigured", view.firmware_meta()),
        };
        Ok(TrustVerdict::new(uuid, Some(identity), StateCheck::VerifiedCurrent, reason))
    }

    /// Closes a session that never received a usable response.
    pub fn abandon(&mut self, uuid: Uuid, store: &dyn StoreQuery, reason: &str) -> Result<TrustVerdict, VerifierError> {
        self.sessions.remove(&uuid).ok_or(VerifierError::NoSuchSession(uuid))?;
        Ok(match store.lookup_device(&uuid) {
            Ok(v) => TrustVerdict::new(uuid, Some(v), StateCheck::UnknownState, reason),
            Err(StoreError::NotFound) => TrustVerdict::new(uuid, None, StateCheck::UnknownDevice, reason),
            Err(e) => return Err(VerifierError::Store(e)),
        })
    }
}

/// Final accept/reject. The operator is only consulted when auto-accept is
/// off, and can never accept past a closed gate.
pub fn trust_decision(verdict: &TrustVerdict, auto_accept: bool, prompt: impl FnOnce(&TrustVerdict) -> bool) -> bool {
    if auto_accept {
        verdict.gate
    } else {
        prompt(verdict) && verdict.gate
    }
}
