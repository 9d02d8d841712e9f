// SPDX-License-Identifier: Apache-2.0

//! Constrained-radio framing.
//!
//! Advertising frame (19 bytes, limit 31):
//!
//! ```text
//! magic 0x54 | version 0x01 | flags | uuid (16)
//! ```
//!
//! Data frame (limit 255, or 1,650 when extended):
//!
//! ```text
//! msg_type | frag_index | frag_total | payload_len (2, BE) | payload
//! ```
//!
//! The transport does not authenticate anything. Corrupted payloads are
//! caught by signature checks above it.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::crypto::{Uuid, UUID_LEN};

pub const ADV_MAGIC: u8 = 0x54;
pub const ADV_VERSION: u8 = 0x01;
pub const ADV_FRAME_LEN: usize = 3 + UUID_LEN;
pub const MAX_ADV_FRAME: usize = 31;

pub const DATA_HEADER_LEN: usize = 5;
pub const MAX_DATA_FRAME: usize = 255;
pub const MAX_EXTENDED_FRAME: usize = 1650;
pub const FRAGMENT_PAYLOAD: usize = 250;
pub const EXTENDED_FRAGMENT_PAYLOAD: usize = MAX_EXTENDED_FRAME - DATA_HEADER_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("payload of {0} bytes exceeds fragmentation capacity")]
    PayloadTooLarge(usize),
    #[error("fragment {0} missing")]
    MissingFragment(u8),
    #[error("inconsistent fragment set: {0}")]
    InconsistentSet(String),
}

impl TransportError {
    pub fn code(&self) -> &'static str {
        match self {
            TransportError::ParseError(_) => "ParseError",
            TransportError::PayloadTooLarge(_) => "PayloadTooLarge",
            TransportError::MissingFragment(_) => "MissingFragment",
            TransportError::InconsistentSet(_) => "InconsistentSet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Challenge = 0x01,
    Response = 0x02,
    Fragment = 0x03,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(MsgType::Challenge),
            0x02 => Some(MsgType::Response),
            0x03 => Some(MsgType::Fragment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdvertisingFrame {
    pub flags: u8,
    pub uuid: Uuid,
}

impl AdvertisingFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ADV_FRAME_LEN);
        out.extend_from_slice(&[ADV_MAGIC, ADV_VERSION, self.flags]);
        out.extend_from_slice(self.uuid.as_bytes());
        debug_assert!(out.len() <= MAX_ADV_FRAME);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() != ADV_FRAME_LEN {
            return Err(TransportError::ParseError(format!(
                "advertisement must be {ADV_FRAME_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        if bytes[0] != ADV_MAGIC {
            return Err(TransportError::ParseError(format!("bad magic 0x{:02x}", bytes[0])));
        }
        if bytes[1] != ADV_VERSION {
            return Err(TransportError::ParseError(format!("unsupported version 0x{:02x}", bytes[1])));
        }
        let uuid = Uuid::from_bytes(&bytes[3..])
            .ok_or_else(|| TransportError::ParseError("advertised identifier is not a v4 UUID".into()))?;
        Ok(AdvertisingFrame { flags: bytes[2], uuid })
    }
}

pub fn encode_advertisement(uuid: Uuid) -> Vec<u8> {
    AdvertisingFrame { flags: 0, uuid }.encode()
}

pub fn parse_advertisement(bytes: &[u8]) -> Result<Uuid, TransportError> {
    AdvertisingFrame::decode(bytes).map(|f| f.uuid)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub msg_type: MsgType,
    pub frag_index: u8,
    pub frag_total: u8,
    pub payload: Vec<u8>,
}

impl DataFrame {
    pub fn encoded_len(&self) -> usize {
        DATA_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&[self.msg_type as u8, self.frag_index, self.frag_total]);
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        debug_assert!(out.len() <= MAX_EXTENDED_FRAME);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < DATA_HEADER_LEN {
            return Err(TransportError::ParseError("data frame shorter than header".into()));
        }
        if bytes.len() > MAX_EXTENDED_FRAME {
            return Err(TransportError::ParseError(format!("data frame of {} bytes exceeds limit", bytes.len())));
        }
        let msg_type = MsgType::from_byte(bytes[0])
            .ok_or_else(|| TransportError::ParseError(format!("unknown msg_type 0x{:02x}", bytes[0])))?;
        let (frag_index, frag_total) = (bytes[1], bytes[2]);
        if frag_total == 0 || frag_index >= frag_total {
            return Err(TransportError::ParseError(format!("bad fragment position {frag_index}/{frag_total}")));
        }
        let len = u16::from_be_bytes([bytes[3], bytes[4]]) as usize;
        if bytes.len() != DATA_HEADER_LEN + len {
            return Err(TransportError::ParseError(format!(
                "payload_len {len} disagrees with frame length {}",
                bytes.len()
            )));
        }
        Ok(DataFrame { msg_type, frag_index, frag_total, payload: bytes[DATA_HEADER_LEN..].to_vec() })
    }
}

/// Splits `payload` into the minimal number of frames. With `extended`,
/// frames may be up to 1,650 bytes; otherwise 255.
pub fn fragment(msg_type: MsgType, payload: &[u8], extended: bool) -> Result<Vec<DataFrame>, TransportError> {
    let chunk = if extended { EXTENDED_FRAGMENT_PAYLOAD } else { FRAGMENT_PAYLOAD };
    if payload.len() > chunk * u8::MAX as usize {
        return Err(TransportError::PayloadTooLarge(payload.len()));
    }
    if payload.is_empty() {
        return Ok(vec![DataFrame { msg_type, frag_index: 0, frag_total: 1, payload: Vec::new() }]);
    }
    let total = payload.len().div_ceil(chunk) as u8;
    Ok(payload
        .chunks(chunk)
        .enumerate()
        .map(|(i, part)| DataFrame { msg_type, frag_index: i as u8, frag_total: total, payload: part.to_vec() })
        .collect())
}

/// Inverse of [`fragment`]. Frames may arrive in any order.
pub fn reassemble(frames: &[DataFrame]) -> Result<(MsgType, Vec<u8>), TransportError> {
    let first = frames.first().ok_or(TransportError::MissingFragment(0))?;
    let (msg_type, total) = (first.msg_type, first.frag_total);
    let mut slots: Vec<Option<&DataFrame>> = vec![None; total as usize];
    for f in frames {
        if f.msg_type != msg_type {
            return Err(TransportError::InconsistentSet("mixed msg_type".into()));
        }
        if f.frag_total != total {
            return Err(TransportError::InconsistentSet("mixed frag_total".into()));
        }
        let slot = slots
            .get_mut(f.frag_index as usize)
            .ok_or_else(|| TransportError::InconsistentSet(format!("frag_index {} out of range", f.frag_index)))?;
        if slot.replace(f).is_some() {
            return Err(TransportError::InconsistentSet(format!("duplicate fragment {}", f.frag_index)));
        }
    }
    let mut payload = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        payload.extend_from_slice(&slot.ok_or(TransportError::MissingFragment(i as u8))?.payload);
    }
    Ok((msg_type, payload))
}

/// Fault applied by a [`ChannelEnd`] to the frames it sends, by frame ordinal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    Drop { frame: usize },
    Corrupt { frame: usize, offset: usize, mask: u8 },
}

type Queue = Arc<Mutex<VecDeque<Vec<u8>>>>;

/// One side of an in-memory bidirectional radio link.
pub struct ChannelEnd {
    label: &'static str,
    tx: Queue,
    rx: Queue,
    faults: Vec<Fault>,
    sent: usize,
    trace: bool,
    log: Vec<String>,
}

/// Creates a connected pair of channel ends.
pub fn channel(a: &'static str, b: &'static str) -> (ChannelEnd, ChannelEnd) {
    let ab: Queue = Arc::default();
    let ba: Queue = Arc::default();
    let end = |label, tx: &Queue, rx: &Queue| ChannelEnd {
        label,
        tx: tx.clone(),
        rx: rx.clone(),
        faults: Vec::new(),
        sent: 0,
        trace: false,
        log: Vec::new(),
    };
    (end(a, &ab, &ba), end(b, &ba, &ab))
}

impl ChannelEnd {
    pub fn inject(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    /// Records a hex dump of each frame sent or received.
    pub fn set_trace(&mut self, on: bool) {
        self.trace = on;
    }

    pub fn trace_log(&self) -> &[String] {
        &self.log
    }

    pub fn send(&mut self, frame: Vec<u8>) {
        let ordinal = self.sent;
        self.sent += 1;
        if self.trace {
            self.log.push(format!("{} tx {}", self.label, hex::encode(&frame)));
        }
        let mut frame = frame;
        for fault in &self.faults {
            match *fault {
                Fault::Drop { frame: n } if n == ordinal => return,
                Fault::Corrupt { frame: n, offset, mask } if n == ordinal => {
                    if let Some(b) = frame.get_mut(offset) {
                        *b ^= mask;
                    }
                }
                _ => {}
            }
        }
        self.tx.lock().expect("channel queue").push_back(frame);
    }

    pub fn recv(&mut self) -> Option<Vec<u8>> {
        let frame = self.rx.lock().expect("channel queue").pop_front()?;
        if self.trace {
            self.log.push(format!("{} rx {}", self.label, hex::encode(&frame)));
        }
        Some(frame)
    }

    pub fn send_frames(&mut self, frames: &[DataFrame]) {
        for f in frames {
            self.send(f.encode());
        }
    }

    /// Drains every queued frame and reassembles them as one message.
    pub fn recv_message(&mut self) -> Result<(MsgType, Vec<u8>), TransportError> {
        let mut frames = Vec::new();
        while let Some(raw) = self.recv() {
            frames.push(DataFrame::decode(&raw)?);
        }
        reassemble(&frames)
    }
}
