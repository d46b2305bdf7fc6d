//! Coordination messages, their binary wire format, and an in-process
//! transport that carries encoded bytes.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GT" | version u8 | tag u8 | ds_id u32 | sample_index u64 | n_b u32 | f64 payload
//! ```
//!
//! The surrogate payload is the lower triangle of `J2` row by row, then `J1`,
//! then `J0`. The increment payload is the boundary increment.

use std::collections::VecDeque;

use crate::coordination::condense::QuadraticSurrogate;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 2] = *b"GT";
pub const VERSION: u8 = 1;
pub const TAG_SURROGATE: u8 = 1;
pub const TAG_INCREMENT: u8 = 2;
/// Bytes before the payload.
pub const HEADER_LEN: usize = 2 + 1 + 1 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub enum CoordMessage {
    SurrogateUp {
        sample_index: u64,
        surrogate: QuadraticSurrogate,
    },
    IncrementDown {
        ds_id: u32,
        sample_index: u64,
        boundary_increment: Vec<f64>,
    },
}

impl CoordMessage {
    pub fn ds_id(&self) -> u32 {
        match self {
            CoordMessage::SurrogateUp { surrogate, .. } => surrogate.ds_id,
            CoordMessage::IncrementDown { ds_id, .. } => *ds_id,
        }
    }

    pub fn sample_index(&self) -> u64 {
        match self {
            CoordMessage::SurrogateUp { sample_index, .. }
            | CoordMessage::IncrementDown { sample_index, .. } => *sample_index,
        }
    }
}

/// Number of payload floats for a message with `n_b` boundary variables.
pub fn payload_len(tag: u8, n_b: usize) -> Option<usize> {
    match tag {
        TAG_SURROGATE => Some(n_b * (n_b + 1) / 2 + n_b + 1),
        TAG_INCREMENT => Some(n_b),
        _ => None,
    }
}

pub fn encode(msg: &CoordMessage) -> Vec<u8> {
    let (tag, ds_id, sample, n_b, payload) = match msg {
        CoordMessage::SurrogateUp {
            sample_index,
            surrogate,
        } => {
            let n = surrogate.dim();
            let mut vals = Vec::with_capacity(payload_len(TAG_SURROGATE, n).unwrap_or(0));
            for i in 0..n {
                for j in 0..=i {
                    vals.push(surrogate.j2_at(i, j));
                }
            }
            vals.extend_from_slice(&surrogate.j1);
            vals.push(surrogate.j0);
            (TAG_SURROGATE, surrogate.ds_id, *sample_index, n, vals)
        }
        CoordMessage::IncrementDown {
            ds_id,
            sample_index,
            boundary_increment,
        } => (
            TAG_INCREMENT,
            *ds_id,
            *sample_index,
            boundary_increment.len(),
            boundary_increment.clone(),
        ),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(tag);
    out.extend_from_slice(&ds_id.to_le_bytes());
    out.extend_from_slice(&sample.to_le_bytes());
    out.extend_from_slice(&(n_b as u32).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<CoordMessage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Codec(format!(
            "message of {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[..2] != MAGIC {
        return Err(Error::Codec("bad magic".into()));
    }
    if bytes[2] != VERSION {
        return Err(Error::Codec(format!("unsupported version {}", bytes[2])));
    }
    let tag = bytes[3];
    let ds_id = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let sample_index = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let n_b = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let count = payload_len(tag, n_b).ok_or_else(|| Error::Codec(format!("unknown tag {tag}")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(Error::Codec(format!(
            "payload of {} bytes, expected {} for n_b = {n_b}",
            body.len(),
            8 * count
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(match tag {
        TAG_SURROGATE => {
            let mut j2 = vec![0.0; n_b * n_b];
            let mut k = 0;
            for i in 0..n_b {
                for j in 0..=i {
                    j2[i * n_b + j] = vals[k];
                    j2[j * n_b + i] = vals[k];
                    k += 1;
                }
            }
            let j1 = vals[k..k + n_b].to_vec();
            CoordMessage::SurrogateUp {
                sample_index,
                surrogate: QuadraticSurrogate {
                    ds_id,
                    j2,
                    j1,
                    j0: vals[k + n_b],
                },
            }
        }
        _ => CoordMessage::IncrementDown {
            ds_id,
            sample_index,
            boundary_increment: vals,
        },
    })
}

/// Direction of travel on the radial graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// In-process queues of encoded messages. Keeps a copy of everything sent
/// upwards so the transmission-visible traffic can be inspected.
#[derive(Debug, Default)]
pub struct Transport {
    up: VecDeque<Vec<u8>>,
    down: VecDeque<Vec<u8>>,
    pub sent_up: u64,
    pub sent_down: u64,
    pub up_log: Option<Vec<Vec<u8>>>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Transport that records every upward message.
    pub fn recording() -> Self {
        Self {
            up_log: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn send(&mut self, dir: Direction, msg: &CoordMessage) {
        let bytes = encode(msg);
        match dir {
            Direction::Up => {
                if let Some(log) = &mut self.up_log {
                    log.push(bytes.clone());
                }
                self.sent_up += 1;
                self.up.push_back(bytes);
            }
            Direction::Down => {
                self.sent_down += 1;
                self.down.push_back(bytes);
            }
        }
    }

    /// Drains and decodes every queued message in one direction.
    pub fn drain(&mut self, dir: Direction) -> Result<Vec<CoordMessage>> {
        let q = match dir {
            Direction::Up => &mut self.up,
            Direction::Down => &mut self.down,
        };
        q.drain(..).map(|b| decode(&b)).collect()
    }

    pub fn messages(&self) -> u64 {
        self.sent_up + self.sent_down
    }
}
