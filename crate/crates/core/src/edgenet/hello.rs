//! Fixed 12-byte hello frame.
//!
//! Layout, big-endian:
//!
//! | bits   | field                         |
//! |--------|-------------------------------|
//! | 0..32  | sender id (u32)               |
//! | 32..64 | sequence number (u32)         |
//! | 64..72 | message type (0x01 = hello)   |
//! | 72..80 | available compute, percent    |
//! | 80..88 | available GPU memory, percent |
//! | 88..96 | XOR of the preceding 11 bytes |
//!
//! Bytes 9 and 10 are the 16-bit reserved region carrying the resource
//! status.

use serde::{Deserialize, Serialize};

use super::topology::ServerId;
use crate::error::{Error, Result};

pub const HELLO_LEN: usize = 12;
pub const HELLO_TYPE: u8 = 0x01;
/// Size charged for the once-per-epoch model-requirement advertisement.
pub const MODEL_ADVERT_BYTES: u64 = 64;

/// Resources still available to the deployment on one server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceStatus {
    pub avail_compute_pct: u8,
    pub avail_gpu_mem_pct: u8,
    pub timestamp: f64,
}

impl ResourceStatus {
    pub fn new(avail_compute_pct: u8, avail_gpu_mem_pct: u8, timestamp: f64) -> Self {
        ResourceStatus {
            avail_compute_pct,
            avail_gpu_mem_pct,
            timestamp,
        }
    }

    pub fn idle(timestamp: f64) -> Self {
        Self::new(100, 100, timestamp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.avail_compute_pct > 100 || self.avail_gpu_mem_pct > 100 {
            return Err(Error::Encoding(format!(
                "percentages must be <= 100, got ({}, {})",
                self.avail_compute_pct, self.avail_gpu_mem_pct
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloMessage {
    pub sender: ServerId,
    pub seq: u32,
    pub avail_compute_pct: u8,
    pub avail_gpu_mem_pct: u8,
}

impl HelloMessage {
    pub fn status_at(&self, timestamp: f64) -> ResourceStatus {
        ResourceStatus::new(self.avail_compute_pct, self.avail_gpu_mem_pct, timestamp)
    }
}

fn xor(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

pub fn encode_hello(status: &ResourceStatus, sender: ServerId, seq: u32) -> Result<[u8; HELLO_LEN]> {
    status.validate()?;
    let mut out = [0u8; HELLO_LEN];
    out[0..4].copy_from_slice(&sender.to_be_bytes());
    out[4..8].copy_from_slice(&seq.to_be_bytes());
    out[8] = HELLO_TYPE;
    out[9] = status.avail_compute_pct;
    out[10] = status.avail_gpu_mem_pct;
    out[11] = xor(&out[..11]);
    Ok(out)
}

pub fn decode_hello(bytes: &[u8]) -> Result<HelloMessage> {
    if bytes.len() != HELLO_LEN {
        return Err(Error::Frame {
            expected: HELLO_LEN,
            actual: bytes.len(),
        });
    }
    let computed = xor(&bytes[..11]);
    if computed != bytes[11] {
        return Err(Error::Checksum {
            computed,
            carried: bytes[11],
        });
    }
    if bytes[8] != HELLO_TYPE {
        return Err(Error::Value(format!("unknown message type {:#04x}", bytes[8])));
    }
    for &pct in &bytes[9..11] {
        if pct > 100 {
            return Err(Error::Value(format!("reserved percentage byte {pct} > 100")));
        }
    }
    Ok(HelloMessage {
        sender: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
        seq: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
        avail_compute_pct: bytes[9],
        avail_gpu_mem_pct: bytes[10],
    })
}
