//! Worker wire protocol.
//!
//! Each frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. Requests carry `{"id", "code", "images", "limits"}`,
//! responses `{"id", "status", "stdout", "stderr", "images"}`; images are
//! maps from name to base64-encoded PNG.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{CodeRequest, CodeResponse, ExecStatus, Limits};
use crate::imagekit::ImageBuffer;

/// Frames above this size are rejected as protocol errors.
pub const MAX_FRAME_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLimits {
    /// seconds
    pub wall_time: f64,
    /// bytes
    pub memory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub code: String,
    pub images: BTreeMap<String, String>,
    pub limits: WireLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub status: ExecStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub images: BTreeMap<String, String>,
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_FRAME_BYTES)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean EOF at a frame boundary.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame header")),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn encode_images(images: &[(String, ImageBuffer)]) -> Result<BTreeMap<String, String>, String> {
    images
        .iter()
        .map(|(name, img)| {
            let png = img.encode_png().map_err(|e| e.to_string())?;
            Ok((name.clone(), STANDARD.encode(png)))
        })
        .collect()
}

pub fn decode_images(images: &BTreeMap<String, String>) -> Result<Vec<(String, ImageBuffer)>, String> {
    images
        .iter()
        .map(|(name, b64)| {
            let png = STANDARD.decode(b64).map_err(|e| format!("image {name:?}: invalid base64: {e}"))?;
            let img = ImageBuffer::decode_png(&png).map_err(|e| format!("image {name:?}: {e}"))?;
            Ok((name.clone(), img))
        })
        .collect()
}

impl WireRequest {
    pub fn from_request(id: u64, req: &CodeRequest) -> Result<Self, String> {
        Ok(Self {
            id,
            code: req.code.clone(),
            images: encode_images(&req.input_images)?,
            limits: WireLimits {
                wall_time: req.limits.wall_time_secs,
                memory: req.limits.memory_bytes,
            },
        })
    }

    /// Images arrive keyed by name, so they come back in name order.
    pub fn to_request(&self) -> Result<CodeRequest, String> {
        Ok(CodeRequest {
            code: self.code.clone(),
            input_images: decode_images(&self.images)?,
            limits: Limits {
                wall_time_secs: self.limits.wall_time,
                memory_bytes: self.limits.memory,
            },
        })
    }
}

impl WireResponse {
    pub fn from_response(id: u64, resp: &CodeResponse) -> Result<Self, String> {
        Ok(Self {
            id,
            status: resp.status,
            stdout: resp.stdout.clone(),
            stderr: resp.stderr.clone(),
            images: encode_images(&resp.output_images)?,
        })
    }

    pub fn protocol_error(id: u64, message: impl Into<String>) -> Self {
        Self {
            id,
            status: ExecStatus::ProtocolError,
            stdout: String::new(),
            stderr: message.into(),
            images: BTreeMap::new(),
        }
    }

    pub fn into_response(self) -> Result<CodeResponse, String> {
        let output_images = if self.status == ExecStatus::Timeout {
            Vec::new()
        } else {
            decode_images(&self.images)?
        };
        Ok(CodeResponse {
            status: self.status,
            stdout: self.stdout,
            stderr: self.stderr,
            output_images,
        })
    }
}
