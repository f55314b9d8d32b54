//! EDNZ framing: the raw tensor format used both for observations on disk and
//! for the external-denoiser request/response protocol.
//!
//! All fields little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EDNZ"
//! 4       4     version (u32, = 1)
//! 8       4     height H (u32)
//! 12      4     width W (u32)
//! 16      4     channels C (u32)
//! 20      4     sigma (f32)
//! 24      4·HWC payload (f32, row-major, interleaved channels)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::imaging::{Image, Shape};

pub const MAGIC: [u8; 4] = *b"EDNZ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Upper bound on H·W·C accepted from a peer (256 Mi values).
const MAX_VALUES: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub shape: Shape,
    pub sigma: f32,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn from_image(image: &Image, sigma: f64) -> Frame {
        Frame {
            shape: image.shape(),
            sigma: sigma as f32,
            payload: image.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        if let Some(i) = self.payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::Protocol(format!(
                "non-finite payload value at index {i} in {} frame",
                self.shape
            )));
        }
        Image::from_shape(
            self.shape,
            self.payload.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.channels as u32).to_le_bytes());
        out.extend_from_slice(&self.sigma.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after frame",
                cursor.len()
            )));
        }
        Ok(frame)
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())
        .and_then(|_| w.flush())
        .map_err(|e| Error::Protocol(format!("write failed: {e}")))
}

fn u32_at(h: &[u8; HEADER_LEN], at: usize) -> u32 {
    u32::from_le_bytes([h[at], h[at + 1], h[at + 2], h[at + 3]])
}

/// Reads one frame. A clean EOF before the first header byte is reported as
/// a protocol error mentioning end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Protocol(format!("reading header: {e}")))?;
    if header[0..4] != MAGIC {
        return Err(Error::Protocol(format!(
            "bad magic {:02x?}, expected \"EDNZ\"",
            &header[0..4]
        )));
    }
    let version = u32_at(&header, 4);
    if version != VERSION {
        return Err(Error::Protocol(format!("unsupported version {version}")));
    }
    let (h, w, c) = (u32_at(&header, 8), u32_at(&header, 12), u32_at(&header, 16));
    let sigma = f32::from_le_bytes([header[20], header[21], header[22], header[23]]);
    if h == 0 || w == 0 || !(c == 1 || c == 3) {
        return Err(Error::Protocol(format!("invalid dims H={h} W={w} C={c}")));
    }
    let n = u64::from(h) * u64::from(w) * u64::from(c);
    if n > MAX_VALUES {
        return Err(Error::Protocol(format!(
            "frame of {h}x{w}x{c} exceeds size limit"
        )));
    }
    let mut raw = vec![0u8; 4 * n as usize];
    r.read_exact(&mut raw).map_err(|e| {
        Error::Protocol(format!("reading {h}x{w}x{c} payload: {e}"))
    })?;
    let payload = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Frame {
        shape: Shape::new(h as usize, w as usize, c as usize),
        sigma,
        payload,
    })
}
