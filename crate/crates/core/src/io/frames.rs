//! `.fseq` frame sequences.
//!
//! ```text
//! "FSEQ" | version u32 | frame_count u32 | channels u32 | height u32 | width u32
//! frame_count x channels x height x width f32 (little-endian, planar per frame)
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::bytes::{verify_checksum, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAMES_MAGIC: &[u8; 4] = b"FSEQ";
pub const FRAMES_VERSION: u32 = 1;

/// Equal-shape frames, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    channels: usize,
    height: usize,
    width: usize,
    frames: Vec<Tensor>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        let (channels, height, width) = first.shape();
        if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::ShapeMismatch {
                left: first.shape(),
                right: bad.shape(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            frames,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn encode_frames(seq: &FrameSequence) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(FRAMES_MAGIC);
    w.u32(FRAMES_VERSION);
    w.u32(seq.frames.len() as u32);
    w.u32(seq.channels as u32);
    w.u32(seq.height as u32);
    w.u32(seq.width as u32);
    for f in &seq.frames {
        w.f32s(f.data());
    }
    w.finish()
}

pub fn decode_frames(data: &[u8]) -> Result<FrameSequence> {
    if data.len() < 4 || &data[..4] != FRAMES_MAGIC {
        return Err(Error::Format("bad magic; not an .fseq file".into()));
    }
    let body = verify_checksum(data)?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u32()?;
    if version != FRAMES_VERSION {
        return Err(Error::Format(format!("unsupported frame file version {version}")));
    }
    let n = r.usize32()?;
    let (c, h, w) = (r.usize32()?, r.usize32()?, r.usize32()?);
    let per = c * h * w;
    if n == 0 || per == 0 {
        return Err(Error::Format(format!("empty sequence header {n}x{c}x{h}x{w}")));
    }
    let expected = per.checked_mul(n).and_then(|v| v.checked_mul(4));
    if expected != Some(r.remaining()) {
        return Err(Error::Format(format!(
            "header {n}x{c}x{h}x{w} needs {} data bytes, found {}",
            expected.map_or("overflow".to_string(), |v| v.to_string()),
            r.remaining()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let data = r.f32s(per)?;
        let t = Tensor::new(c, h, w, data).map_err(|e| match e {
            Error::NonFinite { index } => {
                Error::Format(format!("frame {i}: non-finite value at index {index}"))
            }
            other => other,
        })?;
        frames.push(t);
    }
    FrameSequence::new(frames)
}

pub fn save_frames(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_frames(seq))?;
    Ok(())
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameSequence> {
    decode_frames(&fs::read(path)?)
}
