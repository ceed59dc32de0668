//! CLIPRAW: the uncompressed clip container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field            |
//! |--------|------|------------------|
//! | 0      | 4    | magic `"CLPR"`   |
//! | 4      | 2    | format version   |
//! | 6      | 2    | reserved (0)     |
//! | 8      | 4    | frame count      |
//! | 12     | 4    | height           |
//! | 16     | 4    | width            |
//! | 20     | 4    | fps numerator    |
//! | 24     | 4    | fps denominator  |
//! | 28     | 4    | digest algorithm |
//!
//! followed by `frame_count * height * width * 3` bytes of interleaved RGB8,
//! frames in temporal order. The clip id is the digest of the payload bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ClipError, ClipId, Fps, FrameTensor, VideoClip};

pub const MAGIC: [u8; 4] = *b"CLPR";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
/// Digest algorithm id recorded in the header; 1 = SHA-256.
pub const DIGEST_SHA256: u32 = 1;

#[derive(Debug, Error)]
pub enum ClipRawError {
    #[error("bad magic {0:?}, expected \"CLPR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported digest algorithm id {0}")]
    UnsupportedDigest(u32),
    #[error("truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("payload has trailing bytes beyond the {expected} promised by the header")]
    LengthMismatch { expected: u64 },
    #[error("header describes an invalid clip: {0}")]
    InvalidHeader(#[from] ClipError),
    #[error("clip dimension {0} does not fit the header field")]
    TooLarge(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRawHeader {
    pub frame_count: u32,
    pub height: u32,
    pub width: u32,
    pub fps: Fps,
    pub digest_algo: u32,
}

impl ClipRawHeader {
    pub fn for_clip(clip: &VideoClip) -> Result<Self, ClipRawError> {
        Ok(Self {
            frame_count: u32::try_from(clip.len()).map_err(|_| ClipRawError::TooLarge("frame_count"))?,
            height: clip.height(),
            width: clip.width(),
            fps: clip.fps(),
            digest_algo: DIGEST_SHA256,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height as usize * self.width as usize * 3
    }

    pub fn payload_len(&self) -> u64 {
        self.frame_count as u64 * self.frame_len() as u64
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        out[6..8].copy_from_slice(&0u16.to_le_bytes());
        out[8..12].copy_from_slice(&self.frame_count.to_le_bytes());
        out[12..16].copy_from_slice(&self.height.to_le_bytes());
        out[16..20].copy_from_slice(&self.width.to_le_bytes());
        out[20..24].copy_from_slice(&self.fps.numerator.to_le_bytes());
        out[24..28].copy_from_slice(&self.fps.denominator.to_le_bytes());
        out[28..32].copy_from_slice(&self.digest_algo.to_le_bytes());
        out
    }

    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<Self, ClipRawError> {
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(ClipRawError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(ClipRawError::UnsupportedVersion(version));
        }
        let digest_algo = u32_at(28);
        if digest_algo != DIGEST_SHA256 {
            return Err(ClipRawError::UnsupportedDigest(digest_algo));
        }
        let header = Self {
            frame_count: u32_at(8),
            height: u32_at(12),
            width: u32_at(16),
            fps: Fps::new(u32_at(20), u32_at(24))?,
            digest_algo,
        };
        if header.frame_count == 0 {
            return Err(ClipError::Empty.into());
        }
        if header.height == 0 || header.width == 0 {
            return Err(ClipError::ZeroDimension {
                height: header.height,
                width: header.width,
            }
            .into());
        }
        Ok(header)
    }
}

/// Streams `clip` as CLIPRAW into `out` and returns the payload digest.
pub fn write_to<W: Write>(clip: &VideoClip, out: &mut W) -> Result<ClipId, ClipRawError> {
    let header = ClipRawHeader::for_clip(clip)?;
    out.write_all(&header.to_bytes())?;
    let mut hasher = Sha256::new();
    for frame in clip.frames() {
        hasher.update(frame.data());
        out.write_all(frame.data())?;
    }
    Ok(ClipId::from_digest(hasher.finalize().into()))
}

pub fn encode(clip: &VideoClip) -> Result<Vec<u8>, ClipRawError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + clip.payload_len());
    write_to(clip, &mut buf)?;
    Ok(buf)
}

/// Writes `clip` to `destination` atomically (temp file in the same directory, then rename).
pub fn write_clipraw(clip: &VideoClip, destination: &Path) -> Result<ClipId, ClipRawError> {
    let dir = match destination.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let id = {
        let mut w = io::BufWriter::new(tmp.as_file_mut());
        let id = write_to(clip, &mut w)?;
        w.flush()?;
        id
    };
    tmp.as_file().sync_data()?;
    tmp.persist(destination).map_err(|e| e.error)?;
    Ok(id)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads exactly one CLIPRAW stream from `r`; trailing bytes are an error.
pub fn read_from<R: Read>(r: &mut R) -> Result<VideoClip, ClipRawError> {
    let mut head = [0u8; HEADER_LEN];
    let got = read_full(r, &mut head)?;
    if got >= 4 && head[0..4] != MAGIC {
        return Err(ClipRawError::BadMagic(head[0..4].try_into().expect("4 bytes")));
    }
    if got < HEADER_LEN {
        return Err(ClipRawError::Truncated {
            expected: HEADER_LEN as u64,
            actual: got as u64,
        });
    }
    let header = ClipRawHeader::parse(&head)?;
    let frame_len = header.frame_len();
    // Buffers grow with the bytes actually present, so a corrupted header
    // cannot force a huge allocation.
    let mut frames = Vec::with_capacity((header.frame_count as usize).min(1024));
    let mut read_payload = 0u64;
    for _ in 0..header.frame_count {
        let mut data = Vec::with_capacity(frame_len.min(1 << 22));
        let n = r.by_ref().take(frame_len as u64).read_to_end(&mut data)?;
        read_payload += n as u64;
        if n < frame_len {
            return Err(ClipRawError::Truncated {
                expected: HEADER_LEN as u64 + header.payload_len(),
                actual: HEADER_LEN as u64 + read_payload,
            });
        }
        frames.push(FrameTensor::new(header.height, header.width, data)?);
    }
    let mut probe = [0u8; 1];
    if read_full(r, &mut probe)? != 0 {
        return Err(ClipRawError::LengthMismatch {
            expected: header.payload_len(),
        });
    }
    Ok(VideoClip::new(frames, header.fps)?)
}

pub fn decode(mut bytes: &[u8]) -> Result<VideoClip, ClipRawError> {
    read_from(&mut bytes)
}

pub fn read_clipraw(source: &Path) -> Result<VideoClip, ClipRawError> {
    let file = fs::File::open(source)?;
    read_from(&mut io::BufReader::new(file))
}
