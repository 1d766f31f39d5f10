//! On-disk recording container.
//!
//! Layout: one UTF-8 JSON header line, `\n`, the sample block as little-endian
//! `f32` in channel-major order (all frames of channel 0, then channel 1, ...),
//! then a JSON marker trailer. `trailer_offset` in the header is the byte
//! offset of the trailer from the start of the sample block.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::types::{Marker, Montage, Recording};
use super::{SignalError, SignalResult};

pub const RECORDING_FORMAT: &str = "mibci-recording";
pub const RECORDING_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    session_id: String,
    montage: Montage,
    units: String,
    n_channels: usize,
    n_frames: usize,
    sample_format: String,
    trailer_offset: u64,
    trailer_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Trailer {
    markers: Vec<Marker>,
}

/// Serialize a recording. Samples are narrowed to `f32`.
pub fn write_recording<W: Write>(rec: &Recording, mut out: W) -> SignalResult<()> {
    let trailer = serde_json::to_vec(&Trailer { markers: rec.markers.clone() })?;
    let n_channels = rec.samples.nrows();
    let n_frames = rec.samples.ncols();
    let header = Header {
        format: RECORDING_FORMAT.into(),
        version: RECORDING_VERSION,
        session_id: rec.session_id.clone(),
        montage: rec.montage.clone(),
        units: "uV".into(),
        n_channels,
        n_frames,
        sample_format: "f32le".into(),
        trailer_offset: (4 * n_channels * n_frames) as u64,
        trailer_len: trailer.len() as u64,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(4 * n_channels * n_frames + trailer.len());
    for row in rec.samples.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes.extend_from_slice(&trailer);
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_recording<R: Read>(mut input: R) -> SignalResult<Recording> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SignalError::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| SignalError::Format(format!("bad header: {e}")))?;
    if header.format != RECORDING_FORMAT {
        return Err(SignalError::Format(format!("unknown format tag {:?}", header.format)));
    }
    if header.version != RECORDING_VERSION {
        return Err(SignalError::Format(format!(
            "unsupported recording version {} (expected {RECORDING_VERSION})",
            header.version
        )));
    }
    if header.units != "uV" || header.sample_format != "f32le" {
        return Err(SignalError::Format("only f32le microvolt samples are supported".into()));
    }
    if header.n_channels != header.montage.n_channels() {
        return Err(SignalError::Format("channel count disagrees with montage".into()));
    }
    let body = &bytes[nl + 1..];
    let n_values = header.n_channels * header.n_frames;
    let sample_bytes = 4 * n_values;
    if header.trailer_offset != sample_bytes as u64 {
        return Err(SignalError::Format("trailer offset does not match sample block size".into()));
    }
    let expected_len = sample_bytes as u64 + header.trailer_len;
    if (body.len() as u64) != expected_len {
        return Err(SignalError::Format(format!(
            "expected {expected_len} bytes after header, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body[..sample_bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let samples = Array2::from_shape_vec((header.n_channels, header.n_frames), values)
        .map_err(|e| SignalError::Format(e.to_string()))?;
    let trailer: Trailer = serde_json::from_slice(&body[sample_bytes..])
        .map_err(|e| SignalError::Format(format!("bad marker trailer: {e}")))?;
    Recording::new(header.montage, samples, trailer.markers, header.session_id)
}

pub fn save_recording(rec: &Recording, path: impl AsRef<Path>) -> SignalResult<()> {
    let mut buf = Vec::new();
    write_recording(rec, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_recording(path: impl AsRef<Path>) -> SignalResult<Recording> {
    let file = std::fs::File::open(path)?;
    read_recording(std::io::BufReader::new(file))
}
