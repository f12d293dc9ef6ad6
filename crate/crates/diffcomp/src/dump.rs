//! Binary dump formats for trajectories and attention maps.
//!
//! Trajectory files: `TFTRAJ1` magic, direction byte (0 forward, 1
//! backward), shape `(c, h, w)` as little-endian u32, frame count as u32,
//! then raw little-endian f32 frames in step order. A single latent is a
//! one-frame trajectory file.
//!
//! Attention dumps: `TFATTN1` magic, block count u32, then per block a
//! header (layer u32, step u32, rows u32, cols u32) followed by the map in
//! little-endian f32.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::solver::{Direction, LatentState, Trajectory};

const TRAJ_MAGIC: &[u8; 7] = b"TFTRAJ1";
const ATTN_MAGIC: &[u8; 7] = b"TFATTN1";

/// FNV-1a 64-bit hash, used as the weight-blob checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn push_f32_frame(out: &mut Vec<u8>, frame: &Array3<f64>) {
    for v in frame.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let first = traj
        .states
        .first()
        .ok_or_else(|| Error::contract("cannot dump an empty trajectory"))?;
    let (c, h, w) = first.data.dim();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(TRAJ_MAGIC);
    bytes.push(match traj.direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    });
    for dim in [c, h, w, traj.states.len()] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for state in &traj.states {
        push_f32_frame(&mut bytes, &state.data);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a single latent as a one-frame trajectory file.
pub fn write_latent(state: &LatentState, direction: Direction, path: &Path) -> Result<()> {
    let traj = Trajectory {
        states: vec![state.clone()],
        direction,
    };
    write_trajectory(&traj, path)
}

pub fn read_trajectory(path: &Path) -> Result<(Vec<Array3<f64>>, Direction)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::input(format!("cannot read trajectory {}: {e}", path.display())))?;
    if bytes.len() < 24 || &bytes[0..7] != TRAJ_MAGIC {
        return Err(Error::input("not a trajectory dump (bad magic)"));
    }
    let direction = match bytes[7] {
        0 => Direction::Forward,
        1 => Direction::Backward,
        d => return Err(Error::input(format!("unknown direction byte {d}"))),
    };
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (c, h, w, frames) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let frame_len = c * h * w;
    let expected = 24 + frames * frame_len * 4;
    if bytes.len() != expected {
        return Err(Error::input(format!(
            "trajectory dump truncated: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(frames);
    let mut off = 24;
    for _ in 0..frames {
        let mut data = Vec::with_capacity(frame_len);
        for _ in 0..frame_len {
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        out.push(
            Array3::from_shape_vec((c, h, w), data)
                .map_err(|e| Error::input(format!("bad frame shape: {e}")))?,
        );
    }
    Ok((out, direction))
}

/// One dumped attention block.
#[derive(Debug, Clone)]
pub struct AttentionBlockDump {
    pub layer: usize,
    pub step: usize,
    pub map: Array2<f64>,
}

pub fn write_attention_dump(blocks: &[AttentionBlockDump], path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(ATTN_MAGIC);
    bytes.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        let (rows, cols) = b.map.dim();
        for v in [b.layer, b.step, rows, cols] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in b.map.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_attention_dump(path: &Path) -> Result<Vec<AttentionBlockDump>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::input(format!("cannot read attention dump {}: {e}", path.display())))?;
    if bytes.len() < 11 || &bytes[0..7] != ATTN_MAGIC {
        return Err(Error::input("not an attention dump (bad magic)"));
    }
    let count = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let mut off = 11;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < off + 16 {
            return Err(Error::input("attention dump truncated"));
        }
        let mut u32_next = || {
            let v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            v
        };
        let (layer, step, rows, cols) = (u32_next(), u32_next(), u32_next(), u32_next());
        let len = rows * cols;
        if bytes.len() < off + len * 4 {
            return Err(Error::input("attention dump truncated"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        out.push(AttentionBlockDump {
            layer,
            step,
            map: Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::input(format!("bad attention block shape: {e}")))?,
        });
    }
    Ok(out)
}
