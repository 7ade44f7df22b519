//! Binary map format, little-endian throughout. See FORMAT.md at the
//! repository root for the byte-level layout.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{GedfError, Result};
use crate::field::GaussianKernel;
use crate::fit::FittedBlock;
use crate::map::{pack_block_key, BlockIndex, MapConfig, SparseGmmMap};

pub const MAGIC: &[u8; 4] = b"GEDF";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 46;
const BLOCK_HEADER_LEN: usize = 19;
const KERNEL_LEN: usize = 28;

const FLAG_CONVERGED: u8 = 0x01;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GedfError::Format(format!(
                "truncated file: needed {} bytes for {} at offset {}, have {}",
                n,
                what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Serializes the map into the GEDF binary format. Blocks are written in
/// packed-key order so the output is a deterministic function of the map
/// contents.
pub fn encode_map(map: &SparseGmmMap) -> Vec<u8> {
    let mut keys: Vec<BlockIndex> = map.blocks().map(|(k, _)| *k).collect();
    keys.sort_by_key(|k| pack_block_key(*k));

    let kernel_total: usize = map.kernel_count();
    let mut out =
        Vec::with_capacity(HEADER_LEN + keys.len() * BLOCK_HEADER_LEN + kernel_total * KERNEL_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.config.block_size as f32).to_le_bytes());
    out.extend_from_slice(&(map.config.overlap_margin as f32).to_le_bytes());
    out.extend_from_slice(&(map.global_mae as f32).to_le_bytes());
    for j in 0..3 {
        out.extend_from_slice(&(map.bounds.0[j] as f32).to_le_bytes());
    }
    for j in 0..3 {
        out.extend_from_slice(&(map.bounds.1[j] as f32).to_le_bytes());
    }
    out.extend_from_slice(&(keys.len() as u32).to_le_bytes());

    for key in keys {
        let block = map.get_block(&key).unwrap();
        out.extend_from_slice(&key.0.to_le_bytes());
        out.extend_from_slice(&key.1.to_le_bytes());
        out.extend_from_slice(&key.2.to_le_bytes());
        out.extend_from_slice(&(block.kernels.len() as u16).to_le_bytes());
        out.extend_from_slice(&(block.mae as f32).to_le_bytes());
        let flags = if block.converged { FLAG_CONVERGED } else { 0 };
        out.push(flags);
        for k in &block.kernels {
            out.extend_from_slice(&(k.weight as f32).to_le_bytes());
            for j in 0..3 {
                out.extend_from_slice(&(k.center[j] as f32).to_le_bytes());
            }
            for j in 0..3 {
                out.extend_from_slice(&(k.length_scales[j] as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Parses a GEDF byte buffer back into a map. Length scales must be positive
/// and the buffer must contain exactly the advertised number of blocks.
pub fn decode_map(bytes: &[u8]) -> Result<SparseGmmMap> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(GedfError::Format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(GedfError::Format(format!(
            "unsupported format version {} (this build reads {})",
            version, FORMAT_VERSION
        )));
    }
    let block_size = c.f32("block_size")? as f64;
    let overlap = c.f32("overlap_margin")? as f64;
    let global_mae = c.f32("global_mae")? as f64;
    let mut lo = Vector3::zeros();
    let mut hi = Vector3::zeros();
    for j in 0..3 {
        lo[j] = c.f32("bounds_min")? as f64;
    }
    for j in 0..3 {
        hi[j] = c.f32("bounds_max")? as f64;
    }
    let block_count = c.u32("block_count")? as usize;
    if !(block_size > 0.0) || !(overlap > 0.0) || !(overlap < block_size / 2.0) {
        return Err(GedfError::Format(
            "need block_size > 0 and 0 < overlap_margin < block_size / 2".into(),
        ));
    }
    if !global_mae.is_finite()
        || !lo.iter().all(|v| v.is_finite())
        || !hi.iter().all(|v| v.is_finite())
        || (0..3).any(|j| hi[j] < lo[j])
    {
        return Err(GedfError::Format("invalid bounds or global MAE".into()));
    }

    let mut blocks: HashMap<BlockIndex, FittedBlock> = HashMap::with_capacity(block_count);
    for bi in 0..block_count {
        let what = format!("block {}", bi);
        let key = (c.i32(&what)?, c.i32(&what)?, c.i32(&what)?);
        let kernel_count = c.u16(&what)? as usize;
        let mae = c.f32(&what)? as f64;
        if !mae.is_finite() {
            return Err(GedfError::Format(format!("non-finite MAE in block {}", bi)));
        }
        let flags = c.u8(&what)?;
        let mut kernels = Vec::with_capacity(kernel_count);
        for ki in 0..kernel_count {
            let what = format!("block {} kernel {}", bi, ki);
            let weight = c.f32(&what)? as f64;
            let center = Vector3::new(
                c.f32(&what)? as f64,
                c.f32(&what)? as f64,
                c.f32(&what)? as f64,
            );
            let scales = Vector3::new(
                c.f32(&what)? as f64,
                c.f32(&what)? as f64,
                c.f32(&what)? as f64,
            );
            if !scales.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(GedfError::Format(format!(
                    "non-positive length scale in block {} kernel {}",
                    bi, ki
                )));
            }
            if !weight.is_finite() || !center.iter().all(|v| v.is_finite()) {
                return Err(GedfError::Format(format!(
                    "non-finite kernel parameter in block {} kernel {}",
                    bi, ki
                )));
            }
            kernels.push(GaussianKernel::new(weight, center, scales));
        }
        if blocks
            .insert(
                key,
                FittedBlock {
                    kernels,
                    mae,
                    sample_count: 0,
                    converged: flags & FLAG_CONVERGED != 0,
                },
            )
            .is_some()
        {
            return Err(GedfError::Format(format!("duplicate block index {:?}", key)));
        }
    }
    if c.pos != bytes.len() {
        return Err(GedfError::Format(format!(
            "{} trailing bytes after the last block",
            bytes.len() - c.pos
        )));
    }

    let config = MapConfig {
        block_size,
        overlap_margin: overlap,
        ..Default::default()
    };
    Ok(SparseGmmMap::from_parts(config, blocks, (lo, hi), global_mae))
}

/// Writes the map to `path`, returning the number of bytes written.
pub fn save_map(map: &SparseGmmMap, path: &Path) -> Result<usize> {
    let bytes = encode_map(map);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn load_map(path: &Path) -> Result<SparseGmmMap> {
    let bytes = std::fs::read(path)?;
    decode_map(&bytes)
}
