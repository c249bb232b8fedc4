//! Self-describing binary checkpoint.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "PSFCHKP1"
//! version          u32
//! seed             u64
//! channels, lookback, segments, horizon, n_encoders, revin_window   6 x u64
//! sharing mode     u8  (0 in-encoder, 1 cross-encoders, 2 all, 3 none)
//! placement map    u64 count, then count x u64 (encoder-major, 7 slots each)
//! block count      u64
//! per block        6 buffers in w1,b1,w2,b2,w3,b3 order
//! head             2 buffers (w, b)
//! buffer           u64 length, then length x f64
//! ```
//!
//! Weights are always serialized as 64-bit floats regardless of the training
//! precision.

use std::io::{Read, Write};
use std::path::Path;

use super::{placement, ModelConfig, ModelError, PsBlock, PsformerParams, SharingMode, Slot};
use crate::element::Element;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PSFCHKP1";

fn mode_tag(mode: SharingMode) -> u8 {
    match mode {
        SharingMode::InEncoder => 0,
        SharingMode::CrossEncoders => 1,
        SharingMode::All => 2,
        SharingMode::None => 3,
    }
}

fn mode_from_tag(tag: u8) -> Result<SharingMode, ModelError> {
    Ok(match tag {
        0 => SharingMode::InEncoder,
        1 => SharingMode::CrossEncoders,
        2 => SharingMode::All,
        3 => SharingMode::None,
        _ => return Err(ModelError::Checkpoint(format!("unknown sharing tag {tag}"))),
    })
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_buffer<W: Write, E: Element>(w: &mut W, buf: &[E]) -> std::io::Result<()> {
    write_u64(w, buf.len() as u64)?;
    for &v in buf {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    Ok(u64::from_le_bytes(read_exact::<R, 8>(r)?))
}

fn read_buffer<R: Read, E: Element>(r: &mut R, expect_len: usize) -> Result<Vec<E>, ModelError> {
    let len = read_u64(r)? as usize;
    if len != expect_len {
        return Err(ModelError::Checkpoint(format!(
            "buffer length {len} does not match config ({expect_len})"
        )));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(E::from_f64(f64::from_le_bytes(read_exact::<R, 8>(r)?)));
    }
    Ok(out)
}

pub fn save_checkpoint<E: Element>(
    params: &PsformerParams<E>,
    path: &Path,
) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cfg = &params.config;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_u64(&mut w, params.seed)?;
    for v in [
        cfg.channels,
        cfg.lookback,
        cfg.segments,
        cfg.horizon,
        cfg.n_encoders,
        cfg.revin_window,
    ] {
        write_u64(&mut w, v as u64)?;
    }
    w.write_all(&[mode_tag(cfg.sharing)])?;

    write_u64(&mut w, (cfg.n_encoders * 7) as u64)?;
    for e in 0..cfg.n_encoders {
        for slot in Slot::ALL {
            write_u64(&mut w, placement(cfg.sharing, e, slot) as u64)?;
        }
    }

    write_u64(&mut w, params.blocks.len() as u64)?;
    for b in &params.blocks {
        for buf in [&b.w1, &b.b1, &b.w2, &b.b2, &b.w3, &b.b3] {
            write_buffer(&mut w, buf)?;
        }
    }
    write_buffer(&mut w, &params.head_w)?;
    write_buffer(&mut w, &params.head_b)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<PsformerParams<E>, ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact::<_, 8>(&mut r)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact::<_, 4>(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let seed = read_u64(&mut r)?;
    let dims: Vec<usize> = (0..6)
        .map(|_| read_u64(&mut r).map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    let sharing = mode_from_tag(read_exact::<_, 1>(&mut r)?[0])?;
    let config = ModelConfig {
        channels: dims[0],
        lookback: dims[1],
        segments: dims[2],
        horizon: dims[3],
        n_encoders: dims[4],
        sharing,
        revin_window: dims[5],
    };
    config.validate()?;

    let map_len = read_u64(&mut r)? as usize;
    if map_len != config.n_encoders * 7 {
        return Err(ModelError::Checkpoint(format!(
            "placement map has {map_len} entries, config wants {}",
            config.n_encoders * 7
        )));
    }
    for e in 0..config.n_encoders {
        for slot in Slot::ALL {
            let stored = read_u64(&mut r)? as usize;
            let expect = placement(config.sharing, e, slot);
            if stored != expect {
                return Err(ModelError::Checkpoint(format!(
                    "placement (encoder {e}, slot {}) is {stored}, sharing mode implies {expect}",
                    slot.index()
                )));
            }
        }
    }

    let n_blocks = read_u64(&mut r)? as usize;
    if n_blocks != super::block_count(config.sharing, config.n_encoders) {
        return Err(ModelError::Checkpoint(format!(
            "{n_blocks} blocks stored, sharing mode implies {}",
            super::block_count(config.sharing, config.n_encoders)
        )));
    }
    let n = config.segments;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        blocks.push(PsBlock {
            w1: read_buffer(&mut r, n * n)?,
            b1: read_buffer(&mut r, n)?,
            w2: read_buffer(&mut r, n * n)?,
            b2: read_buffer(&mut r, n)?,
            w3: read_buffer(&mut r, n * n)?,
            b3: read_buffer(&mut r, n)?,
        });
    }
    let head_w = read_buffer(&mut r, config.lookback * config.horizon)?;
    let head_b = read_buffer(&mut r, config.horizon)?;
    Ok(PsformerParams {
        config,
        blocks,
        head_w,
        head_b,
        seed,
    })
}
