use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::nn::ParamStore;
use crate::preprocess::{ChannelStats, NormStats};

use super::{AmcnConfig, AmcnModel, NetError, Result};

const MAGIC: &[u8; 4] = b"AMCN";
const VERSION: u32 = 1;
const MAX_NAME: u32 = 4096;
const MAX_DIMS: u32 = 8;

/// Little-endian layout: magic, version, config (seven `u32` sizes and three
/// flag bytes), parameter count, then per parameter its name, rank, dims and
/// `f32` payload, then the normalization channel count and `(mean, std)`
/// pairs as `f64`.
pub fn encode_model<W: Write>(model: &AmcnModel, mut w: W) -> Result<()> {
    model.check()?;
    let c = &model.config;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for v in [
        c.base_channels,
        c.n_ancillary,
        c.scale,
        c.rdb_layers,
        c.rdb_growth,
        c.n_levels,
        c.kernel,
    ] {
        w.write_u32::<LE>(v as u32)?;
    }
    for f in [c.use_gca, c.use_mfca, c.use_degradation_loss] {
        w.write_u8(f as u8)?;
    }
    w.write_u32::<LE>(model.params.len() as u32)?;
    for p in model.params.iter() {
        w.write_u32::<LE>(p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        w.write_u32::<LE>(p.shape.len() as u32)?;
        for &d in &p.shape {
            w.write_u32::<LE>(d as u32)?;
        }
        for &v in &p.data {
            w.write_f32::<LE>(v)?;
        }
    }
    w.write_u32::<LE>(model.norm.len() as u32)?;
    for s in &model.norm.channels {
        w.write_f64::<LE>(s.mean)?;
        w.write_f64::<LE>(s.std)?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> NetError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NetError::Format("truncated".into())
    } else {
        NetError::Io(e)
    }
}

pub fn decode_model<R: Read>(mut r: R) -> Result<AmcnModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(NetError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(NetError::Version(version));
    }
    let mut sizes = [0usize; 7];
    for s in &mut sizes {
        *s = r.read_u32::<LE>().map_err(truncated)? as usize;
    }
    let mut flags = [false; 3];
    for f in &mut flags {
        *f = match r.read_u8().map_err(truncated)? {
            0 => false,
            1 => true,
            b => return Err(NetError::Format(format!("bad flag byte {b}"))),
        };
    }
    let config = AmcnConfig {
        base_channels: sizes[0],
        n_ancillary: sizes[1],
        scale: sizes[2],
        rdb_layers: sizes[3],
        rdb_growth: sizes[4],
        n_levels: sizes[5],
        kernel: sizes[6],
        use_gca: flags[0],
        use_mfca: flags[1],
        use_degradation_loss: flags[2],
    };
    config.validate()?;
    let layout = super::param_layout(&config)?;
    let count = r.read_u32::<LE>().map_err(truncated)? as usize;
    if count != layout.len() {
        return Err(NetError::Config(format!(
            "file holds {count} parameters, configuration needs {}",
            layout.len()
        )));
    }
    let mut params = ParamStore::new();
    for spec in &layout {
        let len = r.read_u32::<LE>().map_err(truncated)?;
        if len > MAX_NAME {
            return Err(NetError::Format(format!("parameter name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| NetError::Format("parameter name is not UTF-8".into()))?;
        let rank = r.read_u32::<LE>().map_err(truncated)?;
        if rank > MAX_DIMS {
            return Err(NetError::Format(format!("parameter rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        if name != spec.name || shape != spec.shape {
            return Err(NetError::Config(format!(
                "parameter {name:?} {shape:?} where the configuration expects {:?} {:?}",
                spec.name, spec.shape
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LE>(&mut data).map_err(truncated)?;
        params.insert(name, shape, data)?;
    }
    let nn = r.read_u32::<LE>().map_err(truncated)? as usize;
    if nn != 1 + config.n_ancillary {
        return Err(NetError::Config(format!("{nn} normalization channels")));
    }
    let mut channels = Vec::with_capacity(nn);
    for _ in 0..nn {
        let mean = r.read_f64::<LE>().map_err(truncated)?;
        let std = r.read_f64::<LE>().map_err(truncated)?;
        channels.push(ChannelStats { mean, std });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NetError::Format("trailing bytes".into()));
    }
    let model = AmcnModel {
        config,
        params,
        norm: NormStats::new(channels)?,
    };
    model.check()?;
    Ok(model)
}

pub fn save_model(model: &AmcnModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_model(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AmcnModel> {
    let bytes = fs::read(path)?;
    decode_model(&bytes[..])
}
