//! Binary model files.
//!
//! ```text
//! "UDGL"  u32 version
//! u32 blocks  u32 layers  u32 hidden  u32 D  D x u32 decoder hidden widths
//! every parameter array in declaration order as little-endian f64
//! ```
//!
//! Arrays per group: `omega_d, omega_f`, then per layer
//! `ups_d, ups_f, ln_d_gain, ln_d_bias, ln_f_gain, ln_f_bias`, then per
//! decoder layer `w, b`. Group 0 precedes group 1.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Architecture, ModelParams};

pub const MODEL_MAGIC: &[u8; 4] = b"UDGL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model version {0} (expected {MODEL_VERSION})")]
    Version(u32),
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

// sanity bound on sizes read from a file
const MAX_DIM: u32 = 1 << 16;

pub fn write_model(w: &mut impl Write, p: &ModelParams) -> Result<(), ModelIoError> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let a = &p.arch;
    for x in [a.blocks, a.layers, a.hidden, a.decoder.len()] {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    for &x in &a.decoder {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * p.num_scalars());
    for t in p.tensors() {
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<ModelParams, ModelIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(ModelIoError::Version(version));
    }
    let mut dims = [0u32; 4];
    for d in &mut dims {
        *d = read_u32(r)?;
        if *d > MAX_DIM {
            return Err(ModelIoError::Malformed(format!("dimension {d} out of range")));
        }
    }
    let decoder = (0..dims[3])
        .map(|_| {
            let x = read_u32(r)?;
            if x > MAX_DIM {
                return Err(ModelIoError::Malformed(format!("decoder width {x} out of range")));
            }
            Ok(x as usize)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture {
        blocks: dims[0] as usize,
        layers: dims[1] as usize,
        hidden: dims[2] as usize,
        decoder,
    };
    arch.validate().map_err(|e| ModelIoError::Malformed(e.to_string()))?;
    let mut p = ModelParams::zeros(&arch);
    for t in p.tensors_mut() {
        for x in &mut t.data {
            *x = read_f64(r)?;
        }
    }
    Ok(p)
}

pub fn save_model(path: &std::path::Path, p: &ModelParams) -> Result<(), ModelIoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, p)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<ModelParams, ModelIoError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let p = ModelParams::init(&Architecture::tiny(), 11);
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"UDGL");
        let q = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = ModelParams::init(&Architecture::tiny(), 12);
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(ModelIoError::BadMagic)));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_model(&mut &cut[..]), Err(ModelIoError::Io(_))));
        let mut v2 = buf.clone();
        v2[4] = 9;
        assert!(matches!(read_model(&mut v2.as_slice()), Err(ModelIoError::Version(9))));
    }
}
