//! Little-endian binary containers for matrices on disk.
//!
//! Three layouts share the same primitive encoding (magic, shape header,
//! row-major 64-bit floats):
//!
//! * `VTNMAT01` — a bare matrix (plot data, converted features).
//! * `VTNFEAT1` — a cached log-mel feature file. Carries the feature-config
//!   hash plus analysis metadata; readers reject a hash mismatch.
//! * `VTNATT01` — a set of attention matrices tagged (layer, head).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::scalar::{sc, Scalar};

use super::{DspError, FeatureConfig, MelSpectrogram};

const MAGIC_MAT: &[u8; 8] = b"VTNMAT01";
const MAGIC_FEAT: &[u8; 8] = b"VTNFEAT1";
const MAGIC_ATT: &[u8; 8] = b"VTNATT01";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_data<S: Scalar>(out: &mut Vec<u8>, data: &[S]) {
    for &v in data {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DspError> {
        if self.pos + n > self.buf.len() {
            return Err(DspError::BadFile(self.path.clone(), "truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DspError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, DspError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn floats<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>, DspError> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| sc::<S>(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<(), DspError> {
        if self.take(8)? != magic {
            return Err(DspError::BadFile(
                self.path.clone(),
                format!("expected magic {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<Vec<u8>, DspError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DspError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- bare matrix -----------------------------------------------------------

pub fn write_matrix<S: Scalar>(
    path: &Path,
    rows: usize,
    cols: usize,
    data: &[S],
) -> Result<(), DspError> {
    assert_eq!(rows * cols, data.len());
    let mut out = Vec::with_capacity(24 + data.len() * 8);
    out.extend_from_slice(MAGIC_MAT);
    put_u64(&mut out, rows as u64);
    put_u64(&mut out, cols as u64);
    put_data(&mut out, data);
    atomic_write(path, &out)
}

pub fn read_matrix<S: Scalar>(path: &Path) -> Result<(usize, usize, Vec<S>), DspError> {
    let buf = open(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.expect_magic(MAGIC_MAT)?;
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let data = r.floats(rows * cols)?;
    Ok((rows, cols, data))
}

// ---- feature cache ----------------------------------------------------------

pub fn write_feature<S: Scalar>(
    path: &Path,
    mel: &MelSpectrogram<S>,
    cfg: &FeatureConfig,
) -> Result<(), DspError> {
    let mut out = Vec::with_capacity(48 + mel.data.len() * 8);
    out.extend_from_slice(MAGIC_FEAT);
    put_u64(&mut out, cfg.hash());
    put_u32(&mut out, mel.sample_rate);
    put_u32(&mut out, mel.n_fft as u32);
    put_u32(&mut out, mel.hop as u32);
    put_u32(&mut out, mel.n_mels as u32);
    put_u64(&mut out, mel.frames as u64);
    put_data(&mut out, &mel.data);
    atomic_write(path, &out)
}

/// Load a cached feature file, rejecting it when the stored config hash does
/// not match the current feature configuration.
pub fn read_feature<S: Scalar>(
    path: &Path,
    cfg: &FeatureConfig,
) -> Result<MelSpectrogram<S>, DspError> {
    let buf = open(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.expect_magic(MAGIC_FEAT)?;
    let found = r.u64()?;
    let expected = cfg.hash();
    if found != expected {
        return Err(DspError::CacheStale { expected, found });
    }
    let sample_rate = r.u32()?;
    let n_fft = r.u32()? as usize;
    let hop = r.u32()? as usize;
    let n_mels = r.u32()? as usize;
    let frames = r.u64()? as usize;
    let data = r.floats(frames * n_mels)?;
    Ok(MelSpectrogram {
        frames,
        n_mels,
        data,
        sample_rate,
        hop,
        n_fft,
    })
}

// ---- attention sets -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn write_attention(path: &Path, mats: &[AttentionMatrix]) -> Result<(), DspError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_ATT);
    put_u32(&mut out, mats.len() as u32);
    for m in mats {
        put_u32(&mut out, m.layer as u32);
        put_u32(&mut out, m.head as u32);
        put_u64(&mut out, m.rows as u64);
        put_u64(&mut out, m.cols as u64);
        put_data(&mut out, &m.data);
    }
    atomic_write(path, &out)
}

pub fn read_attention(path: &Path) -> Result<Vec<AttentionMatrix>, DspError> {
    let buf = open(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    r.expect_magic(MAGIC_ATT)?;
    let count = r.u32()? as usize;
    let mut mats = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = r.u32()? as usize;
        let head = r.u32()? as usize;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let data = r.floats(rows * cols)?;
        mats.push(AttentionMatrix {
            layer,
            head,
            rows,
            cols,
            data,
        });
    }
    Ok(mats)
}
