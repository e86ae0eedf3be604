//! Checkpoint container: named parameter table plus training-stage
//! provenance. The binary layout round-trips bit-exactly.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::scalar::Scalar;

use super::{is_decoder_side, ModelError, VtnModel};

const MAGIC: &[u8; 8] = b"VTNCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Tts,
    EncoderPretrain,
    Vc,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Tts => "tts",
            Stage::EncoderPretrain => "encoder-pretrain",
            Stage::Vc => "vc",
        }
    }

    fn code(self) -> u8 {
        match self {
            Stage::Tts => 0,
            Stage::EncoderPretrain => 1,
            Stage::Vc => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, ModelError> {
        match c {
            0 => Ok(Stage::Tts),
            1 => Ok(Stage::EncoderPretrain),
            2 => Ok(Stage::Vc),
            other => Err(ModelError::Checkpoint(format!("unknown stage code {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Full provenance, oldest first, ending with `stage`.
    pub lineage: Vec<Stage>,
    pub step: u64,
    /// Canonical model-config text snapshot.
    pub config_text: String,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(
        model: &VtnModel<S>,
        stage: Stage,
        parent_lineage: &[Stage],
        step: u64,
    ) -> Self {
        let mut lineage = parent_lineage.to_vec();
        lineage.push(stage);
        let params = model
            .named_params()
            .iter()
            .map(|p| {
                let t = p.value();
                (
                    p.name().to_string(),
                    t.shape.clone(),
                    t.data.iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect();
        Checkpoint {
            stage,
            lineage,
            step,
            config_text: model.config.canonical(),
            params,
        }
    }

    /// Strict restore: every model parameter must be present with a matching
    /// shape. The only tolerated absence is the mode-specific input layer
    /// (`input.*`), which stays at its fresh initialization across stage
    /// transitions; anything else missing is an error so a partial load can
    /// never pass silently. Checkpoint-side `input.*` entries for the other
    /// mode are ignored.
    pub fn restore_into<S: Scalar>(&self, model: &VtnModel<S>) -> Result<(), ModelError> {
        self.restore(model, |_| true, true)
    }

    /// Restore only the decoder-side parameters (decoder-only pretraining
    /// initialization); the encoder side keeps its fresh initialization.
    pub fn restore_decoder_side<S: Scalar>(&self, model: &VtnModel<S>) -> Result<(), ModelError> {
        self.restore(model, is_decoder_side, false)
    }

    fn restore<S: Scalar>(
        &self,
        model: &VtnModel<S>,
        want: impl Fn(&str) -> bool,
        strict: bool,
    ) -> Result<(), ModelError> {
        let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> = self
            .params
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        for p in model.named_params() {
            if !want(p.name()) {
                by_name.remove(p.name());
                continue;
            }
            match by_name.remove(p.name()) {
                Some((shape, data)) => {
                    let mut t = p.value_mut();
                    if t.shape != *shape {
                        return Err(ModelError::Checkpoint(format!(
                            "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                            p.name(),
                            shape,
                            t.shape
                        )));
                    }
                    for (dst, src) in t.data.iter_mut().zip(data.iter()) {
                        *dst = S::of(*src);
                    }
                }
                None if p.name().starts_with("input.") => {
                    // Stage transition: the other mode's input layer is not
                    // in the checkpoint; keep the fresh initialization.
                }
                None => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {} is missing from the checkpoint",
                        p.name()
                    )));
                }
            }
        }
        if strict {
            if let Some(extra) = by_name.keys().find(|n| !n.starts_with("input.")) {
                return Err(ModelError::Checkpoint(format!(
                    "checkpoint parameter {extra} does not exist in the model"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.code());
        out.extend_from_slice(&(self.lineage.len() as u32).to_le_bytes());
        for s in &self.lineage {
            out.push(s.code());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&out)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut cur = Cursor {
            buf: &buf,
            pos: 0,
            path,
        };
        if cur.take(8)? != MAGIC {
            return Err(cur.bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(cur.bad(&format!("unsupported version {version}")));
        }
        let stage = Stage::from_code(cur.u8()?)?;
        let lineage_len = cur.u32()? as usize;
        let mut lineage = Vec::with_capacity(lineage_len);
        for _ in 0..lineage_len {
            lineage.push(Stage::from_code(cur.u8()?)?);
        }
        let step = cur.u64()?;
        let cfg_len = cur.u64()? as usize;
        let config_text = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("config text is not utf-8".into()))?;
        let n_params = cur.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| ModelError::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, shape, data));
        }
        Ok(Checkpoint {
            stage,
            lineage,
            step,
            config_text,
            params,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn bad(&self, msg: &str) -> ModelError {
        ModelError::Checkpoint(format!("{}: {msg}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
