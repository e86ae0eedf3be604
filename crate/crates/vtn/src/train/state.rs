//! Optimizer/progress state for bit-identical training resumption.
//!
//! Batch order and dropout masks are pure functions of `(seed, step)`, so
//! the resumable state is the step counter, optimizer moments, and the
//! early-stopping bookkeeping; no generator state needs saving beyond the
//! seed itself.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::optim::Adam;
use super::TrainError;

const MAGIC: &[u8; 8] = b"VTNSTAT1";

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub best_val: f64,
    pub validations_since_best: u32,
    pub adam_t: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl TrainState {
    pub fn capture(step: u64, seed: u64, best_val: f64, since_best: u32, adam: &Adam) -> Self {
        TrainState {
            step,
            seed,
            best_val,
            validations_since_best: since_best,
            adam_t: adam.t,
            moments: adam.moments.clone(),
        }
    }

    pub fn restore_optimizer(&self, adam: &mut Adam) -> Result<(), TrainError> {
        if adam.moments.len() != self.moments.len() {
            return Err(TrainError::Invalid(format!(
                "state holds {} moment sets, optimizer expects {}",
                self.moments.len(),
                adam.moments.len()
            )));
        }
        for ((name, m, v), (sname, sm, sv)) in adam.moments.iter_mut().zip(self.moments.iter()) {
            if name != sname || m.len() != sm.len() {
                return Err(TrainError::Invalid(format!(
                    "state moment {sname} does not match optimizer slot {name}"
                )));
            }
            m.copy_from_slice(sm);
            v.copy_from_slice(sv);
        }
        adam.t = self.adam_t;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.best_val.to_le_bytes());
        out.extend_from_slice(&self.validations_since_best.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (name, m, v) in &self.moments {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for &x in m {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
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

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = || TrainError::Invalid(format!("{}: bad state file", path.display()));
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], TrainError> {
            if *pos + n > buf.len() {
                return Err(TrainError::Invalid("state file truncated".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(bad());
        }
        let u64_at = |pos: &mut usize| -> Result<u64, TrainError> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let step = u64_at(&mut pos)?;
        let seed = u64_at(&mut pos)?;
        let best_val = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let validations_since_best =
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let adam_t = u64_at(&mut pos)?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| bad())?;
            let n = u64_at(&mut pos)? as usize;
            let mut m = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            moments.push((name, m, v));
        }
        Ok(TrainState {
            step,
            seed,
            best_val,
            validations_since_best,
            adam_t,
            moments,
        })
    }
}
