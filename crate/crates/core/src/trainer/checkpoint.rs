//! Checkpoint file: a magic line, one JSON header line, then little-endian
//! f64 payloads (denoiser, condition path, optimizer moments).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::TrainState;
use crate::condition::ConditionSpec;
use crate::error::{Error, Result};
use crate::net::{DenoiserConfig, DenoiserModel};
use crate::schedule::ScheduleParams;

const MAGIC: &str = "TMCDIFF-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    denoiser: DenoiserConfig,
    condition: ConditionSpec,
    schedule: ScheduleParams,
    tmc_mode: String,
    step: usize,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_t: u64,
    denoiser_len: usize,
    condition_len: usize,
    moments_len: usize,
}

/// Everything needed to sample from or resume a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub schedule: ScheduleParams,
    pub tmc_mode: String,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let st = &ckpt.state;
    let header = Header {
        version: CHECKPOINT_VERSION,
        denoiser: st.denoiser.config().clone(),
        condition: st.condition.spec(),
        schedule: ckpt.schedule,
        tmc_mode: ckpt.tmc_mode.clone(),
        step: st.step,
        adam_beta1: st.adam.beta1,
        adam_beta2: st.adam.beta2,
        adam_eps: st.adam.eps,
        adam_t: st.adam.t,
        denoiser_len: st.denoiser.params().len(),
        condition_len: st.condition.params().len(),
        moments_len: st.adam.m.len(),
    };
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{MAGIC} v{CHECKPOINT_VERSION}").map_err(io)?;
    let json = serde_json::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(w, "{json}").map_err(io)?;
    for block in [st.denoiser.params(), st.condition.params(), &st.adam.m, &st.adam.v] {
        for v in block {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    let expect = format!("{MAGIC} v{CHECKPOINT_VERSION}");
    if line.trim_end() != expect {
        if line.starts_with(MAGIC) {
            return Err(Error::Checkpoint(format!(
                "{}: version `{}` not supported (expected v{CHECKPOINT_VERSION})",
                path.display(),
                line.trim_end()
            )));
        }
        return Err(Error::format(path, "not a checkpoint file"));
    }
    line.clear();
    r.read_line(&mut line).map_err(io)?;
    let h: Header = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| Error::format(path, "truncated payload"))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let den = read_block(h.denoiser_len)?;
    let cond = read_block(h.condition_len)?;
    let m = read_block(h.moments_len)?;
    let v = read_block(h.moments_len)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    if h.moments_len != h.denoiser_len + h.condition_len {
        return Err(Error::Checkpoint("optimizer state does not cover all parameters".into()));
    }
    let denoiser = DenoiserModel::from_params(h.denoiser, den)?;
    let condition = h.condition.from_params(cond)?;
    let adam = Adam {
        beta1: h.adam_beta1,
        beta2: h.adam_beta2,
        eps: h.adam_eps,
        t: h.adam_t,
        m,
        v,
    };
    Ok(Checkpoint {
        state: TrainState {
            denoiser,
            condition,
            adam,
            step: h.step,
        },
        schedule: h.schedule,
        tmc_mode: h.tmc_mode,
    })
}
