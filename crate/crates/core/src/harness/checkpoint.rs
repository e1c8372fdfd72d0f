//! Binary checkpoints of every parameter record in a federation.
//!
//! Layout (little-endian): magic `CFCK`, version `u16`, config digest
//! (32 bytes), next round `u64`, client count `u32`, then the server `Θ`
//! and per client `W`, `S`, `h`, `Θ_view`, each as a length-prefixed
//! (`u64`) dense payload. Random streams are addressed by round, so no RNG
//! state is stored.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::{HarnessError, Result};
use crate::compress::{encode_payload, CodecConfig, CompressedPayload};
use crate::fedcore::Federation;
use crate::gnn::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Parameters restored from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub t: u64,
    pub theta: ModelParams,
    /// `(w, s, h, theta_view)` per client.
    pub clients: Vec<[ModelParams; 4]>,
}

pub fn config_digest(cfg: &ExperimentConfig) -> [u8; 32] {
    // The output directory and round count do not affect the trajectory.
    let mut c = cfg.clone();
    c.out_dir = None;
    c.rounds = 1;
    c.checkpoint_every = 0;
    Sha256::digest(c.to_text().as_bytes()).into()
}

fn put_params(out: &mut Vec<u8>, p: &ModelParams) -> Result<()> {
    let bytes = encode_payload(p.tensors(), &CodecConfig::dense())?.to_bytes();
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&bytes);
    Ok(())
}

pub fn save_checkpoint(fed: &Federation, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(cfg));
    out.extend_from_slice(&fed.server.t.to_le_bytes());
    out.extend_from_slice(&(fed.clients.len() as u32).to_le_bytes());
    put_params(&mut out, &fed.server.theta)?;
    for c in &fed.clients {
        for p in [&c.w, &c.s, &c.h, &c.theta_view] {
            put_params(&mut out, p)?;
        }
    }
    // Write-then-rename so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("bin.tmp");
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, &out).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HarnessError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn params(&mut self) -> Result<ModelParams> {
        let len = usize::try_from(self.u64()?)
            .map_err(|_| HarnessError::Checkpoint("oversized record".into()))?;
        let payload = CompressedPayload::from_bytes(self.take(len)?)?;
        Ok(ModelParams::from_named(payload.reconstruct())?)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(HarnessError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_digest: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let t = c.u64()?;
    let n = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as usize;
    let theta = c.params()?;
    let mut clients = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        clients.push([c.params()?, c.params()?, c.params()?, c.params()?]);
    }
    if c.pos != bytes.len() {
        return Err(HarnessError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config_digest,
        t,
        theta,
        clients,
    })
}

/// Overwrites the parameters of a freshly built federation.
pub fn restore(fed: &mut Federation, ck: Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    if ck.config_digest != config_digest(cfg) {
        return Err(HarnessError::Checkpoint(
            "checkpoint was written by a different configuration".into(),
        ));
    }
    if ck.clients.len() != fed.clients.len() {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint has {} clients, config builds {}",
            ck.clients.len(),
            fed.clients.len()
        )));
    }
    fed.server.theta.check_congruent(&ck.theta)?;
    fed.server.t = ck.t;
    fed.server.theta = ck.theta;
    for (c, [w, s, h, view]) in fed.clients.iter_mut().zip(ck.clients) {
        for p in [&w, &s, &h, &view] {
            c.w.check_congruent(p)?;
        }
        c.w = w;
        c.s = s;
        c.h = h;
        c.theta_view = view;
    }
    Ok(())
}
