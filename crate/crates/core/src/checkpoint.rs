//! Checkpoint files: denoiser weights, normalization statistics, optimizer state and
//! the configuration that produced them.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"CSCK"`                          |
//! | 4      | 4    | format version (u32 LE)                  |
//! | 8      | 4    | header length `H` (u32 LE)               |
//! | 12     | H    | JSON [`CheckpointHeader`]                |
//! | 12+H   | 4    | tensor count (u32 LE)                    |
//! | ...    |      | per tensor: name length, UTF-8 name, rows, cols (u32 LE), f32 LE values |

use std::path::Path;

use cospeech_autograd::{Adam, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion_net::{ChannelNorm, DenoiserDims, DenoiserParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: DenoiserDims,
    pub speech_mean: Vec<f32>,
    pub speech_inv_std: Vec<f32>,
    pub motion_mean: Vec<f32>,
    pub motion_inv_std: Vec<f32>,
    /// Completed training steps.
    pub step: u64,
    pub has_optimizer: bool,
    /// TOML of the training configuration.
    pub config: String,
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DenoiserParams<f32>,
    pub step: u64,
    pub config: Config,
    /// Adam step count with first and second moments, in parameter order.
    pub optimizer: Option<(u64, Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    /// Rebuilds the optimizer with saved moments, or fresh state if absent.
    pub fn restore_adam(&self, lr: f64) -> Adam {
        let mut adam = Adam::new(&self.params.store, lr);
        if let Some((step, m, v)) = &self.optimizer {
            adam.restore(*step, m.clone(), v.clone());
        }
        adam
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rows())?;
    put_u32(out, t.cols())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(params: &DenoiserParams<f32>, step: u64, adam: Option<&Adam>, config: &Config) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        dims: params.dims().clone(),
        speech_mean: params.speech_norm.mean.clone(),
        speech_inv_std: params.speech_norm.inv_std.clone(),
        motion_mean: params.motion_norm.mean.clone(),
        motion_inv_std: params.motion_norm.inv_std.clone(),
        step,
        has_optimizer: adam.is_some(),
        config: config.to_toml_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let n = params.store.len();
    put_u32(&mut out, if adam.is_some() { 3 * n } else { n })?;
    for (name, t) in params.store.iter() {
        put_tensor(&mut out, name, t)?;
    }
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        for (prefix, moments) in [(ADAM_M, m), (ADAM_V, v)] {
            for ((name, _), t) in params.store.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t)?;
            }
        }
        out.extend_from_slice(&adam.step_count().to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?;
        let (rows, cols) = (self.u32()?, self.u32()?);
        let count = rows.checked_mul(cols).ok_or_else(|| Error::Data("checkpoint tensor too large".into()))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Data("checkpoint tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::from_vec(rows, cols, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    let config = Config::from_toml_str(&header.config)?;
    let mut params = DenoiserParams::<f32>::init(&header.dims, 0);
    let (ds, dm) = (header.dims.speech_dim(), header.dims.channels());
    if header.speech_mean.len() != ds
        || header.speech_inv_std.len() != ds
        || header.motion_mean.len() != dm
        || header.motion_inv_std.len() != dm
    {
        return Err(Error::Data("checkpoint normalization statistics have the wrong width".into()));
    }
    params.speech_norm = ChannelNorm { mean: header.speech_mean, inv_std: header.speech_inv_std };
    params.motion_norm = ChannelNorm { mean: header.motion_mean, inv_std: header.motion_inv_std };
    let n = params.store.len();
    let count = r.u32()?;
    if count != if header.has_optimizer { 3 * n } else { n } {
        return Err(Error::Data(format!("checkpoint holds {count} tensors, model expects {n}")));
    }
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for i in 0..count {
        let (name, t) = r.tensor()?;
        let (key, slot) = if let Some(rest) = name.strip_prefix(ADAM_M) {
            (rest, 1)
        } else if let Some(rest) = name.strip_prefix(ADAM_V) {
            (rest, 2)
        } else {
            (name.as_str(), 0)
        };
        let id = params.store.find(key).ok_or_else(|| Error::Data(format!("unknown checkpoint tensor {name}")))?;
        if id.0 != i % n || params.store.get(id).shape() != t.shape() {
            return Err(Error::Data(format!("checkpoint tensor {name} is out of place or has the wrong shape")));
        }
        match slot {
            0 => *params.store.get_mut(id) = t,
            1 => m.push(t),
            _ => v.push(t),
        }
    }
    let optimizer = if header.has_optimizer {
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        Some((step, m, v))
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    if params.store.iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(Checkpoint { params, step: header.step, config, optimizer })
}

pub fn save_checkpoint(path: &Path, params: &DenoiserParams<f32>, step: u64, adam: Option<&Adam>, config: &Config) -> Result<()> {
    let bytes = encode_checkpoint(params, step, adam, config)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Config, DenoiserParams<f32>) {
        let mut c = Config::default();
        c.model.n_specific_layers = 1;
        c.model.m_shared_layers = 1;
        c.model.d_motion = 16;
        c.model.d_speech = 8;
        let mut p = DenoiserParams::<f32>::init(&DenoiserDims::from_config(&c), 3);
        p.speech_norm.mean[0] = 0.5;
        p.motion_norm.inv_std[3] = 2.5;
        (c, p)
    }

    #[test]
    fn round_trip_with_optimizer() {
        let (c, p) = small();
        let mut adam = Adam::new(&p.store, 1e-3);
        let mut store = p.store.clone();
        let grads: Vec<_> = store.iter().map(|(_, t)| Some(t.map(|x| x * 0.1 + 0.01))).collect();
        adam.update(&mut store, &grads);
        let p = DenoiserParams { store, ..p };
        let bytes = encode_checkpoint(&p, 7, Some(&adam), &c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.config, c);
        assert_eq!(back.params.speech_norm, p.speech_norm);
        assert_eq!(back.params.motion_norm, p.motion_norm);
        for ((_, a), (_, b)) in back.params.store.iter().zip(p.store.iter()) {
            assert_eq!(a, b);
        }
        let restored = back.restore_adam(1e-3);
        assert_eq!(restored.step_count(), 1);
        assert_eq!(restored.moments(), adam.moments());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (c, p) = small();
        let bytes = encode_checkpoint(&p, 0, None, &c).unwrap();
        assert!(decode_checkpoint(&bytes).unwrap().optimizer.is_none());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Data(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Data(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Data(_))));
    }

    #[test]
    fn file_round_trip() {
        let (c, p) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/model.ckpt");
        save_checkpoint(&path, &p, 3, None, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().step, 3);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
