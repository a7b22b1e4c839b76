//! Checkpoint container: magic `LTRJ`, a version, a UTF-8 key=value config
//! block, then named parameter records (name, shape, little-endian f64 data).
//! Fitted mixtures ride along under `gmm.*` names.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LTRJ";
const VERSION: u32 = 1;

/// A config block plus named parameters, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(config: BTreeMap<String, String>, params: ParamSet) -> Checkpoint {
        Checkpoint { config, params }
    }

    pub fn config_value(&self, key: &str) -> Result<&String> {
        self.config
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint config missing key {key:?}")))
    }
}

/// Serializes a checkpoint to bytes.
pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let mut config_text = String::new();
    for (k, v) in &ck.config {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Config(format!("config key/value not encodable: {k:?}={v:?}")));
        }
        config_text.push_str(k);
        config_text.push('=');
        config_text.push_str(v);
        config_text.push('\n');
    }
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());

    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, tensor) in ck.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint from bytes; errors carry the failing byte offset.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Parse {
                offset: *pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let out = &buf[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    let read_u32 = |pos: &mut usize, what: &str| -> Result<u32> {
        let b = take(pos, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected \"LTRJ\""),
        });
    }
    let version = read_u32(&mut pos, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }

    let config_len = read_u32(&mut pos, "config length")? as usize;
    let config_bytes = take(&mut pos, config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes).map_err(|e| Error::Parse {
        offset: (pos - config_len) as u64,
        detail: format!("config block is not UTF-8: {e}"),
    })?;
    let mut config = BTreeMap::new();
    for (line_no, line) in config_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                offset: (pos - config_len) as u64,
                detail: format!("config line {} has no '=': {line:?}", line_no + 1),
            });
        };
        config.insert(k.to_string(), v.to_string());
    }

    let count = read_u32(&mut pos, "parameter count")? as usize;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name_len = read_u32(&mut pos, "name length")? as usize;
        let name_bytes = take(&mut pos, name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::Parse {
                offset: (pos - name_len) as u64,
                detail: format!("parameter {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = read_u32(&mut pos, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos, "dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let b = take(&mut pos, 8, "parameter data")?;
            data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        params.insert(name, Tensor::new_unchecked(shape, data));
    }
    if pos != buf.len() {
        return Err(Error::Parse {
            offset: pos as u64,
            detail: format!("{} unexpected trailing bytes", buf.len() - pos),
        });
    }
    Ok(Checkpoint { config, params })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Lays a fitted mixture out as checkpoint records under the `gmm.` section.
pub fn gmm_to_params(gmm: &GaussianMixture) -> ParamSet {
    let mut params = ParamSet::new();
    params.insert("gmm.weights", Tensor::vector(gmm.weights.clone()));
    for (k, mean) in gmm.means.iter().enumerate() {
        params.insert(format!("gmm.mean.{k}"), mean.clone());
    }
    for (k, cov) in gmm.covariances.iter().enumerate() {
        params.insert(format!("gmm.cov.{k}"), cov.clone());
    }
    params
}

/// Reads a mixture back out of a checkpoint's `gmm.` section.
pub fn gmm_from_checkpoint(ck: &Checkpoint) -> Result<GaussianMixture> {
    let k: usize = ck
        .config_value("gmm.k")?
        .parse()
        .map_err(|e| Error::Config(format!("bad gmm.k: {e}")))?;
    let weights = ck.params.get("gmm.weights")?.data().to_vec();
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        means.push(ck.params.get(&format!("gmm.mean.{j}"))?.clone());
        covariances.push(ck.params.get(&format!("gmm.cov.{j}"))?.clone());
    }
    let gmm = GaussianMixture {
        weights,
        means,
        covariances,
    };
    gmm.validate()?;
    Ok(gmm)
}
