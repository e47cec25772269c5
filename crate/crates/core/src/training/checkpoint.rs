//! Single-file checkpoint container. All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "GCDMCKPT"
//! version      u32
//! config_len   u64
//! config       config_len bytes of UTF-8 TOML
//! tensor_count u32
//! tensor       repeated tensor_count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32       always 2
//!   dims       ndim × u64
//!   data       Π dims × f64, row-major
//! rng_seed     32 bytes
//! rng_stream   u64
//! rng_word_pos u128
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerConfig, OptimizerState};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::gcpnet::{GcpNet, GcpNetConfig, ParameterSet};
use crate::moldata::{FeatureScaler, SizeDistribution};
use crate::tape::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam_m/";
const V_PREFIX: &str = "adam_v/";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GcpNetConfig,
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub schedule: ScheduleConfig,
    pub scaler: FeatureScaler,
    pub sizes: SizeDistribution,
    pub rng: RngState,
}

impl Checkpoint {
    /// Rebuilds the network, checking parameters against the configuration.
    pub fn network(&self) -> Result<GcpNet> {
        GcpNet::from_parts(self.model.clone(), self.params.clone())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    optimizer_step: u64,
    model: GcpNetConfig,
    schedule: ScheduleConfig,
    scaler: FeatureScaler,
    optimizer: OptimizerConfig,
    sizes: BTreeMap<String, u64>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Mat) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let block = ConfigBlock {
        optimizer_step: ckpt.optimizer.step,
        model: ckpt.model.clone(),
        schedule: ckpt.schedule.clone(),
        scaler: ckpt.scaler,
        optimizer: ckpt.optimizer.config.clone(),
        sizes: ckpt.sizes.counts().iter().map(|(n, c)| (n.to_string(), *c)).collect(),
    };
    let config = toml::to_string(&block).map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let count = 3 * ckpt.params.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, values) in [
        (PARAM_PREFIX, ckpt.params.values()),
        (M_PREFIX, &ckpt.optimizer.m[..]),
        (V_PREFIX, &ckpt.optimizer.v[..]),
    ] {
        for (name, m) in ckpt.params.names().iter().zip(values) {
            put_tensor(&mut out, &format!("{prefix}{name}"), m);
        }
    }
    out.extend_from_slice(&ckpt.rng.seed);
    out.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }

    fn tensor(&mut self) -> Result<(String, Mat)> {
        let name_len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32("tensor rank")?;
        if ndim != 2 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {ndim}, expected 2")));
        }
        let rows = self.len("tensor shape")?;
        let cols = self.len("tensor shape")?;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading tensor `{name}`")))?;
        let data = self.take(count * 8, "tensor data")?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((rows, cols), values).expect("length checked");
        Ok((name, m))
    }
}

/// Parses and validates checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch (truncated or corrupt file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let config_len = r.len("config length")?;
    let config = std::str::from_utf8(r.take(config_len, "config block")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let block: ConfigBlock = toml::from_str(config).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    block.model.validate()?;
    block.optimizer.validate()?;
    block.scaler.validate()?;
    let sizes = block
        .sizes
        .iter()
        .map(|(k, &c)| {
            k.parse::<usize>()
                .map(|n| (n, c))
                .map_err(|_| Error::Checkpoint(format!("size key `{k}` is not an integer")))
        })
        .collect::<Result<BTreeMap<usize, u64>>>()?;
    let sizes = SizeDistribution::from_counts(sizes)?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    if count % 3 != 0 {
        return Err(Error::Checkpoint(format!("tensor count {count} is not a multiple of 3")));
    }
    let k = count / 3;
    let mut params = ParameterSet::new();
    let (mut m, mut v) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for (i, (name, value)) in tensors.into_iter().enumerate() {
        let (prefix, group) = match i / k {
            0 => (PARAM_PREFIX, None),
            1 => (M_PREFIX, Some(&mut m)),
            _ => (V_PREFIX, Some(&mut v)),
        };
        let Some(short) = name.strip_prefix(prefix) else {
            return Err(Error::Checkpoint(format!("tensor `{name}` out of order, expected prefix `{prefix}`")));
        };
        match group {
            None => {
                params.push(short, value)?;
            }
            Some(group) => {
                let expected = &params.names()[group.len()];
                if short != expected {
                    return Err(Error::Checkpoint(format!("tensor `{name}` does not match parameter `{expected}`")));
                }
                group.push(value);
            }
        }
    }
    let net = GcpNet::from_parts(block.model.clone(), params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = net.params().clone();
    let optimizer = OptimizerState {
        config: block.optimizer,
        step: block.optimizer_step,
        m,
        v,
    };
    optimizer
        .check_shapes(&params)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        model: block.model,
        params,
        optimizer,
        schedule: block.schedule,
        scaler: block.scaler,
        sizes,
        rng: RngState { seed, stream, word_pos },
    })
}

/// Writes `ckpt` to `path` through a temporary sibling file and a rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_checkpoint() -> Checkpoint {
        let model = GcpNetConfig {
            num_layers: 1,
            node_scalar_dim: 3,
            node_vector_dim: 2,
            edge_scalar_dim: 2,
            edge_vector_dim: 1,
            ..Default::default()
        };
        let net = GcpNet::new(model.clone(), 4).unwrap();
        let mut optimizer = OptimizerState::new(OptimizerConfig::default(), net.params()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (m, v) in optimizer.m.iter_mut().zip(optimizer.v.iter_mut()) {
            m.mapv_inplace(|_| rng.random::<f64>() - 0.5);
            v.mapv_inplace(|_| rng.random::<f64>());
        }
        optimizer.step = 17;
        let _: u64 = rng.random();
        Checkpoint {
            model,
            params: net.params().clone(),
            optimizer,
            schedule: ScheduleConfig::default(),
            scaler: FeatureScaler::default(),
            sizes: SizeDistribution::from_counts(BTreeMap::from([(3, 2), (19, 5)])).unwrap(),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample_checkpoint();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: [u64; 5] = rng.random();
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }

    #[test]
    fn truncation_and_corruption_fail() {
        let bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
        for cut in [0, 5, 12, 100, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(decode_checkpoint(&flipped).is_err());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
        bytes[8] = 99;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }
}
