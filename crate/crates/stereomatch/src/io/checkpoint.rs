//! Versioned checkpoint container.
//!
//! Layout: magic + version, RNG seed, the architecture config as canonical
//! JSON, then one record per named tensor (name, dims, little-endian f32
//! payload, CRC-32), and an optional optimizer-state section. Writes go
//! through a temp file and a rename so checkpoints are never half-written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StereoModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// Optimizer accumulators stored alongside the weights.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step_count: u64,
    /// `(param name, first moment, second moment)` in parameter order.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

/// In-memory checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: ModelConfig,
    /// `(name, shape, values)` for every model tensor, buffers included.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[dims.len() as u8])?;
    for d in dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.write_all(&crc32(&payload).to_le_bytes())?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| ck_err(format!("truncated {what}")))
}

fn read_record<R: Read>(r: &mut R) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let mut b2 = [0u8; 2];
    read_exact_or(r, &mut b2, "record header")?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name = vec![0u8; name_len];
    read_exact_or(r, &mut name, "record name")?;
    let name = String::from_utf8(name).map_err(|_| ck_err("non-utf8 tensor name"))?;
    let mut b1 = [0u8; 1];
    read_exact_or(r, &mut b1, &format!("rank of {name}"))?;
    let ndim = b1[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b8 = [0u8; 8];
        read_exact_or(r, &mut b8, &format!("dims of {name}"))?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    read_exact_or(r, &mut payload, &format!("payload of {name}"))?;
    let mut b4 = [0u8; 4];
    read_exact_or(r, &mut b4, &format!("checksum of {name}"))?;
    if u32::from_le_bytes(b4) != crc32(&payload) {
        return Err(ck_err(format!("checksum failure in tensor {name}")));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, dims, data))
}

impl Checkpoint {
    /// Snapshot a model's entire named state.
    pub fn from_model(model: &StereoModel<f32>, seed: u64) -> Self {
        let mut tensors = Vec::new();
        model.visit_params(&mut |name, p| {
            let t = p.get();
            tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        });
        Checkpoint {
            seed,
            config: model.cfg.clone(),
            tensors,
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, state: OptimizerState) -> Self {
        self.optimizer = Some(state);
        self
    }

    /// Serialize atomically (write temp file, then rename over the target).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp)?;
            let mut w = BufWriter::new(file);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&self.seed.to_le_bytes())?;
            let cfg = serde_json::to_vec(&self.config)
                .map_err(|e| ck_err(format!("config serialization: {e}")))?;
            w.write_all(&(cfg.len() as u32).to_le_bytes())?;
            w.write_all(&cfg)?;
            w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
            for (name, dims, data) in &self.tensors {
                write_record(&mut w, name, dims, data)?;
            }
            match &self.optimizer {
                None => w.write_all(&[0u8])?,
                Some(opt) => {
                    w.write_all(&[1u8])?;
                    w.write_all(&opt.step_count.to_le_bytes())?;
                    w.write_all(&(opt.moments.len() as u32).to_le_bytes())?;
                    for (name, m, v) in &opt.moments {
                        write_record(&mut w, &format!("{name}.m"), &[m.len()], m)?;
                        write_record(&mut w, &format!("{name}.v"), &[v.len()], v)?;
                    }
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact_or(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(ck_err("bad magic; not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        read_exact_or(&mut r, &mut b4, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(ck_err(format!(
                "version mismatch: file {version}, supported {VERSION}"
            )));
        }
        let mut b8 = [0u8; 8];
        read_exact_or(&mut r, &mut b8, "seed")?;
        let seed = u64::from_le_bytes(b8);
        read_exact_or(&mut r, &mut b4, "config length")?;
        let mut cfg = vec![0u8; u32::from_le_bytes(b4) as usize];
        read_exact_or(&mut r, &mut cfg, "config")?;
        let config: ModelConfig =
            serde_json::from_slice(&cfg).map_err(|e| ck_err(format!("config parse: {e}")))?;
        read_exact_or(&mut r, &mut b4, "tensor count")?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(read_record(&mut r)?);
        }
        let mut b1 = [0u8; 1];
        read_exact_or(&mut r, &mut b1, "optimizer flag")?;
        let optimizer = if b1[0] == 1 {
            read_exact_or(&mut r, &mut b8, "optimizer step count")?;
            let step_count = u64::from_le_bytes(b8);
            read_exact_or(&mut r, &mut b4, "optimizer moment count")?;
            let n = u32::from_le_bytes(b4) as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let (mname, _, m) = read_record(&mut r)?;
                let (vname, _, v) = read_record(&mut r)?;
                let base = mname
                    .strip_suffix(".m")
                    .ok_or_else(|| ck_err(format!("unexpected moment record {mname}")))?;
                if vname != format!("{base}.v") {
                    return Err(ck_err(format!("optimizer records out of order at {mname}")));
                }
                moments.push((base.to_string(), m, v));
            }
            Some(OptimizerState {
                step_count,
                moments,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            seed,
            config,
            tensors,
            optimizer,
        })
    }

    /// Copy stored tensors into a model built with the same config.
    /// Shape or name disagreements are errors naming the tensor.
    pub fn apply_to_model(&self, model: &StereoModel<f32>) -> Result<()> {
        if model.cfg != self.config {
            return Err(ck_err(
                "config conflict: checkpoint architecture differs from the target model"
                    .to_string(),
            ));
        }
        let named = model.named_params();
        if named.len() != self.tensors.len() {
            return Err(ck_err(format!(
                "tensor count mismatch: checkpoint {} vs model {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, dims, data), (mname, param)) in self.tensors.iter().zip(&named) {
            if name != mname {
                return Err(ck_err(format!(
                    "tensor name mismatch: checkpoint {name} vs model {mname}"
                )));
            }
            if *dims != param.shape() || data.len() != param.len() {
                return Err(ck_err(format!(
                    "shape mismatch in tensor {name}: checkpoint {dims:?} vs model {:?}",
                    param.shape()
                )));
            }
            param.set(Tensor::from_vec(data.clone(), dims)?);
        }
        Ok(())
    }
}

/// Build a model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(StereoModel<f32>, Checkpoint)> {
    use rand::SeedableRng;
    let ckpt = Checkpoint::load(path)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ckpt.seed);
    let model = StereoModel::new(&mut rng, &ckpt.config)?;
    ckpt.apply_to_model(&model)?;
    Ok((model, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> StereoModel<f32> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                stage_widths: [4, 6, 8],
                feature_dim: 8,
                blocks_per_stage: 1,
                hidden_dim: 4,
                context_dim: 4,
                ..EncoderConfig::default()
            },
            corr_radius: 2,
            corr_enc_dim: 4,
            disp_enc_dim: 4,
            head_hidden_dim: 4,
            mask_hidden_dim: 8,
            ..ModelConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        StereoModel::new(&mut rng, &cfg).unwrap()
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(60);
        Checkpoint::from_model(&model, 60).save(&path).unwrap();
        let (restored, ckpt) = load_model(&path).unwrap();
        assert_eq!(ckpt.seed, 60);
        let a = model.named_params();
        let b = restored.named_params();
        for ((n1, p1), (n2, p2)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            assert_eq!(
                p1.get().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                p2.get().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(61);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        Checkpoint::from_model(&model, 61).save(&p1).unwrap();
        Checkpoint::from_model(&model, 61).save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_payload_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(62);
        Checkpoint::from_model(&model, 62).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(
            err.contains("checksum") || err.contains("truncated"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(63);
        Checkpoint::from_model(&model, 63).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn config_conflict_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model3 = tiny_model(64);
        Checkpoint::from_model(&model3, 64).save(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        let mut cfg1 = ckpt.config.clone();
        cfg1.encoder.levels = 1;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model1 = StereoModel::new(&mut rng, &cfg1).unwrap();
        let err = ckpt.apply_to_model(&model1).unwrap_err().to_string();
        assert!(err.contains("config conflict"), "{err}");
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(65);
        let state = OptimizerState {
            step_count: 123,
            moments: vec![("w".to_string(), vec![0.5, -0.25], vec![0.1, 0.2])],
        };
        Checkpoint::from_model(&model, 65)
            .with_optimizer(state)
            .save(&path)
            .unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let opt = back.optimizer.unwrap();
        assert_eq!(opt.step_count, 123);
        assert_eq!(opt.moments[0].1, vec![0.5, -0.25]);
        assert_eq!(opt.moments[0].2, vec![0.1, 0.2]);
    }
}
