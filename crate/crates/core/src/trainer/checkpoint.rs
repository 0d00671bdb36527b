//! Binary checkpoint format.
//!
//! Layout: `b"MDIT"`, format version (u32 LE), manifest length (u64 LE),
//! JSON manifest, tensor payload as f32 LE in manifest order, CRC-64 (u64 LE)
//! of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainState;
use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::init::Scheme;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"MDIT";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);
const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    pub adam_step: u64,
    pub phase2_start: Option<u64>,
    pub config_hash: String,
    pub config: RunConfig,
    pub rng: RngRecord,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub state: TrainState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Checkpoint(format!("odd-length hex string {s:?}")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Checkpoint(format!("bad hex: {e}"))))
        .collect()
}

fn rng_record(rng: &ChaCha8Rng) -> RngRecord {
    RngRecord {
        seed: hex(&rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(rec: &RngRecord) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = unhex(&rec.seed)?
        .try_into()
        .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = rec
        .word_pos
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad rng word position: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(rec.stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn stores(state: &TrainState) -> [&ParamStore<f32>; 4] {
    [&state.params, &state.ema, &state.adam.m, &state.adam.v]
}

pub fn encode(state: &TrainState, cfg: &RunConfig) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in GROUPS.iter().zip(stores(state)) {
        for (name, shape, values) in store.iter() {
            tensors.push(TensorRecord {
                name: format!("{group}/{name}"),
                shape: shape.to_vec(),
                dtype: "f32".into(),
            });
            payload.extend(values.iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let manifest = Manifest {
        step: state.step,
        adam_step: state.adam.t,
        phase2_start: state.phase2_start,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rng: rng_record(&state.rng),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(24 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&CRC64.checksum(&payload).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated file while reading {what}"))),
        }
    }
}

/// Parses a checkpoint, validating magic, version, checksum and tensor
/// layout against the backbone described by its own config.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)?;

    let (_, template) = Backbone::new::<f32, _>(&manifest.config.backbone, Scheme::Zero, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: Vec<TensorRecord> = GROUPS
        .iter()
        .flat_map(|g| {
            template.iter().map(move |(name, shape, _)| TensorRecord {
                name: format!("{g}/{name}"),
                shape: shape.to_vec(),
                dtype: "f32".into(),
            })
        })
        .collect();
    if manifest.tensors != expected {
        let diff = manifest
            .tensors
            .iter()
            .zip(&expected)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} vs expected {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} tensors vs expected {}", manifest.tensors.len(), expected.len()));
        return Err(Error::Shape(format!("checkpoint tensor layout mismatch: {diff}")));
    }

    let scalars: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload = r.take(scalars * 4, "tensor payload")?;
    let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
    }
    let computed = CRC64.checksum(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut groups = GROUPS.iter().map(|_| {
        let values: Vec<Vec<f32>> = template
            .iter()
            .map(|(_, _, t)| floats.by_ref().take(t.len()).collect())
            .collect();
        let mut store = template.clone();
        store.load_values(values).map(|_| store)
    });
    let params = groups.next().unwrap()?;
    let ema = groups.next().unwrap()?;
    let m = groups.next().unwrap()?;
    let v = groups.next().unwrap()?;
    let state = TrainState {
        params,
        ema,
        adam: AdamState {
            m,
            v,
            t: manifest.adam_step,
        },
        step: manifest.step,
        rng: restore_rng(&manifest.rng)?,
        phase2_start: manifest.phase2_start,
    };
    Ok(Checkpoint { manifest, state })
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    let bytes = encode(state, cfg);
    let tmp = path.with_extension("mdit.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads and additionally requires the stored backbone to match `cfg`.
pub fn load_for_config(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.manifest.config.backbone != cfg.backbone {
        return Err(Error::Shape(format!(
            "checkpoint backbone {:?} does not match requested {:?}",
            ckpt.manifest.config.backbone, cfg.backbone
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::Rng;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone = BackboneConfig {
            input_size: 8,
            encoder_depth: 1,
            encoder_width: 24,
            encoder_heads: 2,
            decoder_depth: 1,
            decoder_width: 12,
            decoder_heads: 2,
            ..BackboneConfig::default()
        };
        cfg.dataset.image_size = 8;
        cfg.dataset.centers = vec![[2.0, 2.0], [5.0, 5.0]];
        cfg
    }

    fn state(cfg: &RunConfig) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, params) = Backbone::new::<f32, _>(&cfg.backbone, Scheme::Dense, &mut rng).unwrap();
        let mut s = TrainState::new(params, rng);
        s.step = 17;
        s.adam.t = 17;
        s.phase2_start = Some(12);
        s.adam.m.tensors_mut()[0][0] = 0.25;
        let _: u64 = s.rng.random();
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let cfg = tiny();
        let s = state(&cfg);
        let back = decode(&encode(&s, &cfg)).unwrap();
        assert_eq!(back.state, s);
        assert_eq!(back.manifest.config, cfg);
        assert_eq!(back.manifest.config_hash, cfg.hash());
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = tiny();
        let bytes = encode(&state(&cfg), &cfg);
        let mut flipped = bytes.clone();
        let idx = bytes.len() - 20;
        flipped[idx] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(Error::Checksum { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(matches!(decode(&versioned), Err(Error::Version { found: 9, .. })));
        assert!(matches!(decode(b"NOPE\x01\x00\x00\x00"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn mismatched_backbone_is_rejected() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mdit");
        save_checkpoint(&state(&cfg), &cfg, &path).unwrap();
        let mut other = cfg.clone();
        other.backbone.encoder_width = 48;
        assert!(matches!(load_for_config(&path, &other), Err(Error::Shape(_))));
        assert!(load_for_config(&path, &cfg).is_ok());
    }
}
