use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{read_exact_at, read_u32_at};
use crate::error::{Error, Result};
use crate::masking::derive_seed;
use crate::tensor::Mat;

use super::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_NAME: &str = "loss.tau";

/// Named real-valued arrays. Values are kept exactly representable in f32
/// so that checkpoints round-trip bitwise.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Parameters {
    arrays: BTreeMap<String, Mat>,
}

pub(crate) fn round_f32(m: &mut Mat) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

struct Init<'a> {
    seed: u64,
    arrays: &'a mut BTreeMap<String, Mat>,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[name_hash(name)]));
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        let mut m = Mat::from_vec(rows, cols, data);
        round_f32(&mut m);
        self.arrays.insert(name.to_string(), m);
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        let mut m = Mat::filled(rows, cols, v);
        round_f32(&mut m);
        self.arrays.insert(name.to_string(), m);
    }

    fn block(&mut self, prefix: &str, d: usize, ffn: usize, out_std: f64) {
        self.fill(&format!("{prefix}.ln1.g"), 1, d, 1.0);
        self.fill(&format!("{prefix}.ln1.b"), 1, d, 0.0);
        for w in ["q", "k", "v"] {
            self.normal(&format!("{prefix}.attn.w{w}"), d, d, 0.02);
            self.fill(&format!("{prefix}.attn.b{w}"), 1, d, 0.0);
        }
        self.normal(&format!("{prefix}.attn.wo"), d, d, out_std);
        self.fill(&format!("{prefix}.attn.bo"), 1, d, 0.0);
        self.fill(&format!("{prefix}.ln2.g"), 1, d, 1.0);
        self.fill(&format!("{prefix}.ln2.b"), 1, d, 0.0);
        self.normal(&format!("{prefix}.ffn.w1"), d, ffn, 0.02);
        self.fill(&format!("{prefix}.ffn.b1"), 1, ffn, 0.0);
        self.normal(&format!("{prefix}.ffn.w2"), ffn, d, out_std);
        self.fill(&format!("{prefix}.ffn.b2"), 1, d, 0.0);
    }

    fn encoder(&mut self, prefix: &str, layers: usize, d: usize, ffn: usize) {
        let out_std = 0.02 / (2.0 * layers as f64).sqrt();
        for l in 0..layers {
            self.block(&format!("{prefix}.block{l}"), d, ffn, out_std);
        }
        self.fill(&format!("{prefix}.ln_f.g"), 1, d, 1.0);
        self.fill(&format!("{prefix}.ln_f.b"), 1, d, 0.0);
        self.normal(&format!("{prefix}.cls"), 1, d, 0.02);
    }
}

impl Parameters {
    /// Scaled-normal initialization (std 0.02; residual output projections
    /// divided by `sqrt(2 * n_layers)`), seeded by `config.seed`.
    pub fn init(config: &ModelConfig, tau_init: f64) -> Self {
        let d = config.d_model;
        let ffn = d * config.ffn_mult;
        let k = config.conv_width;
        let mut arrays = BTreeMap::new();
        let mut init = Init {
            seed: config.seed,
            arrays: &mut arrays,
        };
        init.normal("audio.conv1.w", k * config.n_mels, d, 0.02);
        init.fill("audio.conv1.b", 1, d, 0.0);
        init.normal("audio.conv2.w", k * d, d, 0.02);
        init.fill("audio.conv2.b", 1, d, 0.0);
        init.normal("audio.mask_emb", 1, d, 0.02);
        init.encoder("audio", config.n_layers_audio, d, ffn);

        init.normal("text.tok_emb", config.vocab_size, d, 0.02);
        init.encoder("text", config.n_layers_text, d, ffn);

        init.encoder("mm", config.n_layers_mm, d, ffn);

        init.normal("heads.mlm.w", d, config.vocab_size, 0.02);
        init.fill("heads.mlm.b", 1, config.vocab_size, 0.0);
        init.normal("heads.mmm.w", d, config.vocab_size, 0.02);
        init.fill("heads.mmm.b", 1, config.vocab_size, 0.0);
        init.normal("heads.mmc_audio.w", d, d, 0.02);
        init.normal("heads.mmc_text.w", d, d, 0.02);
        init.normal("heads.atm.w", d, 1, 0.02);
        init.fill("heads.atm.b", 1, 1, 0.0);
        init.fill(TAU_NAME, 1, 1, tau_init.clamp(TAU_MIN, TAU_MAX));
        Parameters { arrays }
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.arrays.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.arrays.insert(name.into(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Mat::is_finite)
    }

    pub fn tau(&self) -> f64 {
        self.arrays.get(TAU_NAME).map_or(0.07, Mat::item)
    }

    /// Binary array records: magic, version, then per array
    /// `(u32 name_len, name, u32 rank, u32 dims.., f32 data..)`, all LE.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, m) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.len() * 4);
            for &v in m.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let total = bytes.len() as u64;
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact_at(&mut cur, &mut magic, "WBCK", 0)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                format: "WBCK",
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = read_u32_at(&mut cur, "WBCK", 4)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut arrays = BTreeMap::new();
        let mut index = 0;
        while cur.position() < total {
            let start = cur.position();
            let trunc = |_| Error::Truncated {
                format: "WBCK",
                index,
                offset: start,
            };
            let name_len = read_u32_at(&mut cur, "WBCK", start).map_err(trunc)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact_at(&mut cur, &mut name, "WBCK", start).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                format: "WBCK",
                offset: start,
                reason: "array name is not UTF-8".into(),
            })?;
            let rank = read_u32_at(&mut cur, "WBCK", start).map_err(trunc)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32_at(&mut cur, "WBCK", start).map_err(trunc)? as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => {
                    return Err(Error::Format {
                        format: "WBCK",
                        offset: start,
                        reason: format!("array `{name}` has unsupported rank {rank}"),
                    })
                }
            };
            let n = rows * cols;
            if (n as u64) * 4 > total - cur.position() {
                return Err(Error::Truncated {
                    format: "WBCK",
                    index,
                    offset: start,
                });
            }
            let mut buf = vec![0u8; n * 4];
            read_exact_at(&mut cur, &mut buf, "WBCK", start).map_err(trunc)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            arrays.insert(name, Mat::from_vec(rows, cols, data));
            index += 1;
        }
        Ok(Parameters { arrays })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Checks that every array expected by `config` is present with the
    /// right shape.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let reference = Parameters::init(&ModelConfig { seed: 0, ..config.clone() }, 0.07);
        for (name, m) in &reference.arrays {
            let have = self.get(name)?;
            if have.shape() != m.shape() {
                return Err(Error::InvalidInput(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    have.shape(),
                    m.shape()
                )));
            }
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }
}
