//! Audio, text and multimodal transformer encoders.

mod params;

use std::collections::BTreeMap;
use std::path::Path;

pub use params::{Parameters, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, TAU_MAX, TAU_MIN, TAU_NAME};
pub(crate) use params::round_f32;

use crate::audio::MelSpectrogram;
use crate::autograd::{Graph, NodeId};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::Mat;
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_audio: usize,
    pub n_layers_text: usize,
    pub n_layers_mm: usize,
    pub ffn_mult: usize,
    pub conv_width: usize,
    pub conv2_stride: usize,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_audio_patches: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers_audio: 4,
            n_layers_text: 4,
            n_layers_mm: 2,
            ffn_mult: 4,
            conv_width: 16,
            conv2_stride: 10,
            n_mels: crate::audio::N_MELS,
            vocab_size: 8192,
            max_text_len: 64,
            max_audio_patches: 128,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_audio", self.n_layers_audio),
            ("n_layers_text", self.n_layers_text),
            ("n_layers_mm", self.n_layers_mm),
            ("ffn_mult", self.ffn_mult),
            ("conv_width", self.conv_width),
            ("conv2_stride", self.conv2_stride),
            ("n_mels", self.n_mels),
            ("max_text_len", self.max_text_len),
            ("max_audio_patches", self.max_audio_patches),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{k} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::tokenizer::N_SPECIALS {
            return Err(Error::Config("model.vocab_size must exceed the 4 specials".into()));
        }
        Ok(())
    }

    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        let c = ModelConfig {
            d_model: cfg.get("model.d_model")?,
            n_heads: cfg.get("model.n_heads")?,
            n_layers_audio: cfg.get("model.n_layers_audio")?,
            n_layers_text: cfg.get("model.n_layers_text")?,
            n_layers_mm: cfg.get("model.n_layers_mm")?,
            ffn_mult: cfg.get("model.ffn_mult")?,
            conv_width: cfg.get("model.conv_width")?,
            conv2_stride: cfg.get("model.conv2_stride")?,
            n_mels: cfg.get("model.n_mels")?,
            vocab_size: cfg.get("model.vocab_size")?,
            max_text_len: cfg.get("model.max_text_len")?,
            max_audio_patches: cfg.get("model.max_audio_patches")?,
            seed: cfg.get("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// `key=value` lines using the `model.*` keys (plus `seed`).
    pub fn to_kv(&self) -> String {
        format!(
            "model.d_model={}\nmodel.n_heads={}\nmodel.n_layers_audio={}\nmodel.n_layers_text={}\n\
             model.n_layers_mm={}\nmodel.ffn_mult={}\nmodel.conv_width={}\nmodel.conv2_stride={}\n\
             model.n_mels={}\nmodel.vocab_size={}\nmodel.max_text_len={}\nmodel.max_audio_patches={}\nseed={}\n",
            self.d_model,
            self.n_heads,
            self.n_layers_audio,
            self.n_layers_text,
            self.n_layers_mm,
            self.ffn_mult,
            self.conv_width,
            self.conv2_stride,
            self.n_mels,
            self.vocab_size,
            self.max_text_len,
            self.max_audio_patches,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::defaults();
        let parsed = RunConfig::parse_lines(text)?;
        for (k, v) in &parsed {
            if k.starts_with("model.") || k == "seed" {
                cfg.set(k, v.clone())?;
            }
        }
        ModelConfig::from_run_config(&cfg)
    }

    /// Number of patches produced from `frames` mel frames.
    pub fn patch_count(&self, frames: usize) -> usize {
        frames.div_ceil(self.conv2_stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Text,
    Multimodal,
}

/// Encoder output: the CLS state and one vector per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub cls: Vec<f64>,
    pub sequence: Mat,
    pub modality: Modality,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.sequence.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.rows() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().all(|v| v.is_finite()) && self.sequence.is_finite()
    }
}

/// Maps each multimodal position (CLS excluded) back to its source.
pub type Provenance = Vec<(Modality, usize)>;

/// Sinusoidal position table: `sin(p / 10000^(2k/d))` at even dimension
/// `2k`, `cos` of the same angle at `2k + 1`.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Mat {
    let mut m = Mat::zeros(len, d_model);
    for p in 0..len {
        for i in 0..d_model {
            let k2 = (i - i % 2) as f64;
            let angle = p as f64 / 10000f64.powf(k2 / d_model as f64);
            m.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Graph nodes of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// `1 x d`
    pub cls: NodeId,
    /// `n x d`, absent when the input has no positions beyond CLS
    pub seq: Option<NodeId>,
    pub len: usize,
}

/// A forward pass under construction, binding parameters lazily as graph leaves.
pub struct Forward<'m> {
    pub graph: Graph,
    pub model: &'m Model,
    bound: BTreeMap<String, NodeId>,
    track_grads: bool,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model, track_grads: bool) -> Self {
        Forward {
            graph: Graph::new(),
            model,
            bound: BTreeMap::new(),
            track_grads,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let v = self.model.params.get(name)?.clone();
        let id = if self.track_grads {
            self.graph.param(v)
        } else {
            self.graph.constant(v)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Parameter names bound so far, with their nodes.
    pub fn bound(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn affine_ln(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let n = self.graph.layer_norm(x, LN_EPS);
        let n = self.graph.mul_row(n, g);
        Ok(self.graph.add_row(n, b))
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let y = self.graph.matmul(x, w);
        Ok(self.graph.add_row(y, b))
    }

    fn attention(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let d = self.config().d_model;
        let heads = self.config().n_heads;
        let dh = d / heads;
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let g = &mut self.graph;
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { self.graph.concat_cols(&outs) };
        self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn block(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.affine_ln(x, &format!("{prefix}.ln1"))?;
        let a = self.attention(h, &format!("{prefix}.attn"))?;
        let x = self.graph.add(x, a);
        let h = self.affine_ln(x, &format!("{prefix}.ln2"))?;
        let f = self.linear(h, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
        let f = self.graph.gelu(f);
        let f = self.linear(f, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;
        Ok(self.graph.add(x, f))
    }

    /// Prepends the encoder's CLS vector, adds positions, runs the blocks.
    fn encoder(&mut self, prefix: &str, layers: usize, body: Option<NodeId>) -> Result<EncoderNodes> {
        let cls = self.param(&format!("{prefix}.cls"))?;
        let x = match body {
            Some(b) => self.graph.concat_rows(&[cls, b]),
            None => cls,
        };
        let len = self.graph.value(x).rows();
        let pos = self.graph.constant(sinusoidal_positions(len, self.config().d_model));
        let mut x = self.graph.add(x, pos);
        for l in 0..layers {
            x = self.block(x, &format!("{prefix}.block{l}"))?;
        }
        let x = self.affine_ln(x, &format!("{prefix}.ln_f"))?;
        let cls_out = self.graph.slice_rows(x, 0, 1);
        let seq = (len > 1).then(|| self.graph.slice_rows(x, 1, len - 1));
        Ok(EncoderNodes {
            cls: cls_out,
            seq,
            len: len - 1,
        })
    }

    /// Two-layer convolutional stem: width-`conv_width` "same" conv, then a
    /// strided conv producing `ceil(frames / stride)` patches; GELU after each.
    pub fn patch_embed(&mut self, mel: &MelSpectrogram) -> Result<NodeId> {
        let cfg = self.config();
        let (k, stride) = (cfg.conv_width, cfg.conv2_stride);
        if mel.n_mels() != cfg.n_mels {
            return Err(Error::InvalidInput(format!(
                "mel has {} channels, model expects {}",
                mel.n_mels(),
                cfg.n_mels
            )));
        }
        let t = mel.frames();
        if t < k {
            return Err(Error::InvalidInput(format!(
                "mel has {t} frames, fewer than one conv kernel of width {k}"
            )));
        }
        let x = Mat::from_vec(t, mel.n_mels(), mel.values().iter().map(|&v| v as f64).collect());
        let x = self.graph.constant(x);
        let u = self.graph.unfold(x, k, 1, (k - 1) / 2, t);
        let h = self.linear(u, "audio.conv1.w", "audio.conv1.b")?;
        let h = self.graph.gelu(h);
        let out_len = t.div_ceil(stride);
        let pad_total = ((out_len - 1) * stride + k).saturating_sub(t);
        let u = self.graph.unfold(h, k, stride, pad_total / 2, out_len);
        let h = self.linear(u, "audio.conv2.w", "audio.conv2.b")?;
        Ok(self.graph.gelu(h))
    }

    /// Audio encoder over patch vectors; masked positions (1-based, as in
    /// the plan) are replaced by the learned mask embedding first.
    pub fn audio_encode(&mut self, patches: NodeId, plan: Option<&MaskPlan>) -> Result<EncoderNodes> {
        let n = self.graph.value(patches).rows();
        let limit = self.config().max_audio_patches;
        if n == 0 {
            return Err(Error::InvalidInput("audio input has no patches".into()));
        }
        if n > limit {
            return Err(Error::TooLong {
                what: "audio patches",
                len: n,
                limit,
            });
        }
        let mut x = patches;
        if let Some(plan) = plan.filter(|p| !p.is_empty()) {
            if plan.seq_len() != n + 1 {
                return Err(Error::InvalidInput(format!(
                    "audio mask plan covers {} positions, input has {n} patches",
                    plan.seq_len() - 1
                )));
            }
            let rows: Vec<usize> = plan.positions().iter().map(|p| p - 1).collect();
            let m = self.param("audio.mask_emb")?;
            x = self.graph.replace_rows(x, &rows, m);
        }
        let layers = self.config().n_layers_audio;
        self.encoder("audio", layers, Some(x))
    }

    /// Text encoder over CLS-prefixed ids; the CLS slot uses the learned
    /// text CLS vector.
    pub fn text_encode(&mut self, ids: &[u32]) -> Result<EncoderNodes> {
        let cfg = self.config();
        if ids.is_empty() {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if ids.len() > cfg.max_text_len {
            return Err(Error::TooLong {
                what: "text tokens",
                len: ids.len(),
                limit: cfg.max_text_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: cfg.vocab_size,
            });
        }
        let body = if ids.len() > 1 {
            let emb = self.param("text.tok_emb")?;
            let idx: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
            Some(self.graph.gather_rows(emb, &idx))
        } else {
            None
        };
        let layers = self.config().n_layers_text;
        self.encoder("text", layers, body)
    }

    /// Fusion encoder over `[MM-CLS] ++ audio sequence ++ text sequence`.
    pub fn multimodal_encode(&mut self, audio: &EncoderNodes, text: &EncoderNodes) -> Result<(EncoderNodes, Provenance)> {
        let limit = self.config().max_audio_patches + self.config().max_text_len;
        let total = audio.len + text.len;
        if total > limit {
            return Err(Error::TooLong {
                what: "multimodal sequence",
                len: total,
                limit,
            });
        }
        let parts: Vec<NodeId> = [audio.seq, text.seq].into_iter().flatten().collect();
        let body = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(self.graph.concat_rows(&parts)),
        };
        let layers = self.config().n_layers_mm;
        let out = self.encoder("mm", layers, body)?;
        let provenance = (0..audio.len)
            .map(|i| (Modality::Audio, i))
            .chain((0..text.len).map(|i| (Modality::Text, i)))
            .collect();
        Ok((out, provenance))
    }

    pub fn hidden_states(&self, nodes: &EncoderNodes, modality: Modality) -> HiddenStates {
        let d = self.config().d_model;
        HiddenStates {
            cls: self.graph.value(nodes.cls).row(0).to_vec(),
            sequence: nodes
                .seq
                .map_or_else(|| Mat::zeros(0, d), |s| self.graph.value(s).clone()),
            modality,
        }
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn init(config: ModelConfig, tau_init: f64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, tau_init);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Model { config, params })
    }

    pub fn forward(&self, track_grads: bool) -> Forward<'_> {
        Forward::new(self, track_grads)
    }

    pub fn patch_embed(&self, mel: &MelSpectrogram) -> Result<Mat> {
        let mut f = self.forward(false);
        let p = f.patch_embed(mel)?;
        Ok(f.graph.value(p).clone())
    }

    pub fn audio_encode(&self, patches: &Mat) -> Result<HiddenStates> {
        let mut f = self.forward(false);
        let p = f.graph.constant(patches.clone());
        let nodes = f.audio_encode(p, None)?;
        Ok(f.hidden_states(&nodes, Modality::Audio))
    }

    pub fn text_encode(&self, tokens: &TokenSequence) -> Result<HiddenStates> {
        let mut f = self.forward(false);
        let nodes = f.text_encode(tokens.ids())?;
        Ok(f.hidden_states(&nodes, Modality::Text))
    }

    pub fn multimodal_encode(&self, audio: &HiddenStates, text: &HiddenStates) -> Result<(HiddenStates, Provenance)> {
        let d = self.config.d_model;
        for h in [audio, text] {
            if h.sequence.rows() > 0 && h.sequence.cols() != d {
                return Err(Error::InvalidInput(format!(
                    "hidden states have width {}, model d_model is {d}",
                    h.sequence.cols()
                )));
            }
        }
        let mut f = self.forward(false);
        let mut wrap = |h: &HiddenStates| {
            let cls = f.graph.constant(Mat::row_vector(&h.cls));
            let seq = (!h.is_empty()).then(|| f.graph.constant(h.sequence.clone()));
            EncoderNodes { cls, seq, len: h.len() }
        };
        let a = wrap(audio);
        let t = wrap(text);
        let (nodes, prov) = f.multimodal_encode(&a, &t)?;
        Ok((f.hidden_states(&nodes, Modality::Multimodal), prov))
    }

    /// Audio hidden states straight from a mel spectrogram.
    pub fn encode_mel(&self, mel: &MelSpectrogram) -> Result<HiddenStates> {
        let mut f = self.forward(false);
        let p = f.patch_embed(mel)?;
        let nodes = f.audio_encode(p, None)?;
        Ok(f.hidden_states(&nodes, Modality::Audio))
    }

    /// Writes the binary checkpoint and its `key=value` model config next
    /// to it (`<path>.cfg`), each atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::io::atomic_write(path, |w| self.params.write_to(w))?;
        crate::io::atomic_write(config_sidecar(path), |w| {
            w.write_all(self.config.to_kv().as_bytes())?;
            Ok(())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_sidecar(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = ModelConfig::from_kv(&text)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let params = Parameters::read_from(&mut bytes.as_slice())?;
        Model::from_parts(config, params)
    }
}

/// `<checkpoint>.cfg`
pub fn config_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    s.into()
}
