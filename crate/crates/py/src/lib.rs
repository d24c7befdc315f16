//! Python bindings: features, tokenizer, models, corpus filtering,
//! training and evaluation.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use whismm::audio::{self, SAMPLE_RATE};
use whismm::data::{self, Segment};
use whismm::eval::{self, MinimalPair};
use whismm::synthetic::{SyntheticCorpus, SyntheticSpec};
use whismm::trainer::TrainState;
use whismm::{AudioClip, Mat, MelSpectrogram, RunConfig, TokenSequence};

create_exception!(whismm_py, WhismmError, PyValueError);

fn err(e: whismm::Error) -> PyErr {
    WhismmError::new_err(format!("{}: {e}", e.kind()))
}

fn mat(rows: &[Vec<f64>]) -> PyResult<Mat> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != width) {
        return Err(WhismmError::new_err("invalid_input: expected a non-empty rectangular matrix"));
    }
    Ok(Mat::from_rows(rows))
}

fn mel_from_rows(rows: &[Vec<f32>]) -> PyResult<MelSpectrogram> {
    let n_mels = rows.first().map_or(0, Vec::len);
    let values = rows.iter().flatten().copied().collect();
    MelSpectrogram::new(rows.len(), n_mels, values).map_err(err)
}

/// Normalized 80-channel log-mel frames of a mono clip, resampled to
/// 16 kHz first when needed.
#[pyfunction]
fn log_mel(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f32>>> {
    let mut clip = AudioClip::new(samples, sample_rate).map_err(err)?;
    if sample_rate != SAMPLE_RATE {
        clip = audio::resample(&clip, SAMPLE_RATE).map_err(err)?;
    }
    let mel = audio::log_mel(&clip).map_err(err)?;
    Ok((0..mel.frames()).map(|t| mel.frame(t).to_vec()).collect())
}

/// `(samples, sample_rate)` of a WAV file, downmixed to mono.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let clip = audio::read_wav(path).map_err(err)?;
    Ok((clip.samples().to_vec(), clip.sample_rate()))
}

#[pyclass(module = "whismm_py")]
struct Vocabulary {
    inner: whismm::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Vocabulary {
            inner: whismm::Vocabulary::load(path).map_err(err)?,
        })
    }

    /// WordPiece training over raw text lines.
    #[staticmethod]
    fn train(texts: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        Ok(Vocabulary {
            inner: whismm::tokenizer::train_wordpiece(texts, vocab_size).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        whismm::io::atomic_write(path, |w| self.inner.write_to(w)).map_err(err)
    }

    #[pyo3(signature = (text, max_len = 64))]
    fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        self.inner.encode(text, max_len).ids().to_vec()
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn piece(&self, id: u32) -> Option<String> {
        self.inner.piece(id).map(str::to_string)
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }
}

#[pyclass(module = "whismm_py")]
struct Model {
    inner: whismm::Model,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (vocab_size, d_model = 128, n_heads = 4, n_layers = 2, ffn_mult = 4, max_text_len = 64, max_audio_patches = 128, seed = 17, tau_init = 0.07))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        ffn_mult: usize,
        max_text_len: usize,
        max_audio_patches: usize,
        seed: u64,
        tau_init: f64,
    ) -> PyResult<Self> {
        let config = whismm::ModelConfig {
            d_model,
            n_heads,
            n_layers_audio: n_layers,
            n_layers_text: n_layers,
            n_layers_mm: n_layers,
            ffn_mult,
            vocab_size,
            max_text_len,
            max_audio_patches,
            seed,
            ..whismm::ModelConfig::default()
        };
        Ok(Model {
            inner: whismm::Model::init(config, tau_init).map_err(err)?,
        })
    }

    /// Loads a model or trainer checkpoint; optimizer state is dropped.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: TrainState::load(path).map_err(err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.params.tau()
    }

    fn config(&self) -> String {
        self.inner.config.to_kv()
    }

    /// Number of audio patches produced for `frames` mel frames.
    fn patch_count(&self, frames: usize) -> usize {
        self.inner.config.patch_count(frames)
    }

    /// Pseudo-log-likelihood of a sentence.
    fn score(&self, py: Python<'_>, vocab: &Vocabulary, text: &str) -> PyResult<f64> {
        py.detach(|| eval::pll_score(&self.inner, &vocab.inner, text)).map_err(err)
    }

    fn pll_terms(&self, vocab: &Vocabulary, text: &str) -> PyResult<Vec<f64>> {
        eval::pll_terms(&self.inner, &vocab.inner, text).map_err(err)
    }

    /// Unmasked text CLS vector for token ids (CLS first).
    fn text_cls(&self, ids: Vec<u32>) -> PyResult<Vec<f64>> {
        let seq = TokenSequence::new(ids).map_err(err)?;
        Ok(self.inner.text_encode(&seq).map_err(err)?.cls)
    }

    /// Unmasked audio CLS vector for mel frames as returned by `log_mel`.
    fn audio_cls(&self, mel: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let mel = mel_from_rows(&mel)?;
        Ok(self.inner.encode_mel(&mel).map_err(err)?.cls)
    }

    /// Per-patch audio hidden states.
    fn audio_states(&self, mel: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f64>>> {
        let mel = mel_from_rows(&mel)?;
        let h = self.inner.encode_mel(&mel).map_err(err)?;
        Ok((0..h.len()).map(|r| h.sequence.row(r).to_vec()).collect())
    }
}

#[pyclass(module = "whismm_py", get_all)]
struct StepMetrics {
    step: u64,
    mlm: Option<f64>,
    mam: Option<f64>,
    mmc: Option<f64>,
    mmm: Option<f64>,
    atm: Option<f64>,
    total: f64,
    tau: f64,
    lr: f64,
}

#[pymethods]
impl StepMetrics {
    fn __repr__(&self) -> String {
        format!("StepMetrics(step={}, total={:.6}, tau={:.4})", self.step, self.total, self.tau)
    }
}

impl From<whismm::trainer::StepMetrics> for StepMetrics {
    fn from(m: whismm::trainer::StepMetrics) -> Self {
        StepMetrics {
            step: m.step,
            mlm: m.mlm,
            mam: m.mam,
            mmc: m.mmc,
            mmm: m.mmm,
            atm: m.atm,
            total: m.total,
            tau: m.tau,
            lr: m.lr,
        }
    }
}

/// Manifest entries as `(file_id, included, reason)`.
#[pyfunction]
fn filter_corpus(records: PathBuf, budget: usize) -> PyResult<Vec<(String, bool, Option<String>)>> {
    let records: Vec<whismm::TranscriptRecord> = whismm::io::read_jsonl(records).map_err(err)?;
    let manifest = data::filter_corpus(&records, budget).map_err(err)?;
    Ok(manifest
        .entries
        .into_iter()
        .map(|e| {
            let reason = e.reason.map(|r| format!("{r:?}").to_lowercase());
            (e.file_id, e.included, reason)
        })
        .collect())
}

/// Writes a synthetic paired corpus as one shard and returns its
/// vocabulary and sentences.
#[pyfunction]
#[pyo3(signature = (out_dir, n_segments = 32, seed = 7))]
fn synthetic_shards(out_dir: PathBuf, n_segments: usize, seed: u64) -> PyResult<(Vocabulary, Vec<String>)> {
    let corpus = SyntheticCorpus::generate(&SyntheticSpec {
        n_segments,
        seed,
        ..SyntheticSpec::default()
    })
    .map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| err(e.into()))?;
    data::write_shard(out_dir.join("synthetic.wshd"), &corpus.segments).map_err(err)?;
    let texts = (0..corpus.segments.len()).map(|k| corpus.text(k)).collect();
    Ok((Vocabulary { inner: corpus.vocab }, texts))
}

/// `(token ids, mel frames)` for every segment in a shard directory.
#[pyfunction]
fn read_shards(dir: PathBuf) -> PyResult<Vec<(Vec<u32>, usize)>> {
    Ok(data::read_shards(dir)
        .map_err(err)?
        .iter()
        .map(|s: &Segment| (s.tokens.ids().to_vec(), s.mel.frames()))
        .collect())
}

/// Trains on shards into `out`; `overrides` are `key=value` strings
/// applied over defaults, `WHISMM_SEED` and the optional config file.
#[pyfunction]
#[pyo3(signature = (shards, out, overrides = Vec::new(), config = None, resume = None))]
fn train(
    py: Python<'_>,
    shards: PathBuf,
    out: PathBuf,
    overrides: Vec<String>,
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> PyResult<Vec<StepMetrics>> {
    let file_text = match &config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| err(e.into()))?),
        None => None,
    };
    let env_seed = std::env::var(whismm::config::SEED_ENV).ok();
    let cfg = RunConfig::resolve(env_seed.as_deref(), file_text.as_deref(), &overrides).map_err(err)?;
    let metrics = py
        .detach(|| {
            let segments = data::read_shards(&shards)?;
            whismm::trainer::train(&cfg, &segments, &out, resume.as_deref())
        })
        .map_err(err)?;
    Ok(metrics.into_iter().map(StepMetrics::from).collect())
}

/// Overall accuracy on `(good, bad)` sentence pairs.
#[pyfunction]
fn minimal_pair_accuracy(model: &Model, vocab: &Vocabulary, pairs: Vec<(String, String)>) -> PyResult<f64> {
    let pairs: Vec<MinimalPair> = pairs
        .into_iter()
        .map(|(g, b)| MinimalPair {
            sentence_good: g,
            sentence_bad: b,
            suite: String::new(),
        })
        .collect();
    Ok(eval::minimal_pair_accuracy(&model.inner, &vocab.inner, &pairs)
        .map_err(err)?
        .overall
        .accuracy)
}

/// `(audio_to_text, text_to_audio)` recall at each k over shard segments.
#[pyfunction]
fn retrieval(model: &Model, shards: PathBuf, ks: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let segments = data::read_shards(shards).map_err(err)?;
    let r = eval::retrieval_eval(&model.inner, &segments, &ks).map_err(err)?;
    Ok((r.audio_to_text, r.text_to_audio))
}

/// Symmetric contrastive loss between matched embedding rows.
#[pyfunction]
fn symmetric_contrastive(audio: Vec<Vec<f64>>, text: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    whismm::objectives::symmetric_contrastive(&mat(&audio)?, &mat(&text)?, tau).map_err(err)
}

#[pymodule]
fn whismm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WhismmError", m.py().get_type::<WhismmError>())?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Model>()?;
    m.add_class::<StepMetrics>()?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(filter_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_shards, m)?)?;
    m.add_function(wrap_pyfunction!(read_shards, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(minimal_pair_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_contrastive, m)?)?;
    Ok(())
}
