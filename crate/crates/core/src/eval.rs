//! Pseudo-log-likelihood scoring, minimal-pair suites, cross-modal
//! retrieval and linear/MLP probes on frozen CLS vectors.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph};
use crate::data::Segment;
use crate::error::{Error, Result};
use crate::model::{Modality, Model};
use crate::objectives::{mmc_embeddings, MLM_HEAD};
use crate::tensor::Mat;
use crate::tokenizer::{Vocabulary, MASK};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub sentence_good: String,
    pub sentence_bad: String,
    #[serde(default)]
    pub suite: String,
}

pub fn read_suite(path: impl AsRef<Path>) -> Result<Vec<MinimalPair>> {
    crate::io::read_jsonl(path)
}

/// Log-probability of each non-CLS token when it alone is masked.
pub fn pll_terms_ids(model: &Model, ids: &[u32]) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Err(Error::InvalidInput("sentence has no tokens to score".into()));
    }
    let w = model.params.get(&format!("{MLM_HEAD}.w"))?;
    let b = model.params.get(&format!("{MLM_HEAD}.b"))?;
    let mut terms = Vec::with_capacity(ids.len() - 1);
    for t in 1..ids.len() {
        let mut masked = ids.to_vec();
        masked[t] = MASK;
        let mut f = model.forward(false);
        let enc = f.text_encode(&masked)?;
        let seq = enc.seq.expect("sequence has at least one token");
        let h = Mat::row_vector(f.graph.value(seq).row(t - 1));
        let mut logits = h.matmul(w);
        logits.add_assign(b);
        let row = logits.row(0);
        terms.push(row[ids[t] as usize] - log_sum_exp(row));
    }
    Ok(terms)
}

pub fn pll_terms(model: &Model, vocab: &Vocabulary, sentence: &str) -> Result<Vec<f64>> {
    let seq = vocab.encode(sentence, usize::MAX);
    if seq.is_empty() {
        return Err(Error::InvalidInput("empty sentence".into()));
    }
    pll_terms_ids(model, seq.ids())
}

/// Sum of the per-token masked log-probabilities.
pub fn pll_score(model: &Model, vocab: &Vocabulary, sentence: &str) -> Result<f64> {
    Ok(pll_terms(model, vocab, sentence)?.iter().sum())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteStats {
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub ties: usize,
    pub skipped: usize,
    /// `correct / (total - skipped)`; 0 when nothing was scored.
    pub accuracy: f64,
    pub mean_margin: f64,
    pub min_margin: f64,
    pub max_margin: f64,
}

impl SuiteStats {
    fn finish(&mut self, margins: &[f64]) {
        let scored = self.total - self.skipped;
        self.accuracy = if scored == 0 { 0.0 } else { self.correct as f64 / scored as f64 };
        if !margins.is_empty() {
            self.mean_margin = margins.iter().sum::<f64>() / margins.len() as f64;
            self.min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
            self.max_margin = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suites: BTreeMap<String, SuiteStats>,
    pub overall: SuiteStats,
}

/// A pair is correct when the good sentence scores strictly higher; ties
/// count as incorrect. Pairs that fail to encode are skipped.
pub fn minimal_pair_accuracy(model: &Model, vocab: &Vocabulary, pairs: &[MinimalPair]) -> Result<SuiteReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no minimal pairs".into()));
    }
    let mut report = SuiteReport::default();
    let mut margins: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for p in pairs {
        let stats = report.suites.entry(p.suite.clone()).or_default();
        stats.total += 1;
        report.overall.total += 1;
        let scored = pll_score(model, vocab, &p.sentence_good)
            .and_then(|g| Ok((g, pll_score(model, vocab, &p.sentence_bad)?)));
        let (good, bad) = match scored {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping pair `{}` / `{}`: {e}", p.sentence_good, p.sentence_bad);
                stats.skipped += 1;
                report.overall.skipped += 1;
                continue;
            }
        };
        let margin = good - bad;
        if margin > 0.0 {
            stats.correct += 1;
            report.overall.correct += 1;
        } else {
            stats.incorrect += 1;
            report.overall.incorrect += 1;
            if margin == 0.0 {
                stats.ties += 1;
                report.overall.ties += 1;
            }
        }
        margins.entry(p.suite.clone()).or_default().push(margin);
        all.push(margin);
    }
    for (name, stats) in report.suites.iter_mut() {
        stats.finish(margins.get(name).map_or(&[][..], Vec::as_slice));
    }
    report.overall.finish(&all);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: Vec<usize>,
    pub audio_to_text: Vec<f64>,
    pub text_to_audio: Vec<f64>,
}

fn cosine_matrix(a: &Mat, b: &Mat) -> Mat {
    let norm = |m: &Mat| {
        let mut m = m.clone();
        for r in 0..m.rows() {
            let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
            m.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        m
    };
    Mat::matmul_t(&norm(a), false, &norm(b), true)
}

/// Fraction of rows whose matched column ranks within `k`, counting every
/// other candidate scoring at least as high as ranked above it.
fn recall_rows(s: &Mat, k: usize) -> f64 {
    let n = s.rows();
    let hits = (0..n)
        .filter(|&i| {
            let own = s.get(i, i);
            let above = (0..n).filter(|&j| j != i && s.get(i, j) >= own).count();
            above < k
        })
        .count();
    hits as f64 / n as f64
}

/// Recall@k in both directions for paired embedding rows, by cosine.
pub fn recall_at_k(audio: &Mat, text: &Mat, ks: &[usize]) -> Result<RetrievalReport> {
    let n = audio.rows();
    if n < 2 || text.rows() != n {
        return Err(Error::InvalidInput("retrieval needs at least 2 aligned pairs".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::InvalidInput(format!("k = {k} must be in 1..{n}")));
    }
    let s = cosine_matrix(audio, text);
    let st = s.transpose();
    Ok(RetrievalReport {
        k: ks.to_vec(),
        audio_to_text: ks.iter().map(|&k| recall_rows(&s, k)).collect(),
        text_to_audio: ks.iter().map(|&k| recall_rows(&st, k)).collect(),
    })
}

/// Unmasked CLS vectors for every segment, one row each.
pub fn cls_features(model: &Model, segments: &[Segment], modality: Modality) -> Result<Mat> {
    let mut rows = Vec::with_capacity(segments.len());
    for s in segments {
        let h = match modality {
            Modality::Audio => model.encode_mel(&s.mel)?,
            Modality::Text => model.text_encode(&s.tokens)?,
            Modality::Multimodal => {
                let a = model.encode_mel(&s.mel)?;
                let t = model.text_encode(&s.tokens)?;
                model.multimodal_encode(&a, &t)?.0
            }
        };
        rows.push(h.cls);
    }
    Ok(Mat::from_rows(&rows))
}

/// Recall@k of the contrastive space over `segments`.
pub fn retrieval_eval(model: &Model, segments: &[Segment], ks: &[usize]) -> Result<RetrievalReport> {
    if segments.len() < 2 {
        return Err(Error::InvalidInput("retrieval needs at least 2 segments".into()));
    }
    let a = cls_features(model, segments, Modality::Audio)?;
    let t = cls_features(model, segments, Modality::Text)?;
    let (pa, pt) = mmc_embeddings(model, &a, &t)?;
    recall_at_k(&pa, &pt, ks)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeKind {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Share of examples held out for the reported accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::Linear,
            epochs: 300,
            learning_rate: 0.5,
            holdout: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub kind: ProbeKind,
    pub layers: Vec<(Mat, Mat)>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Probe {
    fn standardize(&self, x: &Mat) -> Mat {
        let mut x = x.clone();
        for r in 0..x.rows() {
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.scale[c];
            }
        }
        x
    }

    fn logits(&self, g: &mut Graph, x: &Mat, trainable: bool) -> (crate::autograd::NodeId, Vec<crate::autograd::NodeId>) {
        let mut h = g.constant(self.standardize(x));
        let mut ids = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (g.param(w.clone()), g.param(b.clone()))
            } else {
                (g.constant(w.clone()), g.constant(b.clone()))
            };
            ids.push(w);
            ids.push(b);
            h = g.matmul(h, w);
            h = g.add_row(h, b);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        (h, ids)
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let mut g = Graph::new();
        let (z, _) = self.logits(&mut g, x, false);
        let z = g.value(z);
        (0..z.rows())
            .map(|r| {
                z.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, x: &Mat, labels: &[usize]) -> f64 {
        let p = self.predict(x);
        p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub probe: Probe,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub n_classes: usize,
}

/// Trains a classifier head on fixed feature rows by full-batch gradient
/// descent on cross-entropy; accuracy is measured on a seeded held-out
/// split.
pub fn fit_probe(features: &Mat, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.rows();
    if labels.len() != n || n < 2 {
        return Err(Error::InvalidInput("probe needs one label per row and at least 2 rows".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::InvalidInput("probe needs at least 2 classes".into()));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("probe features".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((n as f64 * cfg.holdout).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| features.row(i).to_vec()).collect();
        (Mat::from_rows(&rows), idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())
    };
    let (xtr, ytr) = pick(train_idx);
    let (xte, yte) = pick(test_idx);

    let d = features.cols();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for c in 0..d {
        let col: Vec<f64> = (0..xtr.rows()).map(|r| xtr.get(r, c)).collect();
        mean[c] = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / col.len() as f64;
        scale[c] = var.sqrt().max(1e-8);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::masking::derive_seed(cfg.seed, &[1]));
    let mut init = |r: usize, c: usize| {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("valid std");
        Mat::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect())
    };
    let layers = match cfg.kind {
        ProbeKind::Linear => vec![(init(d, n_classes), Mat::zeros(1, n_classes))],
        ProbeKind::Mlp { hidden } => vec![
            (init(d, hidden), Mat::zeros(1, hidden)),
            (init(hidden, n_classes), Mat::zeros(1, n_classes)),
        ],
    };
    let mut probe = Probe {
        kind: cfg.kind,
        layers,
        mean,
        scale,
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let (z, ids) = probe.logits(&mut g, &xtr, true);
        let nll = g.nll_rows(z, &ytr);
        let loss = g.mean(nll);
        let grads = g.backward(loss);
        for (k, (w, b)) in probe.layers.iter_mut().enumerate() {
            for (p, id) in [(w, ids[2 * k]), (b, ids[2 * k + 1])] {
                if let Some(gr) = grads.get(id) {
                    for (v, dv) in p.data_mut().iter_mut().zip(gr.data()) {
                        *v -= cfg.learning_rate * dv;
                    }
                }
            }
        }
    }
    let train_accuracy = probe.accuracy(&xtr, &ytr);
    let heldout_accuracy = probe.accuracy(&xte, &yte);
    Ok(ProbeResult {
        probe,
        train_accuracy,
        heldout_accuracy,
        n_classes,
    })
}
