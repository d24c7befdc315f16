//! A small synthetic paired corpus: each word is a 100 ms two-tone burst,
//! so audio and text carry the same sequence information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::data::{Segment, SegmentSource};
use crate::error::{Error, Result};
use crate::eval::MinimalPair;
use crate::model::ModelConfig;
use crate::tokenizer::{TokenSequence, Vocabulary, SPECIAL_PIECES};

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "nu", "pe", "ri", "so", "ta", "vu", "we", "zo", "ba"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_segments: usize,
    pub words_per_segment: usize,
    pub lexicon_size: usize,
    pub word_seconds: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_segments: 32,
            words_per_segment: 6,
            lexicon_size: 24,
            word_seconds: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub lexicon: Vec<String>,
    pub vocab: Vocabulary,
    pub sentences: Vec<Vec<usize>>,
    pub segments: Vec<Segment>,
    pub spec: SyntheticSpec,
}

/// Pseudo-word `i`: two syllables, unique for `i < 144`.
pub fn lexicon_word(i: usize) -> String {
    format!("{}{}", SYLLABLES[i % 12], SYLLABLES[(i / 12 + i) % 12])
}

/// Word `w` rendered as a burst of two sine tones with a short fade.
pub fn word_audio(w: usize, seconds: f64) -> Vec<f32> {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let f1 = 250.0 + 170.0 * w as f64;
    let f2 = 900.0 + 110.0 * ((w * 7) % 23) as f64;
    let fade = (n / 10).max(1);
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let env = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
            let v = 0.3 * (2.0 * std::f64::consts::PI * f1 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * f2 * t).sin();
            (v * env) as f32
        })
        .collect()
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        if spec.lexicon_size < spec.words_per_segment || spec.lexicon_size > 144 || spec.words_per_segment == 0 {
            return Err(Error::InvalidInput(
                "lexicon must hold 1..=144 words and at least one segment's worth".into(),
            ));
        }
        let lexicon: Vec<String> = (0..spec.lexicon_size).map(lexicon_word).collect();
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.extend(lexicon.iter().cloned());
        let vocab = Vocabulary::from_pieces(pieces)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut sentences = Vec::with_capacity(spec.n_segments);
        let mut pool: Vec<usize> = (0..spec.lexicon_size).collect();
        while sentences.len() < spec.n_segments {
            pool.shuffle(&mut rng);
            let s = pool[..spec.words_per_segment].to_vec();
            if !sentences.contains(&s) {
                sentences.push(s);
            }
        }
        let mut segments = Vec::with_capacity(sentences.len());
        for (k, s) in sentences.iter().enumerate() {
            segments.push(render(&lexicon, &vocab, s, spec.word_seconds, k)?);
        }
        Ok(SyntheticCorpus {
            lexicon,
            vocab,
            sentences,
            segments,
            spec: spec.clone(),
        })
    }

    pub fn text(&self, k: usize) -> String {
        sentence_text(&self.lexicon, &self.sentences[k])
    }

    /// A model configuration sized for this corpus.
    pub fn model_config(&self, d_model: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            d_model,
            n_heads: 2,
            n_layers_audio: layers,
            n_layers_text: layers,
            n_layers_mm: layers,
            ffn_mult: 2,
            vocab_size: self.vocab.size(),
            max_text_len: self.spec.words_per_segment + 1,
            max_audio_patches: 32,
            seed: self.spec.seed,
            ..ModelConfig::default()
        }
    }

    /// For every sentence, a pair whose bad member replaces one word with
    /// a lexicon word absent from the sentence.
    pub fn minimal_pairs(&self, seed: u64) -> Vec<MinimalPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sentences
            .iter()
            .map(|s| {
                let mut bad = s.clone();
                let pos = rng.random_range(0..bad.len());
                let outside: Vec<usize> = (0..self.lexicon.len()).filter(|w| !s.contains(w)).collect();
                bad[pos] = outside[rng.random_range(0..outside.len())];
                MinimalPair {
                    sentence_good: sentence_text(&self.lexicon, s),
                    sentence_bad: sentence_text(&self.lexicon, &bad),
                    suite: "synthetic_substitution".into(),
                }
            })
            .collect()
    }
}

fn sentence_text(lexicon: &[String], s: &[usize]) -> String {
    s.iter().map(|&w| lexicon[w].as_str()).collect::<Vec<_>>().join(" ")
}

fn render(lexicon: &[String], vocab: &Vocabulary, s: &[usize], word_seconds: f64, k: usize) -> Result<Segment> {
    let samples: Vec<f32> = s.iter().flat_map(|&w| word_audio(w, word_seconds)).collect();
    let clip = AudioClip::new(samples, SAMPLE_RATE)?;
    let text = sentence_text(lexicon, s);
    let tokens: TokenSequence = vocab.encode(&text, s.len() + 1);
    Ok(Segment {
        tokens,
        mel: Segment::features(&clip)?,
        source: Some(SegmentSource {
            file_id: format!("synthetic-{k:04}"),
            start: 0.0,
            end: clip.duration_secs(),
            first_word: 0,
            n_words: s.len(),
            text,
        }),
    })
}
