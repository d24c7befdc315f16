//! Transcript filtering, audio/text segment packing and shard files.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, MelSpectrogram, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tokenizer::{normalize, TokenSequence, Vocabulary, CLS};

pub const SHARD_MAGIC: &[u8; 4] = b"WSHD";
/// Transcripts with fewer words are dropped.
pub const MIN_WORDS: usize = 100;
/// Maximum untranscribable words per thousand.
pub const MAX_UNTRANSCRIBABLE_PER_MILLE: usize = 1;
/// Segment audio is padded with silence up to this many samples, enough
/// for 16 frames (one convolution kernel).
pub const MIN_SEGMENT_SAMPLES: usize = audio::N_FFT + 15 * audio::HOP;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
    #[serde(default = "yes")]
    pub transcribable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub file_id: String,
    #[serde(default)]
    pub audio_path: String,
    pub words: Vec<AlignedWord>,
}

impl TranscriptRecord {
    /// Checks confidences and the ordering of word intervals.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = f64::NEG_INFINITY;
        for (i, w) in self.words.iter().enumerate() {
            if !(0.0..=1.0).contains(&w.confidence) {
                return Err(Error::InvalidInput(format!(
                    "{}: word {i} has confidence {} outside [0, 1]",
                    self.file_id, w.confidence
                )));
            }
            if !(w.start.is_finite() && w.end.is_finite() && w.start <= w.end && w.start >= prev_end) {
                return Err(Error::InvalidInput(format!(
                    "{}: word {i} interval [{}, {}] is invalid or overlaps its predecessor",
                    self.file_id, w.start, w.end
                )));
            }
            prev_end = w.end;
        }
        Ok(())
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn untranscribable_count(&self) -> usize {
        self.words.iter().filter(|w| !w.transcribable).count()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.words.is_empty() {
            return 0.0;
        }
        self.words.iter().map(|w| w.confidence).sum::<f64>() / self.words.len() as f64
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exclusion {
    Short,
    Untranscribable,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file_id: String,
    pub word_count: usize,
    pub mean_confidence: f64,
    pub included: bool,
    pub reason: Option<Exclusion>,
}

/// Survivors in rank order (included first), then filtered-out records in
/// input order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn included(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.included)
    }

    pub fn included_ids(&self) -> Vec<&str> {
        self.included().map(|e| e.file_id.as_str()).collect()
    }

    pub fn included_words(&self) -> usize {
        self.included().map(|e| e.word_count).sum()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::atomic_write(path, |w| crate::io::write_jsonl(w, &self.entries))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(CorpusManifest {
            entries: crate::io::read_jsonl(path)?,
        })
    }
}

/// Drops short transcripts and those with too many untranscribable words,
/// ranks the rest by mean confidence (ties by file id) and keeps files
/// until the cumulative word count reaches `budget_words`.
pub fn filter_corpus(records: &[TranscriptRecord], budget_words: usize) -> Result<CorpusManifest> {
    if budget_words == 0 {
        return Err(Error::InvalidInput("budget must be positive".into()));
    }
    if records.is_empty() {
        log::warn!("filter_corpus: no input records");
        return Ok(CorpusManifest::default());
    }
    let entry = |r: &TranscriptRecord, included, reason| ManifestEntry {
        file_id: r.file_id.clone(),
        word_count: r.word_count(),
        mean_confidence: r.mean_confidence(),
        included,
        reason,
    };
    let mut rejected = Vec::new();
    let mut survivors = Vec::new();
    for r in records {
        let n = r.word_count();
        if n < MIN_WORDS {
            rejected.push(entry(r, false, Some(Exclusion::Short)));
        } else if r.untranscribable_count() * 1000 > n * MAX_UNTRANSCRIBABLE_PER_MILLE {
            rejected.push(entry(r, false, Some(Exclusion::Untranscribable)));
        } else {
            survivors.push(r);
        }
    }
    survivors.sort_by(|a, b| rank_order(a.mean_confidence(), &a.file_id, b.mean_confidence(), &b.file_id));
    let mut entries = Vec::with_capacity(records.len());
    let mut total = 0usize;
    for r in survivors {
        if total < budget_words {
            total += r.word_count();
            entries.push(entry(r, true, None));
        } else {
            entries.push(entry(r, false, Some(Exclusion::Budget)));
        }
    }
    entries.extend(rejected);
    Ok(CorpusManifest { entries })
}

fn rank_order(ca: f64, ia: &str, cb: f64, ib: &str) -> Ordering {
    cb.total_cmp(&ca).then_with(|| ia.cmp(ib))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentLimits {
    /// Token budget including CLS.
    pub max_text_len: usize,
    pub max_audio_seconds: f64,
}

impl Default for SegmentLimits {
    fn default() -> Self {
        SegmentLimits {
            max_text_len: 64,
            max_audio_seconds: 10.0,
        }
    }
}

/// Where a segment came from; not persisted in shards.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSource {
    pub file_id: String,
    pub start: f64,
    pub end: f64,
    pub first_word: usize,
    pub n_words: usize,
    pub text: String,
}

/// A paired training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub tokens: TokenSequence,
    pub mel: MelSpectrogram,
    pub source: Option<SegmentSource>,
}

impl Segment {
    pub fn new(tokens: TokenSequence, mel: MelSpectrogram) -> Self {
        Segment {
            tokens,
            mel,
            source: None,
        }
    }

    /// Log-mel features of `clip`, padded with trailing silence to
    /// `MIN_SEGMENT_SAMPLES`.
    pub fn features(clip: &AudioClip) -> Result<MelSpectrogram> {
        let clip = if clip.sample_rate() != SAMPLE_RATE {
            audio::resample(clip, SAMPLE_RATE)?
        } else {
            clip.clone()
        };
        if clip.len() >= MIN_SEGMENT_SAMPLES {
            return audio::log_mel(&clip);
        }
        let mut s = clip.samples().to_vec();
        s.resize(MIN_SEGMENT_SAMPLES, 0.0);
        audio::log_mel(&AudioClip::new(s, SAMPLE_RATE)?)
    }
}

fn word_pieces(vocab: &Vocabulary, surface: &str) -> Vec<u32> {
    normalize(surface)
        .split(' ')
        .filter(|w| !w.is_empty())
        .flat_map(|w| vocab.segment_word(w))
        .collect()
}

/// Greedily packs consecutive words into segments under both limits,
/// slicing `clip` at word boundaries. A word that alone breaks a limit is
/// skipped with a warning and closes the current segment.
pub fn segment_pairs(
    record: &TranscriptRecord,
    clip: &AudioClip,
    vocab: &Vocabulary,
    limits: SegmentLimits,
) -> Result<Vec<Segment>> {
    record.validate()?;
    if limits.max_text_len < 2 || !(limits.max_audio_seconds > 0.0) {
        return Err(Error::InvalidInput(
            "segment limits need room for one token and positive audio".into(),
        ));
    }
    struct Open {
        first: usize,
        ids: Vec<u32>,
    }
    let mut groups: Vec<(usize, usize, Vec<u32>)> = Vec::new();
    let mut cur: Option<Open> = None;
    let close = |cur: &mut Option<Open>, groups: &mut Vec<(usize, usize, Vec<u32>)>, end: usize| {
        if let Some(o) = cur.take() {
            groups.push((o.first, end, o.ids));
        }
    };
    for (i, w) in record.words.iter().enumerate() {
        let pieces = word_pieces(vocab, &w.word);
        let alone_fits = pieces.len() < limits.max_text_len && w.end - w.start <= limits.max_audio_seconds;
        if !alone_fits {
            log::warn!(
                "{}: word {i} `{}` exceeds segment limits on its own; skipped",
                record.file_id,
                w.word
            );
            close(&mut cur, &mut groups, i);
            continue;
        }
        if let Some(o) = &mut cur {
            let span = w.end - record.words[o.first].start;
            if o.ids.len() + pieces.len() <= limits.max_text_len && span <= limits.max_audio_seconds {
                o.ids.extend(pieces);
                continue;
            }
            close(&mut cur, &mut groups, i);
        }
        let mut ids = vec![CLS];
        ids.extend(pieces);
        cur = Some(Open { first: i, ids });
    }
    close(&mut cur, &mut groups, record.words.len());

    let mut out = Vec::with_capacity(groups.len());
    for (first, end, ids) in groups {
        let words = &record.words[first..end];
        let (start, stop) = (words[0].start, words[words.len() - 1].end);
        let mel = Segment::features(&clip.slice_seconds(start, stop))?;
        out.push(Segment {
            tokens: TokenSequence::new(ids)?,
            mel,
            source: Some(SegmentSource {
                file_id: record.file_id.clone(),
                start,
                end: stop,
                first_word: first,
                n_words: end - first,
                text: words.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" "),
            }),
        });
    }
    Ok(out)
}

/// Shard layout: magic, u32 count, then per segment u32 token count, the
/// ids as u32, and a WMEL block; all little-endian.
pub fn write_shard_to<W: Write + ?Sized>(w: &mut W, segments: &[Segment]) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::InvalidInput("refusing to write an empty shard".into()));
    }
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&(segments.len() as u32).to_le_bytes())?;
    for s in segments {
        let ids = s.tokens.ids();
        w.write_all(&(ids.len() as u32).to_le_bytes())?;
        for id in ids {
            w.write_all(&id.to_le_bytes())?;
        }
        s.mel.write_to(w)?;
    }
    Ok(())
}

pub fn write_shard(path: impl AsRef<Path>, segments: &[Segment]) -> Result<()> {
    if segments.is_empty() {
        return Err(Error::InvalidInput("refusing to write an empty shard".into()));
    }
    crate::io::atomic_write(path, |w| write_shard_to(w, segments))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_shard(bytes: &[u8]) -> Result<Vec<Segment>> {
    let mut c = Cursor { bytes, pos: 0 };
    match c.take(4) {
        Some(m) if m == SHARD_MAGIC => {}
        _ => {
            return Err(Error::Format {
                format: "WSHD",
                offset: 0,
                reason: "bad or missing magic".into(),
            })
        }
    }
    let count = c.u32().ok_or(Error::Format {
        format: "WSHD",
        offset: 4,
        reason: "missing segment count".into(),
    })? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let start = c.pos as u64;
        let trunc = || Error::Truncated {
            format: "WSHD",
            index,
            offset: start,
        };
        let n = c.u32().ok_or_else(trunc)? as usize;
        let raw = c.take(n.checked_mul(4).ok_or_else(trunc)?).ok_or_else(trunc)?;
        let ids: Vec<u32> = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mel_start = c.pos;
        c.take(4).ok_or_else(trunc)?;
        let frames = c.u32().ok_or_else(trunc)? as usize;
        let mels = c.u32().ok_or_else(trunc)? as usize;
        let body = frames.checked_mul(mels).and_then(|v| v.checked_mul(4)).ok_or_else(trunc)?;
        c.take(body).ok_or_else(trunc)?;
        let mut block = &bytes[mel_start..c.pos];
        let mel = MelSpectrogram::read_from(&mut block, mel_start as u64)?;
        let tokens = TokenSequence::new(ids).map_err(|e| Error::Format {
            format: "WSHD",
            offset: start,
            reason: format!("segment {index}: {e}"),
        })?;
        out.push(Segment::new(tokens, mel));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            format: "WSHD",
            offset: c.pos as u64,
            reason: format!("{} trailing bytes after {count} segments", bytes.len() - c.pos),
        });
    }
    Ok(out)
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_shard(&bytes)
}

/// Shard files (`*.wshd`) under `dir`, in file-name order.
pub fn shard_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut paths = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "wshd") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no .wshd shards in {}", dir.display())));
    }
    Ok(paths)
}

/// All segments of every shard under `dir`, in deterministic order.
pub fn read_shards(dir: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for p in shard_paths(dir)? {
        let segs = read_shard(&p).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::InvalidInput(format!("{}: {other}", p.display())),
        })?;
        out.extend(segs);
    }
    Ok(out)
}
