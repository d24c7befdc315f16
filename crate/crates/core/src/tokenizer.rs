//! WordPiece vocabulary training, encoding and decoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const CLS: u32 = 0;
pub const MASK: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const N_SPECIALS: usize = 4;
pub const SPECIAL_PIECES: [&str; N_SPECIALS] = ["[CLS]", "[MASK]", "[PAD]", "[UNK]"];
pub const CONTINUATION: &str = "##";
/// Words longer than this (in chars) encode as a single UNK.
pub const MAX_WORD_CHARS: usize = 100;

/// Lowercase, NFC-compose and collapse whitespace.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect::<String>().to_lowercase();
    composed.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Wraps ids that must start with CLS and contain no PAD.
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::InvalidInput("token sequence must start with CLS".into()));
        }
        if ids.contains(&PAD) {
            return Err(Error::InvalidInput("token sequence contains PAD".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True when only the CLS token is present.
    pub fn is_empty(&self) -> bool {
        self.ids.len() <= 1
    }
}

impl Vocabulary {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < N_SPECIALS || pieces[..N_SPECIALS] != SPECIAL_PIECES {
            return Err(Error::InvalidInput(format!(
                "vocabulary must start with the specials {SPECIAL_PIECES:?}"
            )));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.contains('\n') {
                return Err(Error::InvalidInput(format!("invalid piece at id {i}")));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate piece `{p}` at id {i}")));
            }
        }
        Ok(Vocabulary { pieces, index })
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Id of an ordinary (non-special) piece.
    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied().filter(|&i| i as usize >= N_SPECIALS)
    }

    /// Greedy longest-match-first segmentation of normalized text, CLS-prefixed
    /// and truncated to `max_len` ids (the prefix is kept).
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            if ids.len() >= max_len {
                break;
            }
            ids.extend(self.segment_word(word));
        }
        ids.truncate(max_len.max(1));
        TokenSequence { ids }
    }

    /// Pieces for one already-normalized word; a word with any unmatched
    /// segment becomes a single UNK.
    pub fn segment_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    pub fn decode(&self, seq: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in seq {
            let piece = self.piece(id).ok_or(Error::TokenOutOfRange { id, size: self.size() })?;
            match id {
                CLS | MASK | PAD => continue,
                _ => {}
            }
            if let Some(rest) = piece.strip_prefix(CONTINUATION).filter(|_| id != UNK) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
        Ok(out)
    }

    /// One piece per line; line number is the id.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        for p in &self.pieces {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let pieces = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Vocabulary::from_pieces(pieces)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::read_from(std::io::BufReader::new(f))
    }
}

/// Trains a WordPiece vocabulary by repeatedly merging the adjacent piece
/// pair with the highest `count(ab) / (count(a) * count(b))` score. Ties go
/// to the lexicographically smallest merged piece.
pub fn train_wordpiece<I, S>(corpus: I, vocab_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for w in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            if w.chars().count() <= MAX_WORD_CHARS {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(Error::InvalidInput("corpus contains no words".into()));
    }

    let mut alphabet = BTreeSet::new();
    for w in word_counts.keys() {
        for (i, c) in w.chars().enumerate() {
            alphabet.insert(if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") });
        }
    }
    let minimum = N_SPECIALS + alphabet.len() + 1;
    if vocab_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().cloned());
    let mut index: HashMap<String, u32> = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i as u32))
        .collect();

    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let ids = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let p = if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") };
                    index[&p]
                })
                .collect();
            (ids, n)
        })
        .collect();

    while pieces.len() < vocab_size {
        let mut unit: HashMap<u32, u64> = HashMap::new();
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (ids, n) in &words {
            for &id in ids {
                *unit.entry(id).or_default() += n;
            }
            for w in ids.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let mut best: Option<(f64, String, (u32, u32))> = None;
        for (&(a, b), &n) in &pairs {
            let score = n as f64 / (unit[&a] as f64 * unit[&b] as f64);
            let merged = merge_pieces(&pieces[a as usize], &pieces[b as usize]);
            let better = match &best {
                None => true,
                Some((s, m, _)) => score > *s || (score == *s && merged < *m),
            };
            if better {
                best = Some((score, merged, (a, b)));
            }
        }
        let Some((_, merged, (a, b))) = best else { break };
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                pieces.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };
        for (ids, _) in &mut words {
            let mut i = 0;
            while i + 1 < ids.len() {
                if ids[i] == a && ids[i + 1] == b {
                    ids[i] = new_id;
                    ids.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Vocabulary::from_pieces(pieces)
}

fn merge_pieces(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}
