//! Seeded mask plans for text tokens and audio patches, plus CPC negatives.
//!
//! Positions index the CLS-prefixed sequence: position 0 is the CLS slot and
//! is never masked. An audio plan over `n` patches therefore covers
//! positions `1..=n`.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{MASK, N_SPECIALS};

pub const DEFAULT_TEXT_RATIO: f64 = 0.15;
pub const DEFAULT_AUDIO_RATIO: f64 = 0.08;
pub const DEFAULT_AUDIO_SPAN: usize = 5;
pub const NUM_NEGATIVES: usize = 20;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a `(base, part...)` tuple.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    MaskToken,
    RandomToken,
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    seq_len: usize,
    positions: Vec<usize>,
    replacement: Vec<Replacement>,
    negatives: Vec<Vec<usize>>,
    seed: u64,
    degraded: bool,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn empty(seq_len: usize, seed: u64) -> Self {
        MaskPlan {
            seq_len,
            positions: Vec::new(),
            replacement: Vec::new(),
            negatives: Vec::new(),
            seed,
            degraded: false,
        }
    }

    /// Hand-built plan (mask-token policy everywhere). Used for scoring and tests.
    pub fn from_positions(seq_len: usize, mut positions: Vec<usize>, seed: u64) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.iter().any(|&p| p == 0 || p >= seq_len) {
            return Err(Error::InvalidInput(format!(
                "mask positions must lie in 1..{seq_len}: {positions:?}"
            )));
        }
        let n = positions.len();
        Ok(MaskPlan {
            seq_len,
            positions,
            replacement: vec![Replacement::MaskToken; n],
            negatives: Vec::new(),
            seed,
            degraded: false,
        })
    }

    /// Sequence length including the CLS slot.
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn replacement(&self) -> &[Replacement] {
        &self.replacement
    }

    pub fn negatives(&self) -> &[Vec<usize>] {
        &self.negatives
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Set when negatives had to be drawn with replacement.
    pub fn degraded(&self) -> bool {
        self.degraded
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn has_negatives(&self) -> bool {
        self.negatives.len() == self.positions.len() && !self.positions.is_empty()
    }

    /// Applies the replacement policy to token ids (position 0 is CLS).
    pub fn apply_to_tokens(&self, ids: &[u32], vocab_size: usize) -> Vec<u32> {
        let mut out = ids.to_vec();
        let ordinary = vocab_size.saturating_sub(N_SPECIALS).max(1) as u32;
        for (&p, r) in self.positions.iter().zip(&self.replacement) {
            out[p] = match r {
                Replacement::MaskToken => MASK,
                Replacement::RandomToken => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x7261_6e64, p as u64]));
                    N_SPECIALS as u32 + rng.random_range(0..ordinary)
                }
                Replacement::Keep => ids[p],
            };
        }
        out
    }
}

/// `max(1, round(ratio * candidates))` for a positive ratio, capped at the
/// number of candidates.
pub fn mask_count(candidates: usize, ratio: f64) -> usize {
    if ratio <= 0.0 || candidates == 0 {
        return 0;
    }
    ((ratio * candidates as f64).round() as usize).clamp(1, candidates)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Uniform positions without replacement from `1..seq_len`, with an
/// 80/10/10 mask/random/keep policy.
pub fn plan_text_mask(seq_len: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if seq_len == 0 {
        return Err(Error::InvalidInput("seq_len must be at least 1".into()));
    }
    check_ratio(ratio)?;
    let n = mask_count(seq_len - 1, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (1..seq_len).collect();
    order.shuffle(&mut rng);
    // One policy draw per candidate so the chosen prefix does not depend on n.
    let policy: Vec<Replacement> = order
        .iter()
        .map(|_| match rng.random_range(0..10u32) {
            0..=7 => Replacement::MaskToken,
            8 => Replacement::RandomToken,
            _ => Replacement::Keep,
        })
        .collect();
    let mut picked: Vec<(usize, Replacement)> = order.into_iter().zip(policy).take(n).collect();
    picked.sort_unstable_by_key(|p| p.0);
    Ok(MaskPlan {
        seq_len,
        positions: picked.iter().map(|p| p.0).collect(),
        replacement: picked.iter().map(|p| p.1).collect(),
        negatives: Vec::new(),
        seed,
        degraded: false,
    })
}

/// Contiguous spans over patch positions `1..=n_patches`, then negatives.
///
/// Spans are placed one at a time at a uniformly chosen start. A start is
/// preferred when the span does not touch an existing span; failing that,
/// any free start is used; failing that, the span shrinks to the longest
/// free run.
pub fn plan_audio_mask(n_patches: usize, ratio: f64, span: usize, seed: u64) -> Result<MaskPlan> {
    if n_patches == 0 {
        return Err(Error::InvalidInput("n_patches must be at least 1".into()));
    }
    if span == 0 {
        return Err(Error::InvalidInput("audio span must be at least 1".into()));
    }
    check_ratio(ratio)?;
    let seq_len = n_patches + 1;
    if n_patches < 2 {
        // No candidate negatives exist; the CPC term cannot be formed.
        let mut plan = MaskPlan::empty(seq_len, seed);
        plan.degraded = ratio > 0.0;
        return Ok(plan);
    }
    let budget = mask_count(n_patches, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; seq_len + 1]; // index seq_len is a sentinel
    let mut remaining = budget;
    while remaining > 0 {
        let len = span.min(remaining);
        let free = |s: usize, l: usize, taken: &[bool]| (s..s + l).all(|i| !taken[i]);
        let isolated = |s: usize, l: usize, taken: &[bool]| {
            (s == 1 || !taken[s - 1]) && (s + l > n_patches || !taken[s + l])
        };
        let starts_for = |l: usize, strict: bool, taken: &[bool]| -> Vec<usize> {
            if l > n_patches {
                return Vec::new();
            }
            (1..=n_patches + 1 - l)
                .filter(|&s| free(s, l, taken) && (!strict || isolated(s, l, taken)))
                .collect()
        };
        let mut chosen_len = len;
        let mut starts = starts_for(len, true, &taken);
        if starts.is_empty() {
            starts = starts_for(len, false, &taken);
        }
        if starts.is_empty() {
            chosen_len = longest_free_run(&taken[1..=n_patches]);
            if chosen_len == 0 {
                break;
            }
            starts = starts_for(chosen_len, false, &taken);
        }
        let s = starts[rng.random_range(0..starts.len())];
        for t in taken.iter_mut().skip(s).take(chosen_len) {
            *t = true;
        }
        remaining -= chosen_len;
    }
    let positions: Vec<usize> = (1..=n_patches).filter(|&i| taken[i]).collect();
    let n = positions.len();
    let plan = MaskPlan {
        seq_len,
        positions,
        replacement: vec![Replacement::MaskToken; n],
        negatives: Vec::new(),
        seed,
        degraded: false,
    };
    sample_negatives(plan, n_patches, NUM_NEGATIVES, derive_seed(seed, &[0x6e65_67]))
}

fn longest_free_run(taken: &[bool]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for &t in taken {
        cur = if t { 0 } else { cur + 1 };
        best = best.max(cur);
    }
    best
}

/// Fills `k` negatives per masked position, drawn from `1..=n_patches`
/// minus the anchor; without replacement when at least `k` candidates
/// exist, with replacement (and flagged) otherwise.
pub fn sample_negatives(mut plan: MaskPlan, n_patches: usize, k: usize, seed: u64) -> Result<MaskPlan> {
    if n_patches < 2 {
        return Err(Error::InvalidInput(
            "sample_negatives needs at least 2 patches (no candidate negatives)".into(),
        ));
    }
    if plan.positions.iter().any(|&p| p == 0 || p > n_patches) {
        return Err(Error::InvalidInput("mask plan positions outside 1..=n_patches".into()));
    }
    let candidates = n_patches - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degraded = false;
    let negatives = plan
        .positions
        .iter()
        .map(|&t| {
            // Map 0..candidates onto 1..=n_patches skipping t.
            let lift = |i: usize| if i + 1 >= t { i + 2 } else { i + 1 };
            if candidates >= k {
                sample(&mut rng, candidates, k).into_iter().map(lift).collect()
            } else {
                degraded = true;
                (0..k).map(|_| lift(rng.random_range(0..candidates))).collect()
            }
        })
        .collect();
    plan.negatives = negatives;
    plan.degraded = degraded;
    Ok(plan)
}
