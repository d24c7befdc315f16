//! End-to-end acceptance checks. Runs as a plain binary (no libtest
//! harness) so that every criterion prints its own PASS/FAIL line.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use whismm::audio::{self, AudioClip};
use whismm::data::{self, AlignedWord, Exclusion, Segment, TranscriptRecord};
use whismm::eval::{self, MinimalPair};
use whismm::masking::{self, derive_seed, NUM_NEGATIVES};
use whismm::objectives::{self, LossWeights, LOSS_NAMES};
use whismm::synthetic::{SyntheticCorpus, SyntheticSpec};
use whismm::tokenizer::{TokenSequence, CLS, MASK};
use whismm::trainer::{self, StepMetrics, TrainConfig, TrainState, Trainer};
use whismm::{HiddenStates, Mat, Modality, Model, ModelConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn small_model(vocab: usize, d: usize) -> Result<Model, String> {
    ok(Model::init(
        ModelConfig {
            d_model: d,
            n_heads: 2,
            n_layers_audio: 1,
            n_layers_text: 1,
            n_layers_mm: 1,
            ffn_mult: 2,
            vocab_size: vocab,
            max_text_len: 16,
            max_audio_patches: 40,
            seed: 5,
            ..ModelConfig::default()
        },
        0.07,
    ))
}

fn hidden(seq: Mat, modality: Modality) -> HiddenStates {
    HiddenStates {
        cls: vec![0.0; seq.cols()],
        sequence: seq,
        modality,
    }
}

fn closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut track = |got: f64, want: f64, what: &str| -> Result<(), String> {
        let e = (got - want).abs();
        worst = worst.max(e);
        ensure!(e < 1e-6, "{what}: got {got}, want {want}");
        Ok(())
    };

    for vocab in [30usize, 8192] {
        let mut m = small_model(vocab, 8)?;
        ok(m.params.get_mut("heads.mlm.w"))?.data_mut().fill(0.0);
        ok(m.params.get_mut("heads.mlm.b"))?.data_mut().fill(0.0);
        let seq = Mat::from_vec(6, 8, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
        let ids = ok(TokenSequence::new(vec![CLS, 10, 11, 12, 13, 14, 15]))?;
        let plan = ok(masking::MaskPlan::from_positions(7, vec![1, 3, 6], 0))?;
        let l = ok(objectives::mlm_loss(&m, &hidden(seq, Modality::Text), &plan, &ids))?
            .ok_or("MLM absent")?;
        track(l, (vocab as f64).ln(), "uniform-logit MLM")?;
    }

    let n = 30;
    let v: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 0.6).collect();
    let b = Mat::from_rows(&vec![v; n]);
    let plan = ok(masking::plan_audio_mask(n, 0.2, 3, 11))?;
    ensure!(plan.negatives().iter().all(|n| n.len() == NUM_NEGATIVES), "expected 20 negatives");
    let l = ok(objectives::mam_loss(&hidden(b.clone(), Modality::Audio), &b, &plan, objectives::KAPPA))?
        .ok_or("MAM absent")?;
    track(l, 21f64.ln(), "identical-candidate MAM")?;

    let m = small_model(30, 8)?;
    for batch in [2usize, 8, 32] {
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let e = Mat::from_rows(&vec![row; batch]);
        for tau in [0.07, 0.5] {
            track(ok(objectives::symmetric_contrastive(&e, &e, tau))?, (batch as f64).ln(), "identical MMC")?;
        }
        track(ok(objectives::mmc_loss(&m, &e, &e))?, (batch as f64).ln(), "identical MMC via model")?;
    }

    track(ok(objectives::bce_from_logits(&[0.0; 6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]))?, 2f64.ln(), "zero-logit ATM")?;
    let mut m = small_model(30, 8)?;
    ok(m.params.get_mut("heads.atm.w"))?.data_mut().fill(0.0);
    ok(m.params.get_mut("heads.atm.b"))?.data_mut().fill(0.0);
    let x = Mat::from_vec(4, 8, (0..32).map(|_| rng.random_range(-2.0..2.0)).collect());
    track(ok(objectives::atm_loss(&m, &x, &[1.0, 0.0, 0.0, 1.0]))?, 2f64.ln(), "zero-head ATM")?;

    Ok(format!("max |error| {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

/// Relative errors are taken against `max(|analytic|, |numeric|,
/// GRAD_FLOOR)`. Central differences of an O(1) loss carry roundoff of
/// about `eps * |L| / FD_STEP`, a few 1e-11, so below the floor a
/// relative error measures that noise rather than the gradient.
const FD_STEP: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const SAMPLED_ENTRIES: usize = 4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

struct GradReport {
    loss: &'static str,
    checked: usize,
    arrays: usize,
    worst: f64,
    worst_at: String,
}

fn gradient_check_one(name: &'static str, model: &Model, segments: &[Segment]) -> Result<GradReport, String> {
    let batch: Vec<&Segment> = segments.iter().collect();
    let cfg = TrainConfig {
        batch_size: batch.len(),
        weights: LossWeights::only(name),
        seed: 23,
        ..TrainConfig::default()
    };
    let step = 3;
    let targets: Vec<Mat> = segments
        .iter()
        .map(|s| model.patch_embed(&s.mel))
        .collect::<whismm::Result<_>>()
        .map_err(|e| e.to_string())?;
    let (bundle, grads) = ok(trainer::loss_and_grads(model, &batch, &cfg, step, Some(&targets)))?;
    let idx = LOSS_NAMES.iter().position(|n| *n == name).unwrap();
    ensure!(bundle.as_array()[idx].is_some(), "{name}: loss absent on the check batch");

    let loss_at = |m: &Model| -> Result<f64, String> {
        Ok(ok(trainer::batch_loss(m, &batch, &cfg, step, Some(&targets)))?.total)
    };
    let mut work = model.clone();
    let mut fd = |param: &str, dir: &[(usize, f64)]| -> Result<f64, String> {
        let shift = |m: &mut Model, s: f64| -> Result<(), String> {
            let data = ok(m.params.get_mut(param))?.data_mut();
            for &(i, u) in dir {
                data[i] += s * u;
            }
            Ok(())
        };
        let base: Vec<f64> = dir.iter().map(|&(i, _)| work.params.get(param).unwrap().data()[i]).collect();
        shift(&mut work, FD_STEP)?;
        let plus = loss_at(&work)?;
        shift(&mut work, -2.0 * FD_STEP)?;
        let minus = loss_at(&work)?;
        let data = ok(work.params.get_mut(param))?.data_mut();
        for (&(i, _), b) in dir.iter().zip(base) {
            data[i] = b;
        }
        Ok((plus - minus) / (2.0 * FD_STEP))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(99, &[idx as u64]));
    let mut report = GradReport {
        loss: name,
        checked: 0,
        arrays: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (pname, g) in &grads {
        if g.data().iter().all(|v| *v == 0.0) {
            continue;
        }
        report.arrays += 1;
        let gd = g.data();
        // Every entry at once along a random sign direction.
        let dir: Vec<(usize, f64)> = (0..gd.len())
            .map(|i| (i, if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        let analytic: f64 = dir.iter().map(|&(i, u)| gd[i] * u).sum();
        let mut checks = vec![(format!("{pname}[dir]"), analytic, fd(pname, &dir)?)];
        // The largest entries plus a few random ones.
        let mut order: Vec<usize> = (0..gd.len()).collect();
        order.sort_by(|&a, &b| gd[b].abs().total_cmp(&gd[a].abs()));
        let mut picks: Vec<usize> = order[..SAMPLED_ENTRIES.min(order.len())].to_vec();
        for _ in 0..SAMPLED_ENTRIES {
            picks.push(rng.random_range(0..gd.len()));
        }
        for i in picks {
            checks.push((format!("{pname}[{i}]"), gd[i], fd(pname, &[(i, 1.0)])?));
        }
        for (at, a, n) in checks {
            report.checked += 1;
            let e = rel_err(a, n);
            if e > report.worst {
                report.worst = e;
                report.worst_at = format!("{at}: analytic {a:.6e} numeric {n:.6e}");
            }
        }
    }
    Ok(report)
}

fn gradient_checks() -> Outcome {
    let corpus = ok(SyntheticCorpus::generate(&SyntheticSpec {
        n_segments: 4,
        seed: 31,
        ..SyntheticSpec::default()
    }))?;
    let mut model = ok(Model::init(corpus.model_config(16, 1), 0.07))?;
    // Move away from the structured init (zero biases, unit gains).
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, m) in model.params.iter_mut() {
        if name != "loss.tau" {
            m.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    let reports: Vec<Result<GradReport, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = LOSS_NAMES
            .iter()
            .map(|&name| {
                let (model, segs) = (&model, &corpus.segments);
                s.spawn(move || gradient_check_one(name, model, segs))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("gradient check panicked".into())))
            .collect()
    });
    let mut summary = Vec::new();
    for r in reports {
        let r = r?;
        ensure!(
            r.worst < GRAD_TOL,
            "{}: relative error {:.3e} >= {GRAD_TOL:e} at {}",
            r.loss,
            r.worst,
            r.worst_at
        );
        summary.push(format!("{} {:.1e} ({} checks/{} arrays)", r.loss, r.worst, r.checked, r.arrays));
    }
    Ok(summary.join(", "))
}

// ---------------------------------------------------------------- 3

fn architecture() -> Outcome {
    let samples: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    let clip = ok(AudioClip::new(samples, 16_000))?;
    let mel = ok(audio::log_mel(&clip))?;
    ensure!(mel.frames() == 98 && mel.n_mels() == 80, "log-mel is {} x {}", mel.frames(), mel.n_mels());
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers_audio: 1,
        n_layers_text: 1,
        n_layers_mm: 1,
        ffn_mult: 2,
        vocab_size: 50,
        max_text_len: 16,
        max_audio_patches: 16,
        ..ModelConfig::default()
    };
    ensure!(cfg.patch_count(98) == 10, "patch_count(98) = {}", cfg.patch_count(98));
    let model = ok(Model::init(cfg, 0.07))?;
    let patches = ok(model.patch_embed(&mel))?;
    ensure!(patches.shape() == (10, 16), "patch embeddings {:?}", patches.shape());
    let a = ok(model.encode_mel(&mel))?;
    let tokens = ok(TokenSequence::new(vec![CLS, 7, 8, 9, 10, 11]))?;
    let t = ok(model.text_encode(&tokens))?;
    ensure!(a.len() == 10 && t.len() == 5, "unimodal lengths {} / {}", a.len(), t.len());
    let (mm, prov) = ok(model.multimodal_encode(&a, &t))?;
    ensure!(mm.len() == a.len() + t.len(), "multimodal length {} != {} + {}", mm.len(), a.len(), t.len());
    ensure!(mm.cls.len() == 16, "multimodal CLS has width {}", mm.cls.len());
    ensure!(prov.len() == mm.len(), "provenance length {}", prov.len());
    let cls_names = model.params.names().filter(|n| n.ends_with(".cls")).count();
    ensure!(cls_names == 3, "{cls_names} CLS vectors");
    Ok("98x80 mel, 10 patches, fused 10+5 plus separate CLS".into())
}

// ---------------------------------------------------------------- 4 + 7b

struct Overfit {
    corpus: SyntheticCorpus,
    model: Model,
    first: f64,
    last: f64,
    recall: eval::RetrievalReport,
    secs: f64,
}

fn overfit_run() -> Result<Overfit, String> {
    let start = Instant::now();
    let corpus = ok(SyntheticCorpus::generate(&SyntheticSpec::default()))?;
    let model = ok(Model::init(corpus.model_config(32, 1), 0.07))?;
    let cfg = TrainConfig {
        seed: 17,
        learning_rate: 0.1,
        momentum: 0.9,
        batch_size: corpus.segments.len(),
        clip_norm: 1.0,
        epochs: 2000,
        ..TrainConfig::default()
    };
    ensure!(cfg.weights.as_array().iter().all(|w| *w > 0.0), "all objectives must be active");
    let mut t = ok(Trainer::new(model, cfg))?;
    let log = ok(t.run(&corpus.segments, Some(2000), |_, m| {
        if !m.total.is_finite() {
            return Err(whismm::Error::NonFinite(format!("step {}", m.step)));
        }
        Ok(())
    }))?;
    ensure!(log.len() == 2000, "ran {} steps", log.len());
    ensure!(log.iter().all(|m: &StepMetrics| m.mlm.is_some() && m.mam.is_some() && m.mmc.is_some() && m.mmm.is_some() && m.atm.is_some()), "some objective was absent");
    let recall = ok(eval::retrieval_eval(&t.state.model, &corpus.segments, &[1]))?;
    Ok(Overfit {
        first: log[0].total,
        last: log[log.len() - 1].total,
        model: t.state.model,
        corpus,
        recall,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn overfit(run: &Result<Overfit, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let ratio = r.last / r.first;
    let (a2t, t2a) = (r.recall.audio_to_text[0], r.recall.text_to_audio[0]);
    ensure!(ratio < 0.2, "loss ratio {ratio:.4} ({:.4} -> {:.4})", r.first, r.last);
    ensure!(a2t == 1.0 && t2a == 1.0, "recall@1 audio->text {a2t}, text->audio {t2a}");
    ensure!(r.secs < 600.0, "took {:.0} s", r.secs);
    Ok(format!(
        "loss {:.3} -> {:.3} (ratio {ratio:.3}), recall@1 {a2t}/{t2a}, {:.0} s",
        r.first, r.last, r.secs
    ))
}

// ---------------------------------------------------------------- 5

fn fixture_record(id: &str, words: usize, untranscribable: usize, conf64: u32) -> TranscriptRecord {
    TranscriptRecord {
        file_id: id.into(),
        audio_path: String::new(),
        words: (0..words)
            .map(|i| AlignedWord {
                word: format!("w{i}"),
                start: i as f64 * 0.5,
                end: i as f64 * 0.5 + 0.4,
                confidence: conf64 as f64 / 64.0,
                transcribable: i >= untranscribable,
            })
            .collect(),
    }
}

fn filter_fidelity() -> Outcome {
    // (id, words, untranscribable, confidence * 64)
    let spec: [(&str, usize, usize, u32); 20] = [
        ("r00", 99, 0, 63),
        ("r01", 100, 0, 61),
        ("r02", 1000, 1, 58),
        ("r03", 1000, 2, 62),
        ("r04", 999, 1, 62),
        ("r05", 200, 0, 51),
        ("r06", 300, 0, 54),
        ("r07", 150, 0, 54),
        ("r08", 50, 0, 63),
        ("r09", 0, 0, 64),
        ("r10", 400, 0, 45),
        ("r11", 500, 0, 48),
        ("r12", 120, 0, 38),
        ("r13", 2000, 3, 59),
        ("r14", 2000, 2, 42),
        ("r15", 250, 0, 56),
        ("r16", 100, 1, 60),
        ("r17", 180, 0, 35),
        ("r18", 1, 0, 64),
        ("r19", 600, 0, 50),
    ];
    let records: Vec<TranscriptRecord> = spec.iter().map(|&(id, n, u, c)| fixture_record(id, n, u, c)).collect();
    let manifest = ok(data::filter_corpus(&records, 2500))?;

    // Worked by hand: survivors ranked by confidence (r06 before r07 on the
    // id tie), cumulative words 100, 1100, 1350, 1650, 1800, 2000, 2600;
    // r19 crosses 2500 and is kept, everything after it is over budget.
    use Exclusion::*;
    let want: [(&str, Option<Exclusion>); 20] = [
        ("r01", None),
        ("r02", None),
        ("r15", None),
        ("r06", None),
        ("r07", None),
        ("r05", None),
        ("r19", None),
        ("r11", Some(Budget)),
        ("r10", Some(Budget)),
        ("r14", Some(Budget)),
        ("r12", Some(Budget)),
        ("r17", Some(Budget)),
        ("r00", Some(Short)),
        ("r03", Some(Untranscribable)),
        ("r04", Some(Untranscribable)),
        ("r08", Some(Short)),
        ("r09", Some(Short)),
        ("r13", Some(Untranscribable)),
        ("r16", Some(Untranscribable)),
        ("r18", Some(Short)),
    ];
    ensure!(manifest.entries.len() == 20, "{} entries", manifest.entries.len());
    for (i, (e, (id, reason))) in manifest.entries.iter().zip(want).enumerate() {
        ensure!(
            e.file_id == id && e.reason == reason && e.included == reason.is_none(),
            "entry {i}: got {} {:?} included={}, want {id} {reason:?}",
            e.file_id,
            e.reason,
            e.included
        );
        let (_, n, _, c) = spec.iter().find(|s| s.0 == id).copied().unwrap();
        ensure!(e.word_count == n, "{id}: word count {}", e.word_count);
        let want_conf = if n == 0 { 0.0 } else { c as f64 / 64.0 };
        ensure!(e.mean_confidence == want_conf, "{id}: mean confidence {}", e.mean_confidence);
    }
    ensure!(manifest.included_words() == 2600, "{} included words", manifest.included_words());
    Ok("20/20 entries match, 7 included, 2600 words".into())
}

// ---------------------------------------------------------------- 6

fn ten_steps(corpus: &SyntheticCorpus) -> Result<(Vec<StepMetrics>, Trainer), String> {
    let model = ok(Model::init(corpus.model_config(16, 1), 0.07))?;
    let cfg = TrainConfig {
        seed: 5,
        batch_size: 4,
        momentum: 0.5,
        epochs: 10,
        ..TrainConfig::default()
    };
    let mut t = ok(Trainer::new(model, cfg))?;
    let log = ok(t.run(&corpus.segments, Some(10), |_, _| Ok(())))?;
    Ok((log, t))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn determinism() -> Outcome {
    let corpus = ok(SyntheticCorpus::generate(&SyntheticSpec {
        n_segments: 12,
        ..SyntheticSpec::default()
    }))?;
    let (a, ta) = ten_steps(&corpus)?;
    let (b, _) = ten_steps(&corpus)?;
    ensure!(a.len() == 10 && b.len() == 10, "step counts {} / {}", a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        ensure!(x.same_values(y), "step {} differs: {x:?} vs {y:?}", x.step);
    }

    let dir = ok(tempfile::tempdir())?;
    let ckpt = dir.path().join("state.wbck");
    ok(ta.state.save(&ckpt))?;
    let loaded = ok(TrainState::load(&ckpt))?;
    ensure!(loaded.step == ta.state.step, "step {} after load", loaded.step);
    let (m0, m1) = (&ta.state.model, &loaded.model);
    for s in &corpus.segments {
        let (a0, a1) = (ok(m0.encode_mel(&s.mel))?, ok(m1.encode_mel(&s.mel))?);
        let (t0, t1) = (ok(m0.text_encode(&s.tokens))?, ok(m1.text_encode(&s.tokens))?);
        let (f0, _) = ok(m0.multimodal_encode(&a0, &t0))?;
        let (f1, _) = ok(m1.multimodal_encode(&a1, &t1))?;
        for (x, y) in [(&a0, &a1), (&t0, &t1), (&f0, &f1)] {
            ensure!(
                bits(x.sequence.data()) == bits(y.sequence.data()) && bits(&x.cls) == bits(&y.cls),
                "forward outputs differ after checkpoint round trip"
            );
        }
    }

    let shard = dir.path().join("s.wshd");
    ok(data::write_shard(&shard, &corpus.segments))?;
    let back = ok(data::read_shard(&shard))?;
    ensure!(back.len() == corpus.segments.len(), "{} segments read back", back.len());
    for (x, y) in corpus.segments.iter().zip(&back) {
        let xb: Vec<u32> = x.mel.values().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.mel.values().iter().map(|v| v.to_bits()).collect();
        ensure!(x.tokens == y.tokens && xb == yb && x.mel.frames() == y.mel.frames(), "shard round trip differs");
    }
    let again = dir.path().join("t.wshd");
    ok(data::write_shard(&again, &back))?;
    ensure!(ok(std::fs::read(&shard))? == ok(std::fs::read(&again))?, "rewritten shard bytes differ");
    Ok("10-step metrics, checkpoint forward pass and shard bytes all bitwise equal".into())
}

// ---------------------------------------------------------------- 7

fn oracle_pll_terms(model: &Model, ids: &[u32]) -> Result<Vec<f64>, String> {
    let w = ok(model.params.get("heads.mlm.w"))?;
    let b = ok(model.params.get("heads.mlm.b"))?;
    let mut out = Vec::new();
    for t in 1..ids.len() {
        let mut masked = ids.to_vec();
        masked[t] = MASK;
        let h = ok(model.text_encode(&ok(TokenSequence::new(masked))?))?;
        let row = h.sequence.row(t - 1);
        let logits: Vec<f64> = (0..w.cols())
            .map(|v| b.get(0, v) + row.iter().enumerate().map(|(k, x)| x * w.get(k, v)).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        out.push(logits[ids[t] as usize] - lse);
    }
    Ok(out)
}

fn balanced_suite(corpus: &SyntheticCorpus, n: usize, seed: u64) -> Vec<MinimalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = &corpus.lexicon;
    let mut pairs: Vec<MinimalPair> = (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..lex.len()).collect();
            idx.shuffle(&mut rng);
            let a: Vec<usize> = idx[..6].to_vec();
            let mut b = a.clone();
            b[rng.random_range(0..6)] = idx[6 + rng.random_range(0..lex.len() - 6)];
            let text = |s: &[usize]| s.iter().map(|&w| lex[w].as_str()).collect::<Vec<_>>().join(" ");
            // Half the pairs call the original good, half the substitute.
            let (good, bad) = if i % 2 == 0 { (text(&a), text(&b)) } else { (text(&b), text(&a)) };
            MinimalPair {
                sentence_good: good,
                sentence_bad: bad,
                suite: "balanced".into(),
            }
        })
        .collect();
    pairs.shuffle(&mut rng);
    pairs
}

fn evaluation(run: &Result<Overfit, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let mut worst: f64 = 0.0;
    for k in 0..4 {
        let ids = r.corpus.segments[k].tokens.ids();
        let terms = ok(eval::pll_terms_ids(&r.model, ids))?;
        let oracle = oracle_pll_terms(&r.model, ids)?;
        ensure!(terms.len() == ids.len() - 1, "{} terms for {} tokens", terms.len(), ids.len());
        for (a, b) in terms.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let score = ok(eval::pll_score(&r.model, &r.corpus.vocab, &r.corpus.text(k)))?;
        let summed: f64 = terms.iter().sum();
        ensure!(score.to_bits() == summed.to_bits(), "PLL {score} != sum of terms {summed}");
    }
    ensure!(worst < 1e-9, "PLL terms differ from the direct computation by {worst:e}");

    let pairs = r.corpus.minimal_pairs(3);
    let trained = ok(eval::minimal_pair_accuracy(&r.model, &r.corpus.vocab, &pairs))?.overall;
    ensure!(trained.skipped == 0, "{} pairs skipped", trained.skipped);
    ensure!(trained.accuracy >= 0.9, "overfit model accuracy {:.3}", trained.accuracy);

    let fresh = ok(Model::init(r.corpus.model_config(32, 1), 0.07))?;
    let suite = balanced_suite(&r.corpus, 200, 41);
    let random = ok(eval::minimal_pair_accuracy(&fresh, &r.corpus.vocab, &suite))?.overall;
    ensure!(random.total == 200 && random.skipped == 0, "balanced suite scored {} of 200", random.total - random.skipped);
    ensure!(
        (0.35..=0.65).contains(&random.accuracy),
        "random-init accuracy {:.3}",
        random.accuracy
    );
    Ok(format!(
        "additivity exact (terms within {worst:.1e}), overfit {:.3} on {} pairs, random-init {:.3} on 200",
        trained.accuracy,
        pairs.len(),
        random.accuracy
    ))
}

// ---------------------------------------------------------------- 8

fn masking_statistics() -> Outcome {
    const DRAWS: u64 = 100_000;
    let ratio = 0.15;
    let mut notes = Vec::new();
    // 20 and 40 candidates make ratio * candidates integral.
    for seq_len in [21usize, 41] {
        let mut counts = vec![0u64; seq_len];
        for d in 0..DRAWS {
            let plan = ok(masking::plan_text_mask(seq_len, ratio, derive_seed(8, &[seq_len as u64, d])))?;
            for &p in plan.positions() {
                counts[p] += 1;
            }
        }
        ensure!(counts[0] == 0, "CLS masked {} times (seq_len {seq_len})", counts[0]);
        let sd = (DRAWS as f64 * ratio * (1.0 - ratio)).sqrt();
        let mut worst_z: f64 = 0.0;
        for (p, &c) in counts.iter().enumerate().skip(1) {
            let z = (c as f64 - DRAWS as f64 * ratio).abs() / sd;
            worst_z = worst_z.max(z);
            ensure!(z <= 3.0, "position {p} of {seq_len}: frequency {:.5}, {z:.2} sd", c as f64 / DRAWS as f64);
        }
        notes.push(format!("len {seq_len} max {worst_z:.2} sd"));
    }

    let mut anchors = 0u64;
    for d in 0..DRAWS {
        let n = 2 + (d % 48) as usize;
        let plan = ok(masking::plan_audio_mask(n, 0.08, 5, derive_seed(9, &[d])))?;
        ensure!(!plan.positions().contains(&0), "audio CLS slot masked (n = {n})");
        for (&t, negs) in plan.positions().iter().zip(plan.negatives()) {
            anchors += 1;
            ensure!(negs.len() == NUM_NEGATIVES, "{} negatives", negs.len());
            ensure!(!negs.contains(&t), "anchor {t} among its negatives (n = {n})");
            ensure!(negs.iter().all(|&j| (1..=n).contains(&j)), "negative outside 1..={n}");
        }
    }
    notes.push(format!("{anchors} anchors, none in their negatives"));
    Ok(notes.join(", "))
}

// ----------------------------------------------------------------

fn main() {
    let start = Instant::now();
    let mut results: BTreeMap<usize, (String, Outcome, f64)> = BTreeMap::new();
    std::thread::scope(|s| {
        let timed = |f: fn() -> Outcome| {
            move || {
                let t = Instant::now();
                let r = f();
                (r, t.elapsed().as_secs_f64())
            }
        };
        let overfit_handle = s.spawn(|| {
            let t = Instant::now();
            let run = overfit_run();
            let secs = t.elapsed().as_secs_f64();
            let r4 = overfit(&run);
            let t7 = Instant::now();
            let r7 = evaluation(&run);
            ((r4, secs), (r7, t7.elapsed().as_secs_f64()))
        });
        let jobs: Vec<(usize, &str, std::thread::ScopedJoinHandle<'_, (Outcome, f64)>)> = vec![
            (1, "closed-form loss values", s.spawn(timed(closed_forms))),
            (2, "gradient checks", s.spawn(timed(gradient_checks))),
            (3, "architecture arithmetic", s.spawn(timed(architecture))),
            (5, "corpus filter fidelity", s.spawn(timed(filter_fidelity))),
            (6, "determinism and persistence", s.spawn(timed(determinism))),
            (8, "masking statistics", s.spawn(timed(masking_statistics))),
        ];
        for (n, name, h) in jobs {
            let (r, secs) = h.join().unwrap_or_else(|_| (Err("panicked".into()), 0.0));
            results.insert(n, (name.to_string(), r, secs));
        }
        match overfit_handle.join() {
            Ok(((r4, s4), (r7, s7))) => {
                results.insert(4, ("overfit smoke test".into(), r4, s4));
                results.insert(7, ("evaluation harness sanity".into(), r7, s7));
            }
            Err(_) => {
                results.insert(4, ("overfit smoke test".into(), Err("panicked".into()), 0.0));
                results.insert(7, ("evaluation harness sanity".into(), Err("panicked".into()), 0.0));
            }
        }
    });

    let mut failed = 0;
    for (n, (name, r, secs)) in &results {
        match r {
            Ok(detail) => println!("criterion {n} PASS  {name} [{secs:.1} s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name} [{secs:.1} s]: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0} s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
