use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use whismm::audio::{self, AudioClip, MelSpectrogram, SAMPLE_RATE};
use whismm::data::{self, AlignedWord, CorpusManifest, TranscriptRecord};
use whismm::synthetic::{lexicon_word, word_audio, SyntheticCorpus, SyntheticSpec};

const SMALL_MODEL: [&str; 7] = [
    "model.d_model=16",
    "model.n_heads=2",
    "model.n_layers_audio=1",
    "model.n_layers_text=1",
    "model.n_layers_mm=1",
    "model.ffn_mult=2",
    "train.batch_size=8",
];

fn whismm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whismm"))
        .args(args)
        .env_remove(whismm::config::SEED_ENV)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(o), stderr(o));
}

fn write_records(path: &Path, records: &[TranscriptRecord]) {
    let mut f = std::fs::File::create(path).unwrap();
    for r in records {
        serde_json::to_writer(&mut f, r).unwrap();
        f.write_all(b"\n").unwrap();
    }
}

/// A record whose words are synthetic tone bursts, with its WAV on disk.
fn spoken_record(dir: &Path, id: &str, n_words: usize, conf: f64, offset: usize) -> TranscriptRecord {
    let ws = 0.1;
    let ids: Vec<usize> = (0..n_words).map(|i| (i * 7 + offset) % 20).collect();
    let samples: Vec<f32> = ids.iter().flat_map(|&w| word_audio(w, ws)).collect();
    let wav = format!("{id}.wav");
    audio::write_wav(dir.join(&wav), &AudioClip::new(samples, SAMPLE_RATE).unwrap()).unwrap();
    TranscriptRecord {
        file_id: id.into(),
        audio_path: wav,
        words: ids
            .iter()
            .enumerate()
            .map(|(i, &w)| AlignedWord {
                word: lexicon_word(w),
                start: i as f64 * ws,
                end: (i + 1) as f64 * ws,
                confidence: conf,
                transcribable: true,
            })
            .collect(),
    }
}

fn text_record(id: &str, n: usize, bad: usize, conf: f64) -> TranscriptRecord {
    TranscriptRecord {
        file_id: id.into(),
        audio_path: String::new(),
        words: (0..n)
            .map(|i| AlignedWord {
                word: "w".into(),
                start: i as f64,
                end: i as f64 + 0.5,
                confidence: conf,
                transcribable: i >= bad,
            })
            .collect(),
    }
}

fn synthetic_shards(dir: &Path) -> (PathBuf, usize) {
    let c = SyntheticCorpus::generate(&SyntheticSpec {
        n_segments: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let shards = dir.join("shards");
    std::fs::create_dir_all(&shards).unwrap();
    data::write_shard(shards.join("a.wshd"), &c.segments).unwrap();
    (shards, c.vocab.size())
}

#[test]
fn filter_corpus_matches_library_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        text_record("short", 99, 0, 0.9),
        text_record("edge100", 100, 0, 0.5),
        text_record("permille", 1000, 1, 0.75),
        text_record("noisy", 1000, 2, 0.875),
        text_record("tie-b", 300, 0, 0.625),
        text_record("tie-a", 200, 0, 0.625),
        text_record("big", 900, 0, 0.25),
    ];
    let rpath = dir.path().join("records.jsonl");
    write_records(&rpath, &records);
    let out = dir.path().join("manifest.jsonl");
    let o = whismm(&["filter-corpus", "--records", p(&rpath), "--budget", "1201", "--out", p(&out)]);
    assert_ok(&o);
    let got = CorpusManifest::read(&out).unwrap();
    let want = data::filter_corpus(&records, 1201).unwrap();
    assert_eq!(got, want);
    assert_eq!(got.included_ids(), ["permille", "tie-a", "tie-b"]);
}

#[test]
fn missing_flag_exits_2_and_names_it() {
    let o = whismm(&["score", "--model", "m.wbck", "--vocab", "v.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--text"), "{}", stderr(&o));

    let o = whismm(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    let o = whismm(&["score", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_machine_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.wbck");
    let o = whismm(&["score", "--model", p(&missing), "--vocab", "v.txt", "--text", "a"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io: "), "{err}");

    let (shards, _) = synthetic_shards(dir.path());
    let run = dir.path().join("run");
    let o = whismm(&["train", "--shards", p(&shards), "--out", p(&run), "--set", "model.colour=blue"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));
}

#[test]
fn config_precedence_cli_over_file_over_env_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (shards, vocab) = synthetic_shards(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# file layer\nseed = 5\ntrain.learning_rate = 0.2\ntrain.momentum = 0.5\n").unwrap();
    let run = dir.path().join("run");
    let vocab_set = format!("model.vocab_size={vocab}");
    let mut args = vec!["train", "--config", p(&cfg), "--shards", p(&shards), "--out", p(&run)];
    for s in SMALL_MODEL.iter().copied().chain([vocab_set.as_str(), "train.epochs=1", "train.learning_rate=0.3"]) {
        args.extend(["--set", s]);
    }
    let o = Command::new(env!("CARGO_BIN_EXE_whismm"))
        .args(&args)
        .env(whismm::config::SEED_ENV, "99")
        .output()
        .unwrap();
    assert_ok(&o);
    let frozen = whismm::RunConfig::resolve(None, Some(&std::fs::read_to_string(run.join("config.txt")).unwrap()), &[])
        .unwrap();
    assert_eq!(frozen.raw("train.learning_rate").unwrap(), "0.3");
    assert_eq!(frozen.raw("train.momentum").unwrap(), "0.5");
    assert_eq!(frozen.raw("seed").unwrap(), "5");
    assert_eq!(frozen.raw("train.clip_norm").unwrap(), "1.0");

    // Without a file value the environment seed applies.
    let run2 = dir.path().join("run2");
    let mut args = vec!["train", "--shards", p(&shards), "--out", p(&run2)];
    for s in SMALL_MODEL.iter().copied().chain([vocab_set.as_str(), "train.epochs=1"]) {
        args.extend(["--set", s]);
    }
    let o = Command::new(env!("CARGO_BIN_EXE_whismm"))
        .args(&args)
        .env(whismm::config::SEED_ENV, "99")
        .output()
        .unwrap();
    assert_ok(&o);
    let text = std::fs::read_to_string(run2.join("config.txt")).unwrap();
    let frozen = whismm::RunConfig::resolve(None, Some(&text), &[]).unwrap();
    assert_eq!(frozen.raw("seed").unwrap(), "99");
}

#[test]
fn full_pipeline_from_wav_to_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let records = vec![
        spoken_record(d, "spk-a", 120, 0.9, 0),
        spoken_record(d, "spk-b", 110, 0.8, 3),
        spoken_record(d, "spk-c", 40, 0.95, 5),
    ];
    let rpath = d.join("records.jsonl");
    write_records(&rpath, &records);

    let mel_out = d.join("a.wmel");
    assert_ok(&whismm(&["featurize", "--audio", p(&d.join("spk-a.wav")), "--out", p(&mel_out)]));
    let bytes = std::fs::read(&mel_out).unwrap();
    let mel = MelSpectrogram::read_from(&mut bytes.as_slice(), 0).unwrap();
    assert_eq!((mel.frames(), mel.n_mels()), (1 + (192_000 - 400) / 160, 80));

    let manifest = d.join("manifest.jsonl");
    assert_ok(&whismm(&["filter-corpus", "--records", p(&rpath), "--budget", "1000", "--out", p(&manifest)]));
    assert_eq!(CorpusManifest::read(&manifest).unwrap().included_ids(), ["spk-a", "spk-b"]);

    let vocab = d.join("vocab.txt");
    assert_ok(&whismm(&[
        "tokenizer-train", "--input", p(&rpath), "--manifest", p(&manifest), "--vocab-size", "80", "--out", p(&vocab),
    ]));
    let v = whismm::Vocabulary::load(&vocab).unwrap();
    assert!(v.size() <= 80);

    let shards = d.join("shards");
    let o = whismm(&[
        "shard", "--records", p(&rpath), "--manifest", p(&manifest), "--vocab", p(&vocab), "--out", p(&shards),
        "--set", "segment.max_audio_seconds=1.05",
    ]);
    assert_ok(&o);
    let segments = data::read_shards(&shards).unwrap();
    // 10 words per second of audio: 12 + 11 segments.
    assert_eq!(segments.len(), 23);

    let run = d.join("run");
    let vocab_set = format!("model.vocab_size={}", v.size());
    let mut args = vec!["train", "--shards", p(&shards), "--out", p(&run)];
    for s in SMALL_MODEL.iter().copied().chain([vocab_set.as_str(), "train.epochs=1", "train.checkpoint_interval=2"]) {
        args.extend(["--set", s]);
    }
    assert_ok(&whismm(&args));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(run.join("checkpoint-00000002.wbck").exists());
    let model = run.join("model.wbck");

    let o = whismm(&["score", "--model", p(&model), "--vocab", p(&vocab), "--text", &records[0].text()[..30]]);
    assert_ok(&o);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let score: f64 = out.trim().parse().expect("a single real");
    assert!(score.is_finite() && score < 0.0);

    let suite = d.join("suite.jsonl");
    std::fs::write(
        &suite,
        format!(
            "{{\"sentence_good\": \"{} {}\", \"sentence_bad\": \"{} {}\", \"suite\": \"order\"}}\n",
            lexicon_word(0),
            lexicon_word(7),
            lexicon_word(7),
            lexicon_word(0)
        ),
    )
    .unwrap();
    let report = d.join("report.json");
    let o = whismm(&["eval-pairs", "--model", p(&model), "--vocab", p(&vocab), "--suite", p(&suite), "--report", p(&report)]);
    assert_ok(&o);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["overall"]["total"], 1);
    assert!(r["suites"]["order"].is_object());

    let o = whismm(&["eval-retrieval", "--model", p(&model), "--shards", p(&shards), "--k", "1,5,10"]);
    assert_ok(&o);
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["k"], serde_json::json!([1, 5, 10]));
    assert_eq!(r["audio_to_text"].as_array().unwrap().len(), 3);
}
