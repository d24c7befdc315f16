use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use whismm::config::SEED_ENV;
use whismm::data::{self, CorpusManifest, SegmentLimits};
use whismm::eval::{self, MinimalPair};
use whismm::io::{atomic_write, read_jsonl};
use whismm::trainer::TrainState;
use whismm::{audio, tokenizer, Error, Model, Result, RunConfig, TranscriptRecord, Vocabulary};

/// Segments per shard file written by `shard`.
const SHARD_SIZE: usize = 512;

#[derive(Parser)]
#[command(name = "whismm", version, about = "Joint audio/text masked pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config layers shared by commands that read run settings.
#[derive(clap::Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.batch_size=8`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let env_seed = std::env::var(SEED_ENV).ok();
        let file_text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?),
            None => None,
        };
        RunConfig::resolve(env_seed.as_deref(), file_text.as_deref(), &self.sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute the normalized log-mel features of a WAV file
    Featurize {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a WordPiece vocabulary on transcript records
    TokenizerTrain {
        /// Transcript records (JSON lines)
        #[arg(long)]
        input: PathBuf,
        /// Restrict training text to records included by this manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select transcripts by quality under a word budget
    FilterCorpus {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut included records into paired segments and write shards
    Shard {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Output directory for `.wshd` files
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain a model on shards
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        shards: PathBuf,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Minimal-pair accuracy by pseudo-log-likelihood
    EvalPairs {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Audio/text retrieval recall@k over shard segments
    EvalRetrieval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        shards: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
    },
    /// Print the pseudo-log-likelihood of one sentence
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
    },
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(TrainState::load(path)?.model)
}

fn read_records(path: &Path) -> Result<Vec<TranscriptRecord>> {
    let records: Vec<TranscriptRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        Ok(w.write_all(b"\n")?)
    })
}

fn included_ids(manifest: &Path) -> Result<HashSet<String>> {
    Ok(CorpusManifest::read(manifest)?
        .included()
        .map(|e| e.file_id.clone())
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { audio: input, out } => {
            let mel = data::Segment::features(&audio::read_wav(&input)?)?;
            atomic_write(&out, |w| mel.write_to(w))?;
            println!("{} frames x {} mels", mel.frames(), mel.n_mels());
        }
        Command::TokenizerTrain {
            input,
            manifest,
            vocab_size,
            out,
        } => {
            let records = read_records(&input)?;
            let keep = manifest.as_deref().map(included_ids).transpose()?;
            let texts = records
                .iter()
                .filter(|r| keep.as_ref().is_none_or(|k| k.contains(&r.file_id)))
                .map(TranscriptRecord::text);
            let vocab = tokenizer::train_wordpiece(texts, vocab_size)?;
            atomic_write(&out, |w| vocab.write_to(w))?;
            println!("{} pieces", vocab.size());
        }
        Command::FilterCorpus { records, budget, out } => {
            let manifest = data::filter_corpus(&read_records(&records)?, budget)?;
            manifest.write(&out)?;
            println!(
                "{} of {} records included, {} words",
                manifest.included().count(),
                manifest.entries.len(),
                manifest.included_words()
            );
        }
        Command::Shard {
            records,
            manifest,
            vocab,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let limits = SegmentLimits {
                max_text_len: cfg.get("segment.max_text_len")?,
                max_audio_seconds: cfg.get("segment.max_audio_seconds")?,
            };
            let vocab = Vocabulary::load(&vocab)?;
            let keep = included_ids(&manifest)?;
            let base = records.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut segments = Vec::new();
            for r in read_records(&records)?.iter().filter(|r| keep.contains(&r.file_id)) {
                if r.audio_path.is_empty() {
                    return Err(Error::InvalidInput(format!("{}: record has no audio_path", r.file_id)));
                }
                let clip = audio::read_wav(base.join(&r.audio_path))?;
                segments.extend(data::segment_pairs(r, &clip, &vocab, limits)?);
            }
            if segments.is_empty() {
                return Err(Error::InvalidInput("no segments produced".into()));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for (i, chunk) in segments.chunks(SHARD_SIZE).enumerate() {
                data::write_shard(out.join(format!("shard-{i:05}.wshd")), chunk)?;
            }
            println!("{} segments in {} shards", segments.len(), segments.len().div_ceil(SHARD_SIZE));
        }
        Command::Train {
            config,
            shards,
            out,
            resume,
        } => {
            let cfg = config.resolve()?;
            let segments = data::read_shards(&shards)?;
            let metrics = whismm::trainer::train(&cfg, &segments, &out, resume.as_deref())?;
            if let Some(m) = metrics.last() {
                println!("step {} total {:.6}", m.step, m.total);
            }
        }
        Command::EvalPairs {
            model,
            vocab,
            suite,
            report,
        } => {
            let model = load_model(&model)?;
            let vocab = Vocabulary::load(&vocab)?;
            let pairs: Vec<MinimalPair> = eval::read_suite(&suite)?;
            let r = eval::minimal_pair_accuracy(&model, &vocab, &pairs)?;
            write_json(&report, &r)?;
            println!("{:.6}", r.overall.accuracy);
        }
        Command::EvalRetrieval { model, shards, k } => {
            let model = load_model(&model)?;
            let segments = data::read_shards(&shards)?;
            let r = eval::retrieval_eval(&model, &segments, &k)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Score { model, vocab, text } => {
            let model = load_model(&model)?;
            let vocab = Vocabulary::load(&vocab)?;
            println!("{}", eval::pll_score(&model, &vocab, &text)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
