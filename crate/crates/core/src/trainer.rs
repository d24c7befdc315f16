//! Multitask SGD training over paired segments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::NodeId;
use crate::config::RunConfig;
use crate::data::Segment;
use crate::error::{Error, Result};
use crate::masking::{derive_seed, plan_audio_mask, plan_text_mask, MaskPlan};
use crate::model::{config_sidecar, round_f32, Forward, Model, ModelConfig, Parameters, TAU_MAX, TAU_MIN, TAU_NAME};
use crate::objectives::{
    atm_loss_node, cpc_loss_node, masked_token_loss_node, mmc_loss_node, mmm_loss_node, LossBundle, LossNodes,
    LossWeights, MaskedAudio, MaskedFusion, MaskedText, MLM_HEAD,
};
use crate::tensor::Mat;

const MOMENTUM_PREFIX: &str = "optim.momentum.";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub checkpoint_interval: u64,
    pub weights: LossWeights,
    pub text_ratio: f64,
    pub audio_ratio: f64,
    pub audio_span: usize,
    pub kappa: f64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 17,
            epochs: 5,
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 16,
            clip_norm: 1.0,
            warmup_steps: 0,
            checkpoint_interval: 1000,
            weights: LossWeights::default(),
            text_ratio: crate::masking::DEFAULT_TEXT_RATIO,
            audio_ratio: crate::masking::DEFAULT_AUDIO_RATIO,
            audio_span: crate::masking::DEFAULT_AUDIO_SPAN,
            kappa: crate::objectives::KAPPA,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must be in [0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("train.clip_norm must be >= 0".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config("loss.kappa must be positive".into()));
        }
        if self.audio_span == 0 {
            return Err(Error::Config("mask.audio_span must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        let c = TrainConfig {
            seed: cfg.get("seed")?,
            epochs: cfg.get("train.epochs")?,
            learning_rate: cfg.get("train.learning_rate")?,
            momentum: cfg.get("train.momentum")?,
            batch_size: cfg.get("train.batch_size")?,
            clip_norm: cfg.get("train.clip_norm")?,
            warmup_steps: cfg.get("train.warmup_steps")?,
            checkpoint_interval: cfg.get("train.checkpoint_interval")?,
            weights: LossWeights {
                mlm: cfg.get("loss.weights.mlm")?,
                mam: cfg.get("loss.weights.mam")?,
                mmc: cfg.get("loss.weights.mmc")?,
                mmm: cfg.get("loss.weights.mmm")?,
                atm: cfg.get("loss.weights.atm")?,
            },
            text_ratio: cfg.get("mask.text_ratio")?,
            audio_ratio: cfg.get("mask.audio_ratio")?,
            audio_span: cfg.get("mask.audio_span")?,
            kappa: cfg.get("loss.kappa")?,
            deterministic: cfg.get("train.deterministic")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Learning rate at a 0-based step, with linear warmup if configured.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mlm: Option<f64>,
    pub mam: Option<f64>,
    pub mmc: Option<f64>,
    pub mmm: Option<f64>,
    pub atm: Option<f64>,
    pub total: f64,
    pub tau: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &StepMetrics) -> bool {
        let bits = |m: &StepMetrics| {
            (
                m.step,
                [m.mlm, m.mam, m.mmc, m.mmm, m.atm].map(|v| v.map(f64::to_bits)),
                m.total.to_bits(),
                m.tau.to_bits(),
                m.lr.to_bits(),
            )
        };
        bits(self) == bits(other)
    }
}

/// Masking and pairing decisions for one batch; a pure function of the
/// seed, step and the batch's sequence lengths.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub text: Vec<MaskPlan>,
    pub audio: Vec<MaskPlan>,
    /// ATM label per example (1 matched, 0 paired with `partner`).
    pub atm_labels: Vec<f64>,
    pub partner: Vec<usize>,
}

/// Derangement by Sattolo's algorithm: a single cycle, so no fixed points.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

impl BatchPlan {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, batch: &[&Segment], step: u64) -> Result<Self> {
        let mut text = Vec::with_capacity(batch.len());
        let mut audio = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[step, i as u64]);
            text.push(plan_text_mask(s.tokens.len(), cfg.text_ratio, derive_seed(seed, &[1]))?);
            let n = model.patch_count(s.mel.frames());
            audio.push(plan_audio_mask(n, cfg.audio_ratio, cfg.audio_span, derive_seed(seed, &[2]))?);
        }
        let b = batch.len();
        let mut atm_labels = vec![1.0; b];
        let mut partner: Vec<usize> = (0..b).collect();
        if b >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[step, 0x61746d]));
            let sigma = derangement(b, &mut rng);
            let mut order: Vec<usize> = (0..b).collect();
            order.shuffle(&mut rng);
            for &i in &order[..b / 2] {
                atm_labels[i] = 0.0;
                partner[i] = sigma[i];
            }
        }
        Ok(BatchPlan {
            text,
            audio,
            atm_labels,
            partner,
        })
    }
}

/// Builds all five losses for `batch` on `f`. `fixed_targets` replaces the
/// stop-gradient CPC targets (normally the batch's own patch embeddings).
pub fn build_losses(
    f: &mut Forward<'_>,
    batch: &[&Segment],
    cfg: &TrainConfig,
    plan: &BatchPlan,
    fixed_targets: Option<&[Mat]>,
) -> Result<LossNodes> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("batch is empty".into()));
    }
    let vocab = f.model.config.vocab_size;
    let mut masked_text = Vec::with_capacity(batch.len());
    let mut masked_audio = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut audio_cls = Vec::with_capacity(batch.len());
    let mut text_cls = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let patches = f.patch_embed(&s.mel)?;
        let target = match fixed_targets {
            Some(t) => f.graph.constant(t[i].clone()),
            None => f.graph.detach(patches),
        };
        targets.push(target);
        masked_audio.push(f.audio_encode(patches, Some(&plan.audio[i]))?);
        let ids = plan.text[i].apply_to_tokens(s.tokens.ids(), vocab);
        masked_text.push(f.text_encode(&ids)?);
        audio_cls.push(f.audio_encode(patches, None)?.cls);
        text_cls.push(f.text_encode(s.tokens.ids())?.cls);
    }

    let mlm_items: Vec<MaskedText<'_>> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            masked_text[i].seq.map(|seq| MaskedText {
                seq,
                plan: &plan.text[i],
                targets: s.tokens.ids(),
            })
        })
        .collect();
    let mlm = masked_token_loss_node(f, &mlm_items, MLM_HEAD)?;

    let mam_items: Vec<MaskedAudio<'_>> = (0..batch.len())
        .filter_map(|i| {
            masked_audio[i].seq.map(|ctx| MaskedAudio {
                ctx,
                targets: targets[i],
                plan: &plan.audio[i],
            })
        })
        .collect();
    let mam = cpc_loss_node(&mut f.graph, &mam_items, cfg.kappa)?;

    let a = f.graph.concat_rows(&audio_cls);
    let t = f.graph.concat_rows(&text_cls);
    let mmc = Some(mmc_loss_node(f, a, t)?);

    let mut fused = Vec::with_capacity(batch.len());
    let mut atm_cls: Vec<NodeId> = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let (mm, _) = f.multimodal_encode(&masked_audio[i], &masked_text[i])?;
        fused.push(MaskedFusion {
            mm,
            audio_len: masked_audio[i].len,
            text_plan: &plan.text[i],
            audio_plan: &plan.audio[i],
            targets: s.tokens.ids(),
            patch_targets: targets[i],
        });
        if plan.atm_labels[i] == 1.0 {
            atm_cls.push(mm.cls);
        } else {
            let (neg, _) = f.multimodal_encode(&masked_audio[i], &masked_text[plan.partner[i]])?;
            atm_cls.push(neg.cls);
        }
    }
    let mmm = mmm_loss_node(f, &fused, cfg.kappa)?;
    let x = f.graph.concat_rows(&atm_cls);
    let atm = Some(atm_loss_node(f, x, &plan.atm_labels)?);
    Ok(LossNodes {
        mlm,
        mam,
        mmc,
        mmm,
        atm,
    })
}

/// Loss bundle and per-parameter gradients of the weighted total.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&Segment],
    cfg: &TrainConfig,
    step: u64,
    fixed_targets: Option<&[Mat]>,
) -> Result<(LossBundle, BTreeMap<String, Mat>)> {
    let plan = BatchPlan::new(&model.config, cfg, batch, step)?;
    let mut f = model.forward(true);
    let nodes = build_losses(&mut f, batch, cfg, &plan, fixed_targets)?;
    let (total, bundle) = nodes.total(&mut f.graph, cfg.weights)?;
    if !bundle.total.is_finite() {
        log::error!("non-finite loss at step {step}: {bundle:?}");
        return Err(Error::NonFinite(format!("total loss at step {step}: {bundle:?}")));
    }
    let mut grads = f.graph.backward(total);
    let mut out = BTreeMap::new();
    for (name, &id) in f.bound() {
        if let Some(g) = grads.take(id) {
            out.insert(name.clone(), g);
        }
    }
    Ok((bundle, out))
}

/// Forward-only loss bundle.
pub fn batch_loss(
    model: &Model,
    batch: &[&Segment],
    cfg: &TrainConfig,
    step: u64,
    fixed_targets: Option<&[Mat]>,
) -> Result<LossBundle> {
    let plan = BatchPlan::new(&model.config, cfg, batch, step)?;
    let mut f = model.forward(false);
    let nodes = build_losses(&mut f, batch, cfg, &plan, fixed_targets)?;
    Ok(nodes.total(&mut f.graph, cfg.weights)?.1)
}

pub fn global_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads.values().map(Mat::sum_sq).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `bound`; returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut BTreeMap<String, Mat>, bound: f64) -> f64 {
    let norm = global_norm(grads);
    if bound > 0.0 && norm > bound {
        let s = bound / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Parameters plus optimizer state. Randomness is derived from
/// `(seed, step)`, so no generator state needs saving.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub momentum: BTreeMap<String, Mat>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        TrainState {
            model,
            momentum: BTreeMap::new(),
            step: 0,
        }
    }

    /// Parameters and momentum in one WBCK file; the model config and the
    /// step counter go in the `.cfg` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut all = self.model.params.clone();
        for (name, m) in &self.momentum {
            all.insert(format!("{MOMENTUM_PREFIX}{name}"), m.clone());
        }
        crate::io::atomic_write(path, |w| all.write_to(w))?;
        let text = format!("{}train.step={}\n", self.model.config.to_kv(), self.step);
        crate::io::atomic_write(config_sidecar(path), |w| Ok(w.write_all(text.as_bytes())?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_sidecar(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = ModelConfig::from_kv(&text)?;
        let step = RunConfig::parse_lines(&text)?
            .get("train.step")
            .map(|s| s.parse::<u64>())
            .transpose()
            .map_err(|_| Error::Config(format!("{}: bad train.step", cfg_path.display())))?
            .unwrap_or(0);
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let all = Parameters::read_from(&mut bytes.as_slice())?;
        let mut params = Parameters::default();
        let mut momentum = BTreeMap::new();
        for (name, m) in all.iter() {
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(p) => {
                    momentum.insert(p.to_string(), m.clone());
                }
                None => params.insert(name, m.clone()),
            }
        }
        Ok(TrainState {
            model: Model::from_parts(config, params)?,
            momentum,
            step,
        })
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            state: TrainState::new(model),
        })
    }

    pub fn from_state(state: TrainState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { config, state })
    }

    /// One SGD update on `batch`.
    pub fn step(&mut self, batch: &[&Segment]) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.state.step;
        let (bundle, mut grads) = loss_and_grads(&self.state.model, batch, &self.config, step, None)?;
        clip_grads(&mut grads, self.config.clip_norm);
        let lr = self.config.lr_at(step);
        let mu = self.config.momentum;
        for (name, p) in self.state.model.params.iter_mut() {
            let Some(g) = grads.get(name) else {
                continue;
            };
            let update = if mu > 0.0 {
                let v = self
                    .state
                    .momentum
                    .entry(name.to_string())
                    .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
                v.scale_assign(mu);
                v.add_assign(g);
                round_f32(v);
                v.clone()
            } else {
                g.clone()
            };
            for (pv, u) in p.data_mut().iter_mut().zip(update.data()) {
                *pv -= lr * u;
            }
            round_f32(p);
            if name == TAU_NAME {
                let t = p.item().clamp(TAU_MIN, TAU_MAX);
                p.data_mut()[0] = t;
                round_f32(p);
            }
        }
        if !self.state.model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        self.state.step += 1;
        Ok(StepMetrics {
            step: step + 1,
            mlm: bundle.mlm,
            mam: bundle.mam,
            mmc: bundle.mmc,
            mmm: bundle.mmm,
            atm: bundle.atm,
            total: bundle.total,
            tau: self.state.model.params.tau(),
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        })
    }

    pub fn steps_per_epoch(&self, n_segments: usize) -> u64 {
        n_segments.div_ceil(self.config.batch_size) as u64
    }

    /// Segment order for `epoch`, shuffled with a seed derived from the
    /// global seed and the epoch.
    pub fn epoch_order(&self, n_segments: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_segments).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[0x65706f6368, epoch]));
        order.shuffle(&mut rng);
        order
    }

    /// Runs from the current step to the end of the last epoch (or until
    /// `max_steps` total steps), calling `on_step` after each update.
    pub fn run<F>(&mut self, segments: &[Segment], max_steps: Option<u64>, mut on_step: F) -> Result<Vec<StepMetrics>>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        if segments.is_empty() {
            return Err(Error::InvalidInput("no training segments".into()));
        }
        let per_epoch = self.steps_per_epoch(segments.len());
        let total = per_epoch * self.config.epochs as u64;
        let end = max_steps.map_or(total, |m| m.min(total));
        let mut out = Vec::new();
        let mut order_epoch = u64::MAX;
        let mut order = Vec::new();
        while self.state.step < end {
            let epoch = self.state.step / per_epoch;
            if epoch != order_epoch {
                order = self.epoch_order(segments.len(), epoch);
                order_epoch = epoch;
            }
            let k = (self.state.step % per_epoch) as usize * self.config.batch_size;
            let batch: Vec<&Segment> = order[k..(k + self.config.batch_size).min(order.len())]
                .iter()
                .map(|&i| &segments[i])
                .collect();
            let m = self.step(&batch)?;
            on_step(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Output layout of a training run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join(format!("checkpoint-{step:08}.wbck"))
    }

    pub fn final_model(&self) -> PathBuf {
        self.root.join("model.wbck")
    }
}

/// Full training run writing a frozen config, a metrics log, periodic
/// checkpoints and the final model into `out`. With `resume`, training
/// continues from that checkpoint and the log keeps its earlier steps.
pub fn train(
    run_config: &RunConfig,
    segments: &[Segment],
    out: impl AsRef<Path>,
    resume: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    let cfg = TrainConfig::from_run_config(run_config)?;
    let dir = RunDir::new(out.as_ref())?;
    let text = run_config.to_text();
    crate::io::atomic_write(dir.config(), |w| Ok(w.write_all(text.as_bytes())?))?;

    let mut trainer = match resume {
        Some(p) => Trainer::from_state(TrainState::load(p)?, cfg)?,
        None => Trainer::new(
            Model::init(ModelConfig::from_run_config(run_config)?, run_config.get("loss.tau_init")?)?,
            cfg,
        )?,
    };
    let start = trainer.state.step;
    let mut kept: Vec<StepMetrics> = if start > 0 && dir.metrics().exists() {
        crate::io::read_jsonl::<StepMetrics>(dir.metrics())?
            .into_iter()
            .filter(|m| m.step <= start)
            .collect()
    } else {
        Vec::new()
    };
    let mut log = Vec::new();
    crate::io::write_jsonl(&mut log, &kept)?;
    let metrics_path = dir.metrics();
    std::fs::write(&metrics_path, &log).map_err(|e| Error::io(&metrics_path, e))?;
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let interval = trainer.config.checkpoint_interval;
    let new = trainer.run(segments, None, |t, m| {
        serde_json::to_writer(&mut file, m)?;
        file.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
        if interval > 0 && m.step % interval == 0 {
            t.state.save(dir.checkpoint(m.step))?;
        }
        log::info!("step {} total {:.5}", m.step, m.total);
        Ok(())
    })?;
    trainer.state.save(dir.final_model())?;
    kept.extend(new);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticCorpus, SyntheticSpec};

    fn setup(batch_size: usize) -> (SyntheticCorpus, Model, TrainConfig) {
        let corpus = SyntheticCorpus::generate(&SyntheticSpec {
            n_segments: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model = Model::init(corpus.model_config(16, 1), 0.07).unwrap();
        let cfg = TrainConfig {
            batch_size,
            epochs: 1,
            ..TrainConfig::default()
        };
        (corpus, model, cfg)
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..30 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (corpus, model, cfg) = setup(3);
        let mut t = Trainer::new(model.clone(), TrainConfig { learning_rate: 0.0, ..cfg }).unwrap();
        let batch: Vec<&Segment> = corpus.segments.iter().take(3).collect();
        let m = t.step(&batch).unwrap();
        assert_eq!(t.state.model.params, model.params);
        assert!(m.mlm.is_some() && m.mam.is_some() && m.mmc.is_some() && m.mmm.is_some() && m.atm.is_some());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let (corpus, model, cfg) = setup(3);
        let batch: Vec<&Segment> = corpus.segments.iter().take(3).collect();
        let (_, mut g) = loss_and_grads(&model, &batch, &cfg, 0, None).unwrap();
        let before = clip_grads(&mut g, 0.05);
        assert!(before > 0.05);
        assert!(global_norm(&g) <= 0.05 * (1.0 + 1e-12));
    }

    #[test]
    fn epoch_step_count_and_batch_of_one() {
        let (corpus, model, cfg) = setup(4);
        let mut t = Trainer::new(model, cfg).unwrap();
        let log = t.run(&corpus.segments, None, |_, _| Ok(())).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.last().unwrap().step, 2);

        let (corpus, model, cfg) = setup(1);
        let mut t = Trainer::new(model, cfg).unwrap();
        let m = t.step(&[&corpus.segments[0]]).unwrap();
        assert!(m.total.is_finite());
    }

    #[test]
    fn momentum_state_round_trips() {
        let (corpus, model, cfg) = setup(3);
        let cfg = TrainConfig { momentum: 0.9, ..cfg };
        let batch: Vec<&Segment> = corpus.segments.iter().take(3).collect();
        let mut t = Trainer::new(model, cfg.clone()).unwrap();
        t.step(&batch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wbck");
        t.state.save(&p).unwrap();
        let loaded = TrainState::load(&p).unwrap();
        assert_eq!(loaded, t.state);
        let mut t2 = Trainer::from_state(loaded, cfg).unwrap();
        let a = t.step(&batch).unwrap();
        let b = t2.step(&batch).unwrap();
        assert!(a.same_values(&b));
        assert_eq!(t.state, t2.state);
    }
}
