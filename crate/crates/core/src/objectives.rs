//! The five pretraining losses and their weighted total.
//!
//! Graph-level builders (`*_node`) are used by the trainer; the plain
//! functions evaluate the same code path on fixed inputs.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{EncoderNodes, Forward, HiddenStates, Modality, Model, Provenance, TAU_NAME};
use crate::tensor::Mat;
use crate::tokenizer::TokenSequence;

/// CPC temperature.
pub const KAPPA: f64 = 0.1;
/// Guard added to vector norms in cosine similarity.
pub const COS_EPS: f64 = 1e-8;

pub const MLM_HEAD: &str = "heads.mlm";
pub const MMM_HEAD: &str = "heads.mmm";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mlm: f64,
    pub mam: f64,
    pub mmc: f64,
    pub mmm: f64,
    pub atm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mlm: 1.0,
            mam: 1.0,
            mmc: 1.0,
            mmm: 1.0,
            atm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, w) in self.as_array().iter().zip(LOSS_NAMES) {
            if !(k.is_finite() && *k >= 0.0) {
                return Err(Error::Config(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.mlm, self.mam, self.mmc, self.mmm, self.atm]
    }

    /// All weights zero except `name`.
    pub fn only(name: &str) -> Self {
        let mut w = LossWeights {
            mlm: 0.0,
            mam: 0.0,
            mmc: 0.0,
            mmm: 0.0,
            atm: 0.0,
        };
        match name {
            "mlm" => w.mlm = 1.0,
            "mam" => w.mam = 1.0,
            "mmc" => w.mmc = 1.0,
            "mmm" => w.mmm = 1.0,
            "atm" => w.atm = 1.0,
            _ => panic!("unknown loss {name}"),
        }
        w
    }
}

pub const LOSS_NAMES: [&str; 5] = ["mlm", "mam", "mmc", "mmm", "atm"];

/// Per-objective values; `None` marks a loss whose inputs were absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub mlm: Option<f64>,
    pub mam: Option<f64>,
    pub mmc: Option<f64>,
    pub mmm: Option<f64>,
    pub atm: Option<f64>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn as_array(&self) -> [Option<f64>; 5] {
        [self.mlm, self.mam, self.mmc, self.mmm, self.atm]
    }

    /// Builds a bundle and computes its total.
    pub fn new(losses: [Option<f64>; 5], weights: LossWeights) -> Result<Self> {
        let mut b = LossBundle {
            mlm: losses[0],
            mam: losses[1],
            mmc: losses[2],
            mmm: losses[3],
            atm: losses[4],
            weights,
            total: 0.0,
        };
        b.total = total_loss(&b)?;
        Ok(b)
    }

    pub fn all_present(&self) -> bool {
        self.as_array().iter().all(Option::is_some)
    }
}

/// Weighted sum over the present losses.
pub fn total_loss(bundle: &LossBundle) -> Result<f64> {
    let present: Vec<(f64, f64)> = bundle
        .as_array()
        .iter()
        .zip(bundle.weights.as_array())
        .filter_map(|(l, w)| l.map(|l| (l, w)))
        .collect();
    if present.is_empty() {
        return Err(Error::NoLoss);
    }
    Ok(present.iter().map(|(l, w)| l * w).sum())
}

/// Graph nodes for each objective of one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossNodes {
    pub mlm: Option<NodeId>,
    pub mam: Option<NodeId>,
    pub mmc: Option<NodeId>,
    pub mmm: Option<NodeId>,
    pub atm: Option<NodeId>,
}

impl LossNodes {
    pub fn as_array(&self) -> [Option<NodeId>; 5] {
        [self.mlm, self.mam, self.mmc, self.mmm, self.atm]
    }

    /// Weighted total node plus the scalar bundle.
    pub fn total(&self, g: &mut Graph, weights: LossWeights) -> Result<(NodeId, LossBundle)> {
        let mut acc: Option<NodeId> = None;
        for (node, w) in self.as_array().into_iter().zip(weights.as_array()) {
            if let Some(n) = node {
                let term = g.scale(n, w);
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term),
                });
            }
        }
        let total = acc.ok_or(Error::NoLoss)?;
        let values = self.as_array().map(|n| n.map(|n| g.scalar(n)));
        let mut bundle = LossBundle::new(values, weights)?;
        bundle.total = g.scalar(total);
        Ok((total, bundle))
    }
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, targets: &[usize]) -> NodeId {
    let nll = g.nll_rows(logits, targets);
    g.mean(nll)
}

/// One sequence's contribution to a masked-token loss: the encoder output
/// rows (row `i` is position `i + 1`), the plan and the original ids.
pub struct MaskedText<'a> {
    pub seq: NodeId,
    pub plan: &'a MaskPlan,
    pub targets: &'a [u32],
}

/// Masked-token negative log-likelihood through the linear head `head`,
/// averaged over every masked position in the batch.
pub fn masked_token_loss_node(f: &mut Forward<'_>, items: &[MaskedText<'_>], head: &str) -> Result<Option<NodeId>> {
    let vocab = f.model.config.vocab_size;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for it in items.iter().filter(|it| !it.plan.is_empty()) {
        if it.plan.seq_len() != it.targets.len() {
            return Err(Error::InvalidInput(format!(
                "text plan covers {} positions but targets have {}",
                it.plan.seq_len(),
                it.targets.len()
            )));
        }
        let idx: Vec<usize> = it.plan.positions().iter().map(|p| p - 1).collect();
        for &p in it.plan.positions() {
            let t = it.targets[p];
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, size: vocab });
            }
            targets.push(t as usize);
        }
        rows.push(f.graph.gather_rows(it.seq, &idx));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let h = if rows.len() == 1 { rows[0] } else { f.graph.concat_rows(&rows) };
    let w = f.param(&format!("{head}.w"))?;
    let b = f.param(&format!("{head}.b"))?;
    let logits = f.graph.matmul(h, w);
    let logits = f.graph.add_row(logits, b);
    Ok(Some(cross_entropy_node(&mut f.graph, logits, &targets)))
}

/// One sequence's contribution to a CPC loss: contextual outputs, the
/// (gradient-free) patch embeddings they must identify, and the plan.
pub struct MaskedAudio<'a> {
    pub ctx: NodeId,
    pub targets: NodeId,
    pub plan: &'a MaskPlan,
}

/// Contrastive predictive coding over masked positions: for each masked
/// `t`, softmax over cosine similarities (divided by `kappa`) between
/// `c_t` and `{b_t} ∪ negatives`, with `b_t` as the target class.
pub fn cpc_loss_node(g: &mut Graph, items: &[MaskedAudio<'_>], kappa: f64) -> Result<Option<NodeId>> {
    let mut picked = Vec::new();
    for it in items.iter().filter(|it| !it.plan.is_empty()) {
        if !it.plan.has_negatives() {
            return Err(Error::InvalidInput("audio mask plan has no negatives".into()));
        }
        let n = g.value(it.targets).rows();
        if it.plan.seq_len() != n + 1 || g.value(it.ctx).rows() != n {
            return Err(Error::InvalidInput("audio plan, context and targets disagree in length".into()));
        }
        let rows: Vec<usize> = it.plan.positions().iter().map(|p| p - 1).collect();
        let c = g.gather_rows(it.ctx, &rows);
        let c = g.normalize_rows(c, COS_EPS);
        let b = g.normalize_rows(it.targets, COS_EPS);
        let sim = g.matmul_t(c, false, b, true);
        let cand: Vec<Vec<usize>> = it
            .plan
            .positions()
            .iter()
            .zip(it.plan.negatives())
            .map(|(&t, negs)| std::iter::once(t - 1).chain(negs.iter().map(|n| n - 1)).collect())
            .collect();
        picked.push(g.pick_per_row(sim, &cand));
    }
    if picked.is_empty() {
        return Ok(None);
    }
    let s = if picked.len() == 1 { picked[0] } else { g.concat_rows(&picked) };
    if !g.value(s).is_finite() {
        return Err(Error::NonFinite("CPC similarities".into()));
    }
    let s = g.scale(s, 1.0 / kappa);
    let zeros = vec![0; g.value(s).rows()];
    Ok(Some(cross_entropy_node(g, s, &zeros)))
}

/// Symmetric InfoNCE over L2-normalized embeddings with temperature node
/// `tau`: mean of the row-wise and column-wise cross-entropies against the
/// diagonal.
pub fn symmetric_contrastive_node(g: &mut Graph, a: NodeId, t: NodeId, tau: NodeId) -> Result<NodeId> {
    let n = g.value(a).rows();
    if n == 0 {
        return Err(Error::InvalidInput("contrastive batch is empty".into()));
    }
    if g.value(t).rows() != n {
        return Err(Error::InvalidInput("audio and text batches differ in size".into()));
    }
    let an = g.normalize_rows(a, COS_EPS);
    let tn = g.normalize_rows(t, COS_EPS);
    let s = g.matmul_t(an, false, tn, true);
    let s = g.div_scalar(s, tau);
    let diag: Vec<usize> = (0..n).collect();
    let rows = cross_entropy_node(g, s, &diag);
    let st = g.transpose(s);
    let cols = cross_entropy_node(g, st, &diag);
    let sum = g.add(rows, cols);
    Ok(g.scale(sum, 0.5))
}

/// Projects audio and text CLS batches (`B x d` nodes) and applies the
/// symmetric contrastive loss at the learned temperature.
pub fn mmc_loss_node(f: &mut Forward<'_>, audio_cls: NodeId, text_cls: NodeId) -> Result<NodeId> {
    let pa = f.param("heads.mmc_audio.w")?;
    let pt = f.param("heads.mmc_text.w")?;
    let tau = f.param(TAU_NAME)?;
    let a = f.graph.matmul(audio_cls, pa);
    let t = f.graph.matmul(text_cls, pt);
    symmetric_contrastive_node(&mut f.graph, a, t, tau)
}

/// Projected, normalized contrastive embeddings for retrieval.
pub fn mmc_embeddings(model: &Model, audio_cls: &Mat, text_cls: &Mat) -> Result<(Mat, Mat)> {
    let mut f = model.forward(false);
    let a = f.graph.constant(audio_cls.clone());
    let t = f.graph.constant(text_cls.clone());
    let pa = f.param("heads.mmc_audio.w")?;
    let pt = f.param("heads.mmc_text.w")?;
    let a = f.graph.matmul(a, pa);
    let t = f.graph.matmul(t, pt);
    let a = f.graph.normalize_rows(a, COS_EPS);
    let t = f.graph.normalize_rows(t, COS_EPS);
    Ok((f.graph.value(a).clone(), f.graph.value(t).clone()))
}

/// Matched/unmatched classifier on multimodal CLS vectors (`B x d`).
pub fn atm_loss_node(f: &mut Forward<'_>, mm_cls: NodeId, labels: &[f64]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("ATM batch is empty".into()));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::InvalidInput("ATM labels must be 0 or 1".into()));
    }
    let w = f.param("heads.atm.w")?;
    let b = f.param("heads.atm.b")?;
    let z = f.graph.matmul(mm_cls, w);
    let z = f.graph.add_row(z, b);
    let l = f.graph.bce_logits(z, labels);
    Ok(f.graph.mean(l))
}

/// One fused sequence's masked-multimodal inputs.
pub struct MaskedFusion<'a> {
    pub mm: EncoderNodes,
    pub audio_len: usize,
    pub text_plan: &'a MaskPlan,
    pub audio_plan: &'a MaskPlan,
    pub targets: &'a [u32],
    pub patch_targets: NodeId,
}

/// Text reconstruction (separate head) and audio CPC from fused states,
/// averaged when both are present.
pub fn mmm_loss_node(f: &mut Forward<'_>, items: &[MaskedFusion<'_>], kappa: f64) -> Result<Option<NodeId>> {
    let mut text_items = Vec::new();
    let mut audio_items = Vec::new();
    for it in items {
        let Some(seq) = it.mm.seq else { continue };
        let text_len = it.mm.len - it.audio_len;
        if text_len > 0 && !it.text_plan.is_empty() {
            let t = f.graph.slice_rows(seq, it.audio_len, text_len);
            text_items.push((t, it));
        }
        if it.audio_len > 0 && !it.audio_plan.is_empty() {
            let a = f.graph.slice_rows(seq, 0, it.audio_len);
            audio_items.push((a, it));
        }
    }
    let text: Vec<MaskedText<'_>> = text_items
        .iter()
        .map(|(seq, it)| MaskedText {
            seq: *seq,
            plan: it.text_plan,
            targets: it.targets,
        })
        .collect();
    let text_part = masked_token_loss_node(f, &text, MMM_HEAD)?;
    let audio: Vec<MaskedAudio<'_>> = audio_items
        .iter()
        .map(|(seq, it)| MaskedAudio {
            ctx: *seq,
            targets: it.patch_targets,
            plan: it.audio_plan,
        })
        .collect();
    let audio_part = cpc_loss_node(&mut f.graph, &audio, kappa)?;
    Ok(match (text_part, audio_part) {
        (None, None) => None,
        (Some(x), None) | (None, Some(x)) => Some(x),
        (Some(x), Some(y)) => {
            let s = f.graph.add(x, y);
            Some(f.graph.scale(s, 0.5))
        }
    })
}

// --- value-level entry points ---

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// MLM loss of text hidden states under `plan`; `None` when nothing is masked.
pub fn mlm_loss(model: &Model, hidden: &HiddenStates, plan: &MaskPlan, targets: &TokenSequence) -> Result<Option<f64>> {
    let mut f = model.forward(false);
    if hidden.is_empty() {
        return Ok(None);
    }
    let seq = f.graph.constant(hidden.sequence.clone());
    let node = masked_token_loss_node(
        &mut f,
        &[MaskedText {
            seq,
            plan,
            targets: targets.ids(),
        }],
        MLM_HEAD,
    )?;
    Ok(node.map(|n| f.graph.scalar(n)))
}

/// Mean cross-entropy of already-computed logit rows.
pub fn cross_entropy_from_logits(logits: &Mat, targets: &[usize]) -> Result<Option<f64>> {
    if logits.rows() != targets.len() {
        return Err(Error::InvalidInput("one target per logit row is required".into()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::TokenOutOfRange {
            id: t as u32,
            size: logits.cols(),
        });
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = cross_entropy_node(&mut g, z, targets);
    Ok(Some(g.scalar(l)))
}

/// MAM loss of contextual audio outputs against the unmasked patch
/// embeddings.
pub fn mam_loss(ctx: &HiddenStates, patch_embeddings: &Mat, plan: &MaskPlan, kappa: f64) -> Result<Option<f64>> {
    check_finite(&ctx.sequence, "audio context")?;
    check_finite(patch_embeddings, "patch embeddings")?;
    let mut g = Graph::new();
    let c = g.constant(ctx.sequence.clone());
    let b = g.constant(patch_embeddings.clone());
    let node = cpc_loss_node(&mut g, &[MaskedAudio { ctx: c, targets: b, plan }], kappa)?;
    Ok(node.map(|n| g.scalar(n)))
}

/// Symmetric contrastive loss on already-projected embeddings.
pub fn symmetric_contrastive(a: &Mat, t: &Mat, tau: f64) -> Result<f64> {
    check_finite(a, "audio embeddings")?;
    check_finite(t, "text embeddings")?;
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let tn = g.constant(t.clone());
    let tau = g.constant(Mat::scalar(tau));
    let l = symmetric_contrastive_node(&mut g, an, tn, tau)?;
    Ok(g.scalar(l))
}

/// MMC loss from unprojected CLS batches, using the model's projections
/// and temperature.
pub fn mmc_loss(model: &Model, audio_cls: &Mat, text_cls: &Mat) -> Result<f64> {
    let mut f = model.forward(false);
    let a = f.graph.constant(audio_cls.clone());
    let t = f.graph.constant(text_cls.clone());
    let l = mmc_loss_node(&mut f, a, t)?;
    Ok(f.graph.scalar(l))
}

/// MMM loss from fused hidden states.
#[allow(clippy::too_many_arguments)]
pub fn mmm_loss(
    model: &Model,
    mm: &HiddenStates,
    provenance: &Provenance,
    text_plan: &MaskPlan,
    audio_plan: &MaskPlan,
    targets: &TokenSequence,
    patch_embeddings: &Mat,
    kappa: f64,
) -> Result<Option<f64>> {
    let audio_len = provenance.iter().filter(|p| p.0 == Modality::Audio).count();
    if provenance.len() != mm.len() {
        return Err(Error::InvalidInput("provenance does not cover the fused sequence".into()));
    }
    let mut f = model.forward(false);
    let cls = f.graph.constant(Mat::row_vector(&mm.cls));
    let seq = (!mm.is_empty()).then(|| f.graph.constant(mm.sequence.clone()));
    let patch_targets = f.graph.constant(patch_embeddings.clone());
    let item = MaskedFusion {
        mm: EncoderNodes {
            cls,
            seq,
            len: mm.len(),
        },
        audio_len,
        text_plan,
        audio_plan,
        targets: targets.ids(),
        patch_targets,
    };
    let node = mmm_loss_node(&mut f, &[item], kappa)?;
    Ok(node.map(|n| f.graph.scalar(n)))
}

/// ATM loss from multimodal CLS vectors.
pub fn atm_loss(model: &Model, mm_cls: &Mat, labels: &[f64]) -> Result<f64> {
    let mut f = model.forward(false);
    let x = f.graph.constant(mm_cls.clone());
    let l = atm_loss_node(&mut f, x, labels)?;
    Ok(f.graph.scalar(l))
}

/// Mean binary cross-entropy of raw logits.
pub fn bce_from_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidInput("ATM batch must be nonempty with one label per logit".into()));
    }
    let mut g = Graph::new();
    let z = g.constant(Mat::from_vec(logits.len(), 1, logits.to_vec()));
    let l = g.bce_logits(z, labels);
    let m = g.mean(l);
    Ok(g.scalar(m))
}
