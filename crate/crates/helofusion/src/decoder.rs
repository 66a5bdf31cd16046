//! Anchor-based decoder head.
//!
//! Intention anchors are k-means centroids of agent-frame ground-truth
//! endpoints, fitted once per training corpus and per agent category. For
//! each anchor the head regresses per-step offsets around the straight line
//! from the origin to the anchor and emits one confidence logit. Training
//! uses a winner-take-all objective: cross-entropy against the anchor nearest
//! the ground-truth endpoint, plus masked smooth-L1 on the matched mode.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Pose;
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::nn::{bind_mlp, mlp_apply, Activation, MlpBinding, MlpParams};
use crate::scene::{Scene, AGENT_TYPE_COUNT};
use crate::tensor::{Tape, Tensor, VarId};

const KMEANS_MAX_ITERS: usize = 100;

/// Frozen intention anchors, one set of A points per agent category, in the
/// agent-centric frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionAnchorSet {
    pub per_category: Vec<Vec<[f64; 2]>>,
}

/// Agent-frame ground-truth endpoints grouped by category. An endpoint is the
/// last valid future position, expressed in the frame of the agent's last
/// valid history pose.
pub fn corpus_endpoints(scenes: &[Scene]) -> Vec<Vec<[f64; 2]>> {
    let mut per_category: Vec<Vec<[f64; 2]>> = vec![Vec::new(); AGENT_TYPE_COUNT];
    for scene in scenes {
        for track in &scene.agents {
            let Some(h) = track.last_valid_history() else {
                continue;
            };
            let Some(f) = track.future.iter().rposition(|s| s.valid) else {
                continue;
            };
            let anchor_state = &track.history[h];
            let pose = Pose {
                x: anchor_state.x,
                y: anchor_state.y,
                heading: anchor_state.heading,
            };
            let (lx, ly) = pose.to_local(track.future[f].x, track.future[f].y);
            per_category[track.agent_type.index()].push([lx, ly]);
        }
    }
    per_category
}

/// Fit per-category anchors by k-means over agent-frame endpoints. A category
/// with fewer than A endpoints of its own falls back to clustering the pooled
/// endpoints of the whole corpus.
pub fn fit_anchors(scenes: &[Scene], a: usize, seed: u64) -> Result<IntentionAnchorSet> {
    if a == 0 {
        return Err(Error::Validation("fit_anchors: A must be >= 1".into()));
    }
    let per_category = corpus_endpoints(scenes);
    let pooled: Vec<[f64; 2]> = per_category.iter().flatten().copied().collect();
    if pooled.len() < a {
        return Err(Error::Validation(format!(
            "fit_anchors: corpus has {} valid endpoints, need at least {a}",
            pooled.len()
        )));
    }
    let mut out = Vec::with_capacity(AGENT_TYPE_COUNT);
    for cat in &per_category {
        let points = if cat.len() >= a { cat } else { &pooled };
        out.push(kmeans(points, a, seed, KMEANS_MAX_ITERS)?);
    }
    Ok(IntentionAnchorSet { per_category: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    /// Head over (embedding ++ anchor encoding): emits T_f*2 offsets and one
    /// logit per anchor row.
    pub head: MlpParams,
    pub t_f: usize,
}

impl DecoderParams {
    pub fn init(d: usize, t_f: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderParams {
            head: MlpParams::init(&[d + 2, d, 2 * t_f + 1], Activation::Relu, rng),
            t_f,
        }
    }
}

pub struct DecoderBinding {
    pub head: MlpBinding,
    pub t_f: usize,
}

pub fn bind_decoder(tape: &mut Tape, p: &DecoderParams) -> DecoderBinding {
    DecoderBinding {
        head: bind_mlp(tape, &p.head),
        t_f: p.t_f,
    }
}

/// All A modes decoded for one agent, still on the tape.
pub struct DecodedModes {
    /// A x (2*T_f): row a holds (x_1, y_1, ..., x_Tf, y_Tf) of mode a, in the
    /// agent-centric frame.
    pub trajectories: VarId,
    /// 1 x A confidence logits.
    pub logits: VarId,
}

/// Decode A trajectory modes and logits from one fused agent embedding.
pub fn decode(
    tape: &mut Tape,
    binding: &DecoderBinding,
    embedding: VarId,
    anchors: &[[f64; 2]],
) -> Result<DecodedModes> {
    let e = tape.value(embedding);
    if e.rows != 1 {
        return Err(Error::Contract(format!(
            "decode: embedding must be one row, got {}",
            e.rows
        )));
    }
    let a = anchors.len();
    if a == 0 {
        return Err(Error::Validation("decode: empty anchor set".into()));
    }
    let t_f = binding.t_f;
    let broadcast = tape.gather_rows(embedding, &vec![0; a])?;
    let anchor_enc = tape.leaf(Tensor::new(
        a,
        2,
        anchors.iter().flat_map(|p| [p[0], p[1]]).collect(),
    ));
    let inputs = tape.concat_cols(&[broadcast, anchor_enc])?;
    let raw = mlp_apply(tape, &binding.head, inputs)?;
    let offsets = tape.slice_cols(raw, 0, 2 * t_f)?;
    let logit_col = tape.slice_cols(raw, 2 * t_f, 2 * t_f + 1)?;
    let logits = tape.transpose(logit_col)?;
    // Straight origin-to-anchor baseline: position at step s (1-based) is
    // anchor * s / T_f.
    let mut base = Vec::with_capacity(a * 2 * t_f);
    for p in anchors {
        for s in 1..=t_f {
            let frac = s as f64 / t_f as f64;
            base.push(p[0] * frac);
            base.push(p[1] * frac);
        }
    }
    let base = tape.leaf(Tensor::new(a, 2 * t_f, base));
    let trajectories = tape.add(base, offsets)?;
    Ok(DecodedModes {
        trajectories,
        logits,
    })
}

/// One selected prediction mode with its softmax probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMode {
    pub probability: f64,
    /// T_f positions; frame depends on the producer (agent frame out of the
    /// decoder, world frame after conversion).
    pub trajectory: Vec<[f64; 2]>,
}

/// Keep the top-K modes by logit (ties to the lower anchor index), sorted by
/// descending confidence, with probabilities softmaxed over the selected K.
pub fn select_topk(
    trajectories: &[Vec<[f64; 2]>],
    logits: &[f64],
    k: usize,
) -> Result<Vec<PredictedMode>> {
    if trajectories.len() != logits.len() {
        return Err(Error::Contract(format!(
            "select_topk: {} trajectories but {} logits",
            trajectories.len(),
            logits.len()
        )));
    }
    if logits.len() < k {
        return Err(Error::Validation(format!(
            "select_topk: K={k} exceeds {} available modes",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits[j].partial_cmp(&logits[i]).unwrap().then(i.cmp(&j)));
    order.truncate(k);
    let mx = order.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = order.iter().map(|&i| (logits[i] - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(order
        .iter()
        .zip(&exps)
        .map(|(&i, e)| PredictedMode {
            probability: e / z,
            trajectory: trajectories[i].clone(),
        })
        .collect())
}

/// Ground truth for one agent's future, in the agent-centric frame.
pub struct GroundTruthFuture {
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

pub struct LossBreakdown {
    pub classification: VarId,
    pub regression: VarId,
    pub total: VarId,
    pub matched_anchor: usize,
}

/// Winner-take-all loss. Returns `None` when the ground truth has no valid
/// future state (the agent contributes nothing to training).
pub fn compute_loss(
    tape: &mut Tape,
    modes: &DecodedModes,
    anchors: &[[f64; 2]],
    gt: &GroundTruthFuture,
    lambda: f64,
) -> Result<Option<LossBreakdown>> {
    let t_f = tape.value(modes.trajectories).cols / 2;
    if gt.positions.len() != t_f || gt.valid.len() != t_f {
        return Err(Error::Contract(format!(
            "compute_loss: ground truth length {} != T_f {t_f}",
            gt.positions.len()
        )));
    }
    let Some(last_valid) = gt.valid.iter().rposition(|&v| v) else {
        return Ok(None);
    };
    let endpoint = gt.positions[last_valid];
    // Nearest anchor to the endpoint, ties to the lower index.
    let matched = anchors
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let da = (a[0] - endpoint[0]).powi(2) + (a[1] - endpoint[1]).powi(2);
            let db = (b[0] - endpoint[0]).powi(2) + (b[1] - endpoint[1]).powi(2);
            da.partial_cmp(&db).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    // Cross-entropy of the matched index over all A logits.
    let lse = tape.log_sum_exp(modes.logits)?;
    let matched_logit = tape.slice_cols(modes.logits, matched, matched + 1)?;
    let neg = tape.scale(matched_logit, -1.0)?;
    let classification = tape.add(lse, neg)?;
    // Masked smooth-L1 on the matched mode, averaged over valid steps.
    let traj = tape.gather_rows(modes.trajectories, &[matched])?;
    let mut gt_flat = vec![0.0; 2 * t_f];
    let mut mask = vec![0.0; 2 * t_f];
    let mut n_valid = 0usize;
    for (s, (&p, &v)) in gt.positions.iter().zip(&gt.valid).enumerate() {
        if v {
            gt_flat[2 * s] = p[0];
            gt_flat[2 * s + 1] = p[1];
            mask[2 * s] = 1.0;
            mask[2 * s + 1] = 1.0;
            n_valid += 1;
        }
    }
    let gt_leaf = tape.leaf(Tensor::new(1, 2 * t_f, gt_flat));
    let mask_leaf = tape.leaf(Tensor::new(1, 2 * t_f, mask));
    let diff = tape.sub(traj, gt_leaf)?;
    let h = tape.huber(diff)?;
    let masked = tape.mul(h, mask_leaf)?;
    let summed = tape.sum_all(masked)?;
    let regression = tape.scale(summed, 1.0 / n_valid as f64)?;
    let weighted = tape.scale(regression, lambda)?;
    let total = tape.add(classification, weighted)?;
    Ok(Some(LossBreakdown {
        classification,
        regression,
        total,
        matched_anchor: matched,
    }))
}

/// Split a decoded A x (2*T_f) trajectory block into per-mode point lists.
pub fn trajectories_to_points(t: &Tensor) -> Vec<Vec<[f64; 2]>> {
    let t_f = t.cols / 2;
    (0..t.rows)
        .map(|a| {
            (0..t_f)
                .map(|s| [t.data[a * t.cols + 2 * s], t.data[a * t.cols + 2 * s + 1]])
                .collect()
        })
        .collect()
}
