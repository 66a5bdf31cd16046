//! Full-model composition: scene in, per-target fused embeddings, decoded
//! modes, loss, and world-frame predictions out.
//!
//! The forward pass is: encode agent histories (agent-centric point sets),
//! encode map polyline chunks (chunk-local frames), build the multi-scale
//! interaction graph, run heterogeneous message passing, fuse local context
//! with attention, and decode anchor-based modes for the target agents.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    bind_decoder, compute_loss, decode, select_topk, trajectories_to_points, DecoderBinding,
    DecoderParams, GroundTruthFuture, IntentionAnchorSet, PredictedMode,
};
use crate::encoder::{
    bind_encoder, chunk_polyline, encode_agent_history, encode_map_polyline, EncoderBinding,
    EncoderParams, Pose,
};
use crate::error::{Error, Result};
use crate::fusion::{
    bind_fusion, fuse_context, FusionBinding, FusionParams, TokenRef, TokenSet,
};
use crate::graph::{build_multiscale, GraphConfig, MultiScaleGraph};
use crate::message::{
    bind_message_passing, propagate, MessagePassingBinding, MessagePassingParams,
};
use crate::nn::{MlpBinding, MlpParams};
use crate::scene::{AgentType, Polyline, Scene};
use crate::tensor::{Tape, Tensor, VarId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Width of the learned agent-type embedding fed to the encoder.
    pub d_type: usize,
    /// Hidden widths of the shared per-point networks.
    pub point_widths: Vec<usize>,
    pub graph: GraphConfig,
    /// Message-passing rounds per scale.
    pub rounds: usize,
    /// Local-attention depth and heads.
    pub attn_layers: usize,
    pub heads: usize,
    /// Attention neighborhood size M.
    pub m_neighbors: usize,
    /// Intention anchors per category.
    pub anchors: usize,
    /// Prediction modes kept per agent.
    pub k_modes: usize,
    /// Future horizon (steps) the decoder regresses.
    pub t_f: usize,
    /// Regression weight in the training loss.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_type: 16,
            point_widths: vec![32, 64],
            graph: GraphConfig::default(),
            rounds: 2,
            attn_layers: 2,
            heads: 4,
            m_neighbors: 16,
            anchors: 8,
            k_modes: 6,
            t_f: 80,
            lambda: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        if self.d == 0 || self.d_type == 0 {
            return Err(Error::Validation("model: widths must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Validation(format!(
                "model: D={} must divide into {} heads",
                self.d, self.heads
            )));
        }
        if self.m_neighbors == 0 {
            return Err(Error::Validation("model: M must be >= 1".into()));
        }
        if self.k_modes == 0 || self.k_modes > self.anchors {
            return Err(Error::Validation(format!(
                "model: K={} modes must be in 1..=A={}",
                self.k_modes, self.anchors
            )));
        }
        if self.t_f == 0 || self.rounds == 0 || self.attn_layers == 0 {
            return Err(Error::Validation(
                "model: t_f, rounds, attn_layers must be positive".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Validation("model: lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub message: MessagePassingParams,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            encoder: EncoderParams::init(config.d, config.d_type, &config.point_widths, rng),
            message: MessagePassingParams::init(
                config.d,
                config.graph.scales.len(),
                config.rounds,
                rng,
            ),
            fusion: FusionParams::init(
                config.d,
                config.attn_layers,
                config.heads,
                config.m_neighbors,
                rng,
            ),
            decoder: DecoderParams::init(config.d, config.t_f, rng),
        })
    }
}

pub struct ModelBinding {
    pub encoder: EncoderBinding,
    pub message: MessagePassingBinding,
    pub fusion: FusionBinding,
    pub decoder: DecoderBinding,
}

pub fn bind_model(tape: &mut Tape, p: &ModelParams) -> ModelBinding {
    ModelBinding {
        encoder: bind_encoder(tape, &p.encoder),
        message: bind_message_passing(tape, &p.message),
        fusion: bind_fusion(tape, &p.fusion),
        decoder: bind_decoder(tape, &p.decoder),
    }
}

fn mlp_tensors(m: &MlpParams) -> Vec<&Tensor> {
    m.weights.iter().chain(m.biases.iter()).collect()
}

fn mlp_tensors_mut(m: &mut MlpParams) -> Vec<&mut Tensor> {
    m.weights.iter_mut().chain(m.biases.iter_mut()).collect()
}

fn mlp_vars(m: &MlpBinding) -> Vec<VarId> {
    m.weights.iter().chain(m.biases.iter()).copied().collect()
}

/// All trainable tensors in a fixed traversal order (the same order as
/// [`flatten_binding`]).
pub fn flatten_params(p: &ModelParams) -> Vec<&Tensor> {
    let mut out = Vec::new();
    out.extend(mlp_tensors(&p.encoder.agent_point));
    out.extend(mlp_tensors(&p.encoder.map_point));
    out.push(&p.encoder.type_table);
    out.extend(mlp_tensors(&p.encoder.agent_proj));
    out.extend(mlp_tensors(&p.encoder.map_proj));
    for s in &p.message.per_scale {
        out.extend(mlp_tensors(&s.aggregate));
        out.extend(mlp_tensors(&s.decompose));
        out.extend(mlp_tensors(&s.node_update));
    }
    out.extend(mlp_tensors(&p.message.fusion));
    for c in &p.fusion.category_proj {
        out.extend(mlp_tensors(c));
    }
    for l in &p.fusion.layers {
        out.extend(mlp_tensors(&l.q));
        out.extend(mlp_tensors(&l.k));
        out.extend(mlp_tensors(&l.v));
        out.extend(mlp_tensors(&l.relpos));
        out.extend(mlp_tensors(&l.out));
        out.extend(mlp_tensors(&l.ff));
    }
    out.extend(mlp_tensors(&p.decoder.head));
    out
}

pub fn flatten_params_mut(p: &mut ModelParams) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    out.extend(mlp_tensors_mut(&mut p.encoder.agent_point));
    out.extend(mlp_tensors_mut(&mut p.encoder.map_point));
    out.push(&mut p.encoder.type_table);
    out.extend(mlp_tensors_mut(&mut p.encoder.agent_proj));
    out.extend(mlp_tensors_mut(&mut p.encoder.map_proj));
    for s in &mut p.message.per_scale {
        out.extend(mlp_tensors_mut(&mut s.aggregate));
        out.extend(mlp_tensors_mut(&mut s.decompose));
        out.extend(mlp_tensors_mut(&mut s.node_update));
    }
    out.extend(mlp_tensors_mut(&mut p.message.fusion));
    for c in &mut p.fusion.category_proj {
        out.extend(mlp_tensors_mut(c));
    }
    for l in &mut p.fusion.layers {
        out.extend(mlp_tensors_mut(&mut l.q));
        out.extend(mlp_tensors_mut(&mut l.k));
        out.extend(mlp_tensors_mut(&mut l.v));
        out.extend(mlp_tensors_mut(&mut l.relpos));
        out.extend(mlp_tensors_mut(&mut l.out));
        out.extend(mlp_tensors_mut(&mut l.ff));
    }
    out.extend(mlp_tensors_mut(&mut p.decoder.head));
    out
}

/// Tape variables of all trainable parameters, matching [`flatten_params`].
pub fn flatten_binding(b: &ModelBinding) -> Vec<VarId> {
    let mut out = Vec::new();
    out.extend(mlp_vars(&b.encoder.agent_point));
    out.extend(mlp_vars(&b.encoder.map_point));
    out.push(b.encoder.type_table);
    out.extend(mlp_vars(&b.encoder.agent_proj));
    out.extend(mlp_vars(&b.encoder.map_proj));
    for s in &b.message.per_scale {
        out.extend(mlp_vars(&s.aggregate));
        out.extend(mlp_vars(&s.decompose));
        out.extend(mlp_vars(&s.node_update));
    }
    out.extend(mlp_vars(&b.message.fusion));
    for c in &b.fusion.category_proj {
        out.extend(mlp_vars(c));
    }
    for l in &b.fusion.layers {
        out.extend(mlp_vars(&l.q));
        out.extend(mlp_vars(&l.k));
        out.extend(mlp_vars(&l.v));
        out.extend(mlp_vars(&l.relpos));
        out.extend(mlp_vars(&l.out));
        out.extend(mlp_vars(&l.ff));
    }
    out.extend(mlp_vars(&b.decoder.head));
    out
}

/// Chunk-local reference pose: the first chunk point, heading along the first
/// segment (or the stored per-point heading if present). Using a frame that
/// moves with the map keeps the encoding rigid-motion invariant.
fn chunk_reference(chunk: &Polyline) -> Pose {
    let (x, y, h) = chunk.points[0];
    let heading = h.unwrap_or_else(|| {
        let (bx, by, _) = chunk.points[1.min(chunk.points.len() - 1)];
        (by - y).atan2(bx - x)
    });
    Pose { x, y, heading }
}

/// Everything the forward pass produces before decoding.
pub struct SceneForward {
    /// One fused embedding row per target, in `targets` order.
    pub embeddings: VarId,
    /// Agent indices of the targets.
    pub targets: Vec<usize>,
    /// Reference pose of every scene agent.
    pub poses: Vec<Pose>,
    /// Types of every scene agent.
    pub types: Vec<AgentType>,
    pub graph: MultiScaleGraph,
    /// Tokens each target attended to.
    pub neighborhoods: Vec<Vec<TokenRef>>,
}

/// Resolve `scene.target_ids` to agent indices; empty means all agents.
pub fn resolve_targets(scene: &Scene) -> Result<Vec<usize>> {
    if scene.target_ids.is_empty() {
        return Ok((0..scene.agents.len()).collect());
    }
    scene
        .target_ids
        .iter()
        .map(|id| {
            scene
                .agents
                .iter()
                .position(|a| &a.id == id)
                .ok_or_else(|| Error::Validation(format!("scene: unknown target id {id}")))
        })
        .collect()
}

pub fn forward_scene(
    tape: &mut Tape,
    binding: &ModelBinding,
    config: &ModelConfig,
    scene: &Scene,
) -> Result<SceneForward> {
    scene.validate()?;
    let targets = resolve_targets(scene)?;
    // Agent tokens.
    let mut rows = Vec::with_capacity(scene.agents.len());
    let mut poses = Vec::with_capacity(scene.agents.len());
    let mut types = Vec::with_capacity(scene.agents.len());
    for track in &scene.agents {
        let (emb, pose) = encode_agent_history(tape, &binding.encoder, track)?;
        rows.push(emb);
        poses.push(pose);
        types.push(track.agent_type);
    }
    let encoded = tape.concat_rows(&rows)?;
    // Interaction graph + message passing.
    let graph = build_multiscale(scene, &config.graph)?;
    let interacted = propagate(tape, &binding.message, &graph, encoded, &types)?;
    // Map tokens, one per polyline chunk.
    let mut map_rows = Vec::new();
    let mut map_positions = Vec::new();
    for polyline in &scene.polylines {
        for chunk in chunk_polyline(polyline) {
            let reference = chunk_reference(&chunk);
            let (emb, pos) = encode_map_polyline(tape, &binding.encoder, &chunk, &reference)?;
            map_rows.push(emb);
            map_positions.push(pos);
        }
    }
    let map_tokens = if map_rows.is_empty() {
        None
    } else {
        Some(tape.concat_rows(&map_rows)?)
    };
    let agent_active: Vec<bool> = {
        let mut active = vec![true; scene.agents.len()];
        for &s in &graph.skipped {
            active[s] = false;
        }
        active
    };
    let tokens = TokenSet {
        agent_tokens: interacted,
        agent_positions: graph.positions.clone(),
        agent_active,
        agent_types: types.clone(),
        map_tokens,
        map_positions,
    };
    let fused = fuse_context(tape, &binding.fusion, &tokens, &poses, &targets)?;
    Ok(SceneForward {
        embeddings: fused.embeddings,
        targets,
        poses,
        types,
        graph,
        neighborhoods: fused.neighborhoods,
    })
}

/// Agent-frame ground truth for one track's future.
pub fn agent_frame_future(scene: &Scene, agent: usize, pose: &Pose) -> GroundTruthFuture {
    let track = &scene.agents[agent];
    let mut positions = Vec::with_capacity(track.future.len());
    let mut valid = Vec::with_capacity(track.future.len());
    for st in &track.future {
        if st.valid {
            let (x, y) = pose.to_local(st.x, st.y);
            positions.push([x, y]);
            valid.push(true);
        } else {
            positions.push([0.0, 0.0]);
            valid.push(false);
        }
    }
    GroundTruthFuture { positions, valid }
}

pub struct SceneLoss {
    pub total: VarId,
    /// Targets that actually contributed (had valid futures).
    pub contributing: usize,
}

/// Mean winner-take-all loss over the scene's targets. `None` when no target
/// has a valid future.
pub fn scene_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    config: &ModelConfig,
    forward: &SceneForward,
    anchors: &IntentionAnchorSet,
    scene: &Scene,
) -> Result<Option<SceneLoss>> {
    if scene.t_f != config.t_f {
        return Err(Error::Incompatible(format!(
            "scene horizon t_f={} but model expects {}",
            scene.t_f, config.t_f
        )));
    }
    let mut totals = Vec::new();
    for (row, &agent) in forward.targets.iter().enumerate() {
        let emb = tape.gather_rows(forward.embeddings, &[row])?;
        let anchor_set = &anchors.per_category[forward.types[agent].index()];
        let modes = decode(tape, &binding.decoder, emb, anchor_set)?;
        let gt = agent_frame_future(scene, agent, &forward.poses[agent]);
        if let Some(loss) = compute_loss(tape, &modes, anchor_set, &gt, config.lambda)? {
            totals.push(loss.total);
        }
    }
    if totals.is_empty() {
        return Ok(None);
    }
    let contributing = totals.len();
    let stacked = tape.concat_rows(&totals)?;
    let total = tape.mean_reduce_rows(stacked)?;
    Ok(Some(SceneLoss {
        total,
        contributing,
    }))
}

/// Decode, select top-K, and convert to world frame for every target.
/// Returns (agent index, modes sorted by descending probability).
pub fn predict_scene(
    tape: &mut Tape,
    binding: &ModelBinding,
    config: &ModelConfig,
    forward: &SceneForward,
    anchors: &IntentionAnchorSet,
) -> Result<Vec<(usize, Vec<PredictedMode>)>> {
    let mut out = Vec::with_capacity(forward.targets.len());
    for (row, &agent) in forward.targets.iter().enumerate() {
        let emb = tape.gather_rows(forward.embeddings, &[row])?;
        let anchor_set = &anchors.per_category[forward.types[agent].index()];
        let modes = decode(tape, &binding.decoder, emb, anchor_set)?;
        let trajs = trajectories_to_points(tape.value(modes.trajectories));
        let logits = tape.value(modes.logits).data.clone();
        let selected = select_topk(&trajs, &logits, config.k_modes)?;
        let pose = &forward.poses[agent];
        let world: Vec<PredictedMode> = selected
            .into_iter()
            .map(|m| PredictedMode {
                probability: m.probability,
                trajectory: m
                    .trajectory
                    .iter()
                    .map(|p| {
                        let (x, y) = pose.to_world(p[0], p[1]);
                        [x, y]
                    })
                    .collect(),
            })
            .collect();
        out.push((agent, world));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        generate_synthetic_scene, rigid_transform_scene, ScenarioKind, ScenarioSpec,
    };
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            d_type: 4,
            point_widths: vec![16],
            graph: GraphConfig {
                k: 3,
                scales: vec![3],
            },
            rounds: 1,
            attn_layers: 1,
            heads: 2,
            m_neighbors: 4,
            anchors: 3,
            k_modes: 2,
            t_f: 8,
            lambda: 1.0,
        }
    }

    fn tiny_scene(seed: u64) -> Scene {
        let spec = ScenarioSpec {
            kind: ScenarioKind::MixedIntersection,
            n_agents: 6,
            speed: 6.0,
            spacing: 4.0,
            noise_sigma: 0.2,
            t_h: 4,
            t_f: 8,
            timestep: 0.1,
        };
        generate_synthetic_scene(&spec, seed).unwrap()
    }

    fn tiny_anchors() -> IntentionAnchorSet {
        IntentionAnchorSet {
            per_category: vec![vec![[4.0, 0.0], [3.0, 2.0], [3.0, -2.0]]; 3],
        }
    }

    #[test]
    fn flatten_orders_agree() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let binding = bind_model(&mut tape, &params);
        let tensors = flatten_params(&params);
        let vars = flatten_binding(&binding);
        assert_eq!(tensors.len(), vars.len());
        for (t, v) in tensors.iter().zip(&vars) {
            assert_eq!(t.data, tape.value(*v).data);
        }
        // And the mutable view walks the same order.
        let mut p2 = params.clone();
        let muts = flatten_params_mut(&mut p2);
        assert_eq!(muts.len(), tensors.len());
        for (a, b) in muts.iter().zip(&tensors) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn forward_deterministic_and_shaped() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let scene = tiny_scene(1);
        let run = || {
            let mut tape = Tape::new();
            let b = bind_model(&mut tape, &params);
            let f = forward_scene(&mut tape, &b, &config, &scene).unwrap();
            (
                tape.value(f.embeddings).clone(),
                f.targets.clone(),
                f.neighborhoods.clone(),
            )
        };
        let (e1, t1, n1) = run();
        let (e2, t2, n2) = run();
        assert_eq!(e1.data, e2.data);
        assert_eq!(t1, t2);
        assert_eq!(n1, n2);
        assert_eq!(e1.cols, config.d);
        assert_eq!(e1.rows, t1.len());
    }

    #[test]
    fn rigid_motion_embeddings_close() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let scene = tiny_scene(2);
        let moved = rigid_transform_scene(&scene, 31.0, -12.0, 1.1);
        let run = |s: &Scene| {
            let mut tape = Tape::new();
            let b = bind_model(&mut tape, &params);
            let f = forward_scene(&mut tape, &b, &config, s).unwrap();
            tape.value(f.embeddings).data.clone()
        };
        let a = run(&scene);
        let b = run(&moved);
        for (x, y) in a.iter().zip(&b) {
            let rel = (x - y).abs() / x.abs().max(1.0);
            assert!(rel < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn loss_and_predictions_work() {
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let scene = tiny_scene(3);
        let anchors = tiny_anchors();
        let mut tape = Tape::new();
        let b = bind_model(&mut tape, &params);
        let f = forward_scene(&mut tape, &b, &config, &scene).unwrap();
        let loss = scene_loss(&mut tape, &b, &config, &f, &anchors, &scene)
            .unwrap()
            .unwrap();
        assert!(tape.value(loss.total).data[0].is_finite());
        assert_eq!(loss.contributing, f.targets.len());
        // Backward reaches the encoder parameters.
        let grads = tape.backward(loss.total).unwrap();
        let vars = flatten_binding(&b);
        let nonzero = vars
            .iter()
            .any(|&v| grads.get(&tape, v).data.iter().any(|&g| g != 0.0));
        assert!(nonzero);
        let preds = predict_scene(&mut tape, &b, &config, &f, &anchors).unwrap();
        assert_eq!(preds.len(), f.targets.len());
        for (_, modes) in &preds {
            assert_eq!(modes.len(), config.k_modes);
            let psum: f64 = modes.iter().map(|m| m.probability).sum();
            assert!((psum - 1.0).abs() < 1e-9);
            assert!(modes[0].probability >= modes[1].probability);
            assert_eq!(modes[0].trajectory.len(), config.t_f);
        }
    }

    #[test]
    fn horizon_mismatch_is_incompatible() {
        let mut config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let scene = tiny_scene(4);
        config.t_f = 99;
        let mut tape = Tape::new();
        let b = bind_model(&mut tape, &params);
        // Forward still works (encoder does not touch t_f)...
        let f = forward_scene(&mut tape, &b, &config, &scene).unwrap();
        // ...but the loss refuses the horizon mismatch.
        assert!(matches!(
            scene_loss(&mut tape, &b, &config, &f, &tiny_anchors(), &scene),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn unknown_target_id_rejected() {
        let mut scene = tiny_scene(5);
        scene.target_ids = vec!["nope".into()];
        assert!(matches!(
            resolve_targets(&scene),
            Err(Error::Validation(_))
        ));
    }
}
