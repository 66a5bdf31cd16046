//! Training and evaluation harness: experiment configs, the epoch loop with
//! seeded shuffling, gradient clipping, AdamW with milestone decay,
//! checkpointing at the best validation minADE, and report/prediction output.
//!
//! Everything is single-threaded and bit-reproducible for a fixed config and
//! seed: scene order, reductions, and parameter updates all run in fixed
//! order.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{fit_anchors, IntentionAnchorSet, PredictedMode};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, min_ade, MetricsReport, SceneEval, ThresholdSchedule};
use crate::model::{
    bind_model, flatten_binding, flatten_params, flatten_params_mut, forward_scene,
    predict_scene, resolve_targets, scene_loss, ModelConfig, ModelParams,
};
use crate::nn::{adamw_step, clip_global_norm, OptimizerState};
use crate::scene::{constant_velocity_baseline, Scene};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const PREDICTIONS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_max_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    /// Epochs (1-based) at which the learning rate is multiplied by
    /// `decay_factor`, applied at the start of the epoch.
    pub milestones: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            clip_max_norm: 1000.0,
            batch_size: 16,
            epochs: 200,
            decay_factor: 0.5,
            // The reference schedule decays at 22/24/26/28 of 30 epochs;
            // scaled proportionally to the 200-epoch desk default.
            milestones: vec![147, 160, 173, 187],
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Validation(
                "optimizer: lr and weight_decay must be >= 0".into(),
            ));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::Validation(
                "optimizer: clip_max_norm must be > 0".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Validation(
                "optimizer: batch_size and epochs must be >= 1".into(),
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Validation(
                "optimizer: decay_factor must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub thresholds: ThresholdSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            thresholds: ThresholdSchedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.thresholds.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Validation(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss per contributing target agent.
    pub train_loss: f64,
    pub val_min_ade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub params: ModelParams,
    pub anchors: IntentionAnchorSet,
    /// Epoch the stored parameters come from.
    pub epoch: usize,
    pub val_min_ade: f64,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let s = serde_json::to_string(ckpt)
        .map_err(|e| Error::Validation(format!("serialize checkpoint: {e}")))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let s = std::fs::read_to_string(path)?;
    let probe: serde_json::Value = serde_json::from_str(&s).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let schema = probe.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::Version {
            found: schema,
            expected: CHECKPOINT_SCHEMA,
        });
    }
    let ckpt: Checkpoint = serde_json::from_str(&s).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    ckpt.config.validate()?;
    Ok(ckpt)
}

/// Refuse to run a checkpoint under a model config it was not trained with.
pub fn ensure_compatible(requested: &ModelConfig, ckpt: &Checkpoint) -> Result<()> {
    if requested != &ckpt.config.model {
        return Err(Error::Incompatible(format!(
            "model config differs from checkpoint (requested {requested:?}, checkpoint {:?})",
            ckpt.config.model
        )));
    }
    Ok(())
}

fn scene_tag(index: usize, scene: &Scene) -> String {
    format!("scene #{index} (seed {})", scene.seed)
}

fn with_scene_context(e: Error, tag: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{tag}: {m}")),
        other => other,
    }
}

/// World-frame ground-truth future of one track, `None` at invalid steps.
pub fn world_gt(scene: &Scene, agent: usize) -> Vec<Option<[f64; 2]>> {
    scene.agents[agent]
        .future
        .iter()
        .map(|s| if s.valid { Some([s.x, s.y]) } else { None })
        .collect()
}

/// Mean minADE of the model over all evaluable targets in `scenes`.
fn mean_min_ade(
    config: &ExperimentConfig,
    params: &ModelParams,
    anchors: &IntentionAnchorSet,
    scenes: &[Scene],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let tag = scene_tag(i, scene);
        let mut tape = Tape::new();
        let binding = bind_model(&mut tape, params);
        let fwd = forward_scene(&mut tape, &binding, &config.model, scene)
            .map_err(|e| with_scene_context(e, &tag))?;
        let preds = predict_scene(&mut tape, &binding, &config.model, &fwd, anchors)
            .map_err(|e| with_scene_context(e, &tag))?;
        for (agent, modes) in preds {
            if let Some(ade) = min_ade(&modes, &world_gt(scene, agent))? {
                sum += ade;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Validation(
            "validation set has no evaluable targets".into(),
        ));
    }
    Ok(sum / n as f64)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
}

/// Full training loop. `progress` is called once per epoch with the log
/// record for that epoch.
pub fn train(
    config: &ExperimentConfig,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::Validation(
            "train: need at least one training and one validation scene".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(&config.model, &mut rng)?;
    let anchors = fit_anchors(train_scenes, config.model.anchors, config.seed)?;
    let opt_cfg = &config.optimizer;
    let mut opt = OptimizerState::new(
        &flatten_params(&params),
        opt_cfg.lr,
        opt_cfg.weight_decay,
    );
    let mut logs = Vec::with_capacity(opt_cfg.epochs);
    let mut best: Option<(f64, ModelParams, usize)> = None;
    for epoch in 1..=opt_cfg.epochs {
        if opt_cfg.milestones.contains(&epoch) {
            opt.lr *= opt_cfg.decay_factor;
        }
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(
            config
                .seed
                .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut erng);
        let mut loss_sum = 0.0;
        let mut loss_agents = 0usize;
        for batch in order.chunks(opt_cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_agents = 0usize;
            for &si in batch {
                let scene = &train_scenes[si];
                let tag = scene_tag(si, scene);
                let mut tape = Tape::new();
                let binding = bind_model(&mut tape, &params);
                let fwd = forward_scene(&mut tape, &binding, &config.model, scene)
                    .map_err(|e| with_scene_context(e, &tag))?;
                let Some(loss) =
                    scene_loss(&mut tape, &binding, &config.model, &fwd, &anchors, scene)
                        .map_err(|e| with_scene_context(e, &tag))?
                else {
                    continue;
                };
                let lv = tape.value(loss.total).data[0];
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("{tag}: training loss {lv}")));
                }
                let n = loss.contributing as f64;
                loss_sum += lv * n;
                loss_agents += loss.contributing;
                batch_agents += loss.contributing;
                let grads = tape
                    .backward(loss.total)
                    .map_err(|e| with_scene_context(e, &tag))?;
                let vars = flatten_binding(&binding);
                // Scene loss is a per-agent mean; reweight so the batch
                // gradient is the mean over all contributing agents.
                let scene_grads: Vec<Tensor> = vars
                    .iter()
                    .map(|&v| {
                        let mut g = grads.get(&tape, v);
                        g.data.iter_mut().for_each(|x| *x *= n);
                        g
                    })
                    .collect();
                acc = Some(match acc {
                    None => scene_grads,
                    Some(mut a) => {
                        for (dst, src) in a.iter_mut().zip(&scene_grads) {
                            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                                *d += s;
                            }
                        }
                        a
                    }
                });
            }
            let Some(mut grads) = acc else { continue };
            let inv = 1.0 / batch_agents as f64;
            for g in &mut grads {
                g.data.iter_mut().for_each(|x| *x *= inv);
            }
            clip_global_norm(&mut grads, opt_cfg.clip_max_norm)?;
            let mut ps = flatten_params_mut(&mut params);
            adamw_step(&mut opt, &mut ps, &grads)?;
        }
        if loss_agents == 0 {
            return Err(Error::Validation(
                "train: no scene contributed a valid target".into(),
            ));
        }
        let log = EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / loss_agents as f64,
            val_min_ade: mean_min_ade(config, &params, &anchors, val_scenes)?,
        };
        if best
            .as_ref()
            .map_or(true, |(b, _, _)| log.val_min_ade < *b)
        {
            best = Some((log.val_min_ade, params.clone(), epoch));
        }
        progress(&log);
        logs.push(log);
    }
    let (val_min_ade, best_params, epoch) = best.unwrap();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            config: config.clone(),
            params: best_params,
            anchors,
            epoch,
            val_min_ade,
        },
        logs,
    })
}

/// One line of the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub schema: u32,
    /// Seed of the scene the agent came from.
    pub scene_seed: u64,
    pub agent_id: String,
    /// World-frame modes, sorted by descending probability.
    pub modes: Vec<PredictedMode>,
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Validation(format!("serialize prediction: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let probe: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let schema = probe.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if schema != PREDICTIONS_SCHEMA {
            return Err(Error::Version {
                found: schema,
                expected: PREDICTIONS_SCHEMA,
            });
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn scene_eval_from_modes(
    scene: &Scene,
    per_target: Vec<(usize, Vec<PredictedMode>)>,
) -> SceneEval {
    SceneEval {
        all_gt: scene
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.agent_type, world_gt(scene, i)))
            .collect(),
        targets: per_target,
        timestep: scene.timestep,
    }
}

/// Deterministic inference over a corpus: the metrics report plus one
/// prediction record per target.
pub fn evaluate(
    config: &ExperimentConfig,
    params: &ModelParams,
    anchors: &IntentionAnchorSet,
    scenes: &[Scene],
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let mut evals = Vec::with_capacity(scenes.len());
    let mut records = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let tag = scene_tag(i, scene);
        let mut tape = Tape::new();
        let binding = bind_model(&mut tape, params);
        let fwd = forward_scene(&mut tape, &binding, &config.model, scene)
            .map_err(|e| with_scene_context(e, &tag))?;
        let preds = predict_scene(&mut tape, &binding, &config.model, &fwd, anchors)
            .map_err(|e| with_scene_context(e, &tag))?;
        for (agent, modes) in &preds {
            records.push(PredictionRecord {
                schema: PREDICTIONS_SCHEMA,
                scene_seed: scene.seed,
                agent_id: scene.agents[*agent].id.clone(),
                modes: modes.clone(),
            });
        }
        evals.push(scene_eval_from_modes(scene, preds));
    }
    let report = compute_report(&evals, &config.thresholds)?;
    Ok((report, records))
}

/// Constant-velocity single-mode predictions for a scene's targets.
pub fn baseline_predictions(scene: &Scene) -> Result<Vec<(usize, Vec<PredictedMode>)>> {
    let targets = resolve_targets(scene)?;
    targets
        .into_iter()
        .map(|agent| {
            let line = constant_velocity_baseline(&scene.agents[agent], scene.t_f)?;
            Ok((
                agent,
                vec![PredictedMode {
                    probability: 1.0,
                    trajectory: line.into_iter().map(|(x, y)| [x, y]).collect(),
                }],
            ))
        })
        .collect()
}

/// Evaluate the constant-velocity baseline over a corpus.
pub fn evaluate_baseline(
    scenes: &[Scene],
    thresholds: &ThresholdSchedule,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let mut evals = Vec::with_capacity(scenes.len());
    let mut records = Vec::new();
    for scene in scenes {
        let preds = baseline_predictions(scene)?;
        for (agent, modes) in &preds {
            records.push(PredictionRecord {
                schema: PREDICTIONS_SCHEMA,
                scene_seed: scene.seed,
                agent_id: scene.agents[*agent].id.clone(),
                modes: modes.clone(),
            });
        }
        evals.push(scene_eval_from_modes(scene, preds));
    }
    let report = compute_report(&evals, thresholds)?;
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphConfig;
    use crate::scene::{generate_synthetic_scene, ScenarioKind, ScenarioSpec};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            model: ModelConfig {
                d: 8,
                d_type: 4,
                point_widths: vec![8],
                graph: GraphConfig {
                    k: 2,
                    scales: vec![3],
                },
                rounds: 1,
                attn_layers: 1,
                heads: 2,
                m_neighbors: 3,
                anchors: 2,
                k_modes: 2,
                t_f: 6,
                lambda: 1.0,
            },
            optimizer: OptimizerConfig {
                epochs: 2,
                batch_size: 2,
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            thresholds: ThresholdSchedule::default(),
        }
    }

    fn corpus(n_scenes: u64) -> Vec<Scene> {
        let spec = ScenarioSpec {
            kind: ScenarioKind::MixedIntersection,
            n_agents: 4,
            speed: 6.0,
            spacing: 4.0,
            noise_sigma: 0.2,
            t_h: 3,
            t_f: 6,
            timestep: 0.1,
        };
        (0..n_scenes)
            .map(|s| generate_synthetic_scene(&spec, s).unwrap())
            .collect()
    }

    #[test]
    fn toml_roundtrip_and_partial_parse() {
        let c = tiny_config();
        let s = c.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&s).unwrap();
        assert_eq!(back, c);
        // Partial files fill in defaults.
        let partial = ExperimentConfig::from_toml_str(
            "seed = 9\n[optimizer]\nlr = 0.5\n[model]\nd = 32\nheads = 4\n",
        )
        .unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.optimizer.lr, 0.5);
        assert_eq!(partial.optimizer.weight_decay, 0.01);
        assert_eq!(partial.model.d, 32);
        assert_eq!(partial.model.anchors, 8);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut c = tiny_config();
        c.optimizer.lr = 0.0;
        let scenes = corpus(4);
        let out = train(&c, &scenes, &scenes[..1], |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let fresh = ModelParams::init(&c.model, &mut rng).unwrap();
        assert_eq!(out.checkpoint.params, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let c = tiny_config();
        let scenes = corpus(4);
        let a = train(&c, &scenes, &scenes[..1], |_| {}).unwrap();
        let b = train(&c, &scenes, &scenes[..1], |_| {}).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn checkpoint_roundtrip_and_version_gate() {
        let c = tiny_config();
        let scenes = corpus(3);
        let out = train(&c, &scenes, &scenes[..1], |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        // Tampered schema is refused.
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["schema"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn mismatched_model_config_is_incompatible() {
        let c = tiny_config();
        let scenes = corpus(3);
        let out = train(&c, &scenes, &scenes[..1], |_| {}).unwrap();
        let mut requested = c.model.clone();
        requested.d = 32;
        assert!(matches!(
            ensure_compatible(&requested, &out.checkpoint),
            Err(Error::Incompatible(_))
        ));
        ensure_compatible(&c.model, &out.checkpoint).unwrap();
    }

    #[test]
    fn evaluate_is_byte_deterministic() {
        let c = tiny_config();
        let scenes = corpus(3);
        let out = train(&c, &scenes, &scenes[..1], |_| {}).unwrap();
        let (r1, p1) = evaluate(&c, &out.checkpoint.params, &out.checkpoint.anchors, &scenes)
            .unwrap();
        let (r2, p2) = evaluate(&c, &out.checkpoint.params, &out.checkpoint.anchors, &scenes)
            .unwrap();
        assert_eq!(r1.machine_record(), r2.machine_record());
        let lines1: Vec<String> = p1.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        let lines2: Vec<String> = p2.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        assert_eq!(lines1, lines2);
        // And they round-trip through the file format.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        save_predictions(&p1, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), p1);
    }

    #[test]
    fn baseline_near_zero_on_noiseless_platoon() {
        let spec = ScenarioSpec {
            kind: ScenarioKind::Platoon,
            n_agents: 4,
            speed: 8.0,
            spacing: 6.0,
            noise_sigma: 0.0,
            t_h: 3,
            t_f: 6,
            timestep: 0.1,
        };
        let scenes: Vec<Scene> = (0..3)
            .map(|s| generate_synthetic_scene(&spec, s).unwrap())
            .collect();
        let (report, _) = evaluate_baseline(&scenes, &ThresholdSchedule::default()).unwrap();
        assert!(report.overall.min_ade < 1e-6, "{}", report.overall.min_ade);
        assert_eq!(report.overall.miss_rate, 0.0);
    }

    #[test]
    fn milestone_decays_lr() {
        let mut c = tiny_config();
        c.optimizer.epochs = 3;
        c.optimizer.milestones = vec![2];
        let scenes = corpus(3);
        let mut lrs = Vec::new();
        train(&c, &scenes, &scenes[..1], |log| lrs.push(log.lr)).unwrap();
        assert_eq!(lrs[0], 1e-3);
        assert_eq!(lrs[1], 5e-4);
        assert_eq!(lrs[2], 5e-4);
    }
}
