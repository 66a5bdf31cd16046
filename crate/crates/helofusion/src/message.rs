//! Aggregation-decomposition message passing over the pairwise graph and each
//! hypergraph scale.
//!
//! Each edge pools its member features into one aggregate, a shared network
//! decomposes the aggregate into one message per agent category, and every
//! member receives the slot of its own category. Incoming messages are
//! mean-pooled per agent and applied through a residual node update. Pairwise
//! edges reuse the same machinery as 2-member hyperedges with their own
//! parameter set.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{pairwise_edges, HyperEdge, MultiScaleGraph};
use crate::nn::{bind_mlp, mlp_apply, Activation, MlpBinding, MlpParams};
use crate::scene::{AgentType, AGENT_TYPE_COUNT};
use crate::tensor::{Tape, Tensor, VarId};

/// Parameters for one scale (the pairwise graph or one hyperedge size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    /// Projects the raw edge aggregate (2D+1 wide) to D.
    pub aggregate: MlpParams,
    /// Shared decomposition network: D -> C*D category-indexed messages.
    pub decompose: MlpParams,
    /// Residual node update: (own feature ++ pooled message) -> D.
    pub node_update: MlpParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePassingParams {
    /// Index 0 serves the pairwise graph; the rest follow the configured scales.
    pub per_scale: Vec<ScaleParams>,
    /// Cross-scale fusion over concatenated per-scale outputs.
    pub fusion: MlpParams,
    pub rounds: usize,
}

impl MessagePassingParams {
    pub fn init(d: usize, n_hyper_scales: usize, rounds: usize, rng: &mut ChaCha8Rng) -> Self {
        let per_scale = (0..n_hyper_scales + 1)
            .map(|_| ScaleParams {
                aggregate: MlpParams::init(&[2 * d + 1, d], Activation::Identity, rng),
                decompose: MlpParams::init(
                    &[d, d, AGENT_TYPE_COUNT * d],
                    Activation::Relu,
                    rng,
                ),
                node_update: MlpParams::init(&[2 * d, d], Activation::Identity, rng),
            })
            .collect();
        MessagePassingParams {
            per_scale,
            fusion: MlpParams::init(&[(n_hyper_scales + 1) * d, d], Activation::Identity, rng),
            rounds,
        }
    }
}

pub struct ScaleBinding {
    pub aggregate: MlpBinding,
    pub decompose: MlpBinding,
    pub node_update: MlpBinding,
}

pub struct MessagePassingBinding {
    pub per_scale: Vec<ScaleBinding>,
    pub fusion: MlpBinding,
    pub rounds: usize,
}

pub fn bind_message_passing(tape: &mut Tape, p: &MessagePassingParams) -> MessagePassingBinding {
    MessagePassingBinding {
        per_scale: p
            .per_scale
            .iter()
            .map(|s| ScaleBinding {
                aggregate: bind_mlp(tape, &s.aggregate),
                decompose: bind_mlp(tape, &s.decompose),
                node_update: bind_mlp(tape, &s.node_update),
            })
            .collect(),
        fusion: bind_mlp(tape, &p.fusion),
        rounds: p.rounds,
    }
}

/// Pool a set of member feature rows into one edge aggregate:
/// elementwise mean ++ elementwise max ++ mean pairwise member distance.
///
/// Rows are reduced in a canonical order (sorted by position, then feature
/// values), so any permutation of the input rows gives a bit-identical result.
pub fn aggregate_edge(
    tape: &mut Tape,
    features: VarId,
    positions: &[[f64; 2]],
) -> Result<VarId> {
    let m = tape.value(features).rows;
    if m < 2 {
        return Err(Error::Contract(format!(
            "aggregate_edge: needs >= 2 members, got {m}"
        )));
    }
    if positions.len() != m {
        return Err(Error::Contract(format!(
            "aggregate_edge: {} positions for {m} members",
            positions.len()
        )));
    }
    // Canonical member order, permutation-invariant.
    let mut order: Vec<usize> = (0..m).collect();
    {
        let t = tape.value(features);
        order.sort_by(|&a, &b| {
            let pa = (positions[a], &t.data[a * t.cols..(a + 1) * t.cols]);
            let pb = (positions[b], &t.data[b * t.cols..(b + 1) * t.cols]);
            pa.partial_cmp(&pb).unwrap()
        });
    }
    let sorted = tape.gather_rows(features, &order)?;
    let mean = tape.mean_reduce_rows(sorted)?;
    let max = tape.max_reduce_rows(sorted)?;
    let mut dsum = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            let (a, b) = (positions[order[i]], positions[order[j]]);
            dsum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            pairs += 1;
        }
    }
    let geo = tape.leaf(Tensor::scalar(dsum / pairs as f64));
    tape.concat_cols(&[mean, max, geo])
}

/// Decompose an edge aggregate into C category-indexed messages (a 1 x C*D
/// bank); slot c is the message deliverable to receivers of category c.
pub fn decompose_messages(
    tape: &mut Tape,
    scale: &ScaleBinding,
    aggregate: VarId,
) -> Result<VarId> {
    let hidden = mlp_apply(tape, &scale.aggregate, aggregate)?;
    mlp_apply(tape, &scale.decompose, hidden)
}

fn message_slot(tape: &mut Tape, bank: VarId, category: AgentType, d: usize) -> Result<VarId> {
    let c = category.index();
    tape.slice_cols(bank, c * d, (c + 1) * d)
}

fn run_scale(
    tape: &mut Tape,
    scale: &ScaleBinding,
    edges: &[HyperEdge],
    features: VarId,
    types: &[AgentType],
    positions: &[[f64; 2]],
    rounds: usize,
    d: usize,
) -> Result<VarId> {
    let n = tape.value(features).rows;
    let mut h = features;
    for _ in 0..rounds {
        let mut incoming: Vec<Vec<VarId>> = vec![Vec::new(); n];
        for e in edges {
            let feats = tape.gather_rows(h, &e.members)?;
            let pos: Vec<[f64; 2]> = e.members.iter().map(|&m| positions[m]).collect();
            let agg = aggregate_edge(tape, feats, &pos)?;
            let bank = decompose_messages(tape, scale, agg)?;
            for &m in &e.members {
                let slot = message_slot(tape, bank, types[m], d)?;
                incoming[m].push(slot);
            }
        }
        let mut rows = Vec::with_capacity(n);
        for a in 0..n {
            let own = tape.gather_rows(h, &[a])?;
            if incoming[a].is_empty() {
                rows.push(own);
                continue;
            }
            let stacked = tape.concat_rows(&incoming[a])?;
            let pooled = tape.mean_reduce_rows(stacked)?;
            let joined = tape.concat_cols(&[own, pooled])?;
            let upd = mlp_apply(tape, &scale.node_update, joined)?;
            rows.push(tape.add(own, upd)?);
        }
        h = tape.concat_rows(&rows)?;
    }
    Ok(h)
}

/// Full multi-scale propagation. Agents incident to no edge at any scale pass
/// through bit-identically.
pub fn propagate(
    tape: &mut Tape,
    mp: &MessagePassingBinding,
    graph: &MultiScaleGraph,
    features: VarId,
    types: &[AgentType],
) -> Result<VarId> {
    let n = tape.value(features).rows;
    let d = tape.value(features).cols;
    if types.len() != n {
        return Err(Error::Contract(format!(
            "propagate: {} types for {n} feature rows",
            types.len()
        )));
    }
    let mut families: Vec<Vec<HyperEdge>> = vec![pairwise_edges(&graph.pairwise)];
    for (_, edges) in &graph.hyperedges {
        families.push(edges.clone());
    }
    if families.len() != mp.per_scale.len() {
        return Err(Error::Contract(format!(
            "propagate: {} edge families for {} scale parameter sets",
            families.len(),
            mp.per_scale.len()
        )));
    }
    let mut touched = vec![false; n];
    for fam in &families {
        for e in fam {
            for &m in &e.members {
                touched[m] = true;
            }
        }
    }
    let mut per_scale_out = Vec::with_capacity(families.len());
    for (si, fam) in families.iter().enumerate() {
        per_scale_out.push(run_scale(
            tape,
            &mp.per_scale[si],
            fam,
            features,
            types,
            &graph.positions,
            mp.rounds,
            d,
        )?);
    }
    let joined = tape.concat_cols(&per_scale_out)?;
    let fused = mlp_apply(tape, &mp.fusion, joined)?;
    let updated = tape.add(features, fused)?;
    // Residual identity for untouched agents.
    let mut rows = Vec::with_capacity(n);
    for a in 0..n {
        let src = if touched[a] { updated } else { features };
        rows.push(tape.gather_rows(src, &[a])?);
    }
    tape.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_multiscale, GraphConfig};
    use crate::scene::{generate_synthetic_scene, ScenarioKind, ScenarioSpec};
    use rand::SeedableRng;

    const D: usize = 8;

    fn params(scales: usize) -> MessagePassingParams {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        MessagePassingParams::init(D, scales, 2, &mut rng)
    }

    fn feature_rows(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * D)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        Tensor::new(n, D, data)
    }

    #[test]
    fn aggregate_hand_pooling() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::new(2, 1, vec![1.0, 3.0]));
        let agg = aggregate_edge(&mut tape, f, &[[0.0, 0.0], [4.0, 3.0]]).unwrap();
        assert_eq!(tape.value(agg).data, vec![2.0, 3.0, 5.0]);
    }

    #[test]
    fn aggregate_constant_set() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::new(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]));
        let agg =
            aggregate_edge(&mut tape, f, &[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        let v = tape.value(agg);
        assert_eq!(&v.data[..2], &[0.5, -1.0]);
        assert_eq!(&v.data[2..4], &[0.5, -1.0]);
    }

    #[test]
    fn aggregate_permutation_bit_identical() {
        let mut tape = Tape::new();
        let rows = vec![0.3, -0.7, 1.2, 0.9, -2.0, 0.1];
        let pos = [[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]];
        let f1 = tape.leaf(Tensor::new(3, 2, rows.clone()));
        let a1 = aggregate_edge(&mut tape, f1, &pos).unwrap();
        // Swap rows 0 and 2 together with their positions.
        let swapped = vec![-2.0, 0.1, 1.2, 0.9, 0.3, -0.7];
        let pos2 = [[3.0, -1.0], [1.0, 2.0], [0.0, 0.0]];
        let f2 = tape.leaf(Tensor::new(3, 2, swapped));
        let a2 = aggregate_edge(&mut tape, f2, &pos2).unwrap();
        assert_eq!(tape.value(a1).data, tape.value(a2).data);
    }

    #[test]
    fn aggregate_needs_two_members() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::new(1, 2, vec![1.0, 2.0]));
        assert!(matches!(
            aggregate_edge(&mut tape, f, &[[0.0, 0.0]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn decompose_width_and_degenerate_weights() {
        let mut p = params(0);
        for w in &mut p.per_scale[0].decompose.weights {
            w.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = Tensor::new(1, AGENT_TYPE_COUNT * D, (0..AGENT_TYPE_COUNT * D).map(|i| i as f64).collect());
        *p.per_scale[0].decompose.biases.last_mut().unwrap() = bias.clone();
        let mut tape = Tape::new();
        let b = bind_message_passing(&mut tape, &p);
        let agg = tape.leaf(Tensor::new(1, 2 * D + 1, vec![0.5; 2 * D + 1]));
        let bank = decompose_messages(&mut tape, &b.per_scale[0], agg).unwrap();
        assert_eq!(tape.value(bank).cols, AGENT_TYPE_COUNT * D);
        assert_eq!(tape.value(bank).data, bias.data);
        // Slots are distinct bias segments per category.
        let s0 = message_slot(&mut tape, bank, AgentType::Vehicle, D).unwrap();
        let s1 = message_slot(&mut tape, bank, AgentType::Pedestrian, D).unwrap();
        assert_ne!(tape.value(s0).data, tape.value(s1).data);
    }

    fn scene_graph(n: usize) -> MultiScaleGraph {
        let spec = ScenarioSpec {
            kind: ScenarioKind::MixedIntersection,
            n_agents: n,
            speed: 8.0,
            spacing: 3.0,
            noise_sigma: 0.2,
            t_h: 5,
            t_f: 10,
            timestep: 0.1,
        };
        let scene = generate_synthetic_scene(&spec, 3).unwrap();
        build_multiscale(
            &scene,
            &GraphConfig {
                k: 2,
                scales: vec![3],
            },
        )
        .unwrap()
    }

    #[test]
    fn single_agent_identity() {
        let spec = ScenarioSpec {
            kind: ScenarioKind::Platoon,
            n_agents: 1,
            speed: 5.0,
            spacing: 5.0,
            noise_sigma: 0.0,
            t_h: 3,
            t_f: 4,
            timestep: 0.1,
        };
        let scene = generate_synthetic_scene(&spec, 0).unwrap();
        let graph = build_multiscale(
            &scene,
            &GraphConfig {
                k: 2,
                scales: vec![3],
            },
        )
        .unwrap();
        let p = params(1);
        let mut tape = Tape::new();
        let b = bind_message_passing(&mut tape, &p);
        let feats = feature_rows(1, 0);
        let f = tape.leaf(feats.clone());
        let out = propagate(&mut tape, &b, &graph, f, &[AgentType::Vehicle]).unwrap();
        assert_eq!(tape.value(out).data, feats.data);
    }

    #[test]
    fn receiver_category_changes_messages() {
        let graph = scene_graph(6);
        let p = params(1);
        let feats = feature_rows(6, 1);
        let types_a = vec![AgentType::Vehicle; 6];
        let mut types_b = types_a.clone();
        types_b[0] = AgentType::Pedestrian;
        let run = |types: &[AgentType]| {
            let mut tape = Tape::new();
            let b = bind_message_passing(&mut tape, &p);
            let f = tape.leaf(feats.clone());
            let out = propagate(&mut tape, &b, &graph, f, types).unwrap();
            tape.value(out).data.clone()
        };
        let oa = run(&types_a);
        let ob = run(&types_b);
        assert_ne!(oa[..D], ob[..D], "receiver slot routing must differ");
    }

    #[test]
    fn propagate_differentiable() {
        let graph = scene_graph(4);
        let types = vec![
            AgentType::Vehicle,
            AgentType::Pedestrian,
            AgentType::Cyclist,
            AgentType::Vehicle,
        ];
        let p = params(1);
        let feats = feature_rows(4, 2);
        let f = |tape: &mut Tape, ids: &[crate::tensor::VarId]| {
            let b = bind_message_passing(tape, &p);
            let out = propagate(tape, &b, &graph, ids[0], &types)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        };
        let err = crate::tensor::grad_check(&f, &[feats], 1e-6).unwrap();
        assert!(err < 1e-6, "err={err}");
    }
}
