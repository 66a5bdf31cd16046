//! Pairwise k-NN graphs and multi-scale local hypergraphs.
//!
//! Neighbor queries are exact. Small scenes use brute force; larger ones go
//! through a uniform spatial hash grid with ring expansion, which keeps
//! construction near O(N log N + N*K).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Below this agent count brute force beats the grid.
const BRUTE_FORCE_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Pairwise neighbor count.
    pub k: usize,
    /// Hyperedge sizes, one hypergraph per entry.
    pub scales: Vec<usize>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 10,
            scales: vec![5, 7],
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Validation("graph.k must be >= 1".into()));
        }
        if self.scales.iter().any(|&s| s < 2) {
            return Err(Error::Validation("graph.scales entries must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-agent neighbor lists, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

/// A group interaction: the anchor agent plus its nearby group.
/// Members are stored sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperEdge {
    pub anchor: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleGraph {
    pub pairwise: KnnGraph,
    /// (scale, deduplicated hyperedges), in configured scale order.
    pub hyperedges: Vec<(usize, Vec<HyperEdge>)>,
    /// Agent index -> indices into each scale's edge list.
    pub incidence: Vec<Vec<Vec<usize>>>,
    /// Agents excluded for having no valid history state.
    pub skipped: Vec<usize>,
    /// Positions the graph was built from (reference position per agent;
    /// skipped agents carry their index but are never queried).
    pub positions: Vec<[f64; 2]>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Exact k nearest neighbors by brute force, ties broken by lower index.
fn knn_brute(positions: &[[f64; 2]], active: &[usize], k: usize) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); positions.len()];
    for &a in active {
        let mut cands: Vec<(usize, f64)> = active
            .iter()
            .filter(|&&b| b != a)
            .map(|&b| (b, dist(positions[a], positions[b])))
            .collect();
        cands.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
        cands.truncate(k);
        out[a] = cands;
    }
    out
}

/// Uniform spatial hash grid over the active agents.
struct HashGrid {
    cell: f64,
    cells: BTreeMap<(i64, i64), Vec<usize>>,
}

impl HashGrid {
    fn build(positions: &[[f64; 2]], active: &[usize]) -> Self {
        // Cell size from a sampled median pairwise spacing.
        let stride = (active.len() / 64).max(1);
        let sample: Vec<usize> = active.iter().step_by(stride).copied().collect();
        let mut ds = Vec::new();
        for (i, &a) in sample.iter().enumerate() {
            for &b in sample.iter().skip(i + 1) {
                ds.push(dist(positions[a], positions[b]));
            }
        }
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cell = if ds.is_empty() {
            1.0
        } else {
            ds[ds.len() / 2].max(1e-6)
        };
        let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for &a in active {
            let key = (
                (positions[a][0] / cell).floor() as i64,
                (positions[a][1] / cell).floor() as i64,
            );
            cells.entry(key).or_default().push(a);
        }
        HashGrid { cell, cells }
    }

    /// Exact k-NN: expand Chebyshev rings until the k-th best distance is
    /// certainly closer than anything in an unvisited ring.
    fn knn(
        &self,
        positions: &[[f64; 2]],
        query: usize,
        k: usize,
        total_active: usize,
    ) -> Vec<(usize, f64)> {
        let p = positions[query];
        let qc = (
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
        );
        let mut cands: Vec<(usize, f64)> = Vec::new();
        let mut ring: i64 = 0;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    if dx.abs() != ring && dy.abs() != ring {
                        continue; // only the ring boundary
                    }
                    if let Some(bucket) = self.cells.get(&(qc.0 + dx, qc.1 + dy)) {
                        for &b in bucket {
                            if b != query {
                                cands.push((b, dist(p, positions[b])));
                            }
                        }
                    }
                }
            }
            let exhausted = cands.len() + 1 >= total_active;
            if cands.len() >= k || exhausted {
                cands.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
                // Any point in an unvisited ring is at least ring*cell away.
                let bound = ring as f64 * self.cell;
                if exhausted || cands[k - 1].1 <= bound {
                    cands.truncate(k);
                    return cands;
                }
            }
            ring += 1;
        }
    }
}

/// Per-agent Euclidean nearest neighbors (excluding self), nearest first,
/// ties broken by lower index.
pub fn knn_neighbors(positions: &[[f64; 2]], k: usize) -> Vec<Vec<(usize, f64)>> {
    let active: Vec<usize> = (0..positions.len()).collect();
    knn_active(positions, &active, k)
}

fn knn_active(positions: &[[f64; 2]], active: &[usize], k: usize) -> Vec<Vec<(usize, f64)>> {
    if active.len() <= BRUTE_FORCE_LIMIT {
        return knn_brute(positions, active, k);
    }
    let grid = HashGrid::build(positions, active);
    let mut out = vec![Vec::new(); positions.len()];
    for &a in active {
        out[a] = grid.knn(positions, a, k.min(active.len() - 1), active.len());
    }
    out
}

/// Reference positions (last valid history state) and the skip list.
pub fn reference_positions(scene: &Scene) -> (Vec<[f64; 2]>, Vec<usize>, Vec<usize>) {
    let mut positions = vec![[0.0, 0.0]; scene.agents.len()];
    let mut active = Vec::new();
    let mut skipped = Vec::new();
    for (i, a) in scene.agents.iter().enumerate() {
        match a.last_valid_history() {
            Some(s) => {
                positions[i] = [a.history[s].x, a.history[s].y];
                active.push(i);
            }
            None => skipped.push(i),
        }
    }
    (positions, active, skipped)
}

/// Pairwise k-NN graph over a scene. Agents with no valid state are excluded
/// from both sides and recorded in the skip list.
pub fn build_pairwise_graph(scene: &Scene, config: &GraphConfig) -> Result<(KnnGraph, Vec<usize>)> {
    config.validate()?;
    let (positions, active, skipped) = reference_positions(scene);
    if active.is_empty() {
        return Err(Error::Validation("scene: all agents invalid".into()));
    }
    let neighbors = knn_active(&positions, &active, config.k);
    Ok((KnnGraph { neighbors }, skipped))
}

/// Candidate hyperedges of size S: one per active agent (itself plus its S-1
/// nearest), deduplicated by member set keeping the lowest anchor. Edges of
/// cardinality < 2 are dropped.
pub fn build_hyperedges(
    positions: &[[f64; 2]],
    active: &[usize],
    s: usize,
) -> Result<Vec<HyperEdge>> {
    if s < 2 {
        return Err(Error::Validation("hyperedge size must be >= 2".into()));
    }
    let take = s.saturating_sub(1);
    let knn = knn_active(positions, active, take);
    let mut edges: Vec<HyperEdge> = Vec::new();
    let mut seen: Vec<Vec<usize>> = Vec::new();
    for &a in active {
        let mut members: Vec<usize> = knn[a].iter().map(|&(b, _)| b).collect();
        members.push(a);
        members.sort_unstable();
        if members.len() < 2 {
            continue;
        }
        if seen.contains(&members) {
            continue;
        }
        seen.push(members.clone());
        edges.push(HyperEdge { anchor: a, members });
    }
    Ok(edges)
}

/// Pairwise edges turned into 2-member hyperedges, deduplicated.
pub fn pairwise_edges(knn: &KnnGraph) -> Vec<HyperEdge> {
    let mut edges = Vec::new();
    let mut seen: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    for (a, list) in knn.neighbors.iter().enumerate() {
        for &(b, _) in list {
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                continue;
            }
            edges.push(HyperEdge {
                anchor: key.0,
                members: vec![key.0, key.1],
            });
        }
    }
    edges
}

/// Build the full multi-scale structure for a scene.
pub fn build_multiscale(scene: &Scene, config: &GraphConfig) -> Result<MultiScaleGraph> {
    config.validate()?;
    let (positions, active, skipped) = reference_positions(scene);
    if active.is_empty() {
        return Err(Error::Validation("scene: all agents invalid".into()));
    }
    let neighbors = knn_active(&positions, &active, config.k);
    let pairwise = KnnGraph { neighbors };
    let mut hyperedges = Vec::new();
    for &s in &config.scales {
        hyperedges.push((s, build_hyperedges(&positions, &active, s)?));
    }
    let n = scene.agents.len();
    let mut incidence = vec![vec![Vec::new(); hyperedges.len()]; n];
    for (si, (_, edges)) in hyperedges.iter().enumerate() {
        for (ei, e) in edges.iter().enumerate() {
            for &m in &e.members {
                incidence[m][si].push(ei);
            }
        }
    }
    Ok(MultiScaleGraph {
        pairwise,
        hyperedges,
        incidence,
        skipped,
        positions,
    })
}

impl MultiScaleGraph {
    /// Number of index entries held by the structure (pairwise lists,
    /// hyperedge members, incidence). Used by the memory-bound check.
    pub fn entry_count(&self) -> usize {
        let pw: usize = self.pairwise.neighbors.iter().map(Vec::len).sum();
        let he: usize = self
            .hyperedges
            .iter()
            .map(|(_, es)| es.iter().map(|e| e.members.len()).sum::<usize>())
            .sum();
        let inc: usize = self
            .incidence
            .iter()
            .map(|per| per.iter().map(Vec::len).sum::<usize>())
            .sum();
        pw + he + inc
    }

    /// Deterministic text dump, suitable for golden-file tests.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let skips: Vec<String> = self.skipped.iter().map(|s| s.to_string()).collect();
        writeln!(out, "skip: [{}]", skips.join(",")).unwrap();
        for (a, list) in self.pairwise.neighbors.iter().enumerate() {
            if self.skipped.contains(&a) {
                continue;
            }
            let items: Vec<String> = list
                .iter()
                .map(|(b, d)| format!("{b}({d:.6})"))
                .collect();
            writeln!(out, "knn {a}: {}", items.join(" ")).unwrap();
        }
        for (s, edges) in &self.hyperedges {
            for e in edges {
                let ms: Vec<String> = e.members.iter().map(|m| m.to_string()).collect();
                writeln!(out, "hyper S={s} anchor={} members={{{}}}", e.anchor, ms.join(",")).unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, ScenarioKind, ScenarioSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_line_of_three() {
        let pos = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        let nn = knn_neighbors(&pos, 1);
        assert_eq!(nn[0], vec![(1, 1.0)]);
        assert_eq!(nn[1], vec![(0, 1.0)]);
        assert_eq!(nn[2], vec![(1, 2.0)]);
    }

    #[test]
    fn knn_single_agent_empty() {
        let pos = [[5.0, 5.0]];
        let nn = knn_neighbors(&pos, 3);
        assert!(nn[0].is_empty());
    }

    #[test]
    fn knn_tie_breaks_lower_index() {
        let pos = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]];
        let nn = knn_neighbors(&pos, 1);
        assert_eq!(nn[0][0].0, 1);
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let positions: Vec<[f64; 2]> = (0..300)
            .map(|_| [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)])
            .collect();
        let active: Vec<usize> = (0..positions.len()).collect();
        let brute = knn_brute(&positions, &active, 10);
        let grid = HashGrid::build(&positions, &active);
        for a in 0..positions.len() {
            let fast = grid.knn(&positions, a, 10, active.len());
            assert_eq!(fast, brute[a], "agent {a}");
        }
    }

    #[test]
    fn hyperedges_collinear_dedup() {
        let pos = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let active = [0, 1, 2];
        let edges = build_hyperedges(&pos, &active, 2).unwrap();
        let sets: Vec<Vec<usize>> = edges.iter().map(|e| e.members.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1], vec![1, 2]]);
        assert_eq!(edges[0].anchor, 0);
    }

    #[test]
    fn hyperedge_singleton_suppressed() {
        let pos = [[0.0, 0.0]];
        let edges = build_hyperedges(&pos, &[0], 5).unwrap();
        assert!(edges.is_empty());
    }

    #[test]
    fn hyperedge_saturation_takes_all() {
        let pos = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let edges = build_hyperedges(&pos, &[0, 1, 2], 10).unwrap();
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].members, vec![0, 1, 2]);
    }

    fn small_scene(n: usize, seed: u64) -> Scene {
        let spec = ScenarioSpec {
            kind: ScenarioKind::MixedIntersection,
            n_agents: n,
            speed: 8.0,
            spacing: 3.0,
            noise_sigma: 0.4,
            t_h: 5,
            t_f: 10,
            timestep: 0.1,
        };
        generate_synthetic_scene(&spec, seed).unwrap()
    }

    #[test]
    fn pairwise_matches_brute_force_on_scene() {
        let scene = small_scene(12, 3);
        let cfg = GraphConfig {
            k: 3,
            scales: vec![],
        };
        let (g, skipped) = build_pairwise_graph(&scene, &cfg).unwrap();
        assert!(skipped.is_empty());
        let (positions, active, _) = reference_positions(&scene);
        let brute = knn_brute(&positions, &active, 3);
        assert_eq!(g.neighbors, brute);
    }

    #[test]
    fn pairwise_saturates_when_k_large() {
        let scene = small_scene(5, 0);
        let cfg = GraphConfig {
            k: 10,
            scales: vec![],
        };
        let (g, _) = build_pairwise_graph(&scene, &cfg).unwrap();
        for list in &g.neighbors {
            assert_eq!(list.len(), 4);
        }
    }

    #[test]
    fn invalid_agent_lands_on_skip_list() {
        let mut scene = small_scene(4, 1);
        for s in &mut scene.agents[2].history {
            s.valid = false;
        }
        let cfg = GraphConfig::default();
        let g = build_multiscale(&scene, &cfg).unwrap();
        assert_eq!(g.skipped, vec![2]);
        assert!(g.pairwise.neighbors[2].is_empty());
        for list in &g.pairwise.neighbors {
            assert!(list.iter().all(|&(b, _)| b != 2));
        }
        for (_, edges) in &g.hyperedges {
            for e in edges {
                assert!(!e.members.contains(&2));
            }
        }
    }

    #[test]
    fn multiscale_bounds_and_incidence() {
        let scene = small_scene(20, 5);
        let cfg = GraphConfig::default();
        let g = build_multiscale(&scene, &cfg).unwrap();
        assert_eq!(g.hyperedges.len(), 2);
        for (_, edges) in &g.hyperedges {
            assert!(edges.len() <= 20);
        }
        for a in 0..20 {
            for (si, _) in g.hyperedges.iter().enumerate() {
                assert!(
                    !g.incidence[a][si].is_empty(),
                    "agent {a} missing from scale {si}"
                );
            }
        }
        let pw_edges: usize = g.pairwise.neighbors.iter().map(Vec::len).sum();
        assert!(pw_edges <= 20 * cfg.k);
    }

    #[test]
    fn empty_scales_gives_pairwise_only() {
        let scene = small_scene(6, 2);
        let cfg = GraphConfig {
            k: 2,
            scales: vec![],
        };
        let g = build_multiscale(&scene, &cfg).unwrap();
        assert!(g.hyperedges.is_empty());
    }

    #[test]
    fn stability_under_small_perturbation() {
        let scene = small_scene(10, 8);
        let cfg = GraphConfig {
            k: 3,
            scales: vec![4],
        };
        let g1 = build_multiscale(&scene, &cfg).unwrap();
        // Nudging one agent far less than any distance gap leaves the graph alone.
        let mut nudged = scene.clone();
        let last = nudged.agents[0].last_valid_history().unwrap();
        nudged.agents[0].history[last].x += 1e-9;
        let g2 = build_multiscale(&nudged, &cfg).unwrap();
        assert_eq!(g1.pairwise.neighbors.iter().map(|l| l.iter().map(|e| e.0).collect::<Vec<_>>()).collect::<Vec<_>>(),
                   g2.pairwise.neighbors.iter().map(|l| l.iter().map(|e| e.0).collect::<Vec<_>>()).collect::<Vec<_>>());
        assert_eq!(g1.hyperedges.iter().map(|(s, es)| (*s, es.clone())).collect::<Vec<_>>(),
                   g2.hyperedges.iter().map(|(s, es)| (*s, es.clone())).collect::<Vec<_>>());
    }
}
