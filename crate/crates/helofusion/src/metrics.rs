//! Motion-forecasting metrics: minADE, minFDE, miss rate, overlap rate,
//! behavior bucketing, and (Soft) mAP.
//!
//! Ground-truth futures are passed as `&[Option<[f64; 2]>]` — `None` marks an
//! invalid step. All metrics operate in the world frame. Agents whose ground
//! truth has no valid step are skipped and counted in the report.

use serde::{Deserialize, Serialize};

use crate::decoder::PredictedMode;
use crate::error::{Error, Result};
use crate::scene::{AgentType, AGENT_TYPE_COUNT};

/// Distance threshold for a mode "match" as a function of the measurement
/// horizon (seconds). Piecewise linear through the control points, clamped at
/// both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    /// (horizon seconds, threshold meters), sorted by horizon.
    pub points: Vec<(f64, f64)>,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule {
            points: vec![(3.0, 2.0), (5.0, 3.6), (8.0, 6.0)],
        }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Validation("threshold schedule: empty".into()));
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Validation(
                    "threshold schedule: horizons must increase".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::Validation(
                    "threshold schedule: thresholds must be non-decreasing".into(),
                ));
            }
        }
        if self.points.iter().any(|&(_, m)| !(m > 0.0)) {
            return Err(Error::Validation(
                "threshold schedule: thresholds must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Threshold at the given horizon, clamped to the schedule's range.
    pub fn tau(&self, horizon_s: f64) -> f64 {
        let pts = &self.points;
        if horizon_s <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            if horizon_s <= w[1].0 {
                let f = (horizon_s - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + f * (w[1].1 - w[0].1);
            }
        }
        pts.last().unwrap().1
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_lengths(modes: &[PredictedMode], gt: &[Option<[f64; 2]>]) -> Result<()> {
    for m in modes {
        if m.trajectory.len() != gt.len() {
            return Err(Error::Contract(format!(
                "metrics: mode has {} steps, ground truth {}",
                m.trajectory.len(),
                gt.len()
            )));
        }
    }
    Ok(())
}

/// Minimum over modes of the mean displacement over valid steps. `None` when
/// the ground truth has no valid step.
pub fn min_ade(modes: &[PredictedMode], gt: &[Option<[f64; 2]>]) -> Result<Option<f64>> {
    check_lengths(modes, gt)?;
    let mut best: Option<f64> = None;
    for m in modes {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, g) in m.trajectory.iter().zip(gt) {
            if let Some(g) = g {
                sum += dist(*p, *g);
                n += 1;
            }
        }
        if n == 0 {
            return Ok(None);
        }
        let ade = sum / n as f64;
        best = Some(best.map_or(ade, |b: f64| b.min(ade)));
    }
    Ok(best)
}

/// Minimum over modes of the displacement at the final valid step.
pub fn min_fde(modes: &[PredictedMode], gt: &[Option<[f64; 2]>]) -> Result<Option<f64>> {
    check_lengths(modes, gt)?;
    let Some(last) = gt.iter().rposition(|g| g.is_some()) else {
        return Ok(None);
    };
    let g = gt[last].unwrap();
    Ok(modes
        .iter()
        .map(|m| dist(m.trajectory[last], g))
        .fold(None, |acc: Option<f64>, d| {
            Some(acc.map_or(d, |b| b.min(d)))
        }))
}

/// Whether one mode lands within the threshold at the measurement horizon
/// (the final valid ground-truth step).
pub fn mode_matches(
    trajectory: &[[f64; 2]],
    gt: &[Option<[f64; 2]>],
    schedule: &ThresholdSchedule,
    timestep: f64,
) -> Option<bool> {
    let last = gt.iter().rposition(|g| g.is_some())?;
    let horizon_s = (last + 1) as f64 * timestep;
    Some(dist(trajectory[last], gt[last].unwrap()) <= schedule.tau(horizon_s))
}

/// Miss iff no mode matches at the measurement horizon. `None` when the agent
/// has no valid ground truth.
pub fn is_miss(
    modes: &[PredictedMode],
    gt: &[Option<[f64; 2]>],
    schedule: &ThresholdSchedule,
    timestep: f64,
) -> Option<bool> {
    if gt.iter().all(|g| g.is_none()) {
        return None;
    }
    Some(
        !modes
            .iter()
            .any(|m| mode_matches(&m.trajectory, gt, schedule, timestep) == Some(true)),
    )
}

/// Behavior bucket for mAP averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BehaviorBucket {
    Stationary,
    Straight,
    StraightLeft,
    StraightRight,
    Left,
    Right,
    UTurn,
}

pub const BUCKET_COUNT: usize = 7;

impl BehaviorBucket {
    pub const ALL: [BehaviorBucket; BUCKET_COUNT] = [
        BehaviorBucket::Stationary,
        BehaviorBucket::Straight,
        BehaviorBucket::StraightLeft,
        BehaviorBucket::StraightRight,
        BehaviorBucket::Left,
        BehaviorBucket::Right,
        BehaviorBucket::UTurn,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&b| b == self).unwrap()
    }
}

/// Classify a ground-truth future. Stationary if the net displacement between
/// the first and last valid states is under 2 m (or fewer than 2 valid
/// states); otherwise bucketed by the net change between the first and last
/// motion directions, positive = left.
pub fn classify_behavior(gt: &[Option<[f64; 2]>]) -> BehaviorBucket {
    let valid: Vec<[f64; 2]> = gt.iter().filter_map(|g| *g).collect();
    if valid.len() < 2 {
        return BehaviorBucket::Stationary;
    }
    if dist(valid[0], *valid.last().unwrap()) < 2.0 {
        return BehaviorBucket::Stationary;
    }
    let mut dirs = valid.windows(2).filter_map(|w| {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        if dx.hypot(dy) > 1e-9 {
            Some(dy.atan2(dx))
        } else {
            None
        }
    });
    let first = dirs.next().unwrap_or(0.0);
    let last = dirs.last().unwrap_or(first);
    let dt = crate::scene::wrap_angle(last - first);
    let a = dt.abs();
    use std::f64::consts::PI;
    if a < PI / 12.0 {
        BehaviorBucket::Straight
    } else if a < PI / 4.0 {
        if dt > 0.0 {
            BehaviorBucket::StraightLeft
        } else {
            BehaviorBucket::StraightRight
        }
    } else if a < 3.0 * PI / 4.0 {
        if dt > 0.0 {
            BehaviorBucket::Left
        } else {
            BehaviorBucket::Right
        }
    } else {
        BehaviorBucket::UTurn
    }
}

/// One agent's contribution to (Soft) mAP: its bucket and, per mode in
/// confidence order, the probability and the per-mode match flag.
#[derive(Debug, Clone)]
pub struct ApEntry {
    pub bucket: BehaviorBucket,
    pub modes: Vec<(f64, bool)>,
}

fn bucket_ap(entries: &[&ApEntry], soft: bool) -> Option<f64> {
    if entries.is_empty() {
        return None;
    }
    // Pool (probability, tp, fp) triples: per agent only the highest-probability
    // matching mode is the true positive.
    #[derive(Clone, Copy)]
    enum Kind {
        Tp,
        Fp,
        Ignored,
    }
    let mut pooled: Vec<(f64, Kind)> = Vec::new();
    let mut positives = 0usize;
    for e in entries {
        let best_match = e
            .modes
            .iter()
            .enumerate()
            .filter(|(_, (_, m))| *m)
            .max_by(|(i, (pa, _)), (j, (pb, _))| {
                pa.partial_cmp(pb).unwrap().then(j.cmp(i))
            })
            .map(|(i, _)| i);
        if best_match.is_some() {
            positives += 1;
        }
        for (i, &(p, m)) in e.modes.iter().enumerate() {
            let kind = if Some(i) == best_match {
                Kind::Tp
            } else if m {
                if soft {
                    Kind::Ignored
                } else {
                    Kind::Fp
                }
            } else {
                Kind::Fp
            };
            pooled.push((p, kind));
        }
    }
    if positives == 0 {
        return Some(0.0);
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut precisions_at_tp: Vec<f64> = Vec::new();
    let mut precision_seq: Vec<(f64, bool)> = Vec::new(); // (precision, is_tp)
    let mut tp = 0usize;
    let mut counted = 0usize;
    for (_, kind) in &pooled {
        match kind {
            Kind::Ignored => continue,
            Kind::Tp => {
                tp += 1;
                counted += 1;
                precision_seq.push((tp as f64 / counted as f64, true));
            }
            Kind::Fp => {
                counted += 1;
                precision_seq.push((tp as f64 / counted as f64, false));
            }
        }
    }
    // Interpolate: precision at each rank is the max precision at that rank
    // or any later one.
    let mut running = 0.0f64;
    let mut interpolated = vec![0.0; precision_seq.len()];
    for i in (0..precision_seq.len()).rev() {
        running = running.max(precision_seq[i].0);
        interpolated[i] = running;
    }
    for (i, (_, is_tp)) in precision_seq.iter().enumerate() {
        if *is_tp {
            precisions_at_tp.push(interpolated[i]);
        }
    }
    Some(precisions_at_tp.iter().sum::<f64>() / positives as f64)
}

/// Bucket-averaged AP over non-empty buckets, strict and soft.
pub fn map_and_soft_map(entries: &[ApEntry]) -> Result<(f64, f64)> {
    if entries.is_empty() {
        return Err(Error::Validation("mAP: empty corpus".into()));
    }
    let mut strict = Vec::new();
    let mut soft = Vec::new();
    for bucket in BehaviorBucket::ALL {
        let in_bucket: Vec<&ApEntry> = entries.iter().filter(|e| e.bucket == bucket).collect();
        if let Some(ap) = bucket_ap(&in_bucket, false) {
            strict.push(ap);
            soft.push(bucket_ap(&in_bucket, true).unwrap());
        }
    }
    Ok((
        strict.iter().sum::<f64>() / strict.len() as f64,
        soft.iter().sum::<f64>() / soft.len() as f64,
    ))
}

/// Everything the metrics need from one scene.
pub struct SceneEval {
    /// Ground-truth future of every scene agent (evaluated or not), used for
    /// overlap checks.
    pub all_gt: Vec<(AgentType, Vec<Option<[f64; 2]>>)>,
    /// Evaluated targets: index into `all_gt` plus the K predicted modes in
    /// confidence order, world frame.
    pub targets: Vec<(usize, Vec<PredictedMode>)>,
    pub timestep: f64,
}

/// Whether the agent's most confident mode overlaps any other agent's
/// ground-truth disc at some future step.
pub fn has_overlap(scene: &SceneEval, target: usize) -> bool {
    let (agent_idx, modes) = &scene.targets[target];
    let Some(top) = modes.first() else {
        return false;
    };
    let own_r = scene.all_gt[*agent_idx].0.footprint_radius();
    for (other_idx, (other_type, other_gt)) in scene.all_gt.iter().enumerate() {
        if other_idx == *agent_idx {
            continue;
        }
        let r = own_r + other_type.footprint_radius();
        for (s, p) in top.trajectory.iter().enumerate() {
            if let Some(Some(g)) = other_gt.get(s) {
                if dist(*p, *g) <= r {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub n_agents: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub overlap_rate: f64,
    pub map: f64,
    pub soft_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricRow,
    /// One row per agent category; `None` when no agent of that category was
    /// evaluated.
    pub per_category: Vec<Option<MetricRow>>,
    /// Evaluated agents per behavior bucket, indexed like `BehaviorBucket::ALL`.
    pub bucket_counts: Vec<usize>,
    /// Targets skipped for lack of valid ground truth.
    pub skipped: usize,
}

struct PerAgent {
    category: usize,
    ade: f64,
    fde: f64,
    miss: bool,
    overlap: bool,
    ap: ApEntry,
}

fn summarize(agents: &[&PerAgent]) -> Result<MetricRow> {
    let n = agents.len();
    let entries: Vec<ApEntry> = agents.iter().map(|a| a.ap.clone()).collect();
    let (map, soft_map) = map_and_soft_map(&entries)?;
    Ok(MetricRow {
        n_agents: n,
        min_ade: agents.iter().map(|a| a.ade).sum::<f64>() / n as f64,
        min_fde: agents.iter().map(|a| a.fde).sum::<f64>() / n as f64,
        miss_rate: agents.iter().filter(|a| a.miss).count() as f64 / n as f64,
        overlap_rate: agents.iter().filter(|a| a.overlap).count() as f64 / n as f64,
        map,
        soft_map,
    })
}

/// Evaluate a corpus of scenes into the full report.
pub fn compute_report(
    scenes: &[SceneEval],
    schedule: &ThresholdSchedule,
) -> Result<MetricsReport> {
    schedule.validate()?;
    let mut agents: Vec<PerAgent> = Vec::new();
    let mut skipped = 0usize;
    for scene in scenes {
        for (ti, (agent_idx, modes)) in scene.targets.iter().enumerate() {
            let (agent_type, gt) = &scene.all_gt[*agent_idx];
            let Some(ade) = min_ade(modes, gt)? else {
                skipped += 1;
                continue;
            };
            let fde = min_fde(modes, gt)?.unwrap();
            let miss = is_miss(modes, gt, schedule, scene.timestep).unwrap();
            let bucket = classify_behavior(gt);
            let ap = ApEntry {
                bucket,
                modes: modes
                    .iter()
                    .map(|m| {
                        (
                            m.probability,
                            mode_matches(&m.trajectory, gt, schedule, scene.timestep)
                                .unwrap(),
                        )
                    })
                    .collect(),
            };
            agents.push(PerAgent {
                category: agent_type.index(),
                ade,
                fde,
                miss,
                overlap: has_overlap(scene, ti),
                ap,
            });
        }
    }
    if agents.is_empty() {
        return Err(Error::Validation(
            "metrics: no evaluable agents in corpus".into(),
        ));
    }
    let all: Vec<&PerAgent> = agents.iter().collect();
    let overall = summarize(&all)?;
    let mut per_category = Vec::with_capacity(AGENT_TYPE_COUNT);
    for c in 0..AGENT_TYPE_COUNT {
        let subset: Vec<&PerAgent> = agents.iter().filter(|a| a.category == c).collect();
        per_category.push(if subset.is_empty() {
            None
        } else {
            Some(summarize(&subset)?)
        });
    }
    let mut bucket_counts = vec![0usize; BUCKET_COUNT];
    for a in &agents {
        bucket_counts[a.ap.bucket.index()] += 1;
    }
    Ok(MetricsReport {
        overall,
        per_category,
        bucket_counts,
        skipped,
    })
}

impl MetricsReport {
    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>7} {:>9} {:>9} {:>7} {:>7} {:>7} {:>8}\n",
            "category", "agents", "minADE", "minFDE", "MR", "OR", "mAP", "SoftmAP"
        ));
        let mut row = |name: &str, r: &MetricRow| {
            out.push_str(&format!(
                "{:<12} {:>7} {:>9.4} {:>9.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4}\n",
                name, r.n_agents, r.min_ade, r.min_fde, r.miss_rate, r.overlap_rate, r.map,
                r.soft_map
            ));
        };
        row("overall", &self.overall);
        for (i, cat) in self.per_category.iter().enumerate() {
            if let Some(r) = cat {
                row(&format!("{:?}", AgentType::ALL[i]), r);
            }
        }
        out.push_str(&format!(
            "buckets: {}\n",
            BehaviorBucket::ALL
                .iter()
                .zip(&self.bucket_counts)
                .map(|(b, c)| format!("{b:?}={c}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        out.push_str(&format!("skipped: {}\n", self.skipped));
        out
    }

    /// Machine-readable single-line record.
    pub fn machine_record(&self) -> String {
        serde_json::to_string(self).expect("metrics report serializes")
    }
}
