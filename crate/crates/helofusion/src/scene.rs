//! Scene data model and synthetic scenario generation.
//!
//! A [`Scene`] holds typed agent tracks (history + ground-truth future) and map
//! polylines. Scenes are generated deterministically from a [`ScenarioSpec`] and a
//! seed, and round-trip through a line-oriented JSON file format (`scenes.jsonl`,
//! schema version 1). All floats stored in a scene are quantized to 9 significant
//! digits at generation time so that serialized files carry exactly those digits
//! and round-trip bit-for-bit.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCENE_SCHEMA: u32 = 1;

/// Traffic participant category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentType {
    Vehicle,
    Pedestrian,
    Cyclist,
}

pub const AGENT_TYPE_COUNT: usize = 3;

impl AgentType {
    pub const ALL: [AgentType; AGENT_TYPE_COUNT] =
        [AgentType::Vehicle, AgentType::Pedestrian, AgentType::Cyclist];

    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Pedestrian => 1,
            AgentType::Cyclist => 2,
        }
    }

    /// Default footprint radius in meters, used by the overlap-rate metric.
    pub fn footprint_radius(self) -> f64 {
        match self {
            AgentType::Vehicle => 2.0,
            AgentType::Pedestrian => 0.4,
            AgentType::Cyclist => 0.8,
        }
    }
}

/// One timestep of an agent track. If `valid` is false every consumer must
/// ignore the numeric fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, normalized to (-pi, pi].
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        AgentState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            vx: 0.0,
            vy: 0.0,
            valid: false,
        }
    }
}

/// An agent with its observed history and (optionally known) future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: String,
    #[serde(rename = "type")]
    pub agent_type: AgentType,
    pub history: Vec<AgentState>,
    pub future: Vec<AgentState>,
    /// Uniform sampling interval, seconds.
    pub timestep: f64,
}

impl AgentTrack {
    /// Index of the last valid history state, if any.
    pub fn last_valid_history(&self) -> Option<usize> {
        self.history.iter().rposition(|s| s.valid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history.is_empty() {
            return Err(Error::Validation(format!(
                "track {}: history must contain at least one state",
                self.id
            )));
        }
        if self.last_valid_history().is_none() {
            return Err(Error::Validation(format!(
                "track {}: at least one valid history state required",
                self.id
            )));
        }
        if !(self.timestep > 0.0) {
            return Err(Error::Validation(format!(
                "track {}: timestep must be > 0",
                self.id
            )));
        }
        Ok(())
    }
}

/// Map element kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolylineKind {
    LaneCenter,
    RoadEdge,
    Crosswalk,
}

pub const POLYLINE_KIND_COUNT: usize = 3;

impl PolylineKind {
    pub fn index(self) -> usize {
        match self {
            PolylineKind::LaneCenter => 0,
            PolylineKind::RoadEdge => 1,
            PolylineKind::Crosswalk => 2,
        }
    }
}

/// One map polyline: ordered points with optional per-point heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<(f64, f64, Option<f64>)>,
    pub kind: PolylineKind,
}

impl Polyline {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Validation(
                "polyline: needs at least 2 points".into(),
            ));
        }
        for w in self.points.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            if d <= 1e-6 {
                return Err(Error::Validation(
                    "polyline: consecutive points coincident".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One scene: the unit of all processing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema: u32,
    pub seed: u64,
    pub t_h: usize,
    pub t_f: usize,
    pub timestep: f64,
    pub agents: Vec<AgentTrack>,
    pub polylines: Vec<Polyline>,
    pub target_ids: Vec<String>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Validation("scene: needs at least one agent".into()));
        }
        for a in &self.agents {
            a.validate()?;
            if a.history.len() != self.t_h {
                return Err(Error::Validation(format!(
                    "track {}: history length {} != t_h {}",
                    a.id,
                    a.history.len(),
                    self.t_h
                )));
            }
            if !a.future.is_empty() && a.future.len() != self.t_f {
                return Err(Error::Validation(format!(
                    "track {}: future length {} != t_f {}",
                    a.id,
                    a.future.len(),
                    self.t_f
                )));
            }
            if a.timestep != self.timestep {
                return Err(Error::Validation(format!(
                    "track {}: timestep {} != scene timestep {}",
                    a.id, a.timestep, self.timestep
                )));
            }
        }
        for p in &self.polylines {
            p.validate()?;
        }
        for t in &self.target_ids {
            if !self.agents.iter().any(|a| &a.id == t) {
                return Err(Error::Validation(format!(
                    "target_ids: unknown agent id {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }
}

/// Scenario families for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Platoon,
    CrowdCrossing,
    MixedIntersection,
}

/// Parameters of one synthetic scenario draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_agents: usize,
    /// Nominal speed, m/s.
    pub speed: f64,
    /// Inter-agent spacing, meters.
    pub spacing: f64,
    /// Standard deviation of positional noise, meters.
    pub noise_sigma: f64,
    pub t_h: usize,
    pub t_f: usize,
    pub timestep: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 {
            return Err(Error::Validation("spec.n_agents: must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Validation("spec.noise_sigma: must be >= 0".into()));
        }
        if self.t_h < 1 {
            return Err(Error::Validation("spec.t_h: must be >= 1".into()));
        }
        if !(self.timestep > 0.0) {
            return Err(Error::Validation("spec.timestep: must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            kind: ScenarioKind::Platoon,
            n_agents: 4,
            speed: 10.0,
            spacing: 10.0,
            noise_sigma: 0.0,
            t_h: 11,
            t_f: 80,
            timestep: 0.1,
        }
    }
}

/// Quantize to 9 significant digits. All floats stored in a generated scene go
/// through this, so serialization prints exactly those digits and round-trips.
pub fn q9(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format!("{:.8e}", x).parse().unwrap()
}

/// Apply a global rigid motion (rotation by `theta`, then translation) to a
/// whole scene: agent states, velocities, headings, and map polylines. Useful
/// for invariance checks; values are not re-quantized.
pub fn rigid_transform_scene(scene: &Scene, dx: f64, dy: f64, theta: f64) -> Scene {
    let (c, s) = (theta.cos(), theta.sin());
    let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    let map_state = |st: &AgentState| {
        if !st.valid {
            return *st;
        }
        let (x, y) = rot(st.x, st.y);
        let (vx, vy) = rot(st.vx, st.vy);
        AgentState {
            x: x + dx,
            y: y + dy,
            heading: wrap_angle(st.heading + theta),
            vx,
            vy,
            valid: true,
        }
    };
    let mut out = scene.clone();
    for track in &mut out.agents {
        for st in track.history.iter_mut().chain(track.future.iter_mut()) {
            *st = map_state(st);
        }
    }
    for p in &mut out.polylines {
        for (x, y, h) in &mut p.points {
            let (rx, ry) = rot(*x, *y);
            *x = rx + dx;
            *y = ry + dy;
            if let Some(h) = h {
                *h = wrap_angle(*h + theta);
            }
        }
    }
    out
}

/// Normalize an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Turn rate (rad/s) used for curved pedestrian/cyclist paths in the
/// crowd-crossing and mixed scenarios.
const CROWD_TURN_RATE: f64 = 0.25;

struct TrackPlan {
    agent_type: AgentType,
    origin: (f64, f64),
    heading0: f64,
    turn_rate: f64,
    speed: f64,
}

fn integrate_track(
    plan: &TrackPlan,
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
    id: String,
) -> AgentTrack {
    let total = spec.t_h + spec.t_f;
    // Base (noiseless) path integrated step by step in quantized arithmetic:
    // pos[s+1] = q9(pos[s] + v[s] * dt), with v[s] itself quantized.
    let mut states = Vec::with_capacity(total);
    let mut x = q9(plan.origin.0);
    let mut y = q9(plan.origin.1);
    for s in 0..total {
        let theta = plan.heading0 + plan.turn_rate * (s as f64) * spec.timestep;
        let vx = q9(plan.speed * theta.cos());
        let vy = q9(plan.speed * theta.sin());
        let (nx, ny) = gaussian_pair(rng, spec.noise_sigma);
        states.push(AgentState {
            x: q9(x + nx),
            y: q9(y + ny),
            heading: q9(wrap_angle(theta)),
            vx,
            vy,
            valid: true,
        });
        x = q9(x + vx * spec.timestep);
        y = q9(y + vy * spec.timestep);
    }
    let future = states.split_off(spec.t_h);
    AgentTrack {
        id,
        agent_type: plan.agent_type,
        history: states,
        future,
        timestep: spec.timestep,
    }
}

fn gaussian_pair(rng: &mut ChaCha8Rng, sigma: f64) -> (f64, f64) {
    // Box-Muller; always consume randomness so agent layouts do not shift
    // when sigma changes.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    if sigma == 0.0 {
        return (0.0, 0.0);
    }
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * PI * u2;
    (sigma * r * t.cos(), sigma * r * t.sin())
}

/// Deterministically generate one synthetic scene.
pub fn generate_synthetic_scene(spec: &ScenarioSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    let mut polylines = Vec::new();
    let horizon = spec.speed * (spec.t_h + spec.t_f) as f64 * spec.timestep;
    match spec.kind {
        ScenarioKind::Platoon => {
            // Vehicles in a line along +x at constant speed; agent i starts at
            // x = spacing * i.
            for i in 0..spec.n_agents {
                plans.push(TrackPlan {
                    agent_type: AgentType::Vehicle,
                    origin: (spec.spacing * i as f64, 0.0),
                    heading0: 0.0,
                    turn_rate: 0.0,
                    speed: spec.speed,
                });
            }
            let reach = spec.spacing * spec.n_agents as f64 + horizon + 10.0;
            polylines.push(Polyline {
                kind: PolylineKind::LaneCenter,
                points: vec![(-10.0, 0.0, Some(0.0)), (q9(reach), 0.0, Some(0.0))],
            });
        }
        ScenarioKind::CrowdCrossing => {
            // Pedestrians walk through a crosswalk along +y on a gentle shared arc.
            for i in 0..spec.n_agents {
                let off = spec.spacing * (i as f64 - (spec.n_agents as f64 - 1.0) / 2.0);
                plans.push(TrackPlan {
                    agent_type: AgentType::Pedestrian,
                    origin: (off, 0.0),
                    heading0: PI / 2.0,
                    turn_rate: CROWD_TURN_RATE,
                    speed: spec.speed,
                });
            }
            let half = spec.spacing * spec.n_agents as f64 / 2.0 + 5.0;
            polylines.push(Polyline {
                kind: PolylineKind::Crosswalk,
                points: vec![(q9(-half), 1.0, None), (q9(half), 1.0, None)],
            });
            polylines.push(Polyline {
                kind: PolylineKind::RoadEdge,
                points: vec![(q9(-half), -2.0, None), (q9(half), -2.0, None)],
            });
        }
        ScenarioKind::MixedIntersection => {
            // Cycle through categories with crossing paths near the origin.
            for i in 0..spec.n_agents {
                let k = i % 3;
                let rank = (i / 3) as f64;
                let plan = match k {
                    0 => TrackPlan {
                        agent_type: AgentType::Vehicle,
                        origin: (-horizon / 2.0 - spec.spacing * rank, -2.0),
                        heading0: 0.0,
                        turn_rate: 0.0,
                        speed: spec.speed,
                    },
                    1 => TrackPlan {
                        agent_type: AgentType::Pedestrian,
                        origin: (2.0 + spec.spacing * rank, -6.0),
                        heading0: PI / 2.0,
                        turn_rate: CROWD_TURN_RATE,
                        speed: (spec.speed * 0.15).max(1.0),
                    },
                    _ => TrackPlan {
                        agent_type: AgentType::Cyclist,
                        origin: (6.0 + spec.spacing * rank, -horizon / 4.0),
                        heading0: PI / 2.0,
                        turn_rate: 0.0,
                        speed: (spec.speed * 0.5).max(2.0),
                    },
                };
                plans.push(plan);
            }
            polylines.push(Polyline {
                kind: PolylineKind::LaneCenter,
                points: vec![(q9(-horizon), -2.0, Some(0.0)), (q9(horizon), -2.0, Some(0.0))],
            });
            polylines.push(Polyline {
                kind: PolylineKind::Crosswalk,
                points: vec![(0.0, -6.0, None), (4.0, -6.0, None)],
            });
        }
    }
    let agents: Vec<AgentTrack> = plans
        .iter()
        .enumerate()
        .map(|(i, p)| integrate_track(p, spec, &mut rng, format!("a{i}")))
        .collect();
    let target_ids = agents.iter().map(|a| a.id.clone()).collect();
    let scene = Scene {
        schema: SCENE_SCHEMA,
        seed,
        t_h: spec.t_h,
        t_f: spec.t_f,
        timestep: spec.timestep,
        agents,
        polylines,
        target_ids,
    };
    scene.validate()?;
    Ok(scene)
}

/// Split a track's full state sequence at `t_now` (history gets `[0, t_now)`).
pub fn split_history_future(
    track: &AgentTrack,
    t_now: usize,
) -> Result<(Vec<AgentState>, Vec<AgentState>)> {
    let all: Vec<AgentState> = track
        .history
        .iter()
        .chain(track.future.iter())
        .copied()
        .collect();
    if t_now < 1 || t_now > all.len() {
        return Err(Error::Range(format!(
            "t_now {} out of range [1, {}]",
            t_now,
            all.len()
        )));
    }
    let future = all[t_now..].to_vec();
    let history = all[..t_now].to_vec();
    Ok((history, future))
}

/// Constant-velocity extrapolation from the last valid history state.
pub fn constant_velocity_baseline(track: &AgentTrack, t_f: usize) -> Result<Vec<(f64, f64)>> {
    let last = track
        .last_valid_history()
        .ok_or_else(|| Error::Validation(format!("track {}: no valid state", track.id)))?;
    let s = &track.history[last];
    let (mut vx, mut vy) = (s.vx, s.vy);
    if !vx.is_finite() || !vy.is_finite() {
        // Finite difference of the last two valid positions; stationary if only one.
        let prev = track.history[..last].iter().rposition(|p| p.valid);
        match prev {
            Some(p) => {
                let q = &track.history[p];
                let dt = (last - p) as f64 * track.timestep;
                vx = (s.x - q.x) / dt;
                vy = (s.y - q.y) / dt;
            }
            None => {
                vx = 0.0;
                vy = 0.0;
            }
        }
    }
    let mut out = Vec::with_capacity(t_f);
    let (mut x, mut y) = (s.x, s.y);
    for _ in 0..t_f {
        x += vx * track.timestep;
        y += vy * track.timestep;
        out.push((x, y));
    }
    Ok(out)
}

/// Write scenes as one JSON object per line.
pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Validation(format!("serialize scene: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    save_scenes(std::slice::from_ref(scene), path)
}

/// Read scenes from a `scenes.jsonl` file. Reports the 1-based line number on
/// parse failures and rejects unknown schema versions.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
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
        if schema != SCENE_SCHEMA {
            return Err(Error::Version {
                found: schema,
                expected: SCENE_SCHEMA,
            });
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let mut scenes = load_scenes(path)?;
    if scenes.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty scene file".into(),
        });
    }
    Ok(scenes.remove(0))
}
