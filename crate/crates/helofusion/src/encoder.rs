//! PointNet-style encoders: agent histories and map polylines become
//! fixed-width embeddings via a shared per-point network and masked max
//! pooling, with agent-type embeddings mixed in.
//!
//! All geometry is expressed relative to a reference pose, which makes the
//! embeddings invariant to rigid motion of the whole scene.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bind_mlp, mlp_apply, Activation, MlpBinding, MlpParams};
use crate::scene::{wrap_angle, AgentTrack, Polyline, AGENT_TYPE_COUNT, POLYLINE_KIND_COUNT};
use crate::tensor::{Tape, Tensor, VarId};

/// Agent per-point feature width: rel position (2), time offset (1),
/// rel velocity (2), heading offset cos/sin (2), validity (1), one-hot type (3).
pub const AGENT_POINT_WIDTH: usize = 8 + AGENT_TYPE_COUNT;
/// Map per-point feature width: rel position (2), heading cos/sin (2), one-hot kind (3).
pub const MAP_POINT_WIDTH: usize = 4 + POLYLINE_KIND_COUNT;

/// Map polylines longer than this are split into chunks, bounding token count.
pub const MAP_CHUNK_POINTS: usize = 20;

/// A reference pose: all downstream relative geometry is taken in this frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// World point into this frame (translate then rotate by -heading).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.x, y - self.y);
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Rotate a world vector into this frame.
    pub fn rotate_in(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (c * vx + s * vy, -s * vx + c * vy)
    }

    /// Local point back to world coordinates.
    pub fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// Shared per-point network for agent history points.
    pub agent_point: MlpParams,
    /// Shared per-point network for map polyline points (separate weights).
    pub map_point: MlpParams,
    /// One learned row per agent type.
    pub type_table: Tensor,
    /// Projects pooled agent features (+ type embedding) to D.
    pub agent_proj: MlpParams,
    /// Projects pooled map features to D.
    pub map_proj: MlpParams,
}

impl EncoderParams {
    pub fn init(d: usize, d_type: usize, point_widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut agent_widths = vec![AGENT_POINT_WIDTH];
        agent_widths.extend_from_slice(point_widths);
        let mut map_widths = vec![MAP_POINT_WIDTH];
        map_widths.extend_from_slice(point_widths);
        let pooled = *point_widths.last().unwrap();
        let bound = 1.0 / (d_type as f64).sqrt();
        let table: Vec<f64> = (0..AGENT_TYPE_COUNT * d_type)
            .map(|_| rand::Rng::gen_range(rng, -bound..bound))
            .collect();
        EncoderParams {
            agent_point: MlpParams::init(&agent_widths, Activation::Relu, rng),
            map_point: MlpParams::init(&map_widths, Activation::Relu, rng),
            type_table: Tensor::new(AGENT_TYPE_COUNT, d_type, table),
            agent_proj: MlpParams::init(&[pooled + d_type, d], Activation::Identity, rng),
            map_proj: MlpParams::init(&[pooled, d], Activation::Identity, rng),
        }
    }
}

pub struct EncoderBinding {
    pub agent_point: MlpBinding,
    pub map_point: MlpBinding,
    pub type_table: VarId,
    pub agent_proj: MlpBinding,
    pub map_proj: MlpBinding,
}

pub fn bind_encoder(tape: &mut Tape, p: &EncoderParams) -> EncoderBinding {
    EncoderBinding {
        agent_point: bind_mlp(tape, &p.agent_point),
        map_point: bind_mlp(tape, &p.map_point),
        type_table: tape.param(p.type_table.clone()),
        agent_proj: bind_mlp(tape, &p.agent_proj),
        map_proj: bind_mlp(tape, &p.map_proj),
    }
}

/// Per-point feature rows for the valid history states of a track, in the
/// frame of its last valid state.
pub fn agent_point_features(track: &AgentTrack) -> Result<(Tensor, Pose)> {
    let last = track
        .last_valid_history()
        .ok_or_else(|| Error::Validation(format!("track {}: no valid state", track.id)))?;
    let anchor = &track.history[last];
    let reference = Pose {
        x: anchor.x,
        y: anchor.y,
        heading: anchor.heading,
    };
    let mut rows = Vec::new();
    let mut count = 0;
    for (s, st) in track.history.iter().enumerate() {
        if !st.valid {
            continue; // masked points contribute nothing to the pooled max
        }
        let (px, py) = reference.to_local(st.x, st.y);
        let (vx, vy) = reference.rotate_in(st.vx, st.vy);
        let dth = wrap_angle(st.heading - reference.heading);
        let dt = (s as f64 - last as f64) * track.timestep;
        rows.extend_from_slice(&[px, py, dt, vx, vy, dth.cos(), dth.sin(), 1.0]);
        let mut onehot = [0.0; AGENT_TYPE_COUNT];
        onehot[track.agent_type.index()] = 1.0;
        rows.extend_from_slice(&onehot);
        count += 1;
    }
    Ok((Tensor::new(count, AGENT_POINT_WIDTH, rows), reference))
}

/// Shared-network + masked-max-pool over a point-feature matrix, then a
/// projection. Permutation-invariant in the rows of `features`.
pub fn encode_point_set(
    tape: &mut Tape,
    point_net: &MlpBinding,
    features: Tensor,
) -> Result<VarId> {
    let x = tape.leaf(features);
    let h = mlp_apply(tape, point_net, x)?;
    tape.max_reduce_rows(h)
}

/// Encode one agent history into a D-wide embedding plus its reference pose.
pub fn encode_agent_history(
    tape: &mut Tape,
    enc: &EncoderBinding,
    track: &AgentTrack,
) -> Result<(VarId, Pose)> {
    let (features, reference) = agent_point_features(track)?;
    let pooled = encode_point_set(tape, &enc.agent_point, features)?;
    let type_row = tape.gather_rows(enc.type_table, &[track.agent_type.index()])?;
    let joined = tape.concat_cols(&[pooled, type_row])?;
    let out = mlp_apply(tape, &enc.agent_proj, joined)?;
    Ok((out, reference))
}

/// Per-point features of a polyline chunk relative to a reference pose.
/// Missing per-point headings fall back to the segment direction.
pub fn map_point_features(polyline: &Polyline, reference: &Pose) -> Tensor {
    let pts = &polyline.points;
    let mut rows = Vec::new();
    for (i, &(x, y, h)) in pts.iter().enumerate() {
        let (px, py) = reference.to_local(x, y);
        let world_h = h.unwrap_or_else(|| {
            let (ax, ay, _) = pts[i.min(pts.len() - 2)];
            let (bx, by, _) = pts[(i + 1).min(pts.len() - 1)];
            (by - ay).atan2(bx - ax)
        });
        let dth = wrap_angle(world_h - reference.heading);
        rows.extend_from_slice(&[px, py, dth.cos(), dth.sin()]);
        let mut onehot = [0.0; POLYLINE_KIND_COUNT];
        onehot[polyline.kind.index()] = 1.0;
        rows.extend_from_slice(&onehot);
    }
    Tensor::new(pts.len(), MAP_POINT_WIDTH, rows)
}

/// Encode one map polyline chunk relative to `reference`. Also returns the
/// chunk point nearest to the reference position, used for neighborhood
/// queries.
pub fn encode_map_polyline(
    tape: &mut Tape,
    enc: &EncoderBinding,
    polyline: &Polyline,
    reference: &Pose,
) -> Result<(VarId, [f64; 2])> {
    polyline.validate()?;
    let features = map_point_features(polyline, reference);
    let pooled = encode_point_set(tape, &enc.map_point, features)?;
    let out = mlp_apply(tape, &enc.map_proj, pooled)?;
    let nearest = polyline
        .points
        .iter()
        .map(|&(x, y, _)| {
            ((x - reference.x).powi(2) + (y - reference.y).powi(2), [x, y])
        })
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap()
        .1;
    Ok((out, nearest))
}

/// Split a polyline into chunks of at most [`MAP_CHUNK_POINTS`] points.
pub fn chunk_polyline(polyline: &Polyline) -> Vec<Polyline> {
    if polyline.points.len() <= MAP_CHUNK_POINTS {
        return vec![polyline.clone()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < polyline.points.len() {
        let end = (start + MAP_CHUNK_POINTS).min(polyline.points.len());
        out.push(Polyline {
            points: polyline.points[start..end].to_vec(),
            kind: polyline.kind,
        });
        if end == polyline.points.len() {
            break;
        }
        start = end - 1; // share the joint point so chunks stay connected
    }
    out
}
