//! Optimal reciprocal collision avoidance.
//!
//! Each agent turns every neighbour into a half-plane of admissible
//! velocities and picks the admissible velocity closest to its preferred one
//! with an incremental 2D linear program. When the half-planes leave no room,
//! a 3D program minimizes the largest constraint violation instead.
//!
//! Geometry and LP structure follow the RVO2 library (Apache-2.0,
//! University of North Carolina at Chapel Hill).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::SceneWindow;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::metrics::{Mode, PredictionSet};
use crate::social_force::observed_mean_speed;

const LP_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrcaParams {
    pub agent_radius: f64,
    /// Reciprocal time horizon (s).
    pub tau: f64,
    pub max_speed: f64,
    pub neighbour_dist: f64,
    pub dt_sim: f64,
}

impl Default for OrcaParams {
    fn default() -> Self {
        OrcaParams {
            agent_radius: 0.3,
            tau: 3.0,
            max_speed: 1.5,
            neighbour_dist: 10.0,
            dt_sim: 0.1,
        }
    }
}

impl OrcaParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.agent_radius,
            self.tau,
            self.max_speed,
            self.neighbour_dist,
            self.dt_sim,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.tau < self.dt_sim {
            return Err(Error::Config(format!("invalid ORCA parameters {self:?}")));
        }
        Ok(())
    }
}

/// Boundary line of a half-plane; admissible points lie to the left of
/// `direction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    pub direction: Vec2,
}

impl HalfPlane {
    /// Positive when `v` lies on the forbidden (right) side.
    pub fn violation(&self, v: Vec2) -> f64 {
        self.direction.det(self.point - v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: i64,
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
    pub goal: Vec2,
    /// Cruising speed towards the goal; never above `max_speed`.
    pub pref_speed: f64,
}

/// Output of [`orca_lines`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrcaConstraints {
    pub lines: Vec<HalfPlane>,
    /// Neighbours whose position coincides exactly with the agent's.
    pub coincident: Vec<i64>,
}

/// Builds one half-plane per neighbour closer than `neighbour_dist`, in
/// ascending neighbour id order.
pub fn orca_lines(agent: &AgentState, neighbours: &[AgentState], params: &OrcaParams) -> OrcaConstraints {
    let mut sorted: Vec<&AgentState> = neighbours
        .iter()
        .filter(|n| n.id != agent.id)
        .filter(|n| (n.position - agent.position).norm_squared() < params.neighbour_dist.powi(2))
        .collect();
    sorted.sort_by_key(|n| n.id);

    let mut out = OrcaConstraints::default();
    for other in sorted {
        let (line, coincident) = line_for_neighbour(agent, other, params.tau, params.dt_sim);
        if coincident {
            out.coincident.push(other.id);
        }
        out.lines.push(line);
    }
    out
}

fn line_for_neighbour(agent: &AgentState, other: &AgentState, tau: f64, dt: f64) -> (HalfPlane, bool) {
    let rel_pos = other.position - agent.position;
    let rel_vel = agent.velocity - other.velocity;
    let dist_sq = rel_pos.norm_squared();
    let combined = agent.radius + other.radius;
    let combined_sq = combined * combined;
    let inv_tau = 1.0 / tau;

    let direction;
    let u;
    let mut coincident = false;

    if dist_sq > combined_sq {
        // Vector from the cutoff circle center to the relative velocity.
        let w = rel_vel - rel_pos * inv_tau;
        let w_len_sq = w.norm_squared();
        let dot1 = w.dot(rel_pos);

        if dot1 < 0.0 && dot1 * dot1 > combined_sq * w_len_sq {
            // Closest boundary point lies on the cutoff circle.
            let w_len = w_len_sq.sqrt();
            let unit_w = w / w_len;
            direction = Vec2::new(unit_w.y, -unit_w.x);
            u = unit_w * (combined * inv_tau - w_len);
        } else {
            // Closest boundary point lies on one of the cone legs.
            let leg = (dist_sq - combined_sq).sqrt();
            direction = if rel_pos.det(w) > 0.0 {
                Vec2::new(
                    rel_pos.x * leg - rel_pos.y * combined,
                    rel_pos.x * combined + rel_pos.y * leg,
                ) / dist_sq
            } else {
                -Vec2::new(
                    rel_pos.x * leg + rel_pos.y * combined,
                    -rel_pos.x * combined + rel_pos.y * leg,
                ) / dist_sq
            };
            u = direction * rel_vel.dot(direction) - rel_vel;
        }
    } else {
        // Already overlapping: resolve within one simulation step.
        let inv_dt = 1.0 / dt;
        let w = rel_vel - rel_pos * inv_dt;
        let w_len = w.norm();
        let unit_w = if dist_sq == 0.0 {
            // Exact overlap gives no separating axis; the lower id escapes
            // towards +x and the higher id towards -x.
            coincident = true;
            if agent.id < other.id {
                Vec2::new(1.0, 0.0)
            } else {
                Vec2::new(-1.0, 0.0)
            }
        } else if w_len > 0.0 {
            w / w_len
        } else {
            -rel_pos / dist_sq.sqrt()
        };
        direction = Vec2::new(unit_w.y, -unit_w.x);
        // boundary point of the one-step cutoff circle along unit_w
        u = rel_pos * inv_dt + unit_w * (combined * inv_dt) - rel_vel;
    }

    (
        HalfPlane {
            point: agent.velocity + u * 0.5,
            direction,
        },
        coincident,
    )
}

/// Velocity closest to `pref_velocity` within the speed disc and all
/// half-planes; falls back to the least-violating velocity when infeasible.
pub fn solve_velocity(lines: &[HalfPlane], pref_velocity: Vec2, max_speed: f64) -> Vec2 {
    let (fail, result) = linear_program2(lines, max_speed, pref_velocity, false);
    if fail < lines.len() {
        linear_program3(lines, fail, max_speed, result)
    } else {
        result
    }
}

/// Optimizes on the boundary of `lines[index]` subject to the earlier lines
/// and the disc. Returns `None` when that segment is empty.
fn linear_program1(
    lines: &[HalfPlane],
    index: usize,
    radius: f64,
    opt: Vec2,
    direction_opt: bool,
) -> Option<Vec2> {
    let line = lines[index];
    let dot = line.point.dot(line.direction);
    let discriminant = dot * dot + radius * radius - line.point.norm_squared();
    if discriminant < 0.0 {
        return None;
    }
    let sqrt_disc = discriminant.sqrt();
    let mut t_left = -dot - sqrt_disc;
    let mut t_right = -dot + sqrt_disc;

    for prior in &lines[..index] {
        let denominator = line.direction.det(prior.direction);
        let numerator = prior.direction.det(line.point - prior.point);
        if denominator.abs() <= LP_EPSILON {
            // Parallel lines.
            if numerator < 0.0 {
                return None;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }

    let t = if direction_opt {
        if opt.dot(line.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        line.direction.dot(opt - line.point).clamp(t_left, t_right)
    };
    Some(line.point + line.direction * t)
}

/// Returns the index of the first line that could not be satisfied (or
/// `lines.len()` on success) and the best velocity found so far.
fn linear_program2(
    lines: &[HalfPlane],
    radius: f64,
    opt: Vec2,
    direction_opt: bool,
) -> (usize, Vec2) {
    let mut result = if direction_opt {
        opt * radius
    } else if opt.norm_squared() > radius * radius {
        opt.normalize_or_zero() * radius
    } else {
        opt
    };
    for (i, line) in lines.iter().enumerate() {
        if line.violation(result) > 0.0 {
            match linear_program1(lines, i, radius, opt, direction_opt) {
                Some(r) => result = r,
                None => return (i, result),
            }
        }
    }
    (lines.len(), result)
}

fn linear_program3(lines: &[HalfPlane], begin: usize, radius: f64, mut result: Vec2) -> Vec2 {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        let line = lines[i];
        if line.violation(result) <= distance {
            continue;
        }
        let mut projected = Vec::with_capacity(i);
        for prior in &lines[..i] {
            let determinant = line.direction.det(prior.direction);
            let point = if determinant.abs() <= LP_EPSILON {
                if line.direction.dot(prior.direction) > 0.0 {
                    // Same direction: the prior line is redundant here.
                    continue;
                }
                (line.point + prior.point) * 0.5
            } else {
                line.point
                    + line.direction
                        * (prior.direction.det(line.point - prior.point) / determinant)
            };
            projected.push(HalfPlane {
                point,
                direction: (prior.direction - line.direction).normalize_or_zero(),
            });
        }
        let saved = result;
        let (fail, candidate) = linear_program2(
            &projected,
            radius,
            Vec2::new(-line.direction.y, line.direction.x),
            true,
        );
        // Failure here only stems from rounding; keep the previous value.
        result = if fail < projected.len() { saved } else { candidate };
        distance = line.violation(result);
    }
    result
}

/// Velocity towards the goal, slowing so as not to overshoot within one step.
pub fn preferred_velocity(agent: &AgentState, params: &OrcaParams) -> Vec2 {
    let to_goal = agent.goal - agent.position;
    let dist = to_goal.norm();
    if dist <= 0.0 {
        return Vec2::ZERO;
    }
    to_goal / dist * agent.pref_speed.min(params.max_speed).min(dist / params.dt_sim)
}

/// One synchronous step: every new velocity is computed from the same
/// snapshot, then all positions advance by `dt_sim`.
pub fn orca_step(agents: &[AgentState], params: &OrcaParams) -> Vec<AgentState> {
    let velocities: Vec<Vec2> = agents
        .iter()
        .map(|a| {
            let constraints = orca_lines(a, agents, params);
            solve_velocity(&constraints.lines, preferred_velocity(a, params), params.max_speed)
        })
        .collect();
    agents
        .iter()
        .zip(velocities)
        .map(|(a, v)| AgentState {
            velocity: v,
            position: a.position + v * params.dt_sim,
            ..*a
        })
        .collect()
}

/// Number of simulation steps per sampled frame of length `dt`.
pub fn steps_per_frame(dt: f64, dt_sim: f64) -> usize {
    ((dt / dt_sim).round() as usize).max(1)
}

/// Rolls `agents` forward for `frames` sampled frames, returning the state at
/// the end of each frame.
pub fn rollout(agents: &[AgentState], params: &OrcaParams, dt: f64, frames: usize) -> Vec<Vec<AgentState>> {
    let sub = steps_per_frame(dt, params.dt_sim);
    let mut state = agents.to_vec();
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        for _ in 0..sub {
            state = orca_step(&state, params);
        }
        out.push(state.clone());
    }
    out
}

/// Simulates every pedestrian present at the end of the observation from
/// its last observed pose towards its goal. `velocity_offsets` perturb the
/// initial velocity of individual pedestrians.
pub fn orca_forecast(
    window: &SceneWindow,
    goals: &BTreeMap<i64, Vec2>,
    params: &OrcaParams,
    pred_len: usize,
    velocity_offsets: &BTreeMap<i64, Vec2>,
) -> Result<PredictionSet> {
    params.validate()?;
    let agents = initial_agents(window, goals, velocity_offsets, params.agent_radius)?;
    let states = rollout(&agents, params, window.dt, pred_len);
    Ok(collect_prediction(window.scene_id, window.primary_id, &agents, &states))
}

/// Agents seeded from the last observed pose of each pedestrian present at
/// the end of the observation.
pub(crate) fn initial_agents(
    window: &SceneWindow,
    goals: &BTreeMap<i64, Vec2>,
    velocity_offsets: &BTreeMap<i64, Vec2>,
    radius: f64,
) -> Result<Vec<AgentState>> {
    if window.obs_len == 0 {
        return Err(Error::InsufficientObservations { needed: 1, got: 0 });
    }
    window
        .pedestrians_at_observation_end()
        .into_iter()
        .map(|id| {
            let run = window.observed_run(id);
            let position = *run.last().expect("present at observation end");
            let mut velocity = match run.len() {
                0 | 1 => Vec2::ZERO,
                n => (run[n - 1] - run[n - 2]) / window.dt,
            };
            if let Some(off) = velocity_offsets.get(&id) {
                velocity += *off;
            }
            let goal = goals.get(&id).copied().unwrap_or(position);
            Ok(AgentState {
                id,
                position,
                velocity,
                radius,
                goal,
                pref_speed: observed_mean_speed(&run, window.dt),
            })
        })
        .collect()
}

pub(crate) fn collect_prediction(
    scene_id: i64,
    primary_id: i64,
    agents: &[AgentState],
    states: &[Vec<AgentState>],
) -> PredictionSet {
    let mut tracks: BTreeMap<i64, Vec<Vec2>> = agents.iter().map(|a| (a.id, Vec::new())).collect();
    for frame in states {
        for a in frame {
            tracks.get_mut(&a.id).expect("known agent").push(a.position);
        }
    }
    let primary = tracks.remove(&primary_id).unwrap_or_default();
    PredictionSet {
        scene_id,
        modes: vec![Mode {
            primary,
            neighbours: Some(tracks),
        }],
    }
}
