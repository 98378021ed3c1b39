//! Social force forecaster: relaxation towards a desired velocity plus
//! isotropic exponential repulsion between pedestrians.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::SceneWindow;
use crate::error::{Error, Result};
use crate::geometry::{Pose2, Vec2};
use crate::metrics::{Mode, PredictionSet};
use crate::orca::steps_per_frame;

const COINCIDENT_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfParams {
    /// Repulsion strength (m/s^2).
    pub a: f64,
    /// Repulsion range (m).
    pub b: f64,
    pub tau_relax: f64,
    /// Fixed desired speed; `None` uses each pedestrian's observed mean speed.
    pub desired_speed: Option<f64>,
    pub agent_radius: f64,
    pub dt_sim: f64,
}

impl Default for SfParams {
    fn default() -> Self {
        SfParams {
            a: 2.0,
            b: 0.3,
            tau_relax: 0.5,
            desired_speed: None,
            agent_radius: 0.3,
            dt_sim: 0.1,
        }
    }
}

impl SfParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a >= 0.0
            && self.b > 0.0
            && self.tau_relax > 0.0
            && self.agent_radius > 0.0
            && self.dt_sim > 0.0
            && self.desired_speed.is_none_or(|s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid social force parameters {self:?}")))
        }
    }
}

/// A pedestrian as seen by the force model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfAgent {
    pub pose: Pose2,
    pub goal: Vec2,
    pub desired_speed: f64,
}

/// Acceleration of `agent` under goal attraction and repulsion from
/// `neighbours`.
pub fn sf_acceleration(agent: &SfAgent, neighbours: &[Pose2], params: &SfParams) -> Vec2 {
    let pos = agent.pose.position;
    let desired = (agent.goal - pos).normalize_or_zero() * agent.desired_speed;
    let mut acc = (desired - agent.pose.velocity) / params.tau_relax;
    let contact = 2.0 * params.agent_radius;
    for n in neighbours {
        let diff = pos - n.position;
        let d = diff.norm();
        if d < COINCIDENT_EPSILON {
            acc += Vec2::new(1.0, 0.0) * (params.a * (contact / params.b).exp());
        } else {
            acc += diff / d * (params.a * ((contact - d) / params.b).exp());
        }
    }
    acc
}

/// Mean speed over the consecutive observed points.
pub fn observed_mean_speed(run: &[Vec2], dt: f64) -> f64 {
    if run.len() < 2 {
        return 0.0;
    }
    run.windows(2).map(|w| w[0].distance(w[1]) / dt).sum::<f64>() / (run.len() - 1) as f64
}

/// Forecasts every pedestrian present at the end of the observation by
/// integrating the force model with symplectic Euler at `dt_sim`.
pub fn sf_forecast(
    window: &SceneWindow,
    goals: &BTreeMap<i64, Vec2>,
    params: &SfParams,
    pred_len: usize,
    velocity_offsets: &BTreeMap<i64, Vec2>,
) -> Result<PredictionSet> {
    params.validate()?;
    if window.obs_len == 0 {
        return Err(Error::InsufficientObservations { needed: 1, got: 0 });
    }
    let ids = window.pedestrians_at_observation_end();
    let mut agents: Vec<SfAgent> = ids
        .iter()
        .map(|&id| {
            let run = window.observed_run(id);
            let position = *run.last().expect("present at observation end");
            let mut velocity = match run.len() {
                0 | 1 => Vec2::ZERO,
                n => (run[n - 1] - run[n - 2]) / window.dt,
            };
            if let Some(off) = velocity_offsets.get(&id) {
                velocity += *off;
            }
            SfAgent {
                pose: Pose2::new(position, velocity),
                goal: goals.get(&id).copied().unwrap_or(position),
                desired_speed: params
                    .desired_speed
                    .unwrap_or_else(|| observed_mean_speed(&run, window.dt)),
            }
        })
        .collect();

    let sub = steps_per_frame(window.dt, params.dt_sim);
    let mut tracks: Vec<Vec<Vec2>> = vec![Vec::with_capacity(pred_len); agents.len()];
    for _ in 0..pred_len {
        for _ in 0..sub {
            let snapshot: Vec<Pose2> = agents.iter().map(|a| a.pose).collect();
            for (i, agent) in agents.iter_mut().enumerate() {
                let others: Vec<Pose2> = snapshot
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, p)| *p)
                    .collect();
                let acc = sf_acceleration(agent, &others, params);
                let mut v = agent.pose.velocity + acc * params.dt_sim;
                let cap = 1.5 * agent.desired_speed;
                let speed = v.norm();
                if speed > cap {
                    v = if cap > 0.0 { v * (cap / speed) } else { Vec2::ZERO };
                }
                agent.pose.velocity = v;
                agent.pose.position += v * params.dt_sim;
            }
        }
        for (track, agent) in tracks.iter_mut().zip(&agents) {
            track.push(agent.pose.position);
        }
    }

    let mut by_id: BTreeMap<i64, Vec<Vec2>> = ids.into_iter().zip(tracks).collect();
    let primary = by_id.remove(&window.primary_id).unwrap_or_default();
    Ok(PredictionSet {
        scene_id: window.scene_id,
        modes: vec![Mode {
            primary,
            neighbours: Some(by_id),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TrackPoint;

    fn sf_agent(pos: Vec2, vel: Vec2, goal: Vec2, speed: f64) -> SfAgent {
        SfAgent {
            pose: Pose2::new(pos, vel),
            goal,
            desired_speed: speed,
        }
    }

    #[test]
    fn equilibrium_without_neighbours() {
        let a = sf_agent(Vec2::ZERO, Vec2::new(1.2, 0.0), Vec2::new(10.0, 0.0), 1.2);
        assert_eq!(sf_acceleration(&a, &[], &SfParams::default()), Vec2::ZERO);
    }

    #[test]
    fn repulsion_magnitudes() {
        let params = SfParams::default();
        let a = sf_agent(Vec2::ZERO, Vec2::ZERO, Vec2::ZERO, 0.0);
        let touching = Pose2::new(Vec2::new(0.6, 0.0), Vec2::ZERO);
        let acc = sf_acceleration(&a, &[touching], &params);
        assert!((acc.norm() - params.a).abs() < 1e-12);
        assert!(acc.x < 0.0);

        let near = Pose2::new(Vec2::new(0.0, 0.9), Vec2::ZERO);
        let acc = sf_acceleration(&a, &[near], &params);
        assert!((acc.norm() - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((acc.norm() - 0.7358).abs() < 1e-4);

        let same = Pose2::new(Vec2::ZERO, Vec2::ZERO);
        let acc = sf_acceleration(&a, &[same], &params);
        assert!((acc - Vec2::new(params.a * 2.0f64.exp(), 0.0)).norm() < 1e-12);
    }

    fn window(tracks: &[(i64, Vec<Vec2>)], obs_len: usize, pred_len: usize) -> SceneWindow {
        let n = obs_len + pred_len;
        let to_points = |id: i64, t: &Vec<Vec2>| -> Vec<TrackPoint> {
            t.iter()
                .enumerate()
                .map(|(f, p)| TrackPoint::new(f as i64, id, p.x, p.y))
                .collect()
        };
        SceneWindow {
            scene_id: 0,
            dt: 0.4,
            obs_len,
            pred_len,
            frames: (0..n as i64).collect(),
            primary_id: tracks[0].0,
            primary: to_points(tracks[0].0, &tracks[0].1),
            neighbours: tracks[1..]
                .iter()
                .map(|(id, t)| (*id, to_points(*id, t).into_iter().map(Some).collect()))
                .collect(),
        }
    }

    fn walk(start: Vec2, step: Vec2, n: usize) -> Vec<Vec2> {
        (0..n).map(|k| start + step * k as f64).collect()
    }

    #[test]
    fn lone_walker_pursues_goal_straight() {
        let w = window(&[(1, walk(Vec2::ZERO, Vec2::new(0.4, 0.0), 21))], 9, 12);
        let goals = [(1, Vec2::new(30.0, 0.0))].into();
        let set = sf_forecast(&w, &goals, &SfParams::default(), 12, &BTreeMap::new()).unwrap();
        let pred = &set.modes[0].primary;
        assert_eq!(pred.len(), 12);
        for (k, p) in pred.iter().enumerate() {
            assert!(p.y.abs() < 1e-12);
            assert!((p.x - (3.2 + 0.4 * (k + 1) as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn mirror_pair_stays_mirrored() {
        let a = walk(Vec2::new(-4.0, 0.5), Vec2::new(0.4, -0.02), 21);
        let b: Vec<Vec2> = a.iter().map(|p| Vec2::new(p.x, -p.y)).collect();
        let w = window(&[(1, a), (2, b)], 9, 12);
        let goals = [(1, Vec2::new(20.0, -0.5)), (2, Vec2::new(20.0, 0.5))].into();
        let set = sf_forecast(&w, &goals, &SfParams::default(), 12, &BTreeMap::new()).unwrap();
        let pa = &set.modes[0].primary;
        let pb = &set.modes[0].neighbours.as_ref().unwrap()[&2];
        for (p, q) in pa.iter().zip(pb) {
            assert!((p.x - q.x).abs() < 1e-9 && (p.y + q.y).abs() < 1e-9);
        }
        // repulsion pushes them apart
        assert!(pa[11].y > 0.0);
    }

    #[test]
    fn rigid_motion_equivariance() {
        let a = walk(Vec2::new(-4.0, 0.3), Vec2::new(0.4, 0.0), 21);
        let b = walk(Vec2::new(4.0, -0.3), Vec2::new(-0.4, 0.0), 21);
        let goals: BTreeMap<i64, Vec2> = [(1, Vec2::new(20.0, 0.3)), (2, Vec2::new(-20.0, -0.3))].into();
        let base = window(&[(1, a.clone()), (2, b.clone())], 9, 12);
        let ref_set = sf_forecast(&base, &goals, &SfParams::default(), 12, &BTreeMap::new()).unwrap();

        let (angle, shift) = (1.1, Vec2::new(3.0, -7.0));
        let t = |p: &Vec2| p.rotate(angle) + shift;
        let moved = window(
            &[(1, a.iter().map(t).collect()), (2, b.iter().map(t).collect())],
            9,
            12,
        );
        let goals_t = goals.iter().map(|(k, g)| (*k, t(g))).collect();
        let set = sf_forecast(&moved, &goals_t, &SfParams::default(), 12, &BTreeMap::new()).unwrap();
        for (p, q) in ref_set.modes[0].primary.iter().zip(&set.modes[0].primary) {
            assert!((t(p) - *q).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_strength_is_pure_goal_pursuit() {
        let a = walk(Vec2::new(-4.0, 0.0), Vec2::new(0.4, 0.0), 21);
        let b = walk(Vec2::new(4.0, 0.1), Vec2::new(-0.4, 0.0), 21);
        let w = window(&[(1, a), (2, b)], 9, 12);
        let goals = [(1, Vec2::new(20.0, 0.0)), (2, Vec2::new(-20.0, 0.1))].into();
        let params = SfParams { a: 0.0, ..SfParams::default() };
        let set = sf_forecast(&w, &goals, &params, 12, &BTreeMap::new()).unwrap();
        for (k, p) in set.modes[0].primary.iter().enumerate() {
            assert!((*p - Vec2::new(-0.8 + 0.4 * (k + 1) as f64, 0.0)).norm() < 1e-9);
        }
    }
}
