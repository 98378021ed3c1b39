//! Synthetic crowd scenes: pedestrians placed on a circle walk to the
//! opposite side under ORCA. Windows that are interacting, stable under small
//! perturbations and free of sharp turns are kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorize::{categorize_scene, CategorizeConfig};
use crate::dataset::{
    finite_difference_velocities, window_starts, CategoryTags, Dataset, MainType, SceneRecord,
    SceneWindow, TrackPoint, WindowConfig, DEFAULT_DT,
};
use crate::error::{Error, Result};
use crate::geometry::{signed_angle, Vec2};
use crate::metrics::displacement_errors;
use crate::orca::{rollout, AgentState, OrcaParams};

const PLACEMENT_ATTEMPTS: usize = 10_000;
const BATCH: u64 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Agent count range, lower bound inclusive and upper bound exclusive.
    pub n_range: (usize, usize),
    pub radius: f64,
    pub d_min: f64,
    /// Half-width of the uniform perturbation (m).
    pub noise_thresh: f64,
    pub k_perturb: usize,
    pub ade_reject: f64,
    pub seed: u64,
    pub scenes_target: usize,
    /// Give up after this many scenarios even if the target is not met.
    pub max_scenarios: u64,
    pub stride: usize,
    pub max_time: f64,
    pub arrival_dist: f64,
    pub max_turn_deg: f64,
    pub turn_min_speed: f64,
    pub dt: f64,
    pub window: WindowConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_range: (4, 7),
            radius: 10.0,
            d_min: 2.0,
            noise_thresh: 0.01,
            k_perturb: 20,
            ade_reject: 0.3,
            seed: 0,
            scenes_target: 200,
            max_scenarios: 10_000,
            stride: 3,
            max_time: 40.0,
            arrival_dist: 0.5,
            max_turn_deg: 60.0,
            turn_min_speed: 0.3,
            dt: DEFAULT_DT,
            window: WindowConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_range;
        let positive = [self.radius, self.d_min, self.max_time, self.arrival_dist, self.dt]
            .iter()
            .all(|v| *v > 0.0);
        if lo >= hi || lo == 0 || !positive || self.noise_thresh < 0.0 || self.stride == 0 {
            return Err(Error::Config(format!("invalid generator settings {self:?}")));
        }
        Ok(())
    }

    /// Independent random stream of scenario `index`.
    pub fn scenario_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub starts: Vec<Vec2>,
    pub goals: Vec<Vec2>,
}

impl Scenario {
    pub fn agents(&self, radius: f64, pref_speed: f64) -> Vec<AgentState> {
        self.starts
            .iter()
            .zip(&self.goals)
            .enumerate()
            .map(|(i, (s, g))| AgentState {
                id: i as i64,
                position: *s,
                velocity: Vec2::ZERO,
                radius,
                goal: *g,
                pref_speed,
            })
            .collect()
    }
}

/// Places `n` pedestrians on the circle around the origin with pairwise
/// distances of at least `d_min`. Each goal is the antipode of its start.
pub fn sample_circle_scenario<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Scenario> {
    let n = rng.random_range(cfg.n_range.0..cfg.n_range.1);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let starts: Vec<Vec2> = (0..n)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                Vec2::new(cfg.radius * a.cos(), cfg.radius * a.sin())
            })
            .collect();
        let spread = starts
            .iter()
            .enumerate()
            .all(|(i, a)| starts[i + 1..].iter().all(|b| a.distance(*b) >= cfg.d_min));
        if spread {
            let goals = starts.iter().map(|s| -*s).collect();
            return Ok(Scenario { starts, goals });
        }
    }
    Err(Error::Placement {
        agents: n,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

/// Agent states at every sampled frame, starting with the initial state.
/// Stops once every agent is within `arrival_dist` of its goal or after
/// `max_time`.
pub fn simulate(scenario: &Scenario, params: &OrcaParams, cfg: &SynthConfig) -> Vec<Vec<AgentState>> {
    let max_frames = (cfg.max_time / cfg.dt).round() as usize;
    let mut frames = vec![scenario.agents(params.agent_radius, params.max_speed)];
    while frames.len() <= max_frames {
        let last = frames.last().expect("non-empty");
        if last.iter().all(|a| a.position.distance(a.goal) <= cfg.arrival_dist) {
            break;
        }
        let next = rollout(last, params, cfg.dt, 1).pop().expect("one frame");
        frames.push(next);
    }
    frames
}

/// The window starting at sampled frame `start` with agent `primary` as the
/// primary pedestrian.
pub fn rollout_window(
    frames: &[Vec<AgentState>],
    start: usize,
    primary: usize,
    dt: f64,
    window: WindowConfig,
    scene_id: i64,
) -> SceneWindow {
    let range = start..start + window.len();
    let point = |f: usize, a: &AgentState| TrackPoint::new(f as i64, a.id, a.position.x, a.position.y);
    let primary_id = frames[start][primary].id;
    SceneWindow {
        scene_id,
        dt,
        obs_len: window.obs_len,
        pred_len: window.pred_len,
        frames: range.clone().map(|f| f as i64).collect(),
        primary_id,
        primary: range.clone().map(|f| point(f, &frames[f][primary])).collect(),
        neighbours: (0..frames[start].len())
            .filter(|&i| i != primary)
            .map(|i| {
                let id = frames[start][i].id;
                (id, range.clone().map(|f| Some(point(f, &frames[f][i]))).collect())
            })
            .collect(),
    }
}

/// Keeps a track unless its heading jumps by more than `max_turn_deg`
/// between consecutive steps where it moves faster than `turn_min_speed`.
pub fn sharp_turn_filter(track: &[Vec2], dt: f64, cfg: &SynthConfig) -> bool {
    let v = finite_difference_velocities(track, dt);
    v.windows(2).skip(1).all(|w| {
        let fast = w[0].norm() > cfg.turn_min_speed && w[1].norm() > cfg.turn_min_speed;
        !fast || signed_angle(w[0], w[1]).abs() <= cfg.max_turn_deg
    })
}

/// Re-simulates `future.len()` frames from `state` after perturbing every
/// agent's position and previous position by uniform noise, `k_perturb`
/// times. Rejects the scene if any primary ADE exceeds `ade_reject`.
pub fn sensitivity_filter<R: Rng>(
    state: &[AgentState],
    primary_id: i64,
    future: &[Vec2],
    params: &OrcaParams,
    cfg: &SynthConfig,
    rng: &mut R,
) -> bool {
    let eps = cfg.noise_thresh;
    let noise = |rng: &mut R| {
        if eps > 0.0 {
            Vec2::new(rng.random_range(-eps..=eps), rng.random_range(-eps..=eps))
        } else {
            Vec2::ZERO
        }
    };
    for _ in 0..cfg.k_perturb {
        let perturbed: Vec<AgentState> = state
            .iter()
            .map(|a| {
                let now = noise(rng);
                let before = noise(rng);
                AgentState {
                    position: a.position + now,
                    velocity: a.velocity + (now - before) / cfg.dt,
                    ..*a
                }
            })
            .collect();
        if resimulated_ade(&perturbed, primary_id, future, params, cfg.dt) > cfg.ade_reject {
            return false;
        }
    }
    true
}

/// ADE of the primary when `state` is rolled forward against `future`.
pub fn resimulated_ade(state: &[AgentState], primary_id: i64, future: &[Vec2], params: &OrcaParams, dt: f64) -> f64 {
    let frames = rollout(state, params, dt, future.len());
    let track: Vec<Vec2> = frames
        .iter()
        .map(|f| f.iter().find(|a| a.id == primary_id).expect("primary simulated").position)
        .collect();
    displacement_errors(&track, future).map_or(f64::INFINITY, |(ade, _)| ade)
}

/// A kept window of one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct KeptWindow {
    pub start: usize,
    pub primary: usize,
    pub tags: CategoryTags,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutput {
    pub index: u64,
    pub scenario: Scenario,
    pub frames: Vec<Vec<AgentState>>,
    pub kept: Vec<KeptWindow>,
}

/// Samples, simulates and filters scenario `index`.
pub fn process_scenario(
    index: u64,
    cfg: &SynthConfig,
    params: &OrcaParams,
    categorize: &CategorizeConfig,
) -> Result<ScenarioOutput> {
    let mut rng = cfg.scenario_rng(index);
    let scenario = sample_circle_scenario(cfg, &mut rng)?;
    let frames = simulate(&scenario, params, cfg);
    let obs_end = cfg.window.obs_len - 1;
    let mut kept = Vec::new();
    for start in window_starts(frames.len(), cfg.window.len(), cfg.stride) {
        for primary in 0..scenario.starts.len() {
            let w = rollout_window(&frames, start, primary, cfg.dt, cfg.window, 0);
            let tags = categorize_scene(&w, categorize);
            if tags.main_type != MainType::Interacting
                || !sharp_turn_filter(&w.primary_positions(), cfg.dt, cfg)
            {
                continue;
            }
            let state = &frames[start + obs_end];
            if sensitivity_filter(state, w.primary_id, &w.primary_future(), params, cfg, &mut rng) {
                kept.push(KeptWindow { start, primary, tags });
            }
        }
    }
    Ok(ScenarioOutput {
        index,
        scenario,
        frames,
        kept,
    })
}

/// Runs scenarios in index order until `scenes_target` windows are kept and
/// assembles them into one dataset. Each scenario gets its own pedestrian ids
/// and a disjoint frame range.
pub fn generate(cfg: &SynthConfig, params: &OrcaParams) -> Result<Dataset> {
    cfg.validate()?;
    params.validate()?;
    let categorize = CategorizeConfig::default();
    let mut outputs: Vec<ScenarioOutput> = Vec::new();
    let mut total = 0;
    let mut next = 0;
    while total < cfg.scenes_target && next < cfg.max_scenarios {
        let end = (next + BATCH).min(cfg.max_scenarios);
        let batch = (next..end)
            .into_par_iter()
            .map(|i| process_scenario(i, cfg, params, &categorize))
            .collect::<Result<Vec<_>>>()?;
        next = end;
        for mut out in batch {
            if total >= cfg.scenes_target {
                break;
            }
            out.kept.truncate(cfg.scenes_target - total);
            total += out.kept.len();
            if !out.kept.is_empty() {
                outputs.push(out);
            }
        }
    }
    if total < cfg.scenes_target {
        log::warn!("kept {total} of {} scenes after {next} scenarios", cfg.scenes_target);
    }
    log::info!("kept {total} scenes from {next} scenarios");

    let mut points = Vec::new();
    let mut scenes = Vec::new();
    let (mut frame_base, mut ped_base) = (0i64, 0i64);
    let span = cfg.window.len() as i64 - 1;
    for out in &outputs {
        for (f, state) in out.frames.iter().enumerate() {
            for a in state {
                points.push(TrackPoint::new(frame_base + f as i64, ped_base + a.id, a.position.x, a.position.y));
            }
        }
        for k in &out.kept {
            let start = frame_base + k.start as i64;
            scenes.push(SceneRecord {
                scene_id: scenes.len() as i64,
                primary_ped: ped_base + k.primary as i64,
                start_frame: start,
                end_frame: start + span,
                frame_skip: 1,
                tags: Some(k.tags.clone()),
            });
        }
        frame_base += out.frames.len() as i64;
        ped_base += out.scenario.starts.len() as i64;
    }
    let mut ds = Dataset::new(points, scenes, cfg.dt, cfg.window)?;
    ds.manifest = Some(serde_json::json!({ "synth": cfg, "orca": params }));
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(id: i64, pos: Vec2, vel: Vec2, goal: Vec2) -> AgentState {
        AgentState {
            id,
            position: pos,
            velocity: vel,
            radius: 0.3,
            goal,
            pref_speed: 1.5,
        }
    }

    #[test]
    fn scenarios_respect_placement_rules() {
        let cfg = SynthConfig::default();
        for index in 0..200 {
            let s = sample_circle_scenario(&cfg, &mut cfg.scenario_rng(index)).unwrap();
            assert!((4..7).contains(&s.starts.len()));
            for (i, (a, g)) in s.starts.iter().zip(&s.goals).enumerate() {
                assert!((a.norm() - 10.0).abs() < 1e-9);
                assert_eq!(*g, -*a);
                for b in &s.starts[i + 1..] {
                    assert!(a.distance(*b) >= 2.0);
                }
            }
        }
    }

    #[test]
    fn scenario_sampling_is_deterministic() {
        let cfg = SynthConfig { seed: 99, ..SynthConfig::default() };
        let a = sample_circle_scenario(&cfg, &mut cfg.scenario_rng(5)).unwrap();
        let b = sample_circle_scenario(&cfg, &mut cfg.scenario_rng(5)).unwrap();
        let c = sample_circle_scenario(&cfg, &mut cfg.scenario_rng(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn impossible_placement_errors() {
        let cfg = SynthConfig { n_range: (6, 7), radius: 1.0, d_min: 5.0, ..SynthConfig::default() };
        let err = sample_circle_scenario(&cfg, &mut cfg.scenario_rng(0));
        assert!(matches!(err, Err(Error::Placement { agents: 6, .. })));
    }

    #[test]
    fn sharp_turns() {
        let cfg = SynthConfig::default();
        let straight: Vec<Vec2> = (0..21).map(|k| Vec2::new(0.4 * k as f64, 0.0)).collect();
        assert!(sharp_turn_filter(&straight, 0.4, &cfg));

        let mut corner = straight.clone();
        for k in 11..21 {
            corner[k] = corner[10] + Vec2::new(0.0, 0.4 * (k - 10) as f64);
        }
        assert!(!sharp_turn_filter(&corner, 0.4, &cfg));

        // the same quarter turn spread over four steps
        let mut smooth = vec![Vec2::ZERO];
        let mut heading = 0.0f64;
        for k in 1..21 {
            if (11..15).contains(&k) {
                heading += 22.5f64.to_radians();
            }
            let last = smooth[k - 1];
            smooth.push(last + Vec2::new(0.4, 0.0).rotate(heading));
        }
        assert!(sharp_turn_filter(&smooth, 0.4, &cfg));

        // dawdling pedestrians may turn freely
        let slow: Vec<Vec2> = (0..21).map(|k| Vec2::new(0.0, if k % 2 == 0 { 0.0 } else { 0.1 })).collect();
        assert!(sharp_turn_filter(&slow, 0.4, &cfg));
    }

    #[test]
    fn window_count_per_primary() {
        let cfg = SynthConfig::default();
        let s = sample_circle_scenario(&cfg, &mut cfg.scenario_rng(1)).unwrap();
        let frames = simulate(&s, &OrcaParams::default(), &cfg);
        let starts = window_starts(frames.len(), 21, 3);
        assert_eq!(starts.len(), (frames.len() - 21) / 3 + 1);
        assert!(frames.len() <= 101);
        let last = frames.last().unwrap();
        assert!(frames.len() == 101 || last.iter().all(|a| a.position.distance(a.goal) <= 0.5));
    }

    fn head_on_state(offset: f64) -> Vec<AgentState> {
        vec![
            agent(0, Vec2::new(-3.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(10.0, 0.0)),
            agent(1, Vec2::new(3.0, offset), Vec2::new(-1.0, 0.0), Vec2::new(-10.0, offset)),
        ]
    }

    fn future_of(state: &[AgentState], id: i64) -> Vec<Vec2> {
        rollout(state, &OrcaParams::default(), 0.4, 12)
            .iter()
            .map(|f| f.iter().find(|a| a.id == id).unwrap().position)
            .collect()
    }

    #[test]
    fn symmetric_head_on_is_rejected() {
        let cfg = SynthConfig::default();
        let params = OrcaParams::default();
        let state = head_on_state(0.0);
        let future = future_of(&state, 0);
        let mut rng = cfg.scenario_rng(0);
        assert!(!sensitivity_filter(&state, 0, &future, &params, &cfg, &mut rng));
    }

    #[test]
    fn isolated_primary_is_kept() {
        let cfg = SynthConfig::default();
        let params = OrcaParams::default();
        let state = vec![
            agent(0, Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(20.0, 0.0)),
            agent(1, Vec2::new(0.0, 30.0), Vec2::new(-1.0, 0.0), Vec2::new(-20.0, 30.0)),
        ];
        let future = future_of(&state, 0);
        let mut rng = cfg.scenario_rng(0);
        assert!(sensitivity_filter(&state, 0, &future, &params, &cfg, &mut rng));
    }

    #[test]
    fn zero_noise_reproduces_future() {
        let cfg = SynthConfig { noise_thresh: 0.0, ..SynthConfig::default() };
        let params = OrcaParams::default();
        let state = head_on_state(0.0);
        let future = future_of(&state, 0);
        assert_eq!(resimulated_ade(&state, 0, &future, &params, 0.4), 0.0);
        let mut rng = cfg.scenario_rng(0);
        assert!(sensitivity_filter(&state, 0, &future, &params, &cfg, &mut rng));
    }

    #[test]
    fn crossing_at_center_interacts() {
        let cfg = SynthConfig::default();
        let params = OrcaParams::default();
        let starts: Vec<Vec2> = (0..5)
            .map(|i| Vec2::new(10.0, 0.0).rotate(std::f64::consts::TAU * i as f64 / 5.0 + 0.1 * i as f64))
            .collect();
        let scenario = Scenario { goals: starts.iter().map(|s| -*s).collect(), starts };
        let frames = simulate(&scenario, &params, &cfg);
        let cat = CategorizeConfig::default();
        for primary in 0..5 {
            let interacting = window_starts(frames.len(), 21, 3).into_iter().any(|start| {
                let w = rollout_window(&frames, start, primary, cfg.dt, cfg.window, 0);
                categorize_scene(&w, &cat).main_type == MainType::Interacting
            });
            assert!(interacting, "agent {primary}");
        }
    }

    #[test]
    fn kept_windows_are_consistent() {
        let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
        let params = OrcaParams::default();
        let out = process_scenario(0, &cfg, &params, &CategorizeConfig::default()).unwrap();
        for k in &out.kept {
            assert_eq!(k.tags.main_type, MainType::Interacting);
            let w = rollout_window(&out.frames, k.start, k.primary, cfg.dt, cfg.window, 0);
            let state = &out.frames[k.start + 8];
            assert_eq!(resimulated_ade(state, w.primary_id, &w.primary_future(), &params, cfg.dt), 0.0);
            assert!(sharp_turn_filter(&w.primary_positions(), cfg.dt, &cfg));
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = SynthConfig { seed: 11, scenes_target: 15, ..SynthConfig::default() };
        let params = OrcaParams::default();
        let a = crate::dataset::to_ndjson_string(&generate(&cfg, &params).unwrap());
        let b = crate::dataset::to_ndjson_string(&generate(&cfg, &params).unwrap());
        assert_eq!(a, b);
        let ds = crate::dataset::parse_ndjson(a.as_bytes()).unwrap();
        assert_eq!(ds.scenes().len(), 15);
        assert!(ds.manifest.is_some());
        assert!(ds
            .scenes()
            .iter()
            .all(|s| s.tags.as_ref().unwrap().main_type == MainType::Interacting));
    }
}
