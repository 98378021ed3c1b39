//! Wiring used by the command line: model dispatch, prediction files,
//! evaluation, calibration and scene plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{format_coord, Dataset, SceneWindow};
use crate::error::{Error, Result};
use crate::forecast::{cv_forecast_with_offset, kalman_forecast_with_offset, KalmanConfig};
use crate::geometry::Vec2;
use crate::metrics::{aggregate_report, score_scene, Mode, PredictionSet, Report, SceneScore, ScoreConfig};
use crate::orca::{orca_forecast, OrcaParams};
use crate::social_force::{sf_forecast, SfParams};

/// Standard deviation of the initial-velocity jitter of extra modes (m/s).
pub const MODE_JITTER: f64 = 0.05;
pub const PREDICTION_PRECISION: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Cv,
    Kalman,
    Sf,
    Orca,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Cv => "cv",
            Model::Kalman => "kalman",
            Model::Sf => "sf",
            Model::Orca => "orca",
        }
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(Model::Cv),
            "kalman" => Ok(Model::Kalman),
            "sf" => Ok(Model::Sf),
            "orca" => Ok(Model::Orca),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub kalman: KalmanConfig,
    pub sf: SfParams,
    pub orca: OrcaParams,
    /// Distance of the virtual goal ahead of the last observed position (m).
    pub goal_distance: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            kalman: KalmanConfig::default(),
            sf: SfParams::default(),
            orca: OrcaParams::default(),
            goal_distance: 20.0,
        }
    }
}

/// Goal of every pedestrian present at the end of the observation: the last
/// position pushed `distance` meters along the mean observed velocity.
pub fn virtual_goals(window: &SceneWindow, distance: f64) -> BTreeMap<i64, Vec2> {
    jittered_goals(window, distance, &BTreeMap::new())
}

// Goals along the mean observed velocity plus any offset, so that jittered
// modes of the goal-driven models head somewhere else.
fn jittered_goals(window: &SceneWindow, distance: f64, offsets: &BTreeMap<i64, Vec2>) -> BTreeMap<i64, Vec2> {
    window
        .pedestrians_at_observation_end()
        .into_iter()
        .map(|id| {
            let run = window.observed_run(id);
            let last = *run.last().expect("present at observation end");
            let goal = match run.first() {
                Some(first) if run.len() >= 2 => {
                    let mean = (last - *first) / ((run.len() - 1) as f64 * window.dt);
                    let dir = mean.normalize_or_zero();
                    let jittered = match offsets.get(&id) {
                        Some(off) if dir != Vec2::ZERO => (mean + *off).normalize_or_zero(),
                        _ => dir,
                    };
                    last + jittered * distance
                }
                _ => last,
            };
            (id, goal)
        })
        .collect()
}

/// One mode for every pedestrian present at the end of the observation.
/// `velocity_offsets` (m/s) perturb the initial velocities.
pub fn forecast_mode(
    window: &SceneWindow,
    model: Model,
    params: &ModelParams,
    pred_len: usize,
    velocity_offsets: &BTreeMap<i64, Vec2>,
) -> Result<Mode> {
    let set = match model {
        Model::Cv | Model::Kalman => {
            let kalman = KalmanConfig { dt: window.dt, ..params.kalman };
            let mut tracks = BTreeMap::new();
            for id in window.pedestrians_at_observation_end() {
                let run = window.observed_run(id);
                let off = velocity_offsets.get(&id).copied().unwrap_or(Vec2::ZERO);
                let track = match model {
                    Model::Cv if run.len() < 2 => {
                        let last = run[run.len() - 1];
                        (1..=pred_len).map(|k| last + off * (window.dt * k as f64)).collect()
                    }
                    Model::Cv => cv_forecast_with_offset(&run, pred_len, off * window.dt)?,
                    _ => kalman_forecast_with_offset(&run, &kalman, pred_len, off)?,
                };
                tracks.insert(id, track);
            }
            let primary = tracks.remove(&window.primary_id).unwrap_or_default();
            return Ok(Mode {
                primary,
                neighbours: Some(tracks),
            });
        }
        Model::Sf => {
            let goals = jittered_goals(window, params.goal_distance, velocity_offsets);
            sf_forecast(window, &goals, &params.sf, pred_len, velocity_offsets)?
        }
        Model::Orca => {
            let goals = jittered_goals(window, params.goal_distance, velocity_offsets);
            orca_forecast(window, &goals, &params.orca, pred_len, velocity_offsets)?
        }
    };
    Ok(set.modes.into_iter().next().expect("one mode"))
}

/// `k` modes for one scene. Mode 0 is unperturbed; the others jitter every
/// initial velocity with a stream derived from `(seed, scene_id)`.
pub fn predict_scene(window: &SceneWindow, model: Model, params: &ModelParams, k: usize, seed: u64) -> Result<PredictionSet> {
    let (obs, _) = window.split();
    let ids = obs.pedestrians_at_observation_end();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(window.scene_id as u64);
    let jitter = Normal::new(0.0, MODE_JITTER).expect("valid deviation");
    let mut modes = Vec::with_capacity(k.max(1));
    for m in 0..k.max(1) {
        let offsets: BTreeMap<i64, Vec2> = if m == 0 {
            BTreeMap::new()
        } else {
            ids.iter()
                .map(|&id| (id, Vec2::new(jitter.sample(&mut rng), jitter.sample(&mut rng))))
                .collect()
        };
        modes.push(forecast_mode(&obs, model, params, window.pred_len, &offsets)?);
    }
    Ok(PredictionSet {
        scene_id: window.scene_id,
        modes,
    })
}

/// Predictions for every scene of the dataset, in scene order.
pub fn predict_dataset(ds: &Dataset, model: Model, params: &ModelParams, k: usize, seed: u64) -> Result<Vec<PredictionSet>> {
    ds.scenes()
        .par_iter()
        .map(|s| predict_scene(&ds.scene_window(s)?, model, params, k, seed))
        .collect()
}

/// One `pred` record per predicted point: by scene, mode, primary first,
/// then neighbours by id.
pub fn write_predictions<W: Write>(ds: &Dataset, sets: &[PredictionSet], out: &mut W) -> Result<()> {
    let obs_len = ds.window.obs_len;
    for set in sets {
        let scene = ds
            .scene(set.scene_id)
            .ok_or_else(|| Error::MissingScenes(vec![set.scene_id]))?;
        let frames = &scene.frames()[obs_len..];
        for (m, mode) in set.modes.iter().enumerate() {
            let mut tracks = vec![(scene.primary_ped, &mode.primary)];
            tracks.extend(mode.neighbours.iter().flatten().map(|(id, t)| (*id, t)));
            for (ped, track) in tracks {
                for (f, p) in frames.iter().zip(track.iter()) {
                    writeln!(
                        out,
                        "{{\"pred\": {{\"scene\": {}, \"mode\": {m}, \"p\": {ped}, \"f\": {f}, \"x\": {}, \"y\": {}}}}}",
                        set.scene_id,
                        format_coord(p.x, PREDICTION_PRECISION),
                        format_coord(p.y, PREDICTION_PRECISION)
                    )?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct PredLine {
    scene: i64,
    mode: usize,
    p: i64,
    f: i64,
    x: f64,
    y: f64,
}

/// Reads a predictions file back into prediction sets, in scene order.
/// Modes without neighbour records get no neighbour predictions.
pub fn read_predictions<R: BufRead>(ds: &Dataset, reader: R) -> Result<Vec<PredictionSet>> {
    // scene -> mode -> ped -> frame -> point
    type Points = BTreeMap<i64, BTreeMap<usize, BTreeMap<i64, BTreeMap<i64, Vec2>>>>;
    let mut points: Points = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        };
        let value: Value = serde_json::from_str(&line).map_err(parse_err)?;
        let Some(body) = value.get("pred") else {
            continue;
        };
        let r: PredLine = serde_json::from_value(body.clone()).map_err(parse_err)?;
        let slot = points.entry(r.scene).or_default().entry(r.mode).or_default().entry(r.p).or_default();
        if slot.insert(r.f, Vec2::new(r.x, r.y)).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate prediction for scene {} mode {} ped {} frame {}", r.scene, r.mode, r.p, r.f),
            });
        }
    }
    if points.is_empty() {
        return Err(Error::Validation("prediction file holds no predictions".into()));
    }
    let unknown: Vec<i64> = points.keys().copied().filter(|id| ds.scene(*id).is_none()).collect();
    if !unknown.is_empty() {
        return Err(Error::MissingScenes(unknown));
    }

    let obs_len = ds.window.obs_len;
    let mut sets = Vec::with_capacity(points.len());
    for (scene_id, modes) in points {
        let scene = ds.scene(scene_id).expect("checked above");
        let frames = scene.frames()[obs_len..].to_vec();
        let track_of = |ped: i64, by_frame: &BTreeMap<i64, Vec2>| -> Result<Vec<Vec2>> {
            frames
                .iter()
                .map(|f| {
                    by_frame.get(f).copied().ok_or_else(|| {
                        Error::Validation(format!("scene {scene_id}: ped {ped} has no prediction at frame {f}"))
                    })
                })
                .collect()
        };
        let n_modes = modes.len();
        let mut out = Vec::with_capacity(n_modes);
        for (expected, (m, mut peds)) in modes.into_iter().enumerate() {
            if m != expected {
                return Err(Error::Validation(format!("scene {scene_id}: mode {expected} missing")));
            }
            let primary = peds
                .remove(&scene.primary_ped)
                .ok_or_else(|| Error::Validation(format!("scene {scene_id} mode {m}: no primary prediction")))?;
            let primary = track_of(scene.primary_ped, &primary)?;
            let neighbours = if peds.is_empty() {
                None
            } else {
                Some(
                    peds.iter()
                        .map(|(ped, t)| Ok((*ped, track_of(*ped, t)?)))
                        .collect::<Result<BTreeMap<_, _>>>()?,
                )
            };
            out.push(Mode { primary, neighbours });
        }
        sets.push(PredictionSet { scene_id, modes: out });
    }
    Ok(sets)
}

/// Scores that cover exactly the dataset's scenes.
pub fn score_predictions(ds: &Dataset, sets: &[PredictionSet], config: &ScoreConfig) -> Result<Vec<SceneScore>> {
    let by_id: BTreeMap<i64, &PredictionSet> = sets.iter().map(|s| (s.scene_id, s)).collect();
    let missing: Vec<i64> = ds
        .scenes()
        .iter()
        .map(|s| s.scene_id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingScenes(missing));
    }
    let extra: Vec<i64> = by_id.keys().copied().filter(|id| ds.scene(*id).is_none()).collect();
    if !extra.is_empty() {
        return Err(Error::MissingScenes(extra));
    }
    ds.scenes()
        .par_iter()
        .map(|s| score_scene(&ds.scene_window(s)?, by_id[&s.scene_id], s.tags.clone(), config))
        .collect()
}

pub fn evaluate(ds: &Dataset, sets: &[PredictionSet], model: &str, config: &ScoreConfig) -> Result<Report> {
    if sets.is_empty() {
        return Err(Error::Validation("no predictions to evaluate".into()));
    }
    Ok(aggregate_report(model, &score_predictions(ds, sets, config)?))
}

/// Overall figures of one calibration candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub ade: f64,
    pub fde: f64,
    /// Fraction of eligible scenes with a prediction collision.
    pub col_i: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub best: usize,
    pub params: ModelParams,
    /// False when every candidate collided and the least colliding one was
    /// returned.
    pub collision_free: bool,
    pub candidates: Vec<CandidateScore>,
}

/// Index of the best candidate: colliding candidates are dropped, then ADE,
/// FDE and grid order decide. If all collide, the lowest Col-I wins.
pub fn select_best(candidates: &[CandidateScore]) -> Result<(usize, bool)> {
    if candidates.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let by_error = |a: &(usize, &CandidateScore), b: &(usize, &CandidateScore)| {
        a.1.ade.total_cmp(&b.1.ade).then(a.1.fde.total_cmp(&b.1.fde)).then(a.0.cmp(&b.0))
    };
    let survivor = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.col_i == 0.0)
        .min_by(by_error);
    if let Some((i, _)) = survivor {
        return Ok((i, true));
    }
    let (i, _) = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.col_i.total_cmp(&b.1.col_i).then_with(|| by_error(a, b)))
        .expect("non-empty");
    Ok((i, false))
}

pub fn score_candidate(ds: &Dataset, model: Model, params: &ModelParams, config: &ScoreConfig) -> Result<CandidateScore> {
    let sets = predict_dataset(ds, model, params, 1, 0)?;
    let scores = score_predictions(ds, &sets, config)?;
    let n = scores.len().max(1) as f64;
    let eligible: Vec<bool> = scores.iter().filter_map(|s| s.col_i).collect();
    Ok(CandidateScore {
        ade: scores.iter().map(|s| s.ade).sum::<f64>() / n,
        fde: scores.iter().map(|s| s.fde).sum::<f64>() / n,
        col_i: if eligible.is_empty() {
            0.0
        } else {
            eligible.iter().filter(|c| **c).count() as f64 / eligible.len() as f64
        },
    })
}

/// Grid search over `grid` on the scenes of `ds`.
pub fn calibrate_gridsearch(ds: &Dataset, model: Model, grid: &[ModelParams], config: &ScoreConfig) -> Result<Calibration> {
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let candidates = grid
        .iter()
        .map(|p| score_candidate(ds, model, p, config))
        .collect::<Result<Vec<_>>>()?;
    let (best, collision_free) = select_best(&candidates)?;
    if !collision_free {
        log::warn!(
            "every candidate collides; using the least colliding one (Col-I {:.1}%)",
            100.0 * candidates[best].col_i
        );
    }
    Ok(Calibration {
        best,
        params: grid[best],
        collision_free,
        candidates,
    })
}

/// Built-in search grid of the simulation models.
pub fn default_grid(model: Model) -> Result<Vec<ModelParams>> {
    let base = ModelParams::default();
    match model {
        Model::Sf => {
            let mut grid = Vec::new();
            for a in [1.0, 2.0, 3.0, 5.0] {
                for b in [0.2, 0.3, 0.5] {
                    for tau_relax in [0.5, 1.0] {
                        grid.push(ModelParams { sf: SfParams { a, b, tau_relax, ..base.sf }, ..base });
                    }
                }
            }
            Ok(grid)
        }
        Model::Orca => {
            let mut grid = Vec::new();
            for tau in [1.0, 2.0, 3.0, 5.0] {
                for agent_radius in [0.25, 0.3, 0.35] {
                    grid.push(ModelParams { orca: OrcaParams { tau, agent_radius, ..base.orca }, ..base });
                }
            }
            Ok(grid)
        }
        other => Err(Error::Config(format!("model {} has no parameters to calibrate", other.name()))),
    }
}

/// Parses a grid file: a JSON array of parameter objects of the calibrated
/// model; missing fields take their defaults.
pub fn parse_grid(model: Model, text: &str) -> Result<Vec<ModelParams>> {
    let base = ModelParams::default();
    let entries: Vec<Value> = serde_json::from_str(text)?;
    entries
        .into_iter()
        .map(|v| match model {
            Model::Sf => Ok(ModelParams { sf: serde_json::from_value(v)?, ..base }),
            Model::Orca => Ok(ModelParams { orca: serde_json::from_value(v)?, ..base }),
            other => Err(Error::Config(format!("model {} has no parameters to calibrate", other.name()))),
        })
        .collect()
}

const SVG_SIZE: f64 = 600.0;
const SVG_MARGIN: f64 = 30.0;

/// Scene plot: observed tracks solid, ground truth dotted, predictions
/// dashed, the primary in red, and collisions of the unimodal prediction
/// circled.
pub fn scene_svg(window: &SceneWindow, set: &PredictionSet, config: &ScoreConfig) -> String {
    let obs = window.obs_len;
    let mode = &set.modes[0];
    let mut tracks: Vec<(i64, Vec<Option<Vec2>>)> = vec![(window.primary_id, window.primary_positions().into_iter().map(Some).collect())];
    for id in window.neighbours.keys() {
        tracks.push((*id, window.neighbour_positions(*id).expect("own neighbour")));
    }
    let mut all: Vec<Vec2> = tracks.iter().flat_map(|(_, t)| t.iter().flatten().copied()).collect();
    for m in &set.modes {
        all.extend(&m.primary);
        all.extend(m.neighbours.iter().flat_map(|n| n.values().flatten()));
    }
    let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in &all {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let span = (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
    let scale = (SVG_SIZE - 2.0 * SVG_MARGIN) / span;
    let map = |p: Vec2| ((p.x - lo.x) * scale + SVG_MARGIN, SVG_SIZE - SVG_MARGIN - (p.y - lo.y) * scale);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">",
        s = SVG_SIZE
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">scene {}</text>", window.scene_id);
    let polyline = |svg: &mut String, pts: &[Vec2], color: &str, width: f64, dash: Option<&str>| {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = map(*p);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let dash = dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"{dash}/>",
            coords.join(" ")
        );
    };
    for (id, track) in &tracks {
        let primary = *id == window.primary_id;
        let (color, width) = if primary { ("#d62728", 2.5) } else { ("#1f77b4", 1.5) };
        let observed: Vec<Vec2> = track[..obs].iter().flatten().copied().collect();
        polyline(&mut svg, &observed, color, width, None);
        let mut truth: Vec<Vec2> = track[obs.saturating_sub(1)..].iter().flatten().copied().collect();
        if truth.len() == 1 {
            truth.clear();
        }
        polyline(&mut svg, &truth, "#999999", 1.0, Some("2,3"));
    }
    for (m, pred) in set.modes.iter().enumerate() {
        let opacity = if m == 0 { "" } else { "66" };
        let mut primary = vec![window.primary[obs - 1].position()];
        primary.extend(&pred.primary);
        polyline(&mut svg, &primary, &format!("#d62728{opacity}"), 2.0, Some("6,4"));
        for (id, t) in pred.neighbours.iter().flatten() {
            let mut pts: Vec<Vec2> = window.observed_run(*id).last().copied().into_iter().collect();
            pts.extend(t);
            polyline(&mut svg, &pts, &format!("#1f77b4{opacity}"), 1.2, Some("6,4"));
        }
    }
    let th = config.collision.threshold;
    let others: Vec<Vec<Option<Vec2>>> = mode
        .neighbours
        .iter()
        .flat_map(|n| n.values().map(|t| t.iter().copied().map(Some).collect()))
        .chain(window.neighbours.keys().map(|id| window.neighbour_positions(*id).expect("own neighbour")[obs..].to_vec()))
        .collect();
    for (t, p) in mode.primary.iter().enumerate() {
        let close = others.iter().any(|o| o.get(t).copied().flatten().is_some_and(|q| q.distance(*p) < th));
        if close {
            let (x, y) = map(*p);
            let _ = writeln!(svg, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"8\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>");
        }
    }
    svg.push_str("</svg>\n");
    svg
}
