//! Tracks, scenes and windows, plus the line-oriented JSON format they are
//! stored in.
//!
//! A dataset file holds one record per line:
//!
//! ```text
//! {"scene": {"id": 0, "p": 3, "s": 0, "e": 20, "fps": 2.5, "tag": [3, [1]]}}
//! {"track": {"f": 0, "p": 3, "x": 1.23, "y": -0.50}}
//! ```
//!
//! Scenes come first (sorted by id), then tracks sorted by `(ped_id, frame)`.
//! Coordinates are written with a fixed number of decimals so that equal
//! datasets always serialize to identical bytes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{Pose2, Vec2};

pub const DEFAULT_DT: f64 = 0.4;
pub const DEFAULT_OBS_LEN: usize = 9;
pub const DEFAULT_PRED_LEN: usize = 12;
pub const DEFAULT_PRECISION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: i64,
    pub ped_id: i64,
    pub x: f64,
    pub y: f64,
}

impl TrackPoint {
    pub fn new(frame: i64, ped_id: i64, x: f64, y: f64) -> Self {
        TrackPoint { frame, ped_id, x, y }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Main trajectory category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MainType {
    Static,
    Linear,
    Interacting,
    NonInteracting,
}

impl MainType {
    pub fn code(self) -> u8 {
        match self {
            MainType::Static => 1,
            MainType::Linear => 2,
            MainType::Interacting => 3,
            MainType::NonInteracting => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MainType::Static,
            2 => MainType::Linear,
            3 => MainType::Interacting,
            4 => MainType::NonInteracting,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            MainType::Static => "I",
            MainType::Linear => "II",
            MainType::Interacting => "III",
            MainType::NonInteracting => "IV",
        }
    }
}

/// Interaction sub-category of a type III scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubTag {
    LeaderFollower,
    CollisionAvoidance,
    Group,
    Others,
}

impl SubTag {
    pub const ALL: [SubTag; 4] = [
        SubTag::LeaderFollower,
        SubTag::CollisionAvoidance,
        SubTag::Group,
        SubTag::Others,
    ];

    pub fn code(self) -> u8 {
        match self {
            SubTag::LeaderFollower => 1,
            SubTag::CollisionAvoidance => 2,
            SubTag::Group => 3,
            SubTag::Others => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SubTag::LeaderFollower,
            2 => SubTag::CollisionAvoidance,
            3 => SubTag::Group,
            4 => SubTag::Others,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            SubTag::LeaderFollower => "LF",
            SubTag::CollisionAvoidance => "CA",
            SubTag::Group => "Grp",
            SubTag::Others => "Others",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTags {
    pub main_type: MainType,
    pub subtags: BTreeSet<SubTag>,
}

impl CategoryTags {
    /// Builds tags, enforcing that sub-tags exist exactly for type III and
    /// that `Others` never co-occurs with a named interaction.
    pub fn new(main_type: MainType, subtags: BTreeSet<SubTag>) -> Result<Self> {
        if (main_type == MainType::Interacting) == subtags.is_empty() {
            return Err(Error::Validation(format!(
                "type {} with subtags {:?}",
                main_type.label(),
                subtags
            )));
        }
        if subtags.contains(&SubTag::Others) && subtags.len() > 1 {
            return Err(Error::Validation(
                "Others cannot be combined with LF, CA or Grp".into(),
            ));
        }
        Ok(CategoryTags { main_type, subtags })
    }

    pub fn simple(main_type: MainType) -> Self {
        CategoryTags {
            main_type,
            subtags: BTreeSet::new(),
        }
    }
}

/// Obs/pred split of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub obs_len: usize,
    pub pred_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            obs_len: DEFAULT_OBS_LEN,
            pred_len: DEFAULT_PRED_LEN,
        }
    }
}

impl WindowConfig {
    pub fn len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: i64,
    pub primary_ped: i64,
    pub start_frame: i64,
    pub end_frame: i64,
    pub frame_skip: i64,
    pub tags: Option<CategoryTags>,
}

impl SceneRecord {
    /// Sampled frames of the window, `start_frame` to `end_frame` inclusive.
    pub fn frames(&self) -> Vec<i64> {
        (self.start_frame..=self.end_frame)
            .step_by(self.frame_skip.max(1) as usize)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    tracks: BTreeMap<i64, Vec<TrackPoint>>,
    scenes: Vec<SceneRecord>,
    pub dt: f64,
    pub window: WindowConfig,
    pub manifest: Option<Value>,
    /// Lines of unknown record kind dropped while parsing.
    pub skipped_records: usize,
}

impl Dataset {
    /// Validates and normalizes a dataset: points are grouped by pedestrian
    /// and sorted by frame, scenes sorted by id.
    pub fn new(
        points: Vec<TrackPoint>,
        mut scenes: Vec<SceneRecord>,
        dt: f64,
        window: WindowConfig,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        let mut tracks: BTreeMap<i64, Vec<TrackPoint>> = BTreeMap::new();
        for p in points {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite coordinate for ped {} frame {}",
                    p.ped_id, p.frame
                )));
            }
            tracks.entry(p.ped_id).or_default().push(p);
        }
        for (ped, track) in tracks.iter_mut() {
            track.sort_by_key(|p| p.frame);
            if let Some(w) = track.windows(2).find(|w| w[0].frame == w[1].frame) {
                return Err(Error::Validation(format!(
                    "duplicate point for ped {ped} at frame {}",
                    w[0].frame
                )));
            }
        }
        scenes.sort_by_key(|s| s.scene_id);
        if let Some(w) = scenes.windows(2).find(|w| w[0].scene_id == w[1].scene_id) {
            return Err(Error::Validation(format!(
                "duplicate scene id {}",
                w[0].scene_id
            )));
        }
        let ds = Dataset {
            tracks,
            scenes,
            dt,
            window,
            manifest: None,
            skipped_records: 0,
        };
        for scene in &ds.scenes {
            ds.check_scene(scene)?;
        }
        Ok(ds)
    }

    pub fn empty() -> Self {
        Dataset {
            tracks: BTreeMap::new(),
            scenes: Vec::new(),
            dt: DEFAULT_DT,
            window: WindowConfig::default(),
            manifest: None,
            skipped_records: 0,
        }
    }

    fn check_scene(&self, scene: &SceneRecord) -> Result<()> {
        let span = self.window.len() as i64 - 1;
        if scene.frame_skip <= 0
            || scene.end_frame - scene.start_frame != span * scene.frame_skip
        {
            return Err(Error::Validation(format!(
                "scene {}: frames {}..{} do not span {} samples at skip {}",
                scene.scene_id,
                scene.start_frame,
                scene.end_frame,
                self.window.len(),
                scene.frame_skip
            )));
        }
        for f in scene.frames() {
            if self.point(scene.primary_ped, f).is_none() {
                return Err(Error::Validation(format!(
                    "scene {}: primary {} has no point at frame {f}",
                    scene.scene_id, scene.primary_ped
                )));
            }
        }
        Ok(())
    }

    pub fn scenes(&self) -> &[SceneRecord] {
        &self.scenes
    }

    pub fn scene(&self, scene_id: i64) -> Option<&SceneRecord> {
        self.scenes
            .binary_search_by_key(&scene_id, |s| s.scene_id)
            .ok()
            .map(|i| &self.scenes[i])
    }

    pub fn tracks(&self) -> &BTreeMap<i64, Vec<TrackPoint>> {
        &self.tracks
    }

    pub fn points(&self) -> impl Iterator<Item = &TrackPoint> {
        self.tracks.values().flatten()
    }

    pub fn num_points(&self) -> usize {
        self.tracks.values().map(Vec::len).sum()
    }

    pub fn point(&self, ped_id: i64, frame: i64) -> Option<&TrackPoint> {
        let track = self.tracks.get(&ped_id)?;
        track
            .binary_search_by_key(&frame, |p| p.frame)
            .ok()
            .map(|i| &track[i])
    }

    /// Replaces the tags of every scene via `f`. Other fields are untouched.
    pub fn retag<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(&SceneRecord) -> Result<Option<CategoryTags>>,
    {
        for i in 0..self.scenes.len() {
            let tags = f(&self.scenes[i])?;
            self.scenes[i].tags = tags;
        }
        Ok(())
    }

    /// Keeps only the scenes for which `keep` holds. Tracks are retained.
    pub fn retain_scenes<F: FnMut(&SceneRecord) -> bool>(&mut self, keep: F) {
        self.scenes.retain(keep);
    }

    /// Builds the window view of `scene`.
    pub fn scene_window(&self, scene: &SceneRecord) -> Result<SceneWindow> {
        let frames = scene.frames();
        if frames.len() != self.window.len() {
            return Err(Error::Validation(format!(
                "scene {} spans {} samples, expected {}",
                scene.scene_id,
                frames.len(),
                self.window.len()
            )));
        }
        let primary = frames
            .iter()
            .map(|&f| {
                self.point(scene.primary_ped, f).copied().ok_or_else(|| {
                    Error::Validation(format!(
                        "scene {}: primary {} missing at frame {f}",
                        scene.scene_id, scene.primary_ped
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut neighbours = BTreeMap::new();
        for &ped in self.tracks.keys() {
            if ped == scene.primary_ped {
                continue;
            }
            let entries: Vec<Option<TrackPoint>> =
                frames.iter().map(|&f| self.point(ped, f).copied()).collect();
            if entries.iter().any(Option::is_some) {
                neighbours.insert(ped, entries);
            }
        }
        Ok(SceneWindow {
            scene_id: scene.scene_id,
            dt: self.dt,
            obs_len: self.window.obs_len,
            pred_len: self.window.pred_len,
            frames,
            primary_id: scene.primary_ped,
            primary,
            neighbours,
        })
    }
}

/// Start offsets of all windows of `window_len` samples that fit in a
/// sequence of `n_frames` samples, taken every `stride` samples.
pub fn window_starts(n_frames: usize, window_len: usize, stride: usize) -> Vec<usize> {
    if window_len == 0 || n_frames < window_len {
        return Vec::new();
    }
    (0..=n_frames - window_len).step_by(stride.max(1)).collect()
}

/// A primary pedestrian together with every co-present neighbour, aligned on
/// the sampled frames of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneWindow {
    pub scene_id: i64,
    pub dt: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub frames: Vec<i64>,
    pub primary_id: i64,
    pub primary: Vec<TrackPoint>,
    /// `None` marks a frame where the neighbour is absent.
    pub neighbours: BTreeMap<i64, Vec<Option<TrackPoint>>>,
}

impl SceneWindow {
    pub fn len(&self) -> usize {
        self.obs_len + self.pred_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.primary.len() != n || self.frames.len() != n {
            return Err(Error::Validation(format!(
                "scene {}: primary has {} entries, expected {n}",
                self.scene_id,
                self.primary.len()
            )));
        }
        for (ped, track) in &self.neighbours {
            if track.len() != n {
                return Err(Error::Validation(format!(
                    "scene {}: neighbour {ped} has {} entries, expected {n}",
                    self.scene_id,
                    track.len()
                )));
            }
        }
        Ok(())
    }

    /// Splits into an observation window (`pred_len = 0`) and a prediction
    /// window (`obs_len = 0`).
    pub fn split(&self) -> (SceneWindow, SceneWindow) {
        let k = self.obs_len;
        let part = |range: std::ops::Range<usize>, obs_len, pred_len| SceneWindow {
            scene_id: self.scene_id,
            dt: self.dt,
            obs_len,
            pred_len,
            frames: self.frames[range.clone()].to_vec(),
            primary_id: self.primary_id,
            primary: self.primary[range.clone()].to_vec(),
            neighbours: self
                .neighbours
                .iter()
                .map(|(&id, t)| (id, t[range.clone()].to_vec()))
                .collect(),
        };
        (
            part(0..k, self.obs_len, 0),
            part(k..self.len(), 0, self.pred_len),
        )
    }

    /// Inverse of [`SceneWindow::split`].
    pub fn concat(obs: &SceneWindow, pred: &SceneWindow) -> Result<SceneWindow> {
        if obs.scene_id != pred.scene_id || obs.primary_id != pred.primary_id {
            return Err(Error::Validation("windows belong to different scenes".into()));
        }
        let keys: BTreeSet<_> = obs.neighbours.keys().chain(pred.neighbours.keys()).collect();
        let mut neighbours = BTreeMap::new();
        for &id in keys {
            let mut track = obs
                .neighbours
                .get(&id)
                .cloned()
                .unwrap_or_else(|| vec![None; obs.len()]);
            track.extend(
                pred.neighbours
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| vec![None; pred.len()]),
            );
            neighbours.insert(id, track);
        }
        let mut frames = obs.frames.clone();
        frames.extend_from_slice(&pred.frames);
        let mut primary = obs.primary.clone();
        primary.extend_from_slice(&pred.primary);
        let w = SceneWindow {
            scene_id: obs.scene_id,
            dt: obs.dt,
            obs_len: obs.len(),
            pred_len: pred.len(),
            frames,
            primary_id: obs.primary_id,
            primary,
            neighbours,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn primary_positions(&self) -> Vec<Vec2> {
        self.primary.iter().map(TrackPoint::position).collect()
    }

    pub fn primary_observed(&self) -> Vec<Vec2> {
        self.primary[..self.obs_len].iter().map(TrackPoint::position).collect()
    }

    pub fn primary_future(&self) -> Vec<Vec2> {
        self.primary[self.obs_len..].iter().map(TrackPoint::position).collect()
    }

    pub fn neighbour_positions(&self, ped: i64) -> Option<Vec<Option<Vec2>>> {
        self.neighbours
            .get(&ped)
            .map(|t| t.iter().map(|p| p.map(|p| p.position())).collect())
    }

    /// Positions of any pedestrian in the window, primary included.
    pub fn positions_of(&self, ped: i64) -> Option<Vec<Option<Vec2>>> {
        if ped == self.primary_id {
            Some(self.primary.iter().map(|p| Some(p.position())).collect())
        } else {
            self.neighbour_positions(ped)
        }
    }

    /// Primary poses with finite-difference velocities.
    pub fn primary_poses(&self) -> Vec<Pose2> {
        let pos = self.primary_positions();
        let vel = finite_difference_velocities(&pos, self.dt);
        pos.into_iter().zip(vel).map(|(p, v)| Pose2::new(p, v)).collect()
    }

    /// Neighbour poses per frame; `None` where the neighbour is absent or its
    /// velocity cannot be formed.
    pub fn neighbour_poses(&self, ped: i64) -> Option<Vec<Option<Pose2>>> {
        let pos = self.neighbour_positions(ped)?;
        let vel = gapped_velocities(&pos, self.dt);
        Some(
            pos.into_iter()
                .zip(vel)
                .map(|(p, v)| Some(Pose2::new(p?, v?)))
                .collect(),
        )
    }

    /// Every pedestrian present at the last observed frame, primary first.
    /// Requires `obs_len >= 1`.
    pub fn pedestrians_at_observation_end(&self) -> Vec<i64> {
        let last = self.obs_len.saturating_sub(1);
        let mut ids = vec![self.primary_id];
        ids.extend(
            self.neighbours
                .iter()
                .filter(|(_, t)| t.get(last).is_some_and(Option::is_some))
                .map(|(&id, _)| id),
        );
        ids
    }

    /// The trailing run of consecutive observed positions of `ped` that ends
    /// at the last observed frame. Empty if absent there.
    pub fn observed_run(&self, ped: i64) -> Vec<Vec2> {
        let Some(track) = self.positions_of(ped) else {
            return Vec::new();
        };
        let mut run: Vec<Vec2> = track[..self.obs_len]
            .iter()
            .rev()
            .map_while(|p| *p)
            .collect();
        run.reverse();
        run
    }
}

/// `v_t = (x_t - x_{t-1}) / dt`, with the first velocity copied from the
/// second. A single point gets zero velocity.
pub fn finite_difference_velocities(positions: &[Vec2], dt: f64) -> Vec<Vec2> {
    match positions.len() {
        0 => Vec::new(),
        1 => vec![Vec2::ZERO],
        _ => {
            let mut v: Vec<Vec2> = positions.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
            v.insert(0, v[0]);
            v
        }
    }
}

/// Finite differences over a track with gaps. A present frame uses the
/// backward difference when the previous frame is present, otherwise the
/// forward difference; isolated points get `None`.
pub fn gapped_velocities(positions: &[Option<Vec2>], dt: f64) -> Vec<Option<Vec2>> {
    (0..positions.len())
        .map(|i| {
            let here = positions[i]?;
            let back = i.checked_sub(1).and_then(|j| positions[j]);
            let ahead = positions.get(i + 1).copied().flatten();
            match (back, ahead) {
                (Some(b), _) => Some((here - b) / dt),
                (None, Some(a)) => Some((a - here) / dt),
                (None, None) => None,
            }
        })
        .collect()
}

#[derive(Deserialize)]
struct TrackLine {
    f: i64,
    p: i64,
    x: f64,
    y: f64,
}

#[derive(Deserialize)]
struct SceneLine {
    id: i64,
    p: i64,
    s: i64,
    e: i64,
    fps: f64,
    #[serde(default)]
    tag: Option<(u8, Vec<u8>)>,
}

/// Reads a dataset with the default 9 + 12 window.
pub fn parse_ndjson<R: BufRead>(reader: R) -> Result<Dataset> {
    parse_ndjson_with(reader, WindowConfig::default())
}

pub fn parse_ndjson_with<R: BufRead>(reader: R, window: WindowConfig) -> Result<Dataset> {
    let mut points = Vec::new();
    let mut scenes = Vec::new();
    let mut fps: Option<f64> = None;
    let mut manifest = None;
    let mut skipped = 0;
    let mut seen = HashSet::new();
    let span = window.len() as i64 - 1;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(parse_err("record is not a JSON object".into()));
        };
        if map.len() != 1 {
            return Err(parse_err(format!("expected one record key, found {}", map.len())));
        }
        let (kind, body) = map.into_iter().next().expect("one key");
        match kind.as_str() {
            "track" => {
                let t: TrackLine =
                    serde_json::from_value(body).map_err(|e| parse_err(e.to_string()))?;
                if !seen.insert((t.f, t.p)) {
                    return Err(Error::Validation(format!(
                        "line {line_no}: duplicate point for ped {} at frame {}",
                        t.p, t.f
                    )));
                }
                points.push(TrackPoint::new(t.f, t.p, t.x, t.y));
            }
            "scene" => {
                let s: SceneLine =
                    serde_json::from_value(body).map_err(|e| parse_err(e.to_string()))?;
                match fps {
                    None => fps = Some(s.fps),
                    Some(f) if f != s.fps => {
                        return Err(Error::Validation(format!(
                            "line {line_no}: fps {} differs from {f}",
                            s.fps
                        )))
                    }
                    _ => {}
                }
                let length = s.e - s.s;
                if span <= 0 || length <= 0 || length % span != 0 {
                    return Err(Error::Validation(format!(
                        "line {line_no}: scene {} frames {}..{} do not split into {} samples",
                        s.id,
                        s.s,
                        s.e,
                        window.len()
                    )));
                }
                let tags = match s.tag {
                    None => None,
                    Some((main, subs)) => {
                        let main = MainType::from_code(main)
                            .ok_or_else(|| parse_err(format!("unknown type code {main}")))?;
                        let subs = subs
                            .into_iter()
                            .map(|c| {
                                SubTag::from_code(c)
                                    .ok_or_else(|| parse_err(format!("unknown subtag code {c}")))
                            })
                            .collect::<Result<BTreeSet<_>>>()?;
                        Some(
                            CategoryTags::new(main, subs)
                                .map_err(|e| parse_err(e.to_string()))?,
                        )
                    }
                };
                scenes.push(SceneRecord {
                    scene_id: s.id,
                    primary_ped: s.p,
                    start_frame: s.s,
                    end_frame: s.e,
                    frame_skip: length / span,
                    tags,
                });
            }
            "manifest" => manifest = Some(body),
            other => {
                log::warn!("line {line_no}: skipping record of unknown kind `{other}`");
                skipped += 1;
            }
        }
    }
    let dt = match fps {
        Some(f) if f > 0.0 && f.is_finite() => 1.0 / f,
        Some(f) => return Err(Error::Validation(format!("fps must be positive, got {f}"))),
        None => DEFAULT_DT,
    };
    let mut ds = Dataset::new(points, scenes, dt, window)?;
    ds.manifest = manifest;
    ds.skipped_records = skipped;
    Ok(ds)
}

/// Fixed-decimal formatting; negative zero is printed without its sign.
pub fn format_coord(value: f64, precision: usize) -> String {
    let s = format!("{value:.precision$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

pub fn write_ndjson<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    write_ndjson_with(dataset, out, DEFAULT_PRECISION)
}

pub fn write_ndjson_with<W: Write>(dataset: &Dataset, out: &mut W, precision: usize) -> Result<()> {
    let mut line = String::new();
    if let Some(m) = &dataset.manifest {
        writeln!(out, "{{\"manifest\": {}}}", serde_json::to_string(m)?)?;
    }
    let fps = 1.0 / dataset.dt;
    for s in &dataset.scenes {
        line.clear();
        write!(
            line,
            "{{\"scene\": {{\"id\": {}, \"p\": {}, \"s\": {}, \"e\": {}, \"fps\": {}",
            s.scene_id, s.primary_ped, s.start_frame, s.end_frame, fps
        )
        .expect("write to String");
        if let Some(tags) = &s.tags {
            let subs: Vec<String> = tags.subtags.iter().map(|t| t.code().to_string()).collect();
            write!(line, ", \"tag\": [{}, [{}]]", tags.main_type.code(), subs.join(", "))
                .expect("write to String");
        }
        line.push_str("}}");
        writeln!(out, "{line}")?;
    }
    for p in dataset.points() {
        writeln!(
            out,
            "{{\"track\": {{\"f\": {}, \"p\": {}, \"x\": {}, \"y\": {}}}}}",
            p.frame,
            p.ped_id,
            format_coord(p.x, precision),
            format_coord(p.y, precision)
        )?;
    }
    Ok(())
}

pub fn to_ndjson_string(dataset: &Dataset) -> String {
    let mut buf = Vec::new();
    write_ndjson(dataset, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_track(ped: i64, frames: std::ops::RangeInclusive<i64>, y: f64) -> Vec<TrackPoint> {
        frames.map(|f| TrackPoint::new(f, ped, f as f64 * 0.5, y)).collect()
    }

    #[test]
    fn parses_minimal_tracks() {
        let text = "{\"track\": {\"f\": 0, \"p\": 1, \"x\": 0.0, \"y\": 1.0}}\n\
                    {\"track\": {\"f\": 10, \"p\": 1, \"x\": 0.5, \"y\": 1.0}}\n";
        let ds = parse_ndjson(text.as_bytes()).unwrap();
        assert_eq!(ds.num_points(), 2);
        assert!(ds.scenes().is_empty());
        assert_eq!(ds.dt, DEFAULT_DT);
    }

    #[test]
    fn reports_line_number_on_malformed_input() {
        let text = "{\"track\": {\"f\": 0, \"p\": 1, \"x\": 0.0, \"y\": 1.0}}\n{\"track\": {\"f\": 1,\n";
        match parse_ndjson(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_points() {
        let text = "{\"track\": {\"f\": 0, \"p\": 1, \"x\": 0.0, \"y\": 1.0}}\n\
                    {\"track\": {\"f\": 0, \"p\": 1, \"x\": 2.0, \"y\": 1.0}}\n";
        assert!(matches!(parse_ndjson(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_scene_with_incomplete_primary() {
        let mut text = String::from(
            "{\"scene\": {\"id\": 0, \"p\": 1, \"s\": 0, \"e\": 20, \"fps\": 2.5}}\n",
        );
        for f in (0..=20).filter(|&f| f != 7) {
            text.push_str(&format!(
                "{{\"track\": {{\"f\": {f}, \"p\": 1, \"x\": 0.0, \"y\": 0.0}}}}\n"
            ));
        }
        assert!(matches!(parse_ndjson(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn skips_unknown_kinds() {
        let text = "{\"weather\": {\"sun\": true}}\n{\"track\": {\"f\": 0, \"p\": 1, \"x\": 0.0, \"y\": 1.0}}\n";
        let ds = parse_ndjson(text.as_bytes()).unwrap();
        assert_eq!(ds.skipped_records, 1);
        assert_eq!(ds.num_points(), 1);
    }

    #[test]
    fn empty_dataset_writes_nothing() {
        assert_eq!(to_ndjson_string(&Dataset::empty()), "");
    }

    #[test]
    fn coordinates_are_fixed_precision() {
        assert_eq!(format_coord(1.234999, 2), "1.23");
        assert_eq!(format_coord(4.0, 2), "4.00");
        assert_eq!(format_coord(-0.001, 2), "0.00");
        assert_eq!(format_coord(-0.5, 2), "-0.50");
    }

    #[test]
    fn writes_scenes_then_sorted_tracks() {
        let mut pts = line_track(2, 0..=1, 0.0);
        pts.extend(line_track(1, 0..=1, 1.0));
        let ds = Dataset::new(pts, Vec::new(), 0.4, WindowConfig::default()).unwrap();
        let text = to_ndjson_string(&ds);
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "{\"track\": {\"f\": 0, \"p\": 1, \"x\": 0.00, \"y\": 1.00}}");
        assert_eq!(lines[3], "{\"track\": {\"f\": 1, \"p\": 2, \"x\": 0.50, \"y\": 0.00}}");
        assert_eq!(text, to_ndjson_string(&ds));
    }

    #[test]
    fn window_with_partial_neighbour() {
        let mut pts = line_track(1, 0..=20, 0.0);
        pts.extend(line_track(2, 5..=20, 1.0));
        let scene = SceneRecord {
            scene_id: 0,
            primary_ped: 1,
            start_frame: 0,
            end_frame: 20,
            frame_skip: 1,
            tags: None,
        };
        let ds = Dataset::new(pts, vec![scene.clone()], 0.4, WindowConfig::default()).unwrap();
        let w = ds.scene_window(&scene).unwrap();
        let n = &w.neighbours[&2];
        assert_eq!(n.len(), 21);
        assert_eq!(n.iter().take_while(|p| p.is_none()).count(), 5);
        assert!(n[5..].iter().all(Option::is_some));
    }

    #[test]
    fn lone_primary_has_no_neighbours() {
        let pts = line_track(1, 0..=20, 0.0);
        let scene = SceneRecord {
            scene_id: 3,
            primary_ped: 1,
            start_frame: 0,
            end_frame: 20,
            frame_skip: 1,
            tags: None,
        };
        let ds = Dataset::new(pts, vec![scene.clone()], 0.4, WindowConfig::default()).unwrap();
        assert!(ds.scene_window(&scene).unwrap().neighbours.is_empty());
    }

    #[test]
    fn counts_windows() {
        assert_eq!(window_starts(25, 21, 1).len(), 5);
        assert_eq!(window_starts(20, 21, 1).len(), 0);
        assert_eq!(window_starts(100, 21, 3).len(), (100 - 21) / 3 + 1);
    }

    #[test]
    fn split_defaults_and_identity() {
        let mut pts = line_track(1, 0..=20, 0.0);
        pts.extend(line_track(2, 3..=12, 1.0));
        let scene = SceneRecord {
            scene_id: 0,
            primary_ped: 1,
            start_frame: 0,
            end_frame: 20,
            frame_skip: 1,
            tags: None,
        };
        let ds = Dataset::new(pts, vec![scene.clone()], 0.4, WindowConfig::default()).unwrap();
        let w = ds.scene_window(&scene).unwrap();
        let (obs, pred) = w.split();
        assert_eq!(obs.primary.len(), 9);
        assert_eq!(pred.primary.len(), 12);
        assert_eq!(obs.neighbours[&2].len(), 9);
        assert_eq!(SceneWindow::concat(&obs, &pred).unwrap(), w);

        let window = WindowConfig { obs_len: 1, pred_len: 20 };
        let pts = line_track(1, 0..=20, 0.0);
        let ds = Dataset::new(pts, vec![scene.clone()], 0.4, window).unwrap();
        let (obs, pred) = ds.scene_window(&scene).unwrap().split();
        assert_eq!(obs.primary, vec![TrackPoint::new(0, 1, 0.0, 0.0)]);
        assert_eq!(pred.primary.len(), 20);
    }

    #[test]
    fn velocities_copy_first_from_second() {
        let p = [Vec2::new(0.0, 0.0), Vec2::new(0.4, 0.0), Vec2::new(1.2, 0.0)];
        let v = finite_difference_velocities(&p, 0.4);
        assert_eq!(v[0], v[1]);
        assert!((v[1].x - 1.0).abs() < 1e-12);
        assert!((v[2].x - 2.0).abs() < 1e-12);
        let g = gapped_velocities(&[None, Some(Vec2::ZERO), Some(Vec2::new(0.4, 0.0)), None, Some(Vec2::ZERO)], 0.4);
        assert_eq!(g[0], None);
        assert!((g[1].unwrap().x - 1.0).abs() < 1e-12);
        assert!((g[2].unwrap().x - 1.0).abs() < 1e-12);
        assert_eq!(g[4], None);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let track = (1i64..6, 0i64..5, prop::collection::vec((-2000i64..2000, -2000i64..2000), 21..30));
        prop::collection::vec(track, 1..5).prop_map(|tracks| {
            let mut points = Vec::new();
            let mut scenes = Vec::new();
            let mut seen = HashSet::new();
            for (i, (ped, offset, coords)) in tracks.into_iter().enumerate() {
                if !seen.insert(ped) {
                    continue;
                }
                for (k, (x, y)) in coords.iter().enumerate() {
                    points.push(TrackPoint::new(
                        offset + k as i64,
                        ped,
                        *x as f64 / 100.0,
                        *y as f64 / 100.0,
                    ));
                }
                let tags = if i % 2 == 0 {
                    Some(CategoryTags::new(MainType::Interacting, [SubTag::Group].into()).unwrap())
                } else {
                    Some(CategoryTags::simple(MainType::Linear))
                };
                scenes.push(SceneRecord {
                    scene_id: i as i64,
                    primary_ped: ped,
                    start_frame: offset,
                    end_frame: offset + 20,
                    frame_skip: 1,
                    tags,
                });
            }
            Dataset::new(points, scenes, DEFAULT_DT, WindowConfig::default()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_write(ds in arb_dataset()) {
            let text = to_ndjson_string(&ds);
            let back = parse_ndjson(text.as_bytes()).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(to_ndjson_string(&back), text);
        }
    }
}
