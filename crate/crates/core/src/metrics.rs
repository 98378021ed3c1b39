//! Scoring of forecasts: displacement errors, prediction and ground-truth
//! collisions, best-of-k errors and KDE negative log-likelihood, with
//! per-category aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryTags, MainType, SceneWindow, SubTag};
use crate::error::{Error, Result};
use crate::geometry::{segment_min_distance, Vec2};

/// One predicted future of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub primary: Vec<Vec2>,
    /// Predicted futures of the neighbours, when the model forecasts them.
    pub neighbours: Option<BTreeMap<i64, Vec<Vec2>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scene_id: i64,
    /// Mode 0 is the unimodal output.
    pub modes: Vec<Mode>,
}

impl PredictionSet {
    pub fn unimodal(scene_id: i64, primary: Vec<Vec2>) -> Self {
        PredictionSet {
            scene_id,
            modes: vec![Mode {
                primary,
                neighbours: None,
            }],
        }
    }

    pub fn validate(&self, pred_len: usize) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Validation(format!("scene {}: no modes", self.scene_id)));
        }
        for (m, mode) in self.modes.iter().enumerate() {
            let bad = mode.primary.len() != pred_len
                || mode
                    .neighbours
                    .iter()
                    .flat_map(|n| n.values())
                    .any(|t| t.len() != pred_len);
            if bad {
                return Err(Error::Validation(format!(
                    "scene {} mode {m}: tracks must have {pred_len} points",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CollisionMode {
    /// Closed-form minimum distance between linearly interpolated segments.
    Exact,
    /// Dense sampling with this many subdivisions per frame interval.
    Sampled(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollisionConfig {
    pub threshold: f64,
    pub mode: CollisionMode,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        CollisionConfig {
            threshold: 0.1,
            mode: CollisionMode::Exact,
        }
    }
}

pub fn displacement_errors(pred: &[Vec2], gt: &[Vec2]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let dists: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.distance(*g)).collect();
    let ade = dists.iter().sum::<f64>() / dists.len() as f64;
    Ok((ade, *dists.last().expect("non-empty")))
}

/// True when the two tracks, linearly interpolated between frames, come
/// closer than the threshold. Frames where either track is absent are
/// skipped, as are intervals touching them.
pub fn scene_collides(a: &[Option<Vec2>], b: &[Option<Vec2>], dt: f64, config: &CollisionConfig) -> bool {
    let n = a.len().min(b.len());
    let th = config.threshold;
    for i in 0..n {
        let (Some(a0), Some(b0)) = (a[i], b[i]) else {
            continue;
        };
        if a0.distance(b0) < th {
            return true;
        }
        let (Some(a1), Some(b1)) = (
            a.get(i + 1).copied().flatten(),
            b.get(i + 1).copied().flatten(),
        ) else {
            continue;
        };
        let hit = match config.mode {
            CollisionMode::Exact => {
                segment_min_distance(a0, (a1 - a0) / dt, b0, (b1 - b0) / dt, dt) < th
            }
            CollisionMode::Sampled(steps) => {
                let steps = steps.max(1);
                (0..=steps).any(|s| {
                    let t = s as f64 / steps as f64;
                    let pa = a0 + (a1 - a0) * t;
                    let pb = b0 + (b1 - b0) * t;
                    pa.distance(pb) < th
                })
            }
        };
        if hit {
            return true;
        }
    }
    false
}

fn present(track: &[Vec2]) -> Vec<Option<Vec2>> {
    track.iter().copied().map(Some).collect()
}

/// Prediction collision of mode 0: the predicted primary against the
/// predicted neighbours. `Ok(None)` when no neighbour was predicted.
pub fn col_i(set: &PredictionSet, dt: f64, config: &CollisionConfig) -> Result<Option<bool>> {
    let mode = set
        .modes
        .first()
        .ok_or_else(|| Error::Validation(format!("scene {}: no modes", set.scene_id)))?;
    let neighbours = mode
        .neighbours
        .as_ref()
        .ok_or(Error::MissingNeighbourPredictions(set.scene_id))?;
    if neighbours.is_empty() {
        return Ok(None);
    }
    let primary = present(&mode.primary);
    Ok(Some(
        neighbours
            .values()
            .any(|t| scene_collides(&primary, &present(t), dt, config)),
    ))
}

/// Ground-truth collision of mode 0: the predicted primary against the
/// neighbours' true futures. `None` when no neighbour is present during the
/// prediction horizon.
pub fn col_ii(set: &PredictionSet, window: &SceneWindow, config: &CollisionConfig) -> Option<bool> {
    let mode = set.modes.first()?;
    let primary = present(&mode.primary);
    let (_, future) = window.split();
    let mut any_present = false;
    let mut hit = false;
    for track in future.neighbours.values() {
        let gt: Vec<Option<Vec2>> = track.iter().map(|p| p.map(|p| p.position())).collect();
        if gt.iter().all(Option::is_none) {
            continue;
        }
        any_present = true;
        hit |= scene_collides(&primary, &gt, window.dt, config);
    }
    any_present.then_some(hit)
}

/// Best-of-k ADE and FDE, each minimized independently over the modes.
pub fn topk_displacement(set: &PredictionSet, gt: &[Vec2]) -> Result<(f64, f64)> {
    if set.modes.is_empty() {
        return Err(Error::Validation(format!("scene {}: no modes", set.scene_id)));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for mode in &set.modes {
        let (ade, fde) = displacement_errors(&mode.primary, gt)?;
        best.0 = best.0.min(ade);
        best.1 = best.1.min(fde);
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Same isotropic bandwidth at every step (m).
    Fixed(f64),
    /// Per-axis Scott's rule, `sigma * k^(-1/6)`, floored at `floor` meters.
    Scott { floor: f64 },
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Scott { floor: 0.05 }
    }
}

pub const DENSITY_FLOOR: f64 = 1e-12;

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

/// Gaussian product-kernel density at `x` from `samples`.
pub fn kde_density(samples: &[Vec2], x: Vec2, bandwidth: Bandwidth) -> f64 {
    let k = samples.len();
    if k == 0 {
        return 0.0;
    }
    let (hx, hy) = match bandwidth {
        Bandwidth::Fixed(h) => (h, h),
        Bandwidth::Scott { floor } => {
            let factor = (k as f64).powf(-1.0 / 6.0);
            let xs: Vec<f64> = samples.iter().map(|s| s.x).collect();
            let ys: Vec<f64> = samples.iter().map(|s| s.y).collect();
            (
                (sample_std(&xs) * factor).max(floor),
                (sample_std(&ys) * factor).max(floor),
            )
        }
    };
    let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy);
    samples
        .iter()
        .map(|s| {
            let dx = (x.x - s.x) / hx;
            let dy = (x.y - s.y) / hy;
            norm * (-0.5 * (dx * dx + dy * dy)).exp()
        })
        .sum::<f64>()
        / k as f64
}

/// Mean over prediction steps of the negative log KDE density of the ground
/// truth, with the density floored at [`DENSITY_FLOOR`].
pub fn avg_nll(set: &PredictionSet, gt: &[Vec2], bandwidth: Bandwidth) -> Result<f64> {
    if set.modes.is_empty() {
        return Err(Error::Validation(format!("scene {}: no modes", set.scene_id)));
    }
    for mode in &set.modes {
        if mode.primary.len() != gt.len() {
            return Err(Error::LengthMismatch {
                left: mode.primary.len(),
                right: gt.len(),
            });
        }
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = (0..gt.len())
        .map(|t| {
            let samples: Vec<Vec2> = set.modes.iter().map(|m| m.primary[t]).collect();
            -kde_density(&samples, gt[t], bandwidth).max(DENSITY_FLOOR).ln()
        })
        .sum();
    Ok(total / gt.len() as f64)
}

/// All metrics of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: i64,
    pub tags: Option<CategoryTags>,
    pub ade: f64,
    pub fde: f64,
    pub col_i: Option<bool>,
    pub col_ii: Option<bool>,
    pub topk_ade: f64,
    pub topk_fde: f64,
    pub nll: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub collision: CollisionConfig,
    pub bandwidth: Bandwidth,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            collision: CollisionConfig::default(),
            bandwidth: Bandwidth::default(),
        }
    }
}

/// Scores one prediction set against its window. Col-I is left out when the
/// model did not forecast neighbours; NLL needs at least two modes.
pub fn score_scene(
    window: &SceneWindow,
    set: &PredictionSet,
    tags: Option<CategoryTags>,
    config: &ScoreConfig,
) -> Result<SceneScore> {
    let gt = window.primary_future();
    set.validate(gt.len())?;
    let (ade, fde) = displacement_errors(&set.modes[0].primary, &gt)?;
    let (topk_ade, topk_fde) = topk_displacement(set, &gt)?;
    let col_i = match set.modes[0].neighbours {
        Some(_) => col_i(set, window.dt, &config.collision)?,
        None => None,
    };
    let nll = if set.modes.len() >= 2 {
        Some(avg_nll(set, &gt, config.bandwidth)?)
    } else {
        None
    };
    Ok(SceneScore {
        scene_id: set.scene_id,
        tags,
        ade,
        fde,
        col_i,
        col_ii: col_ii(set, window, &config.collision),
        topk_ade,
        topk_fde,
        nll,
    })
}

/// Running sums for one report row; merging is associative and commutative.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accumulator {
    pub n: usize,
    pub ade: f64,
    pub fde: f64,
    pub topk_ade: f64,
    pub topk_fde: f64,
    pub nll: f64,
    pub nll_n: usize,
    pub col_i_hits: usize,
    pub col_i_n: usize,
    pub col_ii_hits: usize,
    pub col_ii_n: usize,
}

impl Accumulator {
    pub fn add(&mut self, s: &SceneScore) {
        self.n += 1;
        self.ade += s.ade;
        self.fde += s.fde;
        self.topk_ade += s.topk_ade;
        self.topk_fde += s.topk_fde;
        if let Some(nll) = s.nll {
            self.nll += nll;
            self.nll_n += 1;
        }
        if let Some(c) = s.col_i {
            self.col_i_n += 1;
            self.col_i_hits += c as usize;
        }
        if let Some(c) = s.col_ii {
            self.col_ii_n += 1;
            self.col_ii_hits += c as usize;
        }
    }

    pub fn merge(&mut self, o: &Accumulator) {
        self.n += o.n;
        self.ade += o.ade;
        self.fde += o.fde;
        self.topk_ade += o.topk_ade;
        self.topk_fde += o.topk_fde;
        self.nll += o.nll;
        self.nll_n += o.nll_n;
        self.col_i_hits += o.col_i_hits;
        self.col_i_n += o.col_i_n;
        self.col_ii_hits += o.col_ii_hits;
        self.col_ii_n += o.col_ii_n;
    }

    fn row(&self, group: String) -> ReportRow {
        let mean = |v: f64| if self.n == 0 { f64::NAN } else { v / self.n as f64 };
        let pct = |hits: usize, n: usize| (n > 0).then(|| 100.0 * hits as f64 / n as f64);
        ReportRow {
            group,
            n: self.n,
            ade: mean(self.ade),
            fde: mean(self.fde),
            col_i: pct(self.col_i_hits, self.col_i_n),
            col_i_n: self.col_i_n,
            col_ii: pct(self.col_ii_hits, self.col_ii_n),
            col_ii_n: self.col_ii_n,
            topk_ade: mean(self.topk_ade),
            topk_fde: mean(self.topk_fde),
            nll: (self.nll_n > 0).then(|| self.nll / self.nll_n as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub n: usize,
    pub ade: f64,
    pub fde: f64,
    /// Percentage of eligible scenes.
    pub col_i: Option<f64>,
    pub col_i_n: usize,
    pub col_ii: Option<f64>,
    pub col_ii_n: usize,
    pub topk_ade: f64,
    pub topk_fde: f64,
    pub nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub rows: Vec<ReportRow>,
}

/// Overall row, then one row per main type present and one per sub-tag
/// present.
pub fn aggregate_report(model: &str, scores: &[SceneScore]) -> Report {
    let mut overall = Accumulator::default();
    let mut by_type: BTreeMap<Option<MainType>, Accumulator> = BTreeMap::new();
    let mut by_sub: BTreeMap<SubTag, Accumulator> = BTreeMap::new();
    for s in scores {
        overall.add(s);
        by_type
            .entry(s.tags.as_ref().map(|t| t.main_type))
            .or_default()
            .add(s);
        for sub in s.tags.iter().flat_map(|t| t.subtags.iter()) {
            by_sub.entry(*sub).or_default().add(s);
        }
    }
    let mut rows = vec![overall.row("overall".into())];
    for (ty, acc) in &by_type {
        let label = match ty {
            Some(t) => format!("type {}", t.label()),
            None => "untagged".into(),
        };
        rows.push(acc.row(label));
    }
    for (sub, acc) in &by_sub {
        rows.push(acc.row(format!("III {}", sub.label())));
    }
    Report {
        model: model.to_string(),
        rows,
    }
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{v:.decimals$}"),
        None => "-".into(),
    }
}

pub const REPORT_COLUMNS: [&str; 10] = [
    "model", "group", "N", "ADE", "FDE", "Col-I%", "Col-II%", "Top-k ADE", "Top-k FDE", "NLL",
];

impl Report {
    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    self.model.clone(),
                    r.group.clone(),
                    r.n.to_string(),
                    format!("{:.3}", r.ade),
                    format!("{:.3}", r.fde),
                    opt(r.col_i, 1),
                    opt(r.col_ii, 1),
                    format!("{:.3}", r.topk_ade),
                    format!("{:.3}", r.topk_fde),
                    opt(r.nll, 3),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].len())
                    .chain([REPORT_COLUMNS[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).expect("write to String");
        };
        line(&mut out, &REPORT_COLUMNS);
        let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        writeln!(out, "{}", "-".repeat(total)).expect("write to String");
        for row in &cells {
            let refs: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut out, &refs);
        }
        out
    }
}
