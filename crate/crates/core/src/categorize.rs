//! Trajectory categorization: static, linear, interacting (with subtags) or
//! non-interacting.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryTags, Dataset, MainType, SceneWindow, SubTag};
use crate::error::Result;
use crate::forecast::{kalman_forecast, KalmanConfig};
use crate::geometry::{bearing, signed_angle, Pose2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryThresholds {
    /// Path length below which the primary counts as static (m).
    pub static_dist: f64,
    /// Kalman FDE below which the primary counts as linear (m).
    pub linear_fde: f64,
    /// Half-width of every angular test (degrees).
    pub cone_half_angle: f64,
    /// Minimum sustained leader-follower time (s).
    pub lf_duration: f64,
    pub ca_opposite_center: f64,
    pub grp_bearing_center: f64,
    pub grp_mean_dist: f64,
    pub grp_std_dist: f64,
    pub interaction_range: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        CategoryThresholds {
            static_dist: 1.0,
            linear_fde: 0.5,
            cone_half_angle: 15.0,
            lf_duration: 2.0,
            ca_opposite_center: 180.0,
            grp_bearing_center: 90.0,
            grp_mean_dist: 1.0,
            grp_std_dist: 0.2,
            interaction_range: 5.0,
        }
    }
}

impl CategoryThresholds {
    /// Consecutive qualifying frames needed for strictly more than
    /// `lf_duration` seconds of following.
    pub fn lf_frames(&self, dt: f64) -> usize {
        (self.lf_duration / dt + 1e-9).floor() as usize + 1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategorizeConfig {
    pub thresholds: CategoryThresholds,
    /// Filter used for the linearity test. Its `dt` is replaced by the
    /// window's.
    pub kalman: KalmanConfig,
}

pub fn tag_static(window: &SceneWindow, th: &CategoryThresholds) -> bool {
    let path: f64 = window
        .primary_positions()
        .windows(2)
        .map(|w| w[0].distance(w[1]))
        .sum();
    path < th.static_dist
}

pub fn tag_linear(window: &SceneWindow, kalman: &KalmanConfig, th: &CategoryThresholds) -> bool {
    let future = window.primary_future();
    let Some(last) = future.last() else {
        return false;
    };
    let cfg = KalmanConfig { dt: window.dt, ..*kalman };
    match kalman_forecast(&window.primary_observed(), &cfg, future.len()) {
        Ok(pred) => pred[pred.len() - 1].distance(*last) < th.linear_fde,
        Err(_) => false,
    }
}

fn in_cone(angle: f64, center: f64, half: f64) -> bool {
    (angle - center).abs() <= half
}

// Bearing of the neighbour; None where the primary heading is undefined.
fn bearing_at(primary: &Pose2, other: &Pose2) -> Option<f64> {
    bearing(primary, other.position).ok()
}

// Angle of the neighbour's velocity relative to the primary's, in [0, 180].
fn velocity_angle(primary: &Pose2, other: &Pose2) -> Option<f64> {
    primary.heading()?;
    other.heading()?;
    Some(signed_angle(primary.velocity, other.velocity).abs())
}

pub fn tag_interactions(window: &SceneWindow, th: &CategoryThresholds) -> BTreeSet<SubTag> {
    let primary = window.primary_poses();
    let pred = window.obs_len..window.len();
    let half = th.cone_half_angle;
    let need_lf = th.lf_frames(window.dt);
    let (mut lf, mut ca, mut grp, mut general) = (false, false, false, false);

    for ped in window.neighbours.keys() {
        let poses = window.neighbour_poses(*ped).expect("neighbour of this window");

        let mut run = 0;
        for t in pred.clone() {
            let (Some(n), p) = (poses[t], &primary[t]) else {
                run = 0;
                continue;
            };
            let ahead = bearing_at(p, &n).is_some_and(|b| in_cone(b, 0.0, half));
            let angle = velocity_angle(p, &n);
            if ahead && angle.is_some_and(|a| a <= half) {
                run += 1;
                lf |= run >= need_lf;
            } else {
                run = 0;
            }
            ca |= ahead && angle.is_some_and(|a| a >= th.ca_opposite_center - half);
            general |= ahead && p.position.distance(n.position) < th.interaction_range;
        }

        // group walking is judged over the whole window
        let mut dists = Vec::with_capacity(window.len());
        let beside = (0..window.len()).all(|t| match poses[t] {
            Some(n) if n.heading().is_some() => {
                dists.push(primary[t].position.distance(n.position));
                bearing_at(&primary[t], &n)
                    .is_some_and(|b| in_cone(b.abs(), th.grp_bearing_center, half))
            }
            _ => false,
        });
        if beside && !dists.is_empty() {
            let mean = dists.iter().sum::<f64>() / dists.len() as f64;
            let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / dists.len() as f64;
            grp |= mean <= th.grp_mean_dist && var.sqrt() <= th.grp_std_dist;
        }
    }

    let mut tags = BTreeSet::new();
    if lf {
        tags.insert(SubTag::LeaderFollower);
    }
    if ca {
        tags.insert(SubTag::CollisionAvoidance);
    }
    if grp {
        tags.insert(SubTag::Group);
    }
    if general && tags.is_empty() {
        tags.insert(SubTag::Others);
    }
    tags
}

pub fn categorize_scene(window: &SceneWindow, cfg: &CategorizeConfig) -> CategoryTags {
    let th = &cfg.thresholds;
    if tag_static(window, th) {
        return CategoryTags::simple(MainType::Static);
    }
    if tag_linear(window, &cfg.kalman, th) {
        return CategoryTags::simple(MainType::Linear);
    }
    let subtags = tag_interactions(window, th);
    if subtags.is_empty() {
        CategoryTags::simple(MainType::NonInteracting)
    } else {
        CategoryTags::new(MainType::Interacting, subtags).expect("subtags are consistent")
    }
}

/// Tags of every scene, in scene order.
pub fn categorize_dataset(dataset: &Dataset, cfg: &CategorizeConfig) -> Result<Vec<CategoryTags>> {
    dataset
        .scenes()
        .par_iter()
        .map(|s| Ok(categorize_scene(&dataset.scene_window(s)?, cfg)))
        .collect()
}

/// Writes fresh tags into every scene of `dataset`.
pub fn apply_categories(dataset: &mut Dataset, cfg: &CategorizeConfig) -> Result<()> {
    let mut tags = categorize_dataset(dataset, cfg)?.into_iter();
    dataset.retag(|_| Ok(tags.next()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TrackPoint;
    use crate::geometry::Vec2;
    use proptest::prelude::*;

    const DT: f64 = 0.4;

    fn window_of(primary: &[Vec2], neighbours: &[Vec<Option<Vec2>>]) -> SceneWindow {
        let n = primary.len();
        SceneWindow {
            scene_id: 1,
            dt: DT,
            obs_len: 9,
            pred_len: n - 9,
            frames: (0..n as i64).collect(),
            primary_id: 0,
            primary: primary
                .iter()
                .enumerate()
                .map(|(f, p)| TrackPoint::new(f as i64, 0, p.x, p.y))
                .collect(),
            neighbours: neighbours
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let id = i as i64 + 1;
                    let pts = t
                        .iter()
                        .enumerate()
                        .map(|(f, p)| p.map(|p| TrackPoint::new(f as i64, id, p.x, p.y)))
                        .collect();
                    (id, pts)
                })
                .collect(),
        }
    }

    fn line(start: Vec2, step: Vec2) -> Vec<Vec2> {
        (0..21).map(|k| start + step * k as f64).collect()
    }

    // 1 m/s along +x, then speeding up by 0.1 m/s per predicted step so the
    // filter cannot follow it.
    fn accelerating() -> Vec<Vec2> {
        let mut out = vec![Vec2::ZERO];
        for k in 1..21 {
            let extra = if k > 8 { 0.04 * (k - 8) as f64 } else { 0.0 };
            let last = out[k - 1];
            out.push(last + Vec2::new(0.4 + extra, 0.0));
        }
        out
    }

    fn shifted(track: &[Vec2], by: Vec2) -> Vec<Option<Vec2>> {
        track.iter().map(|p| Some(*p + by)).collect()
    }

    fn follower_scene() -> SceneWindow {
        let p = accelerating();
        window_of(&p, &[shifted(&p, Vec2::new(1.5, 0.0))])
    }

    fn head_on_scene() -> SceneWindow {
        let p = accelerating();
        let meet = p[8] + Vec2::new(4.0, 0.0);
        let n = (0..21).map(|k| Some(meet + Vec2::new(-0.4 * (k as f64 - 8.0), 0.0))).collect();
        window_of(&p, &[n])
    }

    fn abreast_scene() -> SceneWindow {
        let p = accelerating();
        window_of(&p, &[shifted(&p, Vec2::new(0.0, 0.8))])
    }

    fn transform(w: &SceneWindow, angle: f64, shift: Vec2) -> SceneWindow {
        let t = |p: &TrackPoint| {
            let q = p.position().rotate(angle) + shift;
            TrackPoint::new(p.frame, p.ped_id, q.x, q.y)
        };
        SceneWindow {
            primary: w.primary.iter().map(t).collect(),
            neighbours: w
                .neighbours
                .iter()
                .map(|(id, tr)| (*id, tr.iter().map(|p| p.as_ref().map(t)).collect()))
                .collect(),
            ..w.clone()
        }
    }

    fn set(tags: &[SubTag]) -> BTreeSet<SubTag> {
        tags.iter().copied().collect()
    }

    #[test]
    fn lf_frame_count() {
        assert_eq!(CategoryThresholds::default().lf_frames(0.4), 6);
    }

    #[test]
    fn static_rule() {
        let th = CategoryThresholds::default();
        let still = window_of(&[Vec2::new(2.0, 2.0); 21], &[]);
        assert!(tag_static(&still, &th));
        let walk = window_of(&line(Vec2::ZERO, Vec2::new(0.42, 0.0)), &[]);
        assert!(!tag_static(&walk, &th));
        let wobble: Vec<Vec2> = (0..21).map(|k| Vec2::new(if k % 2 == 0 { 0.0 } else { 0.08 }, 0.0)).collect();
        // path 20 * 0.08 = 1.6 m although it ends where it began
        assert!(!tag_static(&window_of(&wobble, &[]), &th));
    }

    #[test]
    fn linear_rule() {
        let cfg = CategorizeConfig::default();
        let th = &cfg.thresholds;
        let straight = window_of(&line(Vec2::new(1.0, -2.0), Vec2::new(0.4, 0.0)), &[]);
        assert!(tag_linear(&straight, &cfg.kalman, th));

        let mut turn = line(Vec2::ZERO, Vec2::new(0.4, 0.0));
        for k in 9..21 {
            turn[k] = turn[8] + Vec2::new(0.0, 0.4 * (k - 8) as f64);
        }
        assert!(!tag_linear(&window_of(&turn, &[]), &cfg.kalman, th));

        let mut drift = line(Vec2::ZERO, Vec2::new(0.4, 0.0));
        for (k, p) in drift.iter_mut().enumerate().skip(9) {
            p.y = 0.3 * ((k - 8) as f64 / 12.0).powi(2);
        }
        assert!(tag_linear(&window_of(&drift, &[]), &cfg.kalman, th));
    }

    #[test]
    fn canonical_interactions() {
        let th = CategoryThresholds::default();
        assert_eq!(tag_interactions(&follower_scene(), &th), set(&[SubTag::LeaderFollower]));
        assert_eq!(tag_interactions(&head_on_scene(), &th), set(&[SubTag::CollisionAvoidance]));
        assert_eq!(tag_interactions(&abreast_scene(), &th), set(&[SubTag::Group]));
    }

    #[test]
    fn short_following_is_others() {
        // the leader is only in front for the last five predicted frames
        let p = accelerating();
        let n = p
            .iter()
            .enumerate()
            .map(|(k, q)| (k >= 16).then_some(*q + Vec2::new(1.5, 0.0)))
            .collect();
        assert_eq!(
            tag_interactions(&window_of(&p, &[n]), &CategoryThresholds::default()),
            set(&[SubTag::Others])
        );
    }

    #[test]
    fn hierarchy() {
        let cfg = CategorizeConfig::default();
        for (scene, tag) in [
            (follower_scene(), SubTag::LeaderFollower),
            (head_on_scene(), SubTag::CollisionAvoidance),
            (abreast_scene(), SubTag::Group),
        ] {
            let tags = categorize_scene(&scene, &cfg);
            assert_eq!(tags.main_type, MainType::Interacting);
            assert_eq!(tags.subtags, set(&[tag]));
        }

        let still = vec![Vec2::new(1.0, 1.0); 21];
        let crowd: Vec<_> = (1..5).map(|k| shifted(&still, Vec2::new(0.5 * k as f64, 0.3))).collect();
        assert_eq!(categorize_scene(&window_of(&still, &crowd), &cfg).main_type, MainType::Static);

        let lone = window_of(&line(Vec2::ZERO, Vec2::new(0.4, 0.0)), &[]);
        assert_eq!(categorize_scene(&lone, &cfg).main_type, MainType::Linear);

        let mut turn = line(Vec2::ZERO, Vec2::new(0.4, 0.0));
        for k in 9..21 {
            turn[k] = turn[8] + Vec2::new(0.0, 0.4 * (k - 8) as f64);
        }
        let tags = categorize_scene(&window_of(&turn, &[]), &cfg);
        assert_eq!(tags, CategoryTags::simple(MainType::NonInteracting));
    }

    #[test]
    fn canonical_tags_survive_rigid_motion() {
        let cfg = CategorizeConfig::default();
        for scene in [follower_scene(), head_on_scene(), abreast_scene()] {
            let base = categorize_scene(&scene, &cfg);
            for k in 0..25 {
                let angle = 0.37 * k as f64;
                let shift = Vec2::new(3.0 * k as f64 - 20.0, 7.0 - k as f64);
                assert_eq!(categorize_scene(&transform(&scene, angle, shift), &cfg), base);
            }
        }
    }

    #[test]
    fn dataset_roundtrip_keeps_tags() {
        let scene = follower_scene();
        let mut points: Vec<TrackPoint> = scene.primary.clone();
        points.extend(scene.neighbours.values().flatten().flatten().copied());
        let rec = crate::dataset::SceneRecord {
            scene_id: 3,
            primary_ped: 0,
            start_frame: 0,
            end_frame: 20,
            frame_skip: 1,
            tags: None,
        };
        let mut ds = Dataset::new(points, vec![rec], DT, Default::default()).unwrap();
        apply_categories(&mut ds, &CategorizeConfig::default()).unwrap();
        let tags = ds.scenes()[0].tags.clone().unwrap();
        assert_eq!(tags.main_type, MainType::Interacting);
    }

    fn neighbour_strategy() -> impl Strategy<Value = Vec<Option<Vec2>>> {
        (-6.0..6.0f64, -6.0..6.0f64, -0.5..0.5f64, -0.5..0.5f64, 0usize..21).prop_map(
            |(x, y, vx, vy, gap)| {
                (0..21)
                    .map(|k| (k != gap).then(|| Vec2::new(x + vx * k as f64, y + vy * k as f64)))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn no_neighbours_never_interacting(steps in prop::collection::vec((-0.6..0.6f64, -0.6..0.6f64), 20)) {
            let mut track = vec![Vec2::ZERO];
            for (dx, dy) in steps {
                let last = *track.last().unwrap();
                track.push(last + Vec2::new(dx, dy));
            }
            let tags = categorize_scene(&window_of(&track, &[]), &CategorizeConfig::default());
            prop_assert_ne!(tags.main_type, MainType::Interacting);
            prop_assert_eq!(tags.subtags.is_empty(), tags.main_type != MainType::Interacting);
        }

        #[test]
        fn shrinking_range_never_adds_others(
            nbrs in prop::collection::vec(neighbour_strategy(), 1..5),
            vy in -0.3..0.3f64, range in 0.1..5.0f64,
        ) {
            let p = line(Vec2::ZERO, Vec2::new(0.4, vy));
            let w = window_of(&p, &nbrs);
            let wide = CategoryThresholds::default();
            let narrow = CategoryThresholds { interaction_range: range, ..wide };
            let a = tag_interactions(&w, &wide);
            let b = tag_interactions(&w, &narrow);
            if b.contains(&SubTag::Others) {
                prop_assert!(a.contains(&SubTag::Others));
            }
            let named = |s: &BTreeSet<SubTag>| s.iter().filter(|t| **t != SubTag::Others).copied().collect::<Vec<_>>();
            prop_assert_eq!(named(&a), named(&b));
        }
    }
}
