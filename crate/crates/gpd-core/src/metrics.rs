//! Trajectory and map evaluation: ADE, FDE and collision rate for agent
//! trajectories; F1, lateral L2 and Chamfer distance for maps.

use crate::assign::min_cost_assignment;
use crate::scene::{resample_polyline, AgentState, Point, Polyline, Pose2D, Scenario};
use thiserror::Error;

/// Match threshold in meters for the map F1 score.
pub const F1_MATCH_THRESHOLD: f64 = 1.5;

/// Spacing in meters at which lane polylines are resampled before the
/// point-set map metrics.
pub const MAP_SAMPLE_SPACING: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory pair has mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no visible frames to evaluate")]
    NoVisibleFrames,
    #[error("empty point set")]
    EmptySet,
    #[error("empty ground-truth map")]
    EmptyGt,
}

/// Predicted vs ground-truth trajectory for one agent, with the per-frame
/// visibility mask taken from the ground truth.
#[derive(Debug, Clone)]
pub struct TrajPair {
    pub pred: Vec<Pose2D>,
    pub gt: Vec<Pose2D>,
    pub visible: Vec<bool>,
}

impl TrajPair {
    pub fn new(pred: Vec<Pose2D>, gt: Vec<Pose2D>, visible: Vec<bool>) -> Result<Self, MetricsError> {
        if pred.len() != gt.len() || pred.len() != visible.len() {
            return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
        }
        Ok(TrajPair { pred, gt, visible })
    }
}

/// Mean L2 position error over visible frames. Heading errors are ignored.
pub fn ade(pair: &TrajPair) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pair.pred.len() {
        if pair.visible[i] {
            sum += pair.pred[i].position().dist(pair.gt[i].position());
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoVisibleFrames);
    }
    Ok(sum / n as f64)
}

/// L2 position error at the last visible frame.
pub fn fde(pair: &TrajPair) -> Result<f64, MetricsError> {
    let last = pair
        .visible
        .iter()
        .rposition(|&v| v)
        .ok_or(MetricsError::NoVisibleFrames)?;
    Ok(pair.pred[last].position().dist(pair.gt[last].position()))
}

/// Oriented-box overlap via the separating-axis test over both boxes'
/// edge normals. Touching exactly edge-to-edge does not count as overlap.
pub fn obb_overlap(a: &AgentState, b: &AgentState) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let mut axes = [(0.0f64, 0.0f64); 4];
    let (sa, caa) = a.pose.heading.sin_cos();
    let (sb, cab) = b.pose.heading.sin_cos();
    axes[0] = (caa, sa);
    axes[1] = (-sa, caa);
    axes[2] = (cab, sb);
    axes[3] = (-sb, cab);
    for &(ax, ay) in &axes {
        let proj = |pts: &[Point; 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in pts {
                let v = p.x * ax + p.y * ay;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        let (lo_a, hi_a) = proj(&ca);
        let (lo_b, hi_b) = proj(&cb);
        if hi_a <= lo_b || hi_b <= lo_a {
            return false;
        }
    }
    true
}

/// Percentage of vehicles (ego included) that overlap another vehicle's
/// bounding box in at least one frame where both are visible. The
/// denominator counts vehicles visible in at least one frame.
pub fn collision_rate(scenario: &Scenario) -> f64 {
    let n_vehicles = scenario.n_agents() + 1;
    if n_vehicles < 2 || scenario.frames.is_empty() {
        return 0.0;
    }
    let mut collided = vec![false; n_vehicles];
    let mut ever_visible = vec![false; n_vehicles];
    for frame in &scenario.frames {
        let mut vehicles: Vec<&AgentState> = Vec::with_capacity(n_vehicles);
        vehicles.push(&frame.ego);
        vehicles.extend(frame.agents.iter());
        for (i, v) in vehicles.iter().enumerate() {
            if v.visible {
                ever_visible[i] = true;
            }
        }
        for i in 0..vehicles.len() {
            for j in (i + 1)..vehicles.len() {
                if vehicles[i].visible && vehicles[j].visible && obb_overlap(vehicles[i], vehicles[j])
                {
                    collided[i] = true;
                    collided[j] = true;
                }
            }
        }
    }
    let denom = ever_visible.iter().filter(|&&v| v).count();
    if denom == 0 {
        return 0.0;
    }
    let hits = collided
        .iter()
        .zip(&ever_visible)
        .filter(|(c, v)| **c && **v)
        .count();
    100.0 * hits as f64 / denom as f64
}

/// Predicted and ground-truth map lines prepared for the point metrics:
/// both sides resampled at [`MAP_SAMPLE_SPACING`], GT segments kept for
/// the lateral distance.
#[derive(Debug, Clone)]
pub struct MapPair {
    pub pred_points: Vec<Point>,
    pub gt_points: Vec<Point>,
    pub gt_lines: Vec<Polyline>,
}

impl MapPair {
    pub fn from_lines(pred: &[Polyline], gt: &[Polyline]) -> Result<Self, MetricsError> {
        if gt.is_empty() {
            return Err(MetricsError::EmptyGt);
        }
        let sample = |lines: &[Polyline]| -> Vec<Point> {
            lines
                .iter()
                .filter_map(|l| resample_polyline(l, MAP_SAMPLE_SPACING).ok())
                .flat_map(|l| l.points)
                .collect()
        };
        Ok(MapPair {
            pred_points: sample(pred),
            gt_points: sample(gt),
            gt_lines: gt.to_vec(),
        })
    }
}

/// F1 of point matching under a Hungarian assignment: pairs closer than
/// 1.5 m are true positives.
pub fn map_f1(pair: &MapPair) -> Result<f64, MetricsError> {
    if pair.gt_points.is_empty() {
        return Err(MetricsError::EmptyGt);
    }
    if pair.pred_points.is_empty() {
        return Ok(0.0);
    }
    let rows = pair.pred_points.len();
    let cols = pair.gt_points.len();
    let mut cost = vec![0.0; rows * cols];
    for (r, p) in pair.pred_points.iter().enumerate() {
        for (c, g) in pair.gt_points.iter().enumerate() {
            cost[r * cols + c] = p.dist(*g);
        }
    }
    let assignment = min_cost_assignment(&cost, rows, cols);
    let tp = assignment
        .row_to_col
        .iter()
        .enumerate()
        .filter(|(r, c)| {
            c.is_some_and(|c| pair.pred_points[*r].dist(pair.gt_points[c]) < F1_MATCH_THRESHOLD)
        })
        .count();
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / rows as f64;
    let recall = tp as f64 / cols as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Distance from a point to a segment, clamping the projection to the
/// segment ends.
pub fn point_to_segment_dist(p: Point, a: Point, b: Point) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len_sq = abx * abx + aby * aby;
    if len_sq == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * abx + (p.y - a.y) * aby) / len_sq).clamp(0.0, 1.0);
    p.dist(Point::new(a.x + t * abx, a.y + t * aby))
}

fn dist_to_lines(p: Point, lines: &[Polyline]) -> f64 {
    let mut best = f64::INFINITY;
    for line in lines {
        for w in line.points.windows(2) {
            best = best.min(point_to_segment_dist(p, w[0], w[1]));
        }
    }
    best
}

/// Mean distance from predicted points to their nearest ground-truth
/// segment (true projection, not vertex distance).
pub fn lateral_l2(pair: &MapPair) -> Result<f64, MetricsError> {
    if pair.pred_points.is_empty() || pair.gt_lines.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let sum: f64 = pair
        .pred_points
        .iter()
        .map(|&p| dist_to_lines(p, &pair.gt_lines))
        .sum();
    Ok(sum / pair.pred_points.len() as f64)
}

/// Symmetric Chamfer distance in meters squared:
/// 0.5 * (mean over GT of min squared distance to pred + vice versa).
pub fn chamfer(pair: &MapPair) -> Result<f64, MetricsError> {
    if pair.pred_points.is_empty() || pair.gt_points.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let dir = |from: &[Point], to: &[Point]| -> f64 {
        let sum: f64 = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| p.dist_sq(*q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from.len() as f64
    };
    Ok(0.5 * (dir(&pair.gt_points, &pair.pred_points) + dir(&pair.pred_points, &pair.gt_points)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneFrame;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pose(x: f64, y: f64) -> Pose2D {
        Pose2D::new(x, y, 0.0)
    }

    fn boxed(x: f64, y: f64, heading: f64, l: f64, w: f64) -> AgentState {
        AgentState {
            id: 0,
            pose: Pose2D::new(x, y, heading),
            length: l,
            width: w,
            visible: true,
        }
    }

    #[test]
    fn ade_identical_zero() {
        let p = vec![pose(0.0, 0.0), pose(1.0, 1.0)];
        let pair = TrajPair::new(p.clone(), p, vec![true, true]).unwrap();
        assert_eq!(ade(&pair).unwrap(), 0.0);
        assert_eq!(fde(&pair).unwrap(), 0.0);
    }

    #[test]
    fn ade_hand_mean() {
        let pair = TrajPair::new(
            vec![pose(0.0, 0.0), pose(1.0, 0.0)],
            vec![pose(0.0, 0.0), pose(0.0, 0.0)],
            vec![true, true],
        )
        .unwrap();
        assert!((ade(&pair).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fde_three_four_five() {
        let pair = TrajPair::new(
            vec![pose(0.0, 0.0), pose(3.0, 4.0)],
            vec![pose(0.0, 0.0), pose(0.0, 0.0)],
            vec![true, true],
        )
        .unwrap();
        assert!((fde(&pair).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fde_respects_visibility_mask() {
        let pair = TrajPair::new(
            vec![pose(1.0, 0.0), pose(9.0, 9.0)],
            vec![pose(0.0, 0.0), pose(0.0, 0.0)],
            vec![true, false],
        )
        .unwrap();
        assert!((fde(&pair).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_visible_frames_is_error() {
        let pair = TrajPair::new(vec![pose(0.0, 0.0)], vec![pose(0.0, 0.0)], vec![false]).unwrap();
        assert!(matches!(ade(&pair), Err(MetricsError::NoVisibleFrames)));
        assert!(matches!(fde(&pair), Err(MetricsError::NoVisibleFrames)));
    }

    #[test]
    fn metrics_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xf = Pose2D::new(13.0, -4.0, 0.9);
        let pred: Vec<Pose2D> = (0..10)
            .map(|_| pose(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let gt: Vec<Pose2D> = (0..10)
            .map(|_| pose(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let vis = vec![true; 10];
        let pair = TrajPair::new(pred.clone(), gt.clone(), vis.clone()).unwrap();
        let mapped = |v: &[Pose2D]| v.iter().map(|p| xf.to_global_pose(*p)).collect::<Vec<_>>();
        let pair2 = TrajPair::new(mapped(&pred), mapped(&gt), vis).unwrap();
        assert!((ade(&pair).unwrap() - ade(&pair2).unwrap()).abs() < 1e-9);
        assert!((fde(&pair).unwrap() - fde(&pair2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn obb_overlap_cases() {
        let a = boxed(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = boxed(1.0, 0.0, 0.0, 2.0, 2.0);
        assert!(obb_overlap(&a, &b));
        let far = boxed(10.0, 0.0, 0.0, 2.0, 2.0);
        assert!(!obb_overlap(&a, &far));
        // touching exactly edge-to-edge: strict overlap says no
        let touching = boxed(2.0, 0.0, 0.0, 2.0, 2.0);
        assert!(!obb_overlap(&a, &touching));
    }

    #[test]
    fn obb_rotated_overlap() {
        let a = boxed(0.0, 0.0, 0.0, 4.0, 2.0);
        let b = boxed(2.4, 0.0, std::f64::consts::FRAC_PI_2, 4.0, 2.0);
        // b is rotated 90 degrees: half-width 1 along x, so boxes overlap
        assert!(obb_overlap(&a, &b));
        let c = boxed(3.2, 0.0, std::f64::consts::FRAC_PI_2, 4.0, 2.0);
        assert!(!obb_overlap(&a, &c));
    }

    #[test]
    fn collision_rate_examples() {
        let make = |positions: Vec<(f64, f64)>| -> Scenario {
            let ego = boxed(positions[0].0, positions[0].1, 0.0, 2.0, 2.0);
            let agents: Vec<AgentState> = positions[1..]
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    let mut a = boxed(x, y, 0.0, 2.0, 2.0);
                    a.id = i as u32 + 1;
                    a
                })
                .collect();
            Scenario {
                dt: 0.1,
                frames: vec![SceneFrame {
                    t_index: 0,
                    ego,
                    agents,
                    map: vec![],
                }],
            }
        };
        assert_eq!(collision_rate(&make(vec![(0.0, 0.0), (1.0, 0.0)])), 100.0);
        assert_eq!(collision_rate(&make(vec![(0.0, 0.0), (10.0, 0.0)])), 0.0);
        assert_eq!(collision_rate(&make(vec![(0.0, 0.0), (2.0, 0.0)])), 0.0);
        // three vehicles, one pair colliding: 2 of 3
        let r = collision_rate(&make(vec![(0.0, 0.0), (1.0, 0.0), (10.0, 0.0)]));
        assert!((r - 200.0 / 3.0).abs() < 1e-9);
    }

    fn line(pts: &[(f64, f64)]) -> Polyline {
        Polyline::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn f1_single_pair_within_threshold() {
        let pair = MapPair {
            pred_points: vec![Point::new(0.0, 0.0)],
            gt_points: vec![Point::new(0.0, 1.0)],
            gt_lines: vec![],
        };
        assert_eq!(map_f1(&pair).unwrap(), 1.0);
    }

    #[test]
    fn f1_beyond_threshold_zero() {
        let pair = MapPair {
            pred_points: vec![Point::new(0.0, 0.0)],
            gt_points: vec![Point::new(0.0, 2.0)],
            gt_lines: vec![],
        };
        assert_eq!(map_f1(&pair).unwrap(), 0.0);
    }

    #[test]
    fn f1_identity_sets() {
        let gt = line(&[(0.0, 0.0), (8.0, 0.0)]);
        let pair = MapPair::from_lines(&[gt.clone()], &[gt]).unwrap();
        assert_eq!(map_f1(&pair).unwrap(), 1.0);
    }

    #[test]
    fn lateral_perpendicular_and_clamped() {
        let gt = vec![line(&[(-5.0, 0.0), (5.0, 0.0)])];
        let pair = MapPair {
            pred_points: vec![Point::new(0.0, 1.0)],
            gt_points: vec![],
            gt_lines: gt.clone(),
        };
        assert!((lateral_l2(&pair).unwrap() - 1.0).abs() < 1e-12);
        let pair2 = MapPair {
            pred_points: vec![Point::new(6.0, 0.0)],
            gt_points: vec![],
            gt_lines: gt,
        };
        assert!((lateral_l2(&pair2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chamfer_single_pair() {
        let pair = MapPair {
            pred_points: vec![Point::new(3.0, 4.0)],
            gt_points: vec![Point::new(0.0, 0.0)],
            gt_lines: vec![],
        };
        assert!((chamfer(&pair).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn chamfer_identity_zero() {
        let pts = vec![Point::new(1.0, 2.0), Point::new(3.0, 4.0)];
        let pair = MapPair {
            pred_points: pts.clone(),
            gt_points: pts,
            gt_lines: vec![],
        };
        assert_eq!(chamfer(&pair).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_pts = |rng: &mut ChaCha8Rng| -> Vec<Point> {
            (0..50)
                .map(|_| Point::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)))
                .collect()
        };
        let a = rand_pts(&mut rng);
        let b = rand_pts(&mut rng);
        let pair = MapPair {
            pred_points: a.clone(),
            gt_points: b.clone(),
            gt_lines: vec![],
        };
        // independent double loop
        let mut s1 = 0.0;
        for p in &b {
            let mut best = f64::INFINITY;
            for q in &a {
                best = best.min(p.dist_sq(*q));
            }
            s1 += best;
        }
        let mut s2 = 0.0;
        for p in &a {
            let mut best = f64::INFINITY;
            for q in &b {
                best = best.min(p.dist_sq(*q));
            }
            s2 += best;
        }
        let expect = 0.5 * (s1 / b.len() as f64 + s2 / a.len() as f64);
        assert_eq!(chamfer(&pair).unwrap(), expect);
    }

    #[test]
    fn chamfer_symmetric() {
        let a = vec![Point::new(0.0, 0.0), Point::new(5.0, 1.0)];
        let b = vec![Point::new(2.0, 2.0)];
        let p1 = MapPair {
            pred_points: a.clone(),
            gt_points: b.clone(),
            gt_lines: vec![],
        };
        let p2 = MapPair {
            pred_points: b,
            gt_points: a,
            gt_lines: vec![],
        };
        assert_eq!(chamfer(&p1).unwrap(), chamfer(&p2).unwrap());
    }
}
