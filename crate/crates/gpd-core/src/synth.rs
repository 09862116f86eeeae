//! Procedural desk-scale scenario generator: small road networks plus
//! lane-following agents driven by the Intelligent Driver Model.

use crate::scene::{
    normalize_heading, AgentState, Point, Polyline, Pose2D, Scenario, SceneFrame,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Fixed vehicle footprint (typical sedan).
pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid road spec: {0}")]
    InvalidSpec(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("could not place {0} agents without overlap")]
    Placement(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoadKind {
    Straight,
    Arc,
    TIntersection,
    Crossroads,
}

impl RoadKind {
    pub fn parse(s: &str) -> Option<RoadKind> {
        match s {
            "straight" => Some(RoadKind::Straight),
            "arc" => Some(RoadKind::Arc),
            "t-intersection" | "tee" => Some(RoadKind::TIntersection),
            "crossroads" | "cross" => Some(RoadKind::Crossroads),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadSpec {
    pub kind: RoadKind,
    pub lane_count: usize,
    pub lane_width: f64,
    pub arc_radius: f64,
}

impl Default for RoadSpec {
    fn default() -> Self {
        RoadSpec {
            kind: RoadKind::Straight,
            lane_count: 2,
            lane_width: 3.5,
            arc_radius: 50.0,
        }
    }
}

impl RoadSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.lane_count < 1 {
            return Err(SynthError::InvalidSpec("lane_count must be >= 1".into()));
        }
        if !(self.lane_width > 0.0) {
            return Err(SynthError::InvalidSpec("lane_width must be > 0".into()));
        }
        if self.kind == RoadKind::Arc && self.arc_radius <= self.lane_count as f64 * self.lane_width
        {
            return Err(SynthError::InvalidSpec(
                "arc_radius must exceed lane_count * lane_width".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub max_decel: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 12.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            max_decel: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub road: RoadSpec,
    pub n_agents: usize,
    pub horizon_frames: usize,
    pub seed: u64,
    pub idm: IdmParams,
    /// Half extent of the ego-centric region that defines agent visibility.
    pub region_half_extent: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            road: RoadSpec::default(),
            n_agents: 4,
            horizon_frames: 100,
            seed: 0,
            idm: IdmParams::default(),
            region_half_extent: 32.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.road.validate()?;
        if self.horizon_frames < 21 {
            return Err(SynthError::InvalidConfig(
                "horizon_frames must be >= 21 (2s context plus a target frame)".into(),
            ));
        }
        if !(self.region_half_extent > 0.0) {
            return Err(SynthError::InvalidConfig(
                "region_half_extent must be > 0".into(),
            ));
        }
        Ok(())
    }
}

const POINT_SPACING: f64 = 1.0;
const STRAIGHT_LENGTH: f64 = 200.0;

/// Lane centerlines for a road network. Deterministic per (spec, seed):
/// the seed applies a rigid rotation/translation to the whole network so
/// different seeds give different rasters from the same spec.
pub fn gen_road(spec: &RoadSpec, seed: u64) -> Result<Vec<Polyline>, SynthError> {
    Ok(road_network(spec, seed)?.0)
}

/// Lanes plus the indices of lanes that are safe to spawn traffic on
/// (pairwise parallel, never crossing).
fn road_network(spec: &RoadSpec, seed: u64) -> Result<(Vec<Polyline>, Vec<usize>), SynthError> {
    spec.validate()?;
    let mut lanes: Vec<Vec<Point>> = Vec::new();
    let offsets: Vec<f64> = (0..spec.lane_count)
        .map(|i| (i as f64 - (spec.lane_count as f64 - 1.0) / 2.0) * spec.lane_width)
        .collect();
    let half_len = STRAIGHT_LENGTH / 2.0;
    match spec.kind {
        RoadKind::Straight => {
            for &off in &offsets {
                lanes.push(straight_lane(
                    Point::new(-half_len, off),
                    Point::new(half_len, off),
                ));
            }
        }
        RoadKind::Arc => {
            // concentric arcs around (0, arc_radius), sweeping 140 degrees
            // through the origin
            let center = Point::new(0.0, spec.arc_radius);
            for &off in &offsets {
                let r = spec.arc_radius - off;
                let sweep = 140f64.to_radians();
                let start = -std::f64::consts::FRAC_PI_2 - sweep / 2.0;
                let n = ((r * sweep) / POINT_SPACING).ceil() as usize;
                let pts: Vec<Point> = (0..=n)
                    .map(|i| {
                        let a = start + sweep * i as f64 / n as f64;
                        Point::new(center.x + r * a.cos(), center.y + r * a.sin())
                    })
                    .collect();
                lanes.push(pts);
            }
        }
        RoadKind::TIntersection => {
            for &off in &offsets {
                lanes.push(straight_lane(
                    Point::new(-half_len, off),
                    Point::new(half_len, off),
                ));
            }
            // branch approaches from the south and stops at the road edge
            let edge = -(spec.lane_count as f64 * spec.lane_width) / 2.0 - 1.0;
            for &off in &offsets {
                lanes.push(straight_lane(
                    Point::new(off, -half_len / 2.0),
                    Point::new(off, edge),
                ));
            }
        }
        RoadKind::Crossroads => {
            for &off in &offsets {
                lanes.push(straight_lane(
                    Point::new(-half_len, off),
                    Point::new(half_len, off),
                ));
            }
            for &off in &offsets {
                lanes.push(straight_lane(
                    Point::new(off, -half_len / 2.0),
                    Point::new(off, half_len / 2.0),
                ));
            }
        }
    }
    // seeded rigid placement of the whole network
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x726f6164);
    let pose = Pose2D::new(
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let lanes: Vec<Polyline> = lanes
        .into_iter()
        .map(|pts| Polyline {
            points: pts.iter().map(|&p| pose.to_global_point(p)).collect(),
        })
        .collect();
    let spawnable = (0..spec.lane_count).collect();
    Ok((lanes, spawnable))
}

fn straight_lane(a: Point, b: Point) -> Vec<Point> {
    let len = a.dist(b);
    let n = (len / POINT_SPACING).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
        })
        .collect()
}

/// Arc-length parameterized lane with pose lookup.
struct LaneTrack {
    points: Vec<Point>,
    cum: Vec<f64>,
    total: f64,
}

impl LaneTrack {
    fn new(line: &Polyline) -> Self {
        let mut cum = Vec::with_capacity(line.points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in line.points.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        LaneTrack {
            points: line.points.clone(),
            cum,
            total: acc,
        }
    }

    fn pose_at(&self, s: f64) -> Pose2D {
        let s = s.clamp(0.0, self.total);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let seg_len = self.cum[i + 1] - self.cum[i];
        let t = if seg_len > 0.0 {
            (s - self.cum[i]) / seg_len
        } else {
            0.0
        };
        let a = self.points[i];
        let b = self.points[i + 1];
        let heading = (b.y - a.y).atan2(b.x - a.x);
        Pose2D::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), heading)
    }
}

/// IDM acceleration for a vehicle at speed `v` with `gap` meters of free
/// space to a leader moving at `v_lead`. `gap` of None means a free road.
pub fn idm_accel(v: f64, leader: Option<(f64, f64)>, p: &IdmParams) -> f64 {
    let free = p.max_accel * (1.0 - (v / p.desired_speed).powi(4));
    match leader {
        None => free,
        Some((gap, v_lead)) => {
            let dv = v - v_lead;
            let s_star = p.min_gap
                + (v * p.time_headway + v * dv / (2.0 * (p.max_accel * p.max_decel).sqrt()))
                    .max(0.0);
            let gap = gap.max(0.1);
            free - p.max_accel * (s_star / gap).powi(2)
        }
    }
}

/// One vehicle's longitudinal state on a lane.
#[derive(Debug, Clone, Copy)]
pub struct LaneVehicle {
    pub s: f64,
    pub v: f64,
}

/// Explicit-Euler IDM integration of vehicles sharing one lane, each
/// following the next one ahead; the lane end acts as a stopped leader.
/// Returns per-step states, `steps + 1` entries including the initial one.
pub fn simulate_lane(
    init: &[LaneVehicle],
    lane_len: f64,
    p: &IdmParams,
    dt: f64,
    steps: usize,
) -> Vec<Vec<LaneVehicle>> {
    let mut states = vec![init.to_vec()];
    let mut cur = init.to_vec();
    let end_margin = 3.0;
    for _ in 0..steps {
        // order by position to find leaders
        let mut order: Vec<usize> = (0..cur.len()).collect();
        order.sort_by(|&a, &b| cur[a].s.partial_cmp(&cur[b].s).unwrap());
        let mut next = cur.clone();
        for (rank, &i) in order.iter().enumerate() {
            let veh = cur[i];
            let leader = if rank + 1 < order.len() {
                let lead = cur[order[rank + 1]];
                Some((lead.s - veh.s - VEHICLE_LENGTH, lead.v))
            } else {
                None
            };
            // lane end as a stationary leader
            let end_gap = lane_len - end_margin - veh.s;
            let leader = match leader {
                Some((g, lv)) if g <= end_gap => Some((g, lv)),
                _ if end_gap < 80.0 => Some((end_gap, 0.0)),
                other => other,
            };
            let a = idm_accel(veh.v, leader, p);
            let v_new = (veh.v + a * dt).clamp(0.0, p.desired_speed);
            next[i] = LaneVehicle {
                s: (veh.s + v_new * dt).min(lane_len),
                v: v_new,
            };
        }
        cur = next;
        states.push(cur.clone());
    }
    states
}

/// Generate a full scenario: vehicles placed without overlap on spawnable
/// lanes, IDM longitudinal dynamics, exact lateral lane tracking. Vehicle
/// 0 is the ego; agents outside the ego region are flagged invisible.
pub fn gen_scenario(cfg: &GenConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let (lanes, spawnable) = road_network(&cfg.road, cfg.seed)?;
    let tracks: Vec<LaneTrack> = spawnable
        .iter()
        .map(|&i| LaneTrack::new(&lanes[i]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_vehicles = cfg.n_agents + 1;

    // placement: (track index, s, v)
    let mut placed: Vec<(usize, LaneVehicle)> = Vec::new();
    for k in 0..n_vehicles {
        let mut ok = false;
        for _attempt in 0..200 {
            let ti = rng.gen_range(0..tracks.len());
            let margin = 15.0;
            if tracks[ti].total < 2.0 * margin {
                continue;
            }
            let s = rng.gen_range(margin..tracks[ti].total - margin);
            let v = rng.gen_range(0.3..0.9) * cfg.idm.desired_speed;
            let clear = placed.iter().all(|&(tj, ref other)| {
                if tj == ti {
                    (other.s - s).abs() >= VEHICLE_LENGTH + cfg.idm.min_gap + 4.0
                } else {
                    true
                }
            });
            if clear {
                placed.push((ti, LaneVehicle { s, v }));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SynthError::Placement(k));
        }
    }

    // integrate each lane's queue independently
    let dt = 0.1;
    let steps = cfg.horizon_frames - 1;
    let mut per_vehicle_states: Vec<Vec<LaneVehicle>> = vec![Vec::new(); n_vehicles];
    for ti in 0..tracks.len() {
        let members: Vec<usize> = (0..n_vehicles).filter(|&k| placed[k].0 == ti).collect();
        if members.is_empty() {
            continue;
        }
        let init: Vec<LaneVehicle> = members.iter().map(|&k| placed[k].1).collect();
        let states = simulate_lane(&init, tracks[ti].total, &cfg.idm, dt, steps);
        for (mi, &k) in members.iter().enumerate() {
            per_vehicle_states[k] = states.iter().map(|frame| frame[mi]).collect();
        }
    }

    let mut frames = Vec::with_capacity(cfg.horizon_frames);
    for t in 0..cfg.horizon_frames {
        let poses: Vec<Pose2D> = (0..n_vehicles)
            .map(|k| tracks[placed[k].0].pose_at(per_vehicle_states[k][t].s))
            .collect();
        let ego_pose = poses[0];
        let ego = AgentState {
            id: 0,
            pose: ego_pose,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            visible: true,
        };
        let agents: Vec<AgentState> = (1..n_vehicles)
            .map(|k| {
                let local = ego_pose.to_local_pose(poses[k]);
                let visible = local.x.abs() <= cfg.region_half_extent
                    && local.y.abs() <= cfg.region_half_extent;
                AgentState {
                    id: k as u32,
                    pose: poses[k],
                    length: VEHICLE_LENGTH,
                    width: VEHICLE_WIDTH,
                    visible,
                }
            })
            .collect();
        frames.push(SceneFrame {
            t_index: t as u32,
            ego,
            agents,
            map: lanes.clone(),
        });
    }
    Ok(Scenario { dt, frames })
}
