//! Scene-domain types, rigid-frame geometry, polyline utilities and
//! scenario file I/O shared by every other module.
//!
//! Frame convention: +x is ego forward, +y is ego left; transforming a
//! global point into an ego frame rotates by minus the ego heading.
//! Headings are radians in (-pi, pi] everywhere in this crate; degrees
//! appear only inside the agent quantization scheme.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("polyline needs at least 2 distinct points")]
    DegenerateLine,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_heading(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    /// Heading is normalized to (-pi, pi] on construction.
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose2D {
            x,
            y,
            heading: normalize_heading(heading),
        }
    }

    pub fn origin() -> Self {
        Pose2D {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }

    /// Express a global point in this pose's frame.
    pub fn to_local_point(&self, p: Point) -> Point {
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        let (s, c) = self.heading.sin_cos();
        Point::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// Map a point from this pose's frame back to global coordinates.
    pub fn to_global_point(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        Point::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Express another global pose in this pose's frame.
    pub fn to_local_pose(&self, other: Pose2D) -> Pose2D {
        let p = self.to_local_point(other.position());
        Pose2D::new(p.x, p.y, other.heading - self.heading)
    }

    /// Map a pose expressed in this frame back to a global pose.
    pub fn to_global_pose(&self, local: Pose2D) -> Pose2D {
        let p = self.to_global_point(local.position());
        Pose2D::new(p.x, p.y, self.heading + local.heading)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: u32,
    pub pose: Pose2D,
    pub length: f64,
    pub width: f64,
    pub visible: bool,
}

impl AgentState {
    /// Corners of the oriented bounding box, counter-clockwise.
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.pose.heading.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let rot = |lx: f64, ly: f64| {
            Point::new(self.pose.x + c * lx - s * ly, self.pose.y + s * lx + c * ly)
        };
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    /// At least two points, consecutive points distinct.
    pub fn new(points: Vec<Point>) -> Result<Self, SceneError> {
        if points.len() < 2 {
            return Err(SceneError::DegenerateLine);
        }
        for w in points.windows(2) {
            if w[0] == w[1] {
                return Err(SceneError::DegenerateLine);
            }
        }
        Ok(Polyline { points })
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub t_index: u32,
    pub ego: AgentState,
    pub agents: Vec<AgentState>,
    pub map: Vec<Polyline>,
}

impl SceneFrame {
    /// Rigid-transform the frame into the ego's coordinate frame. The ego
    /// pose becomes the origin; agent poses and map points follow.
    pub fn to_ego_frame(&self) -> SceneFrame {
        let ego_pose = self.ego.pose;
        self.transformed(|p| ego_pose.to_local_point(p), |q| ego_pose.to_local_pose(q))
    }

    /// Inverse of [`SceneFrame::to_ego_frame`] given the original ego pose.
    pub fn from_ego_frame(&self, ego_pose: Pose2D) -> SceneFrame {
        self.transformed(|p| ego_pose.to_global_point(p), |q| ego_pose.to_global_pose(q))
    }

    fn transformed(
        &self,
        fp: impl Fn(Point) -> Point,
        fq: impl Fn(Pose2D) -> Pose2D,
    ) -> SceneFrame {
        let map_agent = |a: &AgentState| AgentState {
            id: a.id,
            pose: fq(a.pose),
            length: a.length,
            width: a.width,
            visible: a.visible,
        };
        SceneFrame {
            t_index: self.t_index,
            ego: map_agent(&self.ego),
            agents: self.agents.iter().map(map_agent).collect(),
            map: self
                .map
                .iter()
                .map(|line| Polyline {
                    points: line.points.iter().map(|&p| fp(p)).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dt: f64,
    pub frames: Vec<SceneFrame>,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.frames.first().map_or(0, |f| f.agents.len())
    }

    /// Checks the invariants the file format and the tokenizers rely on:
    /// positive dt, t_index increasing by one, a fixed agent-id roster.
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.dt > 0.0) {
            return Err(SceneError::InvalidScenario("dt must be > 0".into()));
        }
        let Some(first) = self.frames.first() else {
            return Err(SceneError::InvalidScenario("no frames".into()));
        };
        let roster: Vec<u32> = first.agents.iter().map(|a| a.id).collect();
        let mut seen = roster.clone();
        seen.push(first.ego.id);
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(SceneError::InvalidScenario("duplicate agent ids".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.t_index != first.t_index + i as u32 {
                return Err(SceneError::InvalidScenario(format!(
                    "t_index not increasing by 1 at frame {i}"
                )));
            }
            if !f.ego.visible {
                return Err(SceneError::InvalidScenario(format!(
                    "ego must be visible at frame {i}"
                )));
            }
            let ids: Vec<u32> = f.agents.iter().map(|a| a.id).collect();
            if ids != roster {
                return Err(SceneError::InvalidScenario(format!(
                    "agent roster changed at frame {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Resample a polyline at arc-length multiples of `spacing`, keeping both
/// endpoints. Adjacent output points are never farther than `spacing`
/// apart along the line.
pub fn resample_polyline(line: &Polyline, spacing: f64) -> Result<Polyline, SceneError> {
    assert!(spacing > 0.0, "spacing must be > 0");
    let total = line.arc_length();
    if total <= 0.0 {
        return Err(SceneError::DegenerateLine);
    }
    let mut out = Vec::new();
    let mut seg = 0usize;
    let mut seg_start_arc = 0.0;
    let mut seg_len = line.points[0].dist(line.points[1]);
    let n = (total / spacing).floor() as usize;
    for k in 0..=n {
        let s = k as f64 * spacing;
        if s > total {
            break;
        }
        // advance to the segment containing arc position s
        while s > seg_start_arc + seg_len && seg + 2 < line.points.len() {
            seg_start_arc += seg_len;
            seg += 1;
            seg_len = line.points[seg].dist(line.points[seg + 1]);
        }
        let t = ((s - seg_start_arc) / seg_len).clamp(0.0, 1.0);
        let a = line.points[seg];
        let b = line.points[seg + 1];
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    let end = *line.points.last().unwrap();
    match out.last() {
        Some(&last) if last.dist(end) < spacing * 1e-9 => *out.last_mut().unwrap() = end,
        _ => out.push(end),
    }
    Polyline::new(out)
}

/// Clip polylines to the axis-aligned square |x| <= half_extent,
/// |y| <= half_extent. Lines crossing the boundary are split at the exact
/// intersection; parts fully outside are dropped.
pub fn clip_map_to_region(map: &[Polyline], half_extent: f64) -> Vec<Polyline> {
    assert!(half_extent > 0.0, "half_extent must be > 0");
    let mut out = Vec::new();
    for line in map {
        let mut run: Vec<Point> = Vec::new();
        for w in line.points.windows(2) {
            let (p, q) = (w[0], w[1]);
            let Some((t0, t1)) = clip_segment_to_square(p, q, half_extent) else {
                flush_run(&mut out, &mut run);
                continue;
            };
            let lerp = |t: f64| Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y));
            let a = if t0 == 0.0 { p } else { lerp(t0) };
            let b = if t1 == 1.0 { q } else { lerp(t1) };
            match run.last() {
                Some(&last) if last == a => {}
                Some(_) => {
                    flush_run(&mut out, &mut run);
                    run.push(a);
                }
                None => run.push(a),
            }
            if b != a {
                run.push(b);
            }
            if t1 < 1.0 {
                flush_run(&mut out, &mut run);
            }
        }
        flush_run(&mut out, &mut run);
    }
    out
}

fn flush_run(out: &mut Vec<Polyline>, run: &mut Vec<Point>) {
    if run.len() >= 2 {
        out.push(Polyline {
            points: std::mem::take(run),
        });
    } else {
        run.clear();
    }
}

/// Liang-Barsky interval of the segment p->q inside the square, or None.
fn clip_segment_to_square(p: Point, q: Point, he: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = [q.x - p.x, q.y - p.y];
    let checks = [
        (-d[0], p.x + he),  // x >= -he
        (d[0], he - p.x),   // x <= he
        (-d[1], p.y + he),  // y >= -he
        (d[1], he - p.y),   // y <= he
    ];
    for &(denom, num) in &checks {
        if denom == 0.0 {
            if num < 0.0 {
                return None;
            }
        } else {
            let t = num / denom;
            if denom < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

// --- scenario file format ------------------------------------------------
//
// UTF-8 text, grammar in docs/formats.md:
//   header  := "GPD-SCENARIO v1 dt=" float " agents=" int
//   frame   := t_index '|' tuple '|' tuples? '|' map?
//   tuple   := id ',' x ',' y ',' heading ',' length ',' width ',' vis
//   tuples  := tuple (';' tuple)*
//   map     := polyline (';' polyline)*
//   polyline:= point (' ' point)* ; point := x ',' y
// Floats use Rust's shortest round-trip formatting, so save -> load -> save
// is byte-identical.

const SCENARIO_MAGIC: &str = "GPD-SCENARIO v1";

pub fn scenario_to_string(s: &Scenario) -> Result<String, SceneError> {
    s.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "{SCENARIO_MAGIC} dt={} agents={}", s.dt, s.n_agents());
    for f in &s.frames {
        let _ = write!(out, "{}|", f.t_index);
        write_tuple(&mut out, &f.ego);
        out.push('|');
        for (i, a) in f.agents.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            write_tuple(&mut out, a);
        }
        out.push('|');
        for (i, line) in f.map.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            for (j, p) in line.points.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{},{}", p.x, p.y);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn write_tuple(out: &mut String, a: &AgentState) {
    let _ = write!(
        out,
        "{},{},{},{},{},{},{}",
        a.id,
        a.pose.x,
        a.pose.y,
        a.pose.heading,
        a.length,
        a.width,
        u8::from(a.visible)
    );
}

pub fn save_scenario(s: &Scenario, path: &Path) -> Result<(), SceneError> {
    fs::write(path, scenario_to_string(s)?)?;
    Ok(())
}

pub fn scenario_from_str(text: &str) -> Result<Scenario, SceneError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SceneError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let rest = header.strip_prefix(SCENARIO_MAGIC).ok_or(SceneError::Parse {
        line: 1,
        msg: format!("expected header starting with '{SCENARIO_MAGIC}'"),
    })?;
    let mut dt = None;
    let mut n_agents = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("dt=") {
            dt = Some(parse_f64(v, 1)?);
        } else if let Some(v) = field.strip_prefix("agents=") {
            n_agents = Some(v.parse::<usize>().map_err(|e| SceneError::Parse {
                line: 1,
                msg: format!("bad agents count: {e}"),
            })?);
        }
    }
    let dt = dt.ok_or(SceneError::Parse {
        line: 1,
        msg: "missing dt".into(),
    })?;
    let n_agents = n_agents.ok_or(SceneError::Parse {
        line: 1,
        msg: "missing agents count".into(),
    })?;

    let mut frames = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.is_empty() {
            continue;
        }
        let mut sections = raw.split('|');
        let t_index = sections
            .next()
            .unwrap()
            .parse::<u32>()
            .map_err(|e| SceneError::Parse {
                line: line_no,
                msg: format!("bad t_index: {e}"),
            })?;
        let ego_s = sections.next().ok_or_else(|| truncated(line_no))?;
        let agents_s = sections.next().ok_or_else(|| truncated(line_no))?;
        let map_s = sections.next().ok_or_else(|| truncated(line_no))?;
        if sections.next().is_some() {
            return Err(SceneError::Parse {
                line: line_no,
                msg: "too many '|' sections".into(),
            });
        }
        let ego = parse_tuple(ego_s, line_no)?;
        let mut agents = Vec::new();
        if !agents_s.is_empty() {
            for part in agents_s.split(';') {
                agents.push(parse_tuple(part, line_no)?);
            }
        }
        if agents.len() != n_agents {
            return Err(SceneError::Parse {
                line: line_no,
                msg: format!("expected {} agents, found {}", n_agents, agents.len()),
            });
        }
        let mut map = Vec::new();
        if !map_s.is_empty() {
            for part in map_s.split(';') {
                let mut points = Vec::new();
                for ps in part.split(' ') {
                    let (x, y) = ps.split_once(',').ok_or(SceneError::Parse {
                        line: line_no,
                        msg: format!("bad point '{ps}'"),
                    })?;
                    points.push(Point::new(parse_f64(x, line_no)?, parse_f64(y, line_no)?));
                }
                map.push(Polyline::new(points).map_err(|e| SceneError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                })?);
            }
        }
        frames.push(SceneFrame {
            t_index,
            ego,
            agents,
            map,
        });
    }
    let s = Scenario { dt, frames };
    s.validate().map_err(|e| SceneError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, SceneError> {
    scenario_from_str(&fs::read_to_string(path)?)
}

fn truncated(line: usize) -> SceneError {
    SceneError::Parse {
        line,
        msg: "truncated frame record".into(),
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, SceneError> {
    let v: f64 = s.parse().map_err(|e| SceneError::Parse {
        line,
        msg: format!("bad float '{s}': {e}"),
    })?;
    if !v.is_finite() {
        return Err(SceneError::Parse {
            line,
            msg: format!("non-finite value '{s}'"),
        });
    }
    Ok(v)
}

fn parse_tuple(s: &str, line: usize) -> Result<AgentState, SceneError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 7 {
        return Err(SceneError::Parse {
            line,
            msg: format!("agent tuple needs 7 fields, found {}", parts.len()),
        });
    }
    let id = parts[0].parse::<u32>().map_err(|e| SceneError::Parse {
        line,
        msg: format!("bad id: {e}"),
    })?;
    let vis = match parts[6] {
        "0" => false,
        "1" => true,
        other => {
            return Err(SceneError::Parse {
                line,
                msg: format!("bad visibility flag '{other}'"),
            })
        }
    };
    Ok(AgentState {
        id,
        pose: Pose2D::new(
            parse_f64(parts[1], line)?,
            parse_f64(parts[2], line)?,
            parse_f64(parts[3], line)?,
        ),
        length: parse_f64(parts[4], line)?,
        width: parse_f64(parts[5], line)?,
        visible: vis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn agent(id: u32, x: f64, y: f64, h: f64) -> AgentState {
        AgentState {
            id,
            pose: Pose2D::new(x, y, h),
            length: 4.5,
            width: 2.0,
            visible: true,
        }
    }

    fn small_frame() -> SceneFrame {
        SceneFrame {
            t_index: 0,
            ego: agent(0, 10.0, 0.0, std::f64::consts::FRAC_PI_2),
            agents: vec![agent(1, 10.0, 5.0, 0.0)],
            map: vec![Polyline::new(vec![Point::new(0.0, 0.0), Point::new(20.0, 0.0)]).unwrap()],
        }
    }

    #[test]
    fn ego_frame_identity_ego() {
        let f = SceneFrame {
            t_index: 0,
            ego: agent(0, 0.0, 0.0, 0.0),
            agents: vec![agent(1, 3.0, 4.0, 0.0)],
            map: vec![],
        };
        let e = f.to_ego_frame();
        assert_eq!(e.agents[0].pose.x, 3.0);
        assert_eq!(e.agents[0].pose.y, 4.0);
    }

    #[test]
    fn ego_frame_rotated() {
        // ego=(10,0,pi/2), agent at (10,5) -> agent at (5,0)
        let e = small_frame().to_ego_frame();
        assert!((e.ego.pose.x).abs() < 1e-12);
        assert!((e.ego.pose.heading).abs() < 1e-12);
        assert!((e.agents[0].pose.x - 5.0).abs() < 1e-9);
        assert!((e.agents[0].pose.y - 0.0).abs() < 1e-9);
    }

    #[test]
    fn ego_frame_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let ego = agent(
                0,
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-4.0..4.0),
            );
            let a = agent(
                1,
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-4.0..4.0),
            );
            let f = SceneFrame {
                t_index: 0,
                ego: ego.clone(),
                agents: vec![a.clone()],
                map: vec![Polyline::new(vec![
                    Point::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)),
                    Point::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)),
                ])
                .unwrap()],
            };
            let back = f.to_ego_frame().from_ego_frame(ego.pose);
            assert!((back.agents[0].pose.x - a.pose.x).abs() < 1e-9);
            assert!((back.agents[0].pose.y - a.pose.y).abs() < 1e-9);
            assert!(
                normalize_heading(back.agents[0].pose.heading - a.pose.heading).abs() < 1e-9
            );
            assert!((back.map[0].points[0].x - f.map[0].points[0].x).abs() < 1e-9);
        }
    }

    #[test]
    fn transform_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ego = Pose2D::new(5.0, -2.0, 1.2);
        for _ in 0..200 {
            let p = Point::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
            let q = Point::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
            let d0 = p.dist(q);
            let d1 = ego.to_local_point(p).dist(ego.to_local_point(q));
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_uniform_segment() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).unwrap();
        let r = resample_polyline(&line, 0.5).unwrap();
        assert_eq!(r.points.len(), 3);
        assert!((r.points[1].x - 0.5).abs() < 1e-12);
        assert_eq!(r.points[2], Point::new(1.0, 0.0));
    }

    #[test]
    fn resample_endpoint_case() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(0.0, 2.0)]).unwrap();
        let r = resample_polyline(&line, 2.0).unwrap();
        assert_eq!(r.points, vec![Point::new(0.0, 0.0), Point::new(0.0, 2.0)]);
    }

    #[test]
    fn resample_l_shape() {
        let line = Polyline::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
        ])
        .unwrap();
        let r = resample_polyline(&line, 0.5).unwrap();
        assert_eq!(r.points.len(), 5);
        assert!((r.points[2].x - 1.0).abs() < 1e-12 && (r.points[2].y - 0.0).abs() < 1e-12);
        assert!((r.points[3].y - 0.5).abs() < 1e-12);
        assert_eq!(r.points[4], Point::new(1.0, 1.0));
    }

    #[test]
    fn clip_inside_unchanged() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(10.0, 5.0)]).unwrap();
        let out = clip_map_to_region(&[line.clone()], 32.0);
        assert_eq!(out, vec![line]);
    }

    #[test]
    fn clip_crossing_boundary() {
        let line = Polyline::new(vec![Point::new(0.0, 0.0), Point::new(100.0, 0.0)]).unwrap();
        let out = clip_map_to_region(&[line], 32.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].points, vec![Point::new(0.0, 0.0), Point::new(32.0, 0.0)]);
    }

    #[test]
    fn clip_outside_dropped() {
        let line = Polyline::new(vec![Point::new(50.0, 50.0), Point::new(60.0, 60.0)]).unwrap();
        assert!(clip_map_to_region(&[line], 32.0).is_empty());
    }

    #[test]
    fn clip_reentrant_splits() {
        // dips out of the region and comes back: two pieces
        let line = Polyline::new(vec![
            Point::new(0.0, 0.0),
            Point::new(40.0, 0.0),
            Point::new(40.0, 10.0),
            Point::new(0.0, 10.0),
        ])
        .unwrap();
        let out = clip_map_to_region(&[line], 32.0);
        assert_eq!(out.len(), 2);
        assert_eq!(*out[0].points.last().unwrap(), Point::new(32.0, 0.0));
        assert_eq!(out[1].points[0], Point::new(32.0, 10.0));
    }

    fn synthetic_scenario(n_frames: usize, n_agents: usize) -> Scenario {
        let mut frames = Vec::new();
        for t in 0..n_frames {
            let ego = agent(0, t as f64 * 0.5, 0.0, 0.0);
            let agents = (0..n_agents)
                .map(|i| {
                    let mut a = agent(i as u32 + 1, i as f64 * 3.0, 2.5, 0.1);
                    a.visible = (t + i) % 7 != 0;
                    a
                })
                .collect();
            frames.push(SceneFrame {
                t_index: t as u32,
                ego,
                agents,
                map: vec![Polyline::new(vec![
                    Point::new(-10.0, 1.75),
                    Point::new(90.0, 1.75),
                ])
                .unwrap()],
            });
        }
        Scenario { dt: 0.1, frames }
    }

    #[test]
    fn scenario_round_trip_empty_agents() {
        let s = synthetic_scenario(3, 0);
        let text = scenario_to_string(&s).unwrap();
        let back = scenario_from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn scenario_resave_byte_identical() {
        let s = synthetic_scenario(100, 4);
        let text = scenario_to_string(&s).unwrap();
        let back = scenario_from_str(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(scenario_to_string(&back).unwrap(), text);
    }

    #[test]
    fn scenario_truncated_is_parse_error() {
        let s = synthetic_scenario(3, 2);
        let mut text = scenario_to_string(&s).unwrap();
        text.truncate(text.len() / 2);
        match scenario_from_str(&text) {
            Err(SceneError::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn scenario_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.gpds");
        let s = synthetic_scenario(5, 2);
        save_scenario(&s, &path).unwrap();
        assert_eq!(load_scenario(&path).unwrap(), s);
    }

    proptest! {
        #[test]
        fn heading_normalize_idempotent(theta in -50.0f64..50.0) {
            let n = normalize_heading(theta);
            prop_assert!(n > -std::f64::consts::PI - 1e-15 && n <= std::f64::consts::PI + 1e-15);
            prop_assert!((normalize_heading(n) - n).abs() < 1e-12);
        }

        #[test]
        fn resample_preserves_tame_arc_length(seed in 0u64..500) {
            // tame polylines: segment length >= spacing, turns <= 30 degrees
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spacing = 0.5;
            let mut pts = vec![Point::new(0.0, 0.0)];
            let mut heading: f64 = 0.0;
            for _ in 0..rng.gen_range(2..10usize) {
                heading += rng.gen_range(-0.5..0.5);
                let len = rng.gen_range(spacing..3.0 * spacing);
                let last = *pts.last().unwrap();
                pts.push(Point::new(
                    last.x + len * heading.cos(),
                    last.y + len * heading.sin(),
                ));
            }
            let line = Polyline::new(pts).unwrap();
            let r = resample_polyline(&line, spacing).unwrap();
            prop_assert!((line.arc_length() - r.arc_length()).abs() <= spacing / 2.0);
            for w in r.points.windows(2) {
                prop_assert!(w[0].dist(w[1]) <= spacing + 1e-9);
            }
        }
    }
}
