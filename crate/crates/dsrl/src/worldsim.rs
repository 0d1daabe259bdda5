//! Synthetic top-down driving environment.
//!
//! A corridor runs along +y. The ego vehicle accelerates, brakes and steers;
//! pedestrians cross the road, other vehicles travel the same direction, and
//! static obstacles sit near the edges. Frames are rendered top-down with a
//! fixed palette so object kinds are recoverable from pixels, and the
//! environment can emit exact per-kind confidence maps for supervision.
//!
//! Everything is driven by a seeded stream: identical seed and action
//! sequence give bit-identical trajectories, rewards and frames.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

/// World-units width of the whole map (and of the rendered viewport).
pub const WORLD_WIDTH: f64 = 24.0;
/// Road occupies x in [ROAD_LEFT, ROAD_RIGHT].
pub const ROAD_LEFT: f64 = 4.0;
pub const ROAD_RIGHT: f64 = 20.0;
/// Length of the corridor; generously beyond any reachable distance.
pub const WORLD_LENGTH: f64 = 4000.0;
/// Viewport height in world units; ego sits 20% above the bottom edge.
pub const VIEW_UNITS: f64 = 24.0;
pub const EGO_VIEW_FRACTION: f64 = 0.2;

pub const EGO_RADIUS: f64 = 1.0;
pub const MAX_SPEED: f64 = 1.8;
pub const STEER_RATE: f64 = 0.15;
pub const ACCEL_RATE: f64 = 0.3;
pub const BRAKE_RATE: f64 = 0.5;
pub const MAX_HEADING: f64 = 1.0;

/// Render palette (r, g, b). Exact values; the mask oracle matches on them.
pub const COLOR_OFFROAD: [u8; 3] = [12, 52, 12];
pub const COLOR_ROAD: [u8; 3] = [46, 46, 46];
pub const COLOR_EDGE: [u8; 3] = [160, 160, 160];
pub const COLOR_DASH: [u8; 3] = [200, 200, 200];
pub const COLOR_PEDESTRIAN: [u8; 3] = [230, 40, 40];
pub const COLOR_VEHICLE: [u8; 3] = [40, 200, 60];
pub const COLOR_STATIC: [u8; 3] = [235, 220, 60];
pub const COLOR_EGO: [u8; 3] = [60, 90, 235];

/// Logit magnitude for ground-truth confidence maps; sigmoid(6) ~ 0.9975.
pub const CONFIDENCE_MARGIN: f64 = 6.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already finished; call reset before stepping")]
    EpisodeFinished,
    #[error("unknown object kind: {0}")]
    UnknownKind(String),
}

/// Obstacle category.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ObjectKind {
    Pedestrian,
    Vehicle,
    Static,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 3] = [
        ObjectKind::Pedestrian,
        ObjectKind::Vehicle,
        ObjectKind::Static,
    ];

    /// Canonical phrase used by the semantics oracle.
    pub fn phrase(self) -> &'static str {
        match self {
            ObjectKind::Pedestrian => "pedestrian",
            ObjectKind::Vehicle => "vehicle",
            ObjectKind::Static => "static obstacle",
        }
    }

    pub fn from_phrase(s: &str) -> Result<Self, EnvError> {
        match s {
            "pedestrian" => Ok(ObjectKind::Pedestrian),
            "vehicle" => Ok(ObjectKind::Vehicle),
            "static obstacle" => Ok(ObjectKind::Static),
            other => Err(EnvError::UnknownKind(other.to_string())),
        }
    }

    pub fn color(self) -> [u8; 3] {
        match self {
            ObjectKind::Pedestrian => COLOR_PEDESTRIAN,
            ObjectKind::Vehicle => COLOR_VEHICLE,
            ObjectKind::Static => COLOR_STATIC,
        }
    }

    pub fn as_index(self) -> usize {
        match self {
            ObjectKind::Pedestrian => 0,
            ObjectKind::Vehicle => 1,
            ObjectKind::Static => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Scenario presets mirroring jaywalking, slow same-direction rider, and
/// multi-lane highway archetypes.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub enum Scenario {
    JW,
    HB,
    HW,
}

impl Scenario {
    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "JW" => Some(Scenario::JW),
            "HB" => Some(Scenario::HB),
            "HW" => Some(Scenario::HW),
            _ => None,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Scenario::JW => "JW",
            Scenario::HB => "HB",
            Scenario::HW => "HW",
        }
    }
}

/// Continuous control: steer and accelerate/brake, both in [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub steer: f64,
    pub accel: f64,
}

impl Action {
    pub fn new(steer: f64, accel: f64) -> Self {
        Self {
            steer: steer.clamp(-1.0, 1.0),
            accel: accel.clamp(-1.0, 1.0),
        }
    }
}

/// One rendered RGB frame, row-major `[h][w][3]`, shared cheaply.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub resolution: usize,
    pub data: Arc<Vec<u8>>,
}

impl Frame {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.resolution + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Pixels scaled to [0, 1], flattened channel-first `[3, h, w]`.
    pub fn to_channels_f64(&self) -> Vec<f64> {
        let res = self.resolution;
        let mut out = vec![0.0; 3 * res * res];
        for r in 0..res {
            for c in 0..res {
                let p = self.pixel(r, c);
                for ch in 0..3 {
                    out[ch * res * res + r * res + c] = p[ch] as f64 / 255.0;
                }
            }
        }
        out
    }
}

/// The agent's observation: the three most recent frames (oldest first) plus
/// the step index. At episode start the initial frame fills the stack.
#[derive(Clone, Debug)]
pub struct Observation {
    pub frames: [Frame; 3],
    pub step_index: u32,
}

impl Observation {
    pub fn latest(&self) -> &Frame {
        &self.frames[2]
    }

    pub fn resolution(&self) -> usize {
        self.frames[2].resolution
    }
}

/// Per-step diagnostics; the reward decomposes exactly over these fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub distance_delta: f64,
    pub crash_intensity: f64,
    pub steer_used: f64,
    pub brake_used: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub id: u32,
    pub kind: ObjectKind,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
}

/// Full simulator state; everything needed to reproduce the trajectory.
#[derive(Clone, Debug)]
pub struct WorldState {
    pub ego_pos: [f64; 2],
    pub ego_heading: f64,
    pub ego_speed: f64,
    pub obstacles: Vec<Obstacle>,
    pub step_index: u32,
    pub cumulative_crash: f64,
    pub done: bool,
}

/// Environment configuration; reward constants and termination rules.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub resolution: usize,
    pub max_steps: u32,
    pub k_progress: f64,
    pub k_crash: f64,
    pub k_steer: f64,
    pub crash_terminal: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::JW,
            resolution: 64,
            max_steps: 200,
            k_progress: 1.0,
            k_crash: 0.01,
            k_steer: 0.05,
            crash_terminal: 50.0,
        }
    }
}

pub struct World {
    pub cfg: EnvConfig,
    state: WorldState,
    rng: ChaCha8Rng,
    frame_stack: Vec<Frame>,
}

impl World {
    pub fn new(cfg: EnvConfig) -> Self {
        let mut w = Self {
            cfg,
            state: WorldState {
                ego_pos: [0.0, 0.0],
                ego_heading: 0.0,
                ego_speed: 0.0,
                obstacles: Vec::new(),
                step_index: 0,
                cumulative_crash: 0.0,
                done: true,
            },
            rng: ChaCha8Rng::seed_from_u64(0),
            frame_stack: Vec::new(),
        };
        w.reset(0);
        w
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Begin a fresh episode. The obstacle layout is a pure function of the
    /// seed and scenario preset.
    pub fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let obstacles = spawn_obstacles(self.cfg.scenario, &mut self.rng);
        self.state = WorldState {
            ego_pos: [(ROAD_LEFT + ROAD_RIGHT) / 2.0, 12.0],
            ego_heading: 0.0,
            ego_speed: 0.0,
            obstacles,
            step_index: 0,
            cumulative_crash: 0.0,
            done: false,
        };
        let frame = self.render();
        self.frame_stack = vec![frame.clone(), frame.clone(), frame];
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        Observation {
            frames: [
                self.frame_stack[0].clone(),
                self.frame_stack[1].clone(),
                self.frame_stack[2].clone(),
            ],
            step_index: self.state.step_index,
        }
    }

    /// Advance one step. Errors if the episode has already finished.
    pub fn step(&mut self, action: Action) -> Result<(Observation, f64, bool, StepInfo), EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeFinished);
        }
        let action = Action::new(action.steer, action.accel);

        // Ego kinematics.
        let s = &mut self.state;
        s.ego_heading = (s.ego_heading + action.steer * STEER_RATE).clamp(-MAX_HEADING, MAX_HEADING);
        let rate = if action.accel >= 0.0 { ACCEL_RATE } else { BRAKE_RATE };
        s.ego_speed = (s.ego_speed + action.accel * rate).clamp(0.0, MAX_SPEED);
        let (dx, dy) = (
            s.ego_speed * s.ego_heading.sin(),
            s.ego_speed * s.ego_heading.cos(),
        );
        s.ego_pos[0] = (s.ego_pos[0] + dx).clamp(ROAD_LEFT + EGO_RADIUS, ROAD_RIGHT - EGO_RADIUS);
        s.ego_pos[1] = (s.ego_pos[1] + dy).clamp(0.0, WORLD_LENGTH);
        let distance_delta = dy;

        // Obstacle kinematics: constant velocity; pedestrians wrap across the
        // map width so the population stays fixed.
        for ob in &mut s.obstacles {
            ob.pos[0] += ob.vel[0];
            ob.pos[1] += ob.vel[1];
            if ob.kind == ObjectKind::Pedestrian {
                if ob.pos[0] < 0.0 {
                    ob.pos[0] += WORLD_WIDTH;
                } else if ob.pos[0] > WORLD_WIDTH {
                    ob.pos[0] -= WORLD_WIDTH;
                }
            }
        }

        // Collision: penetration depth times relative speed, summed.
        let ego_vel = [dx, dy];
        let mut crash_intensity = 0.0;
        for ob in &s.obstacles {
            let d = ((s.ego_pos[0] - ob.pos[0]).powi(2) + (s.ego_pos[1] - ob.pos[1]).powi(2)).sqrt();
            let pen = (EGO_RADIUS + ob.radius) - d;
            if pen > 0.0 {
                let rel =
                    ((ego_vel[0] - ob.vel[0]).powi(2) + (ego_vel[1] - ob.vel[1]).powi(2)).sqrt();
                crash_intensity += pen * rel;
            }
        }
        s.cumulative_crash += crash_intensity;
        s.step_index += 1;

        let done = s.cumulative_crash >= self.cfg.crash_terminal || s.step_index >= self.cfg.max_steps;
        s.done = done;

        let info = StepInfo {
            distance_delta,
            crash_intensity,
            steer_used: action.steer,
            brake_used: if action.accel < 0.0 { 1.0 } else { 0.0 },
        };
        let reward = self.cfg.k_progress * info.distance_delta
            - self.cfg.k_crash * info.crash_intensity
            - self.cfg.k_steer * info.steer_used.abs();

        let frame = self.render();
        self.frame_stack.remove(0);
        self.frame_stack.push(frame);
        Ok((self.observation(), reward, done, info))
    }

    /// Exact per-kind confidence logits for the current view: strongly
    /// positive on pixels covered by that kind, strongly negative elsewhere.
    pub fn ground_truth_confidence(&self, kind: ObjectKind) -> Array2<f64> {
        let res = self.cfg.resolution;
        let mut map = Array2::from_elem((res, res), -CONFIDENCE_MARGIN);
        let view = self.viewport();
        for ob in &self.state.obstacles {
            if ob.kind != kind {
                continue;
            }
            stamp_disk_value(&mut map, &view, ob.pos, ob.radius, CONFIDENCE_MARGIN, res);
        }
        map
    }

    /// Same as [`ground_truth_confidence`] but keyed by canonical phrase;
    /// unknown phrases are an error.
    pub fn ground_truth_confidence_named(&self, phrase: &str) -> Result<Array2<f64>, EnvError> {
        Ok(self.ground_truth_confidence(ObjectKind::from_phrase(phrase)?))
    }

    fn viewport(&self) -> Viewport {
        Viewport {
            y_top: self.state.ego_pos[1] + VIEW_UNITS * (1.0 - EGO_VIEW_FRACTION),
            units_per_px: VIEW_UNITS / self.cfg.resolution as f64,
        }
    }

    /// Render the current state into an RGB frame.
    pub fn render(&self) -> Frame {
        let res = self.cfg.resolution;
        let view = self.viewport();
        let mut data = vec![0u8; res * res * 3];

        // Background, road, edge lines, center dashes.
        for r in 0..res {
            let wy = view.y_top - (r as f64 + 0.5) * view.units_per_px;
            for c in 0..res {
                let wx = (c as f64 + 0.5) * view.units_per_px;
                let color = if !(ROAD_LEFT..=ROAD_RIGHT).contains(&wx) {
                    COLOR_OFFROAD
                } else if wx - ROAD_LEFT < 0.4 || ROAD_RIGHT - wx < 0.4 {
                    COLOR_EDGE
                } else if (wx - WORLD_WIDTH / 2.0).abs() < 0.3 && wy.rem_euclid(6.0) < 3.0 {
                    COLOR_DASH
                } else {
                    COLOR_ROAD
                };
                let i = (r * res + c) * 3;
                data[i..i + 3].copy_from_slice(&color);
            }
        }

        // Obstacles (statics below movers), then the ego on top.
        let mut order: Vec<&Obstacle> = self.state.obstacles.iter().collect();
        order.sort_by_key(|ob| (ob.kind != ObjectKind::Static) as u8);
        for ob in order {
            stamp_disk_rgb(&mut data, &view, ob.pos, ob.radius, ob.kind.color(), res);
        }
        stamp_disk_rgb(&mut data, &view, self.state.ego_pos, EGO_RADIUS, COLOR_EGO, res);

        Frame {
            resolution: res,
            data: Arc::new(data),
        }
    }

    /// Restore a snapshot (checkpoint resume). The frame stack is re-derived
    /// from `stack_frames`.
    pub fn restore(&mut self, state: WorldState, rng: ChaCha8Rng, stack_frames: Vec<Frame>) {
        assert_eq!(stack_frames.len(), 3, "frame stack must hold 3 frames");
        self.state = state;
        self.rng = rng;
        self.frame_stack = stack_frames;
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn frame_stack(&self) -> &[Frame] {
        &self.frame_stack
    }
}

struct Viewport {
    y_top: f64,
    units_per_px: f64,
}

fn pixel_world(view: &Viewport, row: usize, col: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) * view.units_per_px,
        view.y_top - (row as f64 + 0.5) * view.units_per_px,
    )
}

fn disk_pixel_bounds(view: &Viewport, pos: [f64; 2], radius: f64, res: usize) -> Option<(usize, usize, usize, usize)> {
    let c_lo = ((pos[0] - radius) / view.units_per_px - 1.0).floor().max(0.0) as usize;
    let c_hi = (((pos[0] + radius) / view.units_per_px) + 1.0).ceil() as isize;
    let r_lo = (((view.y_top - (pos[1] + radius)) / view.units_per_px) - 1.0).floor().max(0.0) as usize;
    let r_hi = (((view.y_top - (pos[1] - radius)) / view.units_per_px) + 1.0).ceil() as isize;
    if c_hi < 0 || r_hi < 0 || c_lo >= res || r_lo >= res {
        return None;
    }
    Some((
        r_lo.min(res),
        (r_hi.max(0) as usize).min(res),
        c_lo.min(res),
        (c_hi.max(0) as usize).min(res),
    ))
}

fn stamp_disk_rgb(data: &mut [u8], view: &Viewport, pos: [f64; 2], radius: f64, color: [u8; 3], res: usize) {
    let Some((r0, r1, c0, c1)) = disk_pixel_bounds(view, pos, radius, res) else {
        return;
    };
    for r in r0..r1 {
        for c in c0..c1 {
            let (wx, wy) = pixel_world(view, r, c);
            if (wx - pos[0]).powi(2) + (wy - pos[1]).powi(2) <= radius * radius {
                let i = (r * res + c) * 3;
                data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

fn stamp_disk_value(map: &mut Array2<f64>, view: &Viewport, pos: [f64; 2], radius: f64, value: f64, res: usize) {
    let Some((r0, r1, c0, c1)) = disk_pixel_bounds(view, pos, radius, res) else {
        return;
    };
    for r in r0..r1 {
        for c in c0..c1 {
            let (wx, wy) = pixel_world(view, r, c);
            if (wx - pos[0]).powi(2) + (wy - pos[1]).powi(2) <= radius * radius {
                map[[r, c]] = value;
            }
        }
    }
}

fn spawn_obstacles(scenario: Scenario, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let mut obstacles = Vec::new();
    let mut id = 0u32;
    let mut push = |obstacles: &mut Vec<Obstacle>, kind, pos, vel, radius| {
        obstacles.push(Obstacle {
            id: {
                id += 1;
                id
            },
            kind,
            pos,
            vel,
            radius,
        });
    };
    match scenario {
        Scenario::JW => {
            // Crossing pedestrians spaced along the corridor; the first one
            // lands inside the initial viewport.
            let mut y = rng.gen_range(18.0..28.0);
            for _ in 0..16 {
                let x = rng.gen_range(ROAD_LEFT..ROAD_RIGHT);
                let speed = rng.gen_range(0.25..0.5);
                let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                push(
                    &mut obstacles,
                    ObjectKind::Pedestrian,
                    [x, y],
                    [dir * speed, 0.0],
                    1.2,
                );
                y += rng.gen_range(16.0..28.0);
            }
            // A few parked blocks near the edges.
            let mut sy = 40.0;
            for i in 0..6 {
                sy += rng.gen_range(40.0..70.0);
                let x = if i % 2 == 0 { ROAD_LEFT + 2.0 } else { ROAD_RIGHT - 2.0 };
                push(&mut obstacles, ObjectKind::Static, [x, sy], [0.0, 0.0], 1.5);
            }
        }
        Scenario::HB => {
            // Slow same-direction riders plus occasional parked blocks.
            let mut y = rng.gen_range(20.0..30.0);
            for _ in 0..8 {
                let x = rng.gen_range(ROAD_LEFT + 2.0..ROAD_RIGHT - 2.0);
                let vy = rng.gen_range(0.3..0.6);
                push(&mut obstacles, ObjectKind::Vehicle, [x, y], [0.0, vy], 1.0);
                y += rng.gen_range(26.0..44.0);
            }
            let mut sy = 60.0;
            for i in 0..4 {
                sy += rng.gen_range(60.0..90.0);
                let x = if i % 2 == 0 { ROAD_LEFT + 2.0 } else { ROAD_RIGHT - 2.0 };
                push(&mut obstacles, ObjectKind::Static, [x, sy], [0.0, 0.0], 1.5);
            }
        }
        Scenario::HW => {
            // Four lanes of same-direction traffic.
            let lanes = [6.0, 10.0, 14.0, 18.0];
            let mut y = rng.gen_range(18.0..26.0);
            for i in 0..14 {
                let lane = lanes[i % lanes.len()];
                let vy = rng.gen_range(0.4..1.0);
                push(&mut obstacles, ObjectKind::Vehicle, [lane, y], [0.0, vy], 1.8);
                y += rng.gen_range(14.0..26.0);
            }
        }
    }
    obstacles
}
