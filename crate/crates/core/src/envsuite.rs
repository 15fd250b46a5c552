//! Planar manipulation tasks with kinematic dynamics, flat-shaded rendering and
//! scripted demonstrators.
//!
//! The workspace is the unit square. The agent is a point effector with a binary
//! gripper; actions are `[vx, vy, aux.., grip]` in `[-1, 1]`, scaled by the
//! embodiment's gain. Auxiliary dimensions exist only to vary the action width
//! across embodiments and have no effect.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::Episode;
use crate::rng::{normal, seeded_rng, RngStream};
use crate::types::{Image, ObservationFrame};

pub const VIEWS: [&str; 2] = ["front", "top"];
pub const PROPRIO_DIM: usize = 4;
pub const DEFAULT_STEP_LIMIT: usize = 400;
pub const RENDER_SIZE: usize = 96;
/// Pixel grid the scene layout (margins, camera shifts) is defined on; renders scale from it.
const LAYOUT_SIZE: usize = 64;

const LO: f64 = 0.05;
const HI: f64 = 0.95;
const GRASP_RADIUS: f64 = 0.045;
const PUSH_CONTACT: f64 = 0.07;
const RAIL_LEN: f64 = 0.3;
const DEMO_NOISE: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("action has {got} dims, embodiment `{embodiment}` expects {expected}")]
    ActionDim { got: usize, expected: usize, embodiment: String },
    #[error("unknown view `{0}`")]
    UnknownView(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown embodiment `{0}`")]
    UnknownEmbodiment(String),
    #[error("demonstrator failed on {task} after {attempts} attempts from seed {seed}")]
    DemoFailed { task: String, seed: u64, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Reach,
    Push,
    PickPlace,
    Press,
    OpenSlider,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [TaskId::Reach, TaskId::Push, TaskId::PickPlace, TaskId::Press, TaskId::OpenSlider];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::Push => "push",
            TaskId::PickPlace => "pick_place",
            TaskId::Press => "press",
            TaskId::OpenSlider => "open_slider",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EnvError> {
        Self::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }

    fn templates(self) -> [&'static str; 2] {
        match self {
            TaskId::Reach => ["reach the green target", "reach toward the green marker"],
            TaskId::Push => ["push the red block onto the green zone", "push the red block to the goal"],
            TaskId::PickPlace => {
                ["pick up the blue ball and place it in the green zone", "pick the blue ball and put it on the goal"]
            }
            TaskId::Press => ["press the yellow button", "press down on the yellow button"],
            TaskId::OpenSlider => ["open the slider by pulling its handle", "open the sliding door"],
        }
    }
}

/// Per-task success parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    /// Success radius around the goal (agent, block or ball centre).
    pub radius: f64,
    /// Consecutive steps the success condition must hold.
    pub hold: usize,
    pub step_limit: usize,
}

impl TaskSpec {
    pub fn new(task: TaskId) -> Self {
        let (radius, hold) = match task {
            TaskId::Reach => (0.05, 8),
            TaskId::Press => (0.05, 6),
            TaskId::Push => (0.06, 1),
            TaskId::PickPlace => (0.06, 1),
            TaskId::OpenSlider => (0.8, 1),
        };
        Self { task, radius, hold, step_limit: DEFAULT_STEP_LIMIT }
    }

    pub fn with_step_limit(mut self, step_limit: usize) -> Self {
        self.step_limit = step_limit;
        self
    }

    pub fn instruction(&self, seed: u64) -> String {
        self.task.templates()[(seed % 2) as usize].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embodiment {
    pub id: String,
    pub action_dim: usize,
    /// Per-axis displacement for a unit action.
    pub gain: [f64; 2],
    /// `true` if a positive grip command closes the gripper.
    pub grip_positive_closes: bool,
    /// Horizontal camera offset in pixels for the front view.
    pub camera_shift: i32,
}

impl Embodiment {
    /// The three built-in robots: `arm7` (the downstream robot), `arm5`, `arm4`.
    pub fn preset(id: &str) -> Result<Self, EnvError> {
        let e = match id {
            "arm7" => {
                Embodiment { id: id.into(), action_dim: 7, gain: [0.03, 0.03], grip_positive_closes: true, camera_shift: 0 }
            }
            "arm5" => {
                Embodiment { id: id.into(), action_dim: 5, gain: [0.025, 0.035], grip_positive_closes: true, camera_shift: 2 }
            }
            "arm4" => {
                Embodiment { id: id.into(), action_dim: 4, gain: [0.035, 0.035], grip_positive_closes: false, camera_shift: -2 }
            }
            _ => return Err(EnvError::UnknownEmbodiment(id.to_string())),
        };
        Ok(e)
    }

    pub fn presets() -> Vec<Self> {
        ["arm7", "arm5", "arm4"].iter().map(|i| Self::preset(i).unwrap()).collect()
    }

    fn grip_index(&self) -> usize {
        self.action_dim - 1
    }

    fn closes(&self, grip: f64) -> bool {
        if self.grip_positive_closes {
            grip > 0.0
        } else {
            grip < 0.0
        }
    }

    fn grip_command(&self, close: bool) -> f64 {
        if close == self.grip_positive_closes {
            1.0
        } else {
            -1.0
        }
    }
}

/// Scripted-skill labels attached to every demonstration frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Skill {
    Approach = 0,
    Grasp = 1,
    Transport = 2,
    Release = 3,
    Push = 4,
    Press = 5,
    Pull = 6,
    Hold = 7,
}

impl Skill {
    pub const NAMES: [&'static str; 8] = ["approach", "grasp", "transport", "release", "push", "press", "pull", "hold"];

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub spec: TaskSpec,
    pub embodiment: Embodiment,
    pub seed: u64,
    pub agent: [f64; 2],
    pub gripper_closed: bool,
    /// Block, ball, button, or slider handle, depending on the task.
    pub object: [f64; 2],
    /// Target, goal zone, or rail start.
    pub goal: [f64; 2],
    pub attached: bool,
    /// Slider opening in `[0, 1]`.
    pub slider: f64,
    pub hold_count: usize,
    pub elapsed: usize,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sample_point(rng: &mut RngStream, lo: f64, hi: f64) -> [f64; 2] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl EnvState {
    pub fn task(&self) -> TaskId {
        self.spec.task
    }

    pub fn done(&self) -> bool {
        self.success || self.elapsed >= self.spec.step_limit
    }

    /// `[x, y, gripper (±1), holding (0/1)]`.
    pub fn proprio(&self) -> Vec<f64> {
        vec![self.agent[0], self.agent[1], if self.gripper_closed { 1.0 } else { -1.0 }, if self.attached { 1.0 } else { 0.0 }]
    }

    fn handle(&self) -> [f64; 2] {
        [self.goal[0] + self.slider * RAIL_LEN, self.goal[1]]
    }

    fn in_bounds(&self) -> bool {
        let ok = |p: [f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
        ok(self.agent) && ok(self.object) && ok(self.goal)
    }

    fn success_condition(&self) -> bool {
        let r = self.spec.radius;
        match self.spec.task {
            TaskId::Reach => dist(self.agent, self.goal) < r,
            TaskId::Press => dist(self.agent, self.object) < r && self.gripper_closed,
            TaskId::Push => dist(self.object, self.goal) < r,
            TaskId::PickPlace => dist(self.object, self.goal) < r && !self.attached && !self.gripper_closed,
            TaskId::OpenSlider => self.slider >= r,
        }
    }
}

/// Randomized placement for `seed`; the same seed gives the same layout for every embodiment.
pub fn reset(spec: &TaskSpec, embodiment: &Embodiment, seed: u64) -> (EnvState, ObservationFrame) {
    let state = initial_state(spec, embodiment, seed);
    let frame = observe(&state, &VIEWS);
    (state, frame)
}

pub fn initial_state(spec: &TaskSpec, embodiment: &Embodiment, seed: u64) -> EnvState {
    let mut rng = seeded_rng(seed, &alloc::format!("envsuite/reset/{}", spec.task.as_str()));
    let (agent, object, goal) = loop {
        let agent = sample_point(&mut rng, 0.15, 0.85);
        let (object, goal) = match spec.task {
            TaskId::OpenSlider => {
                let start = [rng.random_range(0.15..0.45), rng.random_range(0.2..0.8)];
                (start, start)
            }
            _ => (sample_point(&mut rng, 0.2, 0.8), sample_point(&mut rng, 0.2, 0.8)),
        };
        let ok = match spec.task {
            TaskId::Reach => dist(agent, goal) > 0.35,
            TaskId::Press => dist(agent, object) > 0.3,
            TaskId::Push | TaskId::PickPlace => {
                dist(agent, object) > 0.2 && dist(object, goal) > 0.25 && dist(agent, goal) > 0.15
            }
            TaskId::OpenSlider => dist(agent, object) > 0.2 && (agent[1] - object[1]).abs() > 0.08,
        };
        if ok {
            break (agent, object, goal);
        }
    };
    EnvState {
        spec: spec.clone(),
        embodiment: embodiment.clone(),
        seed,
        agent,
        gripper_closed: false,
        object,
        goal,
        attached: false,
        slider: 0.0,
        hold_count: 0,
        elapsed: 0,
        success: false,
    }
}

/// Applies one native-width action without rendering.
pub fn advance(state: &mut EnvState, action: &[f64]) -> Result<(), EnvError> {
    let emb = &state.embodiment;
    if action.len() != emb.action_dim {
        return Err(EnvError::ActionDim { got: action.len(), expected: emb.action_dim, embodiment: emb.id.clone() });
    }
    let closed = emb.closes(action[emb.grip_index()]);
    let prev = state.agent;
    let mut next = prev;
    for k in 0..2 {
        next[k] = (prev[k] + action[k].clamp(-1.0, 1.0) * emb.gain[k]).clamp(LO, HI);
    }
    let delta = [next[0] - prev[0], next[1] - prev[1]];
    state.agent = next;
    state.gripper_closed = closed;
    match state.spec.task {
        TaskId::PickPlace => {
            if closed && (state.attached || dist(next, state.object) < GRASP_RADIUS) {
                state.attached = true;
                state.object = next;
            } else {
                state.attached = false;
            }
        }
        TaskId::OpenSlider => {
            if closed && (state.attached || dist(next, state.handle()) < GRASP_RADIUS) {
                state.attached = true;
                state.slider = ((next[0] - state.goal[0]) / RAIL_LEN).clamp(0.0, 1.0);
            } else {
                state.attached = false;
            }
            state.object = state.handle();
        }
        TaskId::Push => {
            let to_block = [state.object[0] - prev[0], state.object[1] - prev[1]];
            let toward = delta[0] * to_block[0] + delta[1] * to_block[1] > 0.0;
            if closed && toward && dist(next, state.object) < PUSH_CONTACT {
                for k in 0..2 {
                    state.object[k] = (state.object[k] + delta[k]).clamp(LO, HI);
                }
            }
        }
        TaskId::Reach | TaskId::Press => {}
    }
    if state.success_condition() {
        state.hold_count += 1;
    } else {
        state.hold_count = 0;
    }
    state.elapsed += 1;
    if state.hold_count >= state.spec.hold {
        state.success = true;
    }
    debug_assert!(state.in_bounds());
    Ok(())
}

/// Applies one action and renders every view. Returns `(frame, success, done)`.
pub fn step(state: &mut EnvState, action: &[f64]) -> Result<(ObservationFrame, bool, bool), EnvError> {
    advance(state, action)?;
    Ok((observe(state, &VIEWS), state.success, state.done()))
}

/// Images for the requested views plus robot state; never object poses.
pub fn observe(state: &EnvState, views: &[&str]) -> ObservationFrame {
    ObservationFrame {
        images: views.iter().map(|v| (v.to_string(), Arc::new(render(state, v, RENDER_SIZE).expect("known view")))).collect(),
        proprio: Some(state.proprio()),
        embodiment_id: state.embodiment.id.clone(),
        task_instruction: state.spec.instruction(state.seed),
    }
}

const MARGIN: f64 = 6.0;

/// Pixel centre to workspace coordinates; `None` outside the floor.
fn unproject(view: &str, px: f64, py: f64, size: usize, shift: i32) -> Option<[f64; 2]> {
    let span = size as f64 - 2.0 * MARGIN;
    match view {
        "top" => {
            let x = (px - MARGIN) / span;
            let y = 1.0 - (py - MARGIN) / span;
            ((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)).then_some([x, y])
        }
        _ => {
            let u = (px - shift as f64 - MARGIN) / span;
            let v = 1.0 - (py - MARGIN) / span;
            let y = (v - 0.05) / 0.9;
            if !(0.0..=1.0).contains(&y) {
                return None;
            }
            let s = 1.0 - 0.15 * y;
            let x = 0.5 + (u - 0.5) / s;
            (0.0..=1.0).contains(&x).then_some([x, y])
        }
    }
}

fn shade(state: &EnvState, p: [f64; 2], view: &str) -> [u8; 3] {
    let agent_col = if state.gripper_closed { [20, 20, 20] } else { [250, 250, 250] };
    let in_disc = |c: [f64; 2], r: f64| dist(p, c) < r;
    let in_box = |c: [f64; 2], h: f64| (p[0] - c[0]).abs() < h && (p[1] - c[1]).abs() < h;
    if in_disc(state.agent, 0.045) {
        return agent_col;
    }
    match state.spec.task {
        TaskId::Reach => {
            if in_disc(state.goal, 0.06) {
                return [60, 180, 75];
            }
        }
        TaskId::Press => {
            if in_disc(state.object, 0.06) {
                return [230, 200, 40];
            }
        }
        TaskId::Push => {
            if in_box(state.object, 0.045) {
                return [220, 50, 50];
            }
            if in_disc(state.goal, 0.07) {
                return [60, 180, 75];
            }
        }
        TaskId::PickPlace => {
            if in_disc(state.object, 0.045) {
                return [50, 90, 220];
            }
            if in_disc(state.goal, 0.07) {
                return [60, 180, 75];
            }
        }
        TaskId::OpenSlider => {
            let h = state.handle();
            if in_box(h, 0.04) {
                return [240, 140, 30];
            }
            let (x0, y0) = (state.goal[0], state.goal[1]);
            if p[0] >= x0 - 0.02 && p[0] <= x0 + RAIL_LEN + 0.02 && (p[1] - y0).abs() < 0.015 {
                return [90, 90, 90];
            }
        }
    }
    if view == "top" {
        [200, 200, 200]
    } else {
        let g = (150.0 + 70.0 * (1.0 - p[1])) as u8;
        [g, g, g]
    }
}

pub fn render(state: &EnvState, view: &str, size: usize) -> Result<Image, EnvError> {
    if !VIEWS.contains(&view) {
        return Err(EnvError::UnknownView(view.to_string()));
    }
    let shift = if view == "front" { state.embodiment.camera_shift } else { 0 };
    let scale = size as f64 / LAYOUT_SIZE as f64;
    let mut img = Image::filled(size, size, [40, 40, 40]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / scale, (y as f64 + 0.5) / scale);
            if let Some(p) = unproject(view, px, py, LAYOUT_SIZE, shift) {
                img.set_pixel(y, x, shade(state, p, view));
            }
        }
    }
    Ok(img)
}

/// Waypoint controller used by the demonstrator.
struct Demonstrator {
    phase: usize,
    timer: usize,
}

fn toward(state: &EnvState, wp: [f64; 2]) -> [f64; 2] {
    let g = state.embodiment.gain;
    [(0.6 * (wp[0] - state.agent[0]) / g[0]).clamp(-1.0, 1.0), (0.6 * (wp[1] - state.agent[1]) / g[1]).clamp(-1.0, 1.0)]
}

impl Demonstrator {
    /// Returns `(velocity, close gripper, skill)`.
    fn act(&mut self, s: &EnvState) -> ([f64; 2], bool, Skill) {
        const NEAR: f64 = 0.015;
        let stay = [0.0, 0.0];
        match s.spec.task {
            TaskId::Reach => {
                if self.phase == 0 && dist(s.agent, s.goal) < NEAR {
                    self.phase = 1;
                }
                let skill = if self.phase == 0 { Skill::Approach } else { Skill::Hold };
                (toward(s, s.goal), false, skill)
            }
            TaskId::Press => {
                if self.phase == 0 && dist(s.agent, s.object) < NEAR {
                    self.phase = 1;
                }
                if self.phase == 0 {
                    (toward(s, s.object), false, Skill::Approach)
                } else {
                    (toward(s, s.object), true, Skill::Press)
                }
            }
            TaskId::Push => {
                let dir = {
                    let d = [s.goal[0] - s.object[0], s.goal[1] - s.object[1]];
                    let n = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-9);
                    [d[0] / n, d[1] / n]
                };
                let pre = [s.object[0] - 0.06 * dir[0], s.object[1] - 0.06 * dir[1]];
                if self.phase == 0 && dist(s.agent, pre) < 0.008 {
                    self.phase = 1;
                }
                if self.phase == 0 {
                    (toward(s, pre), false, Skill::Approach)
                } else {
                    // the block moves with the agent, so steer by the block's offset to the goal
                    let target = [s.agent[0] + s.goal[0] - s.object[0], s.agent[1] + s.goal[1] - s.object[1]];
                    (toward(s, target), true, Skill::Push)
                }
            }
            TaskId::PickPlace => match self.phase {
                0 => {
                    if dist(s.agent, s.object) < NEAR {
                        self.phase = 1;
                    }
                    (toward(s, s.object), false, Skill::Approach)
                }
                1 => {
                    self.timer += 1;
                    if self.timer >= 3 {
                        self.phase = 2;
                    }
                    (stay, true, Skill::Grasp)
                }
                2 => {
                    if dist(s.agent, s.goal) < NEAR {
                        self.phase = 3;
                    }
                    (toward(s, s.goal), true, Skill::Transport)
                }
                _ => (stay, false, Skill::Release),
            },
            TaskId::OpenSlider => {
                let h = s.handle();
                match self.phase {
                    0 => {
                        if dist(s.agent, h) < NEAR {
                            self.phase = 1;
                        }
                        (toward(s, h), false, Skill::Approach)
                    }
                    1 => {
                        self.timer += 1;
                        if self.timer >= 3 {
                            self.phase = 2;
                        }
                        (stay, true, Skill::Grasp)
                    }
                    _ => {
                        let end = [s.goal[0] + 0.95 * RAIL_LEN, s.goal[1]];
                        (toward(s, end), true, Skill::Pull)
                    }
                }
            }
        }
    }
}

fn compose_action(emb: &Embodiment, v: [f64; 2], close: bool, noise: &mut RngStream) -> Vec<f64> {
    let mut a = vec![0.0; emb.action_dim];
    a[0] = v[0];
    a[1] = v[1];
    a[emb.grip_index()] = emb.grip_command(close);
    for x in a.iter_mut() {
        *x = (*x + DEMO_NOISE * normal(noise)).clamp(-1.0, 1.0);
    }
    a
}

fn record(state: &EnvState, views: &[&str], ep: &mut Episode) {
    let frame = observe(state, views);
    for (slot, (_, img)) in ep.images.iter_mut().zip(frame.images) {
        slot.push(img);
    }
    ep.proprio.push(state.proprio());
}

fn try_demo(spec: &TaskSpec, emb: &Embodiment, seed: u64) -> Option<Episode> {
    let mut state = initial_state(spec, emb, seed);
    let mut noise = seeded_rng(seed, &alloc::format!("envsuite/demo-noise/{}", emb.id));
    let mut ctl = Demonstrator { phase: 0, timer: 0 };
    let mut ep = Episode {
        task_id: spec.task.as_str().into(),
        embodiment_id: emb.id.clone(),
        instruction: spec.instruction(seed),
        seed,
        view_ids: VIEWS.iter().map(|v| v.to_string()).collect(),
        images: vec![Vec::new(); VIEWS.len()],
        proprio: Vec::new(),
        actions: Vec::new(),
        skills: Vec::new(),
    };
    while !state.done() {
        record(&state, &VIEWS, &mut ep);
        let (v, close, skill) = ctl.act(&state);
        let a = compose_action(emb, v, close, &mut noise);
        advance(&mut state, &a).expect("demo action width");
        ep.actions.push(a);
        ep.skills.push(skill as u8);
    }
    state.success.then_some(ep)
}

/// Runs the demonstrator once from `seed` without rendering; `true` if it succeeds.
pub fn demo_succeeds(spec: &TaskSpec, emb: &Embodiment, seed: u64) -> bool {
    let mut state = initial_state(spec, emb, seed);
    let mut noise = seeded_rng(seed, &alloc::format!("envsuite/demo-noise/{}", emb.id));
    let mut ctl = Demonstrator { phase: 0, timer: 0 };
    while !state.done() {
        let (v, close, _) = ctl.act(&state);
        let a = compose_action(emb, v, close, &mut noise);
        advance(&mut state, &a).expect("demo action width");
    }
    state.success
}

/// A successful demonstration; retries with derived seeds up to three times.
pub fn scripted_demo(spec: &TaskSpec, emb: &Embodiment, seed: u64) -> Result<Episode, EnvError> {
    const ATTEMPTS: usize = 3;
    for k in 0..ATTEMPTS as u64 {
        let s = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if let Some(ep) = try_demo(spec, emb, s) {
            return Ok(ep);
        }
    }
    Err(EnvError::DemoFailed { task: spec.task.as_str().into(), seed, attempts: ATTEMPTS })
}

/// Uniform random actions; the reference floor for closed-loop success.
pub fn random_action(emb: &Embodiment, rng: &mut RngStream) -> Vec<f64> {
    (0..emb.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Replays stored actions from the episode's reset seed; `true` if every frame matches.
pub fn replay_matches(spec: &TaskSpec, emb: &Embodiment, ep: &Episode) -> bool {
    let mut state = initial_state(spec, emb, ep.seed);
    let views: Vec<&str> = ep.view_ids.iter().map(String::as_str).collect();
    for (i, a) in ep.actions.iter().enumerate() {
        let frame = observe(&state, &views);
        if frame.proprio.as_deref() != Some(ep.proprio[i].as_slice()) {
            return false;
        }
        for (v, (_, img)) in frame.images.iter().enumerate() {
            if **img != *ep.images[v][i] {
                return false;
            }
        }
        if advance(&mut state, a).is_err() {
            return false;
        }
    }
    state.success
}
