//! Synthetic 2-D tabletop manipulation world.
//!
//! Stands in for robot teleoperation data and ego-centric human video: a
//! scripted expert solves pick-place / pack / stack tasks with a kinematic
//! arm, and observations are patch-token features produced by a fixed random
//! linear encoding of the scene. The human domain re-renders the same state
//! trajectory through shifted projections and strips the actions, which is
//! the controlled domain gap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rngs;

/// Fixed root seed for the frozen feature projections. Independent of
/// episode seeds so every episode shares the same "backbone".
const FEATURE_MAP_SEED: u64 = 0xC1A9_0001;

pub const NUM_ZONES: usize = 4;
const PLACEMENT_RETRIES: usize = 10;

/// Scripted phase labels, also used as subtask tokens by the policies.
pub const PHASE_REACH: u16 = 0;
pub const PHASE_GRASP: u16 = 1;
pub const PHASE_TRANSPORT: u16 = 2;
pub const PHASE_RELEASE: u16 = 3;
pub const PHASE_DONE: u16 = 4;
pub const NUM_PHASES: usize = 5;

/// Per-step actuator rate limits shared by the dynamics and the expert.
const MAX_DTHETA: f64 = std::f64::consts::PI / 8.0;
const MAX_DGRIP: f64 = 0.34;

/// Shortest signed angular difference, in (-pi, pi].
fn wrap_angle(d: f64) -> f64 {
    let mut d = d % std::f64::consts::TAU;
    if d > std::f64::consts::PI {
        d -= std::f64::consts::TAU;
    } else if d <= -std::f64::consts::PI {
        d += std::f64::consts::TAU;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Robot,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    PickPlace,
    Pack,
    Stack,
}

impl TaskKind {
    pub fn index(self) -> usize {
        match self {
            TaskKind::PickPlace => 0,
            TaskKind::Pack => 1,
            TaskKind::Stack => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<TaskKind> {
        match i {
            0 => Some(TaskKind::PickPlace),
            1 => Some(TaskKind::Pack),
            2 => Some(TaskKind::Stack),
            _ => None,
        }
    }
}

/// A concrete scripted task: which object type to manipulate and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub kind: TaskKind,
    pub target_type: usize,
    pub zone: usize,
}

impl Task {
    pub fn instruction_id(&self, num_object_types: usize) -> u32 {
        ((self.kind.index() * num_object_types + self.target_type) * NUM_ZONES + self.zone) as u32
    }

    pub fn from_instruction_id(id: u32, num_object_types: usize) -> Option<Task> {
        let id = id as usize;
        let zone = id % NUM_ZONES;
        let rest = id / NUM_ZONES;
        let target_type = rest % num_object_types;
        let kind = TaskKind::from_index(rest / num_object_types)?;
        Some(Task { kind, target_type, zone })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_arms: usize,
    /// Table half-width in meters.
    pub table_extent: f64,
    pub num_object_types: usize,
    /// Feature patch count P.
    pub patches: usize,
    /// Feature dimension d.
    pub feature_dim: usize,
    /// Steps per episode T.
    pub control_rate: usize,
    pub noise_std: f64,
    /// Strength of the human-domain rendering shift.
    pub style_gap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_arms: 1,
            table_extent: 1.0,
            num_object_types: 6,
            patches: 16,
            feature_dim: 32,
            control_rate: 128,
            noise_std: 0.01,
            style_gap: 0.25,
        }
    }
}

impl WorldConfig {
    pub fn action_dim(&self) -> usize {
        4 * self.num_arms
    }

    fn max_step(&self) -> f64 {
        self.table_extent / 16.0
    }

    fn grasp_radius(&self) -> f64 {
        0.05 * self.table_extent
    }

    fn zone_radius(&self) -> f64 {
        0.15 * self.table_extent
    }

    fn min_separation(&self) -> f64 {
        (0.25 * self.table_extent).max(0.06)
    }

    pub fn zone_center(&self, zone: usize) -> [f64; 2] {
        let e = 0.5 * self.table_extent;
        match zone % NUM_ZONES {
            0 => [e, e],
            1 => [-e, e],
            2 => [-e, -e],
            _ => [e, -e],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Arm {
    pub pos: [f64; 2],
    pub theta: f64,
    pub grip: f64,
    pub held: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Obj {
    pub pos: [f64; 2],
    pub kind: usize,
}

#[derive(Debug, Clone)]
pub struct World {
    pub arms: Vec<Arm>,
    pub objects: Vec<Obj>,
    cfg_extent: f64,
    max_step: f64,
    grasp_radius: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl World {
    /// Place objects for `task`, retrying invalid layouts up to 10 times.
    pub fn init(cfg: &WorldConfig, task: Task, rng: &mut ChaCha8Rng) -> Result<World> {
        if task.target_type >= cfg.num_object_types {
            return Err(CoreError::World(format!(
                "target type {} out of range {}",
                task.target_type, cfg.num_object_types
            )));
        }
        let span = 0.7 * cfg.table_extent;
        let min_sep = cfg.min_separation();
        for _try in 0..PLACEMENT_RETRIES {
            let mut objects = Vec::new();
            let kinds: Vec<usize> = match task.kind {
                TaskKind::PickPlace => {
                    let distractor = (task.target_type + 1) % cfg.num_object_types;
                    let distractor2 = (task.target_type + 2) % cfg.num_object_types;
                    vec![task.target_type, distractor, distractor2]
                }
                TaskKind::Pack => {
                    let distractor = (task.target_type + 1) % cfg.num_object_types;
                    vec![task.target_type, task.target_type, distractor]
                }
                TaskKind::Stack => {
                    let base = (task.target_type + 1) % cfg.num_object_types;
                    vec![task.target_type, base]
                }
            };
            for kind in kinds {
                let pos = [rng.gen_range(-span..=span), rng.gen_range(-span..=span)];
                objects.push(Obj { pos, kind });
            }
            let zone = cfg.zone_center(task.zone);
            let mut ok = true;
            for (i, a) in objects.iter().enumerate() {
                if dist(a.pos, zone) < cfg.zone_radius() + min_sep * 0.5 {
                    ok = false;
                }
                for b in objects.iter().skip(i + 1) {
                    if dist(a.pos, b.pos) < min_sep {
                        ok = false;
                    }
                }
            }
            if min_sep > 2.0 * span {
                ok = false; // table physically too small for separated objects
            }
            if !ok {
                continue;
            }
            let arms = (0..cfg.num_arms)
                .map(|_| Arm { pos: [0.0, 0.0], theta: 0.0, grip: 1.0, held: None })
                .collect();
            return Ok(World {
                arms,
                objects,
                cfg_extent: cfg.table_extent,
                max_step: cfg.max_step(),
                grasp_radius: cfg.grasp_radius(),
            });
        }
        Err(CoreError::World(format!(
            "no reachable object placement after {PLACEMENT_RETRIES} retries"
        )))
    }

    /// Apply one action vector (Da values, 4 per arm: px, py, theta, grip).
    pub fn step(&mut self, action: &[f64]) {
        assert_eq!(action.len(), 4 * self.arms.len(), "action dim mismatch");
        for (i, arm) in self.arms.iter_mut().enumerate() {
            let cmd = &action[i * 4..(i + 1) * 4];
            let dx = cmd[0] - arm.pos[0];
            let dy = cmd[1] - arm.pos[1];
            let d = (dx * dx + dy * dy).sqrt();
            if d > self.max_step {
                arm.pos[0] += dx / d * self.max_step;
                arm.pos[1] += dy / d * self.max_step;
            } else {
                arm.pos = [cmd[0], cmd[1]];
            }
            let dth = wrap_angle(cmd[2] - arm.theta).clamp(-MAX_DTHETA, MAX_DTHETA);
            arm.theta += dth;
            let dg = (cmd[3].clamp(0.0, 1.0) - arm.grip).clamp(-MAX_DGRIP, MAX_DGRIP);
            arm.grip += dg;

            // Grasp / release / carry.
            if let Some(obj) = arm.held {
                if arm.grip > 0.65 {
                    arm.held = None;
                } else {
                    self.objects[obj].pos = arm.pos;
                }
            } else if arm.grip < 0.35 {
                let mut nearest = None;
                let mut best = self.grasp_radius;
                for (oi, obj) in self.objects.iter().enumerate() {
                    let d = dist(arm.pos, obj.pos);
                    if d <= best {
                        best = d;
                        nearest = Some(oi);
                    }
                }
                if let Some(oi) = nearest {
                    arm.held = Some(oi);
                    self.objects[oi].pos = arm.pos;
                }
            }
        }
    }

    /// Objects the scripted expert must deliver, in order, with their
    /// destinations.
    fn legs(&self, cfg: &WorldConfig, task: Task) -> Vec<(usize, [f64; 2])> {
        match task.kind {
            TaskKind::PickPlace => vec![(0, cfg.zone_center(task.zone))],
            TaskKind::Pack => {
                let z = cfg.zone_center(task.zone);
                vec![(0, z), (1, z)]
            }
            TaskKind::Stack => vec![(0, self.objects[1].pos)],
        }
    }

    fn delivered(&self, cfg: &WorldConfig, obj: usize, dest: [f64; 2], held_ok: bool) -> bool {
        let placed = dist(self.objects[obj].pos, dest) <= cfg.zone_radius() * 0.8;
        let free = self.arms.iter().all(|a| a.held != Some(obj));
        placed && (held_ok || free)
    }

    pub fn task_success(&self, cfg: &WorldConfig, task: Task) -> bool {
        match task.kind {
            TaskKind::Stack => {
                let base = self.objects[1].pos;
                let top = self.objects[0].pos;
                dist(top, base) <= 0.06 * cfg.table_extent
                    && self.arms.iter().all(|a| a.held != Some(0))
            }
            _ => self
                .legs(cfg, task)
                .iter()
                .all(|&(obj, dest)| self.delivered(cfg, obj, dest, false)),
        }
    }
}

// ── scripted expert ─────────────────────────────────────────────────────

/// Proportional controller toward the current subgoal. Stateless: the phase
/// is recomputed from the world, so it can resume from any state.
pub fn scripted_policy(world: &World, cfg: &WorldConfig, task: Task) -> (Vec<f64>, u16) {
    let arm = &world.arms[0];
    let legs = world.legs(cfg, task);
    let held_ok_for_stack = false;
    let pending = legs
        .iter()
        .find(|&&(obj, dest)| !world.delivered(cfg, obj, dest, held_ok_for_stack));

    let mut action = vec![0.0; 4 * world.arms.len()];
    // Extra arms idle at home.
    for i in 1..world.arms.len() {
        action[i * 4] = 0.0;
        action[i * 4 + 1] = 0.0;
        action[i * 4 + 2] = 0.0;
        action[i * 4 + 3] = 1.0;
    }

    let (target, grip_cmd, phase) = match pending {
        None => ([0.0, 0.0], 1.0, PHASE_DONE),
        Some(&(obj, dest)) => {
            let obj_pos = world.objects[obj].pos;
            if world.arms[0].held == Some(obj) {
                if dist(arm.pos, dest) > 0.03 * cfg.table_extent {
                    (dest, 0.0, PHASE_TRANSPORT)
                } else {
                    (dest, 1.0, PHASE_RELEASE)
                }
            } else if dist(arm.pos, obj_pos) > 0.02 * cfg.table_extent {
                (obj_pos, 1.0, PHASE_REACH)
            } else {
                (obj_pos, 0.0, PHASE_GRASP)
            }
        }
    };
    // Saturated proportional control: every dimension commands the next
    // reachable waypoint toward its goal, so recorded commands are smooth
    // rate-limited ramps. The dynamics reach each waypoint exactly, so the
    // executed trajectory is unchanged.
    let dx = target[0] - arm.pos[0];
    let dy = target[1] - arm.pos[1];
    let d = (dx * dx + dy * dy).sqrt();
    // Hold the heading once the arm is basically at the goal; the residual
    // direction is numerical noise and would jitter the recorded command.
    let heading = if d > 0.5 * world.max_step { dy.atan2(dx) } else { arm.theta };
    let (wx, wy) = if d > world.max_step {
        (arm.pos[0] + dx / d * world.max_step, arm.pos[1] + dy / d * world.max_step)
    } else {
        (target[0], target[1])
    };
    action[0] = wx;
    action[1] = wy;
    action[2] = arm.theta + wrap_angle(heading - arm.theta).clamp(-MAX_DTHETA, MAX_DTHETA);
    action[3] = grip_cmd;
    (action, phase)
}

// ── feature rendering ───────────────────────────────────────────────────

const OBJ_DESC: usize = 3; // [1, px, py]
const ARM_DESC: usize = 7; // [1, px, py, sin, cos, grip, holding]

/// Frozen random projections from scene entities to the P x d patch grid.
/// The human variant perturbs every map by `style_gap` and stamps an
/// embodiment marker on patch 0.
pub struct FeatureMaps {
    background: Vec<f64>,
    obj: Vec<Vec<f64>>,
    arm: Vec<Vec<f64>>,
    marker: Vec<f64>,
    patches: usize,
    dim: usize,
}

impl FeatureMaps {
    pub fn build(cfg: &WorldConfig, domain: Domain) -> FeatureMaps {
        let pd = cfg.patches * cfg.feature_dim;
        let mut base = rngs::derived(FEATURE_MAP_SEED, 0);
        let mut background = rngs::normal_vec(&mut base, pd, 0.35);
        let mut obj: Vec<Vec<f64>> = (0..cfg.num_object_types)
            .map(|_| rngs::normal_vec(&mut base, OBJ_DESC * pd, 0.35))
            .collect();
        let mut arm: Vec<Vec<f64>> = (0..cfg.num_arms)
            .map(|_| rngs::normal_vec(&mut base, ARM_DESC * pd, 0.35))
            .collect();
        let mut marker = vec![0.0; cfg.feature_dim];
        if domain == Domain::Human {
            let mut shift = rngs::derived(FEATURE_MAP_SEED, 1);
            let s = cfg.style_gap;
            for v in &mut background {
                *v += s * rngs::normal(&mut shift) * 0.35;
            }
            for m in &mut obj {
                for v in m.iter_mut() {
                    *v += s * rngs::normal(&mut shift) * 0.35;
                }
            }
            for m in &mut arm {
                for v in m.iter_mut() {
                    *v += s * rngs::normal(&mut shift) * 0.35;
                }
            }
            marker = rngs::normal_vec(&mut shift, cfg.feature_dim, 0.5);
        }
        FeatureMaps { background, obj, arm, marker, patches: cfg.patches, dim: cfg.feature_dim }
    }

    /// Noise-free linear encoding of the scene (the oracle for linearity
    /// checks). Additive per entity: background + sum of object and arm
    /// contributions.
    pub fn render_raw(&self, world: &World) -> Vec<f64> {
        let pd = self.patches * self.dim;
        let mut out = self.background.clone();
        let e = world.cfg_extent;
        for obj in &world.objects {
            let desc = [1.0, obj.pos[0] / e, obj.pos[1] / e];
            let m = &self.obj[obj.kind];
            for (k, &dv) in desc.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (o, &mv) in out.iter_mut().zip(&m[k * pd..(k + 1) * pd]) {
                    *o += dv * mv;
                }
            }
        }
        for (ai, arm) in world.arms.iter().enumerate() {
            let holding = if arm.held.is_some() { 1.0 } else { 0.0 };
            let desc = [
                1.0,
                arm.pos[0] / e,
                arm.pos[1] / e,
                arm.theta.sin(),
                arm.theta.cos(),
                arm.grip,
                holding,
            ];
            let m = &self.arm[ai];
            for (k, &dv) in desc.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (o, &mv) in out.iter_mut().zip(&m[k * pd..(k + 1) * pd]) {
                    *o += dv * mv;
                }
            }
        }
        for (o, &mv) in out[..self.dim].iter_mut().zip(&self.marker) {
            *o += mv;
        }
        out
    }

    /// Rendered features with observation noise, rounded through f32 so the
    /// on-disk representation is exact.
    pub fn render(&self, world: &World, noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = self.render_raw(world);
        if noise_std > 0.0 {
            for v in &mut out {
                *v += noise_std * rngs::normal(rng);
            }
        }
        for v in &mut out {
            *v = *v as f32 as f64;
        }
        out
    }
}

/// Convenience wrapper matching the one-off rendering contract.
pub fn render_features(
    cfg: &WorldConfig,
    world: &World,
    domain: Domain,
    seed: u64,
) -> Vec<f64> {
    let maps = FeatureMaps::build(cfg, domain);
    let mut rng = rngs::derived(seed, 1);
    maps.render(world, cfg.noise_std, &mut rng)
}

// ── episodes ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Episode {
    /// T x P x d, flattened.
    pub features: Vec<f64>,
    /// T x Da raw (unnormalized) expert commands; robot domain only.
    pub actions: Option<Vec<f64>>,
    pub instruction_id: u32,
    pub subtask_ids: Vec<u16>,
    pub domain: Domain,
    pub t_len: usize,
    /// Ground-truth actions of human episodes. Never serialized into
    /// training data; reachable only through [`Episode::eval_hidden_actions`].
    hidden_actions: Option<Vec<f64>>,
}

impl Episode {
    /// Evaluation-only access to the withheld human-domain actions.
    pub fn eval_hidden_actions(&self) -> Option<&[f64]> {
        self.hidden_actions.as_deref()
    }

    pub fn with_hidden(mut self, hidden: Option<Vec<f64>>) -> Self {
        self.hidden_actions = hidden;
        self
    }

    pub fn feature_frame(&self, t: usize, patch_dim: usize) -> &[f64] {
        &self.features[t * patch_dim..(t + 1) * patch_dim]
    }
}

/// Roll out the scripted expert and record the episode. Deterministic in
/// `(cfg, task, seed, domain)`; the human domain shares the robot state
/// trajectory for the same seed and differs only in rendering.
pub fn generate_episode(
    cfg: &WorldConfig,
    task: Task,
    seed: u64,
    domain: Domain,
) -> Result<Episode> {
    let mut scene_rng = rngs::derived(seed, 0);
    let mut noise_rng = rngs::derived(seed, 1);
    let mut world = World::init(cfg, task, &mut scene_rng)?;
    let maps = FeatureMaps::build(cfg, domain);

    let t_len = cfg.control_rate;
    let pd = cfg.patches * cfg.feature_dim;
    let da = cfg.action_dim();
    let mut features = Vec::with_capacity(t_len * pd);
    let mut actions = Vec::with_capacity(t_len * da);
    let mut subtasks = Vec::with_capacity(t_len);

    for _ in 0..t_len {
        features.extend_from_slice(&maps.render(&world, cfg.noise_std, &mut noise_rng));
        let (action, phase) = scripted_policy(&world, cfg, task);
        let action: Vec<f64> = action.iter().map(|&v| v as f32 as f64).collect();
        world.step(&action);
        actions.extend_from_slice(&action);
        subtasks.push(phase);
    }

    if !world.task_success(cfg, task) {
        return Err(CoreError::World(format!(
            "scripted expert failed task {task:?} with seed {seed}"
        )));
    }
    for v in &features {
        if !v.is_finite() {
            return Err(CoreError::NonFinite("rendered features".into()));
        }
    }

    let instruction_id = task.instruction_id(cfg.num_object_types);
    Ok(match domain {
        Domain::Robot => Episode {
            features,
            actions: Some(actions),
            instruction_id,
            subtask_ids: subtasks,
            domain,
            t_len,
            hidden_actions: None,
        },
        Domain::Human => Episode {
            features,
            actions: None,
            instruction_id,
            subtask_ids: subtasks,
            domain,
            t_len,
            hidden_actions: Some(actions),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> Task {
        Task { kind: TaskKind::PickPlace, target_type: 0, zone: 0 }
    }

    #[test]
    fn episodes_are_bit_identical_under_fixed_seed() {
        let cfg = WorldConfig::default();
        let a = generate_episode(&cfg, task(), 42, Domain::Robot).unwrap();
        let b = generate_episode(&cfg, task(), 42, Domain::Robot).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.subtask_ids, b.subtask_ids);
    }

    #[test]
    fn human_domain_strips_actions_into_hidden() {
        let cfg = WorldConfig::default();
        let e = generate_episode(&cfg, task(), 7, Domain::Human).unwrap();
        assert!(e.actions.is_none());
        assert!(e.eval_hidden_actions().is_some());
    }

    #[test]
    fn paired_domains_share_trajectory_but_not_features() {
        let cfg = WorldConfig::default();
        let robot = generate_episode(&cfg, task(), 9, Domain::Robot).unwrap();
        let human = generate_episode(&cfg, task(), 9, Domain::Human).unwrap();
        assert_eq!(robot.actions.as_deref(), human.eval_hidden_actions());
        assert_eq!(robot.subtask_ids, human.subtask_ids);
        let diff: f64 = robot
            .features
            .iter()
            .zip(&human.features)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1.0, "style shift must change features, diff {diff}");
    }

    #[test]
    fn scripted_pick_place_succeeds_over_100_seeds() {
        let cfg = WorldConfig::default();
        for seed in 0..100 {
            let t = Task {
                kind: TaskKind::PickPlace,
                target_type: (seed % 4) as usize,
                zone: (seed % 4) as usize,
            };
            generate_episode(&cfg, t, seed, Domain::Robot)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn scripted_pack_and_stack_succeed() {
        let cfg = WorldConfig::default();
        for seed in 0..25 {
            let t = Task { kind: TaskKind::Pack, target_type: 1, zone: (seed % 4) as usize };
            generate_episode(&cfg, t, seed, Domain::Robot).unwrap();
            let t = Task { kind: TaskKind::Stack, target_type: 2, zone: 0 };
            generate_episode(&cfg, t, seed, Domain::Robot).unwrap();
        }
    }

    #[test]
    fn rendering_is_linear_in_object_superposition() {
        let cfg = WorldConfig { noise_std: 0.0, ..WorldConfig::default() };
        let maps = FeatureMaps::build(&cfg, Domain::Robot);
        let mut rng = rngs::seeded(3);
        let mut world = World::init(&cfg, task(), &mut rng).unwrap();
        world.objects.truncate(2);

        let both = maps.render_raw(&world);
        let mut only_a = world.clone();
        only_a.objects.truncate(1);
        let mut only_b = world.clone();
        only_b.objects.remove(0);
        let mut none = world.clone();
        none.objects.clear();

        let fa = maps.render_raw(&only_a);
        let fb = maps.render_raw(&only_b);
        let f0 = maps.render_raw(&none);
        for i in 0..both.len() {
            let sum = fa[i] + fb[i] - f0[i];
            assert!((both[i] - sum).abs() < 1e-12, "patch {i}: {} vs {sum}", both[i]);
        }
    }

    #[test]
    fn noise_free_rendering_is_deterministic() {
        let cfg = WorldConfig { noise_std: 0.0, ..WorldConfig::default() };
        let mut rng = rngs::seeded(5);
        let world = World::init(&cfg, task(), &mut rng).unwrap();
        let a = render_features(&cfg, &world, Domain::Robot, 1);
        let b = render_features(&cfg, &world, Domain::Robot, 2); // different noise seed
        assert_eq!(a, b);
    }

    #[test]
    fn release_phase_commands_open_gripper() {
        let cfg = WorldConfig::default();
        let mut rng = rngs::seeded(11);
        let mut world = World::init(&cfg, task(), &mut rng).unwrap();
        // Drive: move arm onto the object holding it, then onto the zone.
        world.arms[0].pos = cfg.zone_center(0);
        world.arms[0].grip = 0.0;
        world.arms[0].held = Some(0);
        world.objects[0].pos = world.arms[0].pos;
        let (action, phase) = scripted_policy(&world, &cfg, task());
        assert_eq!(phase, PHASE_RELEASE);
        assert_eq!(action[3], 1.0, "release must command an open gripper");
    }

    #[test]
    fn transport_phase_moves_toward_destination() {
        let cfg = WorldConfig::default();
        let mut rng = rngs::seeded(13);
        let mut world = World::init(&cfg, task(), &mut rng).unwrap();
        world.arms[0].grip = 0.0;
        world.arms[0].held = Some(0);
        world.objects[0].pos = world.arms[0].pos;
        let (action, phase) = scripted_policy(&world, &cfg, task());
        assert_eq!(phase, PHASE_TRANSPORT);
        let zone = cfg.zone_center(0);
        let before = dist(world.arms[0].pos, zone);
        let after = dist([action[0], action[1]], zone);
        assert!(after < before, "waypoint must move toward the place location");
    }

    #[test]
    fn distance_to_subgoal_is_monotone_within_phases() {
        let cfg = WorldConfig::default();
        let mut rng = rngs::seeded(17);
        let mut world = World::init(&cfg, task(), &mut rng).unwrap();
        let mut prev_phase = u16::MAX;
        let mut prev_dist = f64::INFINITY;
        for _ in 0..cfg.control_rate {
            let (action, phase) = scripted_policy(&world, &cfg, task());
            let subgoal = match phase {
                PHASE_REACH | PHASE_GRASP => world.objects[0].pos,
                PHASE_TRANSPORT | PHASE_RELEASE => cfg.zone_center(0),
                _ => [0.0, 0.0],
            };
            let d = dist(world.arms[0].pos, subgoal);
            if phase == prev_phase {
                assert!(d <= prev_dist + 1e-9, "distance grew within phase {phase}");
            }
            world.step(&action);
            prev_phase = phase;
            prev_dist = d;
        }
    }

    #[test]
    fn impossible_placement_errors_after_retries() {
        let cfg = WorldConfig { table_extent: 0.02, ..WorldConfig::default() };
        let got = generate_episode(&cfg, task(), 3, Domain::Robot);
        assert!(matches!(got, Err(CoreError::World(_))), "got {got:?}");
    }

    #[test]
    fn instruction_ids_round_trip() {
        let cfg = WorldConfig::default();
        for kind in [TaskKind::PickPlace, TaskKind::Pack, TaskKind::Stack] {
            for ty in 0..cfg.num_object_types {
                for zone in 0..NUM_ZONES {
                    let t = Task { kind, target_type: ty, zone };
                    let id = t.instruction_id(cfg.num_object_types);
                    assert_eq!(Task::from_instruction_id(id, cfg.num_object_types), Some(t));
                }
            }
        }
    }
}
