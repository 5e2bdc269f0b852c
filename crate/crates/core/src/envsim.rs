//! Planar rectangular peg-in-hole world.
//!
//! Coordinates are `(x, z, θ)`: lateral position, height and in-plane rotation
//! of the peg tip (bottom-center point). The table surface is `z = 0`; the hole
//! opening is centered at the (randomized) hole offset and its floor sits at
//! `z = -hole_depth`. Contact is penalty based: every penetrating point yields a
//! normal force `max(0, k_c·δ + c_c·δ̇)` and a regularized Coulomb friction
//! force `-μ·f_n·tanh(v_t / v_reg)`.
//!
//! The peg pose is the compliant pose of the admittance controller, stepped
//! `substeps` times per decision with the commanded stiffness.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    admittance_accel, admittance_step, AdmittanceState, DesiredMotion, GainSet, Pose, Twist,
    Vector, Wrench, CONTROL_DT,
};
use crate::math;
use crate::{rng_from_seed, Error, Result, Rng};

/// Number of generalized coordinates of the planar world.
pub const PLANAR_DOF: usize = 3;
pub const AXIS_X: usize = 0;
pub const AXIS_Z: usize = 1;
pub const AXIS_THETA: usize = 2;

/// Penetration beyond this depth no longer increases the normal force.
pub const MAX_PENETRATION: f64 = 0.01;

/// Lever arm (m) that turns a force-noise level into a torque-noise level:
/// the peg half-width, where edge contacts act.
pub const NOISE_LEVER_ARM: f64 = 0.02;

/// Per-axis noise standard deviation for a force-noise level `std` (N).
pub fn axis_noise_std(std: f64) -> [f64; PLANAR_DOF] {
    [std, std, std * NOISE_LEVER_ARM]
}

/// Unobserved contact properties of an environment.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// N/m per contact point.
    pub contact_stiffness: f64,
    /// N·s/m per contact point.
    pub contact_damping: f64,
    pub friction_mu: f64,
    /// Multiplier applied to the wrench reported to the agent.
    pub force_scale: f64,
    /// Standard deviation of the additive sensor noise on force axes (N);
    /// the torque axis uses this force acting at [`NOISE_LEVER_ARM`].
    pub sensor_noise_std: f64,
    /// Friction regularization velocity (m/s).
    #[serde(default = "default_vreg")]
    pub friction_vreg: f64,
}

fn default_vreg() -> f64 {
    1e-3
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            contact_stiffness: 5e4,
            contact_damping: 100.0,
            friction_mu: 0.3,
            force_scale: 1.0,
            sensor_noise_std: 0.1,
            friction_vreg: default_vreg(),
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.contact_stiffness > 0.0
            && self.contact_damping >= 0.0
            && self.friction_mu >= 0.0
            && self.force_scale > 0.0
            && self.sensor_noise_std >= 0.0
            && self.friction_vreg > 0.0;
        let finite = [
            self.contact_stiffness,
            self.contact_damping,
            self.friction_mu,
            self.force_scale,
            self.sensor_noise_std,
            self.friction_vreg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::usage("environment parameters out of range"))
        }
    }
}

/// Peg and hole dimensions in meters.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub peg_width: f64,
    pub peg_height: f64,
    pub hole_width: f64,
    pub hole_depth: f64,
}

impl Geometry {
    /// 40 mm peg with the given clearance (may be negative for an interference fit).
    pub fn with_clearance(clearance: f64) -> Self {
        Geometry { peg_width: 0.040, peg_height: 0.050, hole_width: 0.040 + clearance, hole_depth: 0.015 }
    }

    pub fn clearance(&self) -> f64 {
        self.hole_width - self.peg_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.peg_width > 0.0 && self.hole_depth > 0.0 && self.peg_height > 0.0 && self.hole_width > 0.0 {
            Ok(())
        } else {
            Err(Error::usage("geometry dimensions must be positive"))
        }
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::with_clearance(0.3e-3)
    }
}

/// Uniform domain-randomization half-ranges.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Randomization {
    /// Per-axis half-range around the nominal start pose.
    pub start: [f64; PLANAR_DOF],
    /// Half-range of the lateral hole offset.
    pub hole_offset: f64,
}

impl Randomization {
    pub fn none() -> Self {
        Randomization { start: [0.0; PLANAR_DOF], hole_offset: 0.0 }
    }
}

impl Default for Randomization {
    fn default() -> Self {
        Randomization { start: [0.002, 0.002, 0.01], hole_offset: 0.003 }
    }
}

/// Fixed task settings shared by every preset.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub dt: f64,
    pub substeps: usize,
    pub max_steps: usize,
    /// Per-axis bound on the pose increment of one action.
    pub dx_max: [f64; PLANAR_DOF],
    pub k_min: f64,
    pub k_max: f64,
    /// Nominal start pose of the peg tip.
    pub start: [f64; PLANAR_DOF],
    /// Success band above the hole floor.
    pub depth_tolerance: f64,
    /// Lateral slack added to |clearance| for the success test; covers wall penetration.
    pub lateral_slack: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            dt: CONTROL_DT,
            substeps: 25,
            max_steps: 100,
            dx_max: [0.002, 0.002, 0.02],
            k_min: 10.0,
            k_max: 1000.0,
            start: [0.0, 0.010, 0.0],
            depth_tolerance: 0.001,
            lateral_slack: 0.2e-3,
        }
    }
}

impl TaskConfig {
    pub fn decision_period(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    pub fn clamp_action(&self, action: &Action) -> Action {
        let mut out = *action;
        for i in 0..PLANAR_DOF {
            out.dx[i] = math::clamp(out.dx[i], -self.dx_max[i], self.dx_max[i]);
            out.k[i] = math::clamp(out.k[i], self.k_min, self.k_max);
        }
        out
    }
}

/// A named environment: geometry, contact properties and randomization.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub geometry: Geometry,
    pub params: EnvParams,
    #[serde(default)]
    pub randomization: Randomization,
}

/// Names of the presets shipped with the crate.
pub const PRESET_NAMES: [&str; 9] = [
    "train_nominal",
    "curriculum_050",
    "clearance_005",
    "clearance_002",
    "negative_005",
    "shifted_friction",
    "shifted_scale_low",
    "shifted_scale_high",
    "shifted_stiffness",
];

impl Preset {
    /// Built-in preset by name.
    pub fn builtin(name: &str) -> Result<Preset> {
        let base = EnvParams::default();
        let (clearance, params) = match name {
            "train_nominal" => (0.3e-3, base),
            "curriculum_050" => (0.5e-3, base),
            "clearance_005" => (0.05e-3, base),
            "clearance_002" => (0.02e-3, base),
            "negative_005" => (-0.05e-3, base),
            "shifted_friction" => (0.3e-3, EnvParams { friction_mu: 2.0 * base.friction_mu, ..base }),
            "shifted_scale_low" => (0.3e-3, EnvParams { force_scale: 0.5, ..base }),
            "shifted_scale_high" => (0.3e-3, EnvParams { force_scale: 1.5, ..base }),
            "shifted_stiffness" => {
                (0.3e-3, EnvParams { contact_stiffness: 3.0 * base.contact_stiffness, ..base })
            }
            _ => return Err(Error::usage(alloc::format!("unknown preset `{name}`"))),
        };
        Ok(Preset {
            name: name.to_string(),
            geometry: Geometry::with_clearance(clearance),
            params,
            randomization: Randomization::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.params.validate()
    }
}

/// Observation of the environment after a step.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct EnvState {
    pub x: Pose,
    pub v: Twist,
    /// Reported wrench (scaled and noisy).
    pub f: Wrench,
    pub t: usize,
    pub done: bool,
    pub success: bool,
}

/// Pose increment plus stiffness command.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct Action {
    pub dx: Pose,
    pub k: Vector,
}

impl Action {
    pub fn new(dx: [f64; PLANAR_DOF], k: [f64; PLANAR_DOF]) -> Self {
        Action { dx: Pose(Vector::from_slice(&dx).unwrap()), k: Vector::from_slice(&k).unwrap() }
    }
}

/// One penetrating point and its penalty force.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct ContactPoint {
    /// Contact point relative to the peg tip, world axes.
    pub lever: [f64; 2],
    /// Unit normal pushing the peg out of the obstacle.
    pub normal: [f64; 2],
    pub penetration: f64,
    /// Normal force magnitude, never negative.
    pub normal_force: f64,
}

impl ContactPoint {
    fn tangent(&self) -> [f64; 2] {
        [self.normal[1], -self.normal[0]]
    }

    /// Generalized direction of a unit force applied along `dir` at this point.
    fn jacobian(&self, dir: [f64; 2]) -> [f64; 3] {
        [dir[0], dir[1], self.lever[0] * dir[1] - self.lever[1] * dir[0]]
    }
}

fn rotate(theta: f64, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = (math::sin(theta), math::cos(theta));
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Velocity of the peg material point at `lever` from the tip.
fn point_velocity(v: &Twist, lever: [f64; 2]) -> [f64; 2] {
    let w = v[AXIS_THETA];
    [v[AXIS_X] - w * lever[1], v[AXIS_Z] + w * lever[0]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Enumerate penetrating points for a peg at pose `x` over a hole centered at `hole_x`.
pub fn contact_points(
    x: &Pose,
    v: &Twist,
    geom: &Geometry,
    params: &EnvParams,
    hole_x: f64,
) -> Vec<ContactPoint> {
    let mut out = Vec::with_capacity(4);
    let tip = [x[AXIS_X], x[AXIS_Z]];
    let theta = x[AXIS_THETA];
    let x_left = hole_x - 0.5 * geom.hole_width;
    let x_right = hole_x + 0.5 * geom.hole_width;
    let floor = -geom.hole_depth;
    let half = 0.5 * geom.peg_width;

    let mut push = |lever: [f64; 2], normal: [f64; 2], depth: f64| {
        let depth = depth.min(MAX_PENETRATION);
        let rate = -dot(point_velocity(v, lever), normal);
        let fn_ = (params.contact_stiffness * depth + params.contact_damping * rate).max(0.0);
        out.push(ContactPoint { lever, normal, penetration: depth, normal_force: fn_ });
    };

    // Peg bottom corners against the table, the hole walls and the floor.
    for side in [-1.0, 1.0] {
        let lever = rotate(theta, [side * half, 0.0]);
        let p = [tip[0] + lever[0], tip[1] + lever[1]];
        if p[1] >= 0.0 {
            continue;
        }
        let mut best: Option<([f64; 2], f64)> = None;
        let mut consider = |n: [f64; 2], d: f64| {
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((n, d));
            }
        };
        let outside = if p[0] < x_left {
            Some((x_left, 1.0))
        } else if p[0] > x_right {
            Some((x_right, -1.0))
        } else {
            None
        };
        if let Some((wall, dir)) = outside {
            if p[1] > floor {
                consider([0.0, 1.0], -p[1]);
                consider([dir, 0.0], (wall - p[0]).abs());
            } else {
                // Under both the wall and the floor: the nearest free point is the hole's bottom corner.
                let d = [wall - p[0], floor - p[1]];
                let dist = math::sqrt(dot(d, d));
                consider([d[0] / dist, d[1] / dist], dist);
            }
        } else if p[1] < floor {
            consider([0.0, 1.0], floor - p[1]);
        }
        if let Some((n, d)) = best {
            push(lever, n, d);
        }
    }

    // Hole top edges against the peg faces.
    for edge_x in [x_left, x_right] {
        let rel = [edge_x - tip[0], -tip[1]];
        let local = rotate(-theta, rel);
        let inside = local[0] > -half && local[0] < half && local[1] > 0.0 && local[1] < geom.peg_height;
        if !inside {
            continue;
        }
        // Distances from the edge to the bottom, left and right faces (peg frame).
        let faces = [
            (local[1], [0.0, 1.0]),
            (local[0] + half, [1.0, 0.0]),
            (half - local[0], [-1.0, 0.0]),
        ];
        let (depth, n_local) = faces
            .iter()
            .copied()
            .fold((f64::INFINITY, [0.0, 0.0]), |acc, f| if f.0 < acc.0 { f } else { acc });
        push(rel, rotate(theta, n_local), depth);
    }
    out
}

fn wrench_from(points: &[ContactPoint], friction: &[f64]) -> Wrench {
    let mut w = Wrench::zeros(PLANAR_DOF);
    for (c, ft) in points.iter().zip(friction) {
        let jn = c.jacobian(c.normal);
        let jt = c.jacobian(c.tangent());
        for i in 0..PLANAR_DOF {
            w[i] += c.normal_force * jn[i] + ft * jt[i];
        }
    }
    w
}

/// Physical penalty wrench on the peg (about its tip) with explicit
/// regularized friction. Scaling and sensor noise are applied by [`Env`].
pub fn contact_wrench(x: &Pose, v: &Twist, geom: &Geometry, params: &EnvParams, hole_x: f64) -> Wrench {
    let points = contact_points(x, v, geom, params, hole_x);
    let friction: Vec<f64> = points
        .iter()
        .map(|c| {
            let vt = dot(point_velocity(v, c.lever), c.tangent());
            -params.friction_mu * c.normal_force * math::tanh(vt / params.friction_vreg)
        })
        .collect();
    wrench_from(&points, &friction)
}

/// Friction force along the tangent, solved implicitly against the end-of-step
/// tangential velocity: `F = -μ f_n tanh((u + dt·w·F) / v_reg)`.
///
/// `u` is the predicted tangential velocity without this contact's friction and
/// `w` the inverse effective mass along the tangent. The residual is monotone in
/// `F`, so a bracketed Newton iteration converges from `[-μ f_n, μ f_n]`.
fn implicit_friction(mu_fn: f64, u: f64, w_dt: f64, vreg: f64) -> f64 {
    if mu_fn <= 0.0 {
        return 0.0;
    }
    let residual = |f: f64| f + mu_fn * math::tanh((u + w_dt * f) / vreg);
    let (mut lo, mut hi) = (-mu_fn, mu_fn);
    let mut f = -mu_fn * math::tanh(u / vreg);
    for _ in 0..60 {
        let r = residual(f);
        if r.abs() <= 1e-12 * mu_fn {
            break;
        }
        if r > 0.0 {
            hi = f;
        } else {
            lo = f;
        }
        let th = math::tanh((u + w_dt * f) / vreg);
        let slope = 1.0 + mu_fn * (1.0 - th * th) * w_dt / vreg;
        let mut next = f - r / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        f = next;
    }
    f
}

/// Peg-in-hole environment instance. Owns its RNG; single-threaded.
#[derive(Clone, Debug)]
pub struct Env {
    preset: Preset,
    task: TaskConfig,
    rng: Rng,
    noise: Normal<f64>,
    hole_x: f64,
    desired: Pose,
    compliant: AdmittanceState,
    true_wrench: Wrench,
    state: Option<EnvState>,
}

impl Env {
    pub fn new(preset: Preset, task: TaskConfig) -> Result<Self> {
        preset.validate()?;
        let noise = Normal::new(0.0, 1.0).map_err(|_| Error::usage("invalid sensor noise"))?;
        Ok(Env {
            preset,
            task,
            rng: rng_from_seed(0),
            noise,
            hole_x: 0.0,
            desired: Pose::zeros(PLANAR_DOF),
            compliant: AdmittanceState::at_rest(Pose::zeros(PLANAR_DOF)),
            true_wrench: Wrench::zeros(PLANAR_DOF),
            state: None,
        })
    }

    pub fn preset(&self) -> &Preset {
        &self.preset
    }

    pub fn task(&self) -> &TaskConfig {
        &self.task
    }

    /// Lateral position of the hole center for the current episode.
    pub fn hole_x(&self) -> f64 {
        self.hole_x
    }

    /// Hole-floor center: the point the reward measures distance to.
    pub fn target(&self) -> [f64; 2] {
        [self.hole_x, -self.preset.geometry.hole_depth]
    }

    pub fn desired_pose(&self) -> &Pose {
        &self.desired
    }

    /// Physical wrench applied during the last controller sub-step.
    pub fn true_wrench(&self) -> &Wrench {
        &self.true_wrench
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Reset using the preset's randomization ranges.
    pub fn reset(&mut self, seed: u64) -> EnvState {
        let rand = self.preset.randomization;
        self.reset_with(seed, &rand)
    }

    /// Sample the start pose and hole offset uniformly in the given half-ranges.
    pub fn reset_with(&mut self, seed: u64, rand: &Randomization) -> EnvState {
        self.rng = rng_from_seed(seed);
        let mut start = Pose::zeros(PLANAR_DOF);
        for i in 0..PLANAR_DOF {
            start[i] = self.task.start[i] + symmetric(&mut self.rng, rand.start[i]);
        }
        self.hole_x = symmetric(&mut self.rng, rand.hole_offset);
        self.desired = start;
        self.compliant = AdmittanceState::at_rest(start);
        self.true_wrench = Wrench::zeros(PLANAR_DOF);
        let f = self.true_wrench;
        let state = EnvState { x: start, v: self.compliant.twist, f: self.report(&f), t: 0, done: false, success: false };
        self.state = Some(state);
        state
    }

    fn report(&mut self, true_wrench: &Wrench) -> Wrench {
        let scale = self.preset.params.force_scale;
        let mut out = *true_wrench;
        let std = axis_noise_std(self.preset.params.sensor_noise_std);
        for i in 0..PLANAR_DOF {
            let noise = if self.preset.params.sensor_noise_std > 0.0 {
                std[i] * self.noise.sample(&mut self.rng)
            } else {
                0.0
            };
            out[i] = scale * true_wrench[i] + noise;
        }
        out
    }

    /// Reward for a tip position: negative distance to the hole-floor center.
    pub fn reward_at(&self, x: &Pose) -> f64 {
        let [tx, tz] = self.target();
        let (dx, dz) = (x[AXIS_X] - tx, x[AXIS_Z] - tz);
        -math::sqrt(dx * dx + dz * dz)
    }

    pub fn is_success(&self, x: &Pose) -> bool {
        let g = &self.preset.geometry;
        let depth_ok = x[AXIS_Z] <= -g.hole_depth + self.task.depth_tolerance;
        let lateral_ok =
            (x[AXIS_X] - self.hole_x).abs() < g.clearance().abs() + self.task.lateral_slack;
        depth_ok && lateral_ok
    }

    /// One controller sub-step with implicitly resolved friction.
    fn substep(&mut self, gains: &GainSet) -> Result<()> {
        let p = &self.preset;
        let s = self.compliant;
        let desired = DesiredMotion::hold(self.desired);
        let points = contact_points(&s.pose, &s.twist, &p.geometry, &p.params, self.hole_x);
        let mut friction = alloc::vec![0.0; points.len()];
        let wrench = if points.is_empty() {
            Wrench::zeros(PLANAR_DOF)
        } else {
            let normal_only = wrench_from(&points, &friction);
            let a = admittance_accel(&s, &desired, &normal_only, gains);
            let dt = self.task.dt;
            let m = gains.inertia();
            let mut v_pred = s.twist;
            for i in 0..PLANAR_DOF {
                v_pred[i] += a[i] * dt;
            }
            for (c, ft) in points.iter().zip(friction.iter_mut()) {
                let t = c.tangent();
                let j = c.jacobian(t);
                let u = dot(point_velocity(&v_pred, c.lever), t);
                let w: f64 = (0..PLANAR_DOF).map(|i| j[i] * j[i] / m[i]).sum();
                *ft = implicit_friction(p.params.friction_mu * c.normal_force, u, w * dt, p.params.friction_vreg);
                for i in 0..PLANAR_DOF {
                    v_pred[i] += dt * *ft * j[i] / m[i];
                }
            }
            wrench_from(&points, &friction)
        };
        self.compliant = admittance_step(&s, &desired, &wrench, gains, self.task.dt)?;
        self.true_wrench = wrench;
        Ok(())
    }

    /// Apply an action: shift the setpoint, run the admittance sub-steps with
    /// the commanded stiffness and report the scaled, noisy wrench.
    pub fn step(&mut self, action: &Action) -> Result<(EnvState, f64)> {
        let prev = match self.state {
            None => return Err(Error::usage("environment not reset")),
            Some(s) if s.done => return Err(Error::EpisodeDone),
            Some(s) => s,
        };
        if action.dx.dof() != PLANAR_DOF || action.k.dof() != PLANAR_DOF {
            return Err(Error::DimensionMismatch { expected: PLANAR_DOF, got: action.dx.dof() });
        }
        if !(action.dx.is_finite() && action.k.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        let action = self.task.clamp_action(action);
        for i in 0..PLANAR_DOF {
            self.desired[i] += action.dx[i];
        }
        let gains = GainSet::with_unit_inertia(action.k.as_slice())?;
        for _ in 0..self.task.substeps {
            self.substep(&gains)?;
        }
        let true_wrench = self.true_wrench;
        let f = self.report(&true_wrench);
        let x = self.compliant.pose;
        let reward = self.reward_at(&x);
        let success = self.is_success(&x);
        let t = prev.t + 1;
        let state = EnvState {
            x,
            v: self.compliant.twist,
            f,
            t,
            done: success || t >= self.task.max_steps,
            success,
        };
        self.state = Some(state);
        Ok((state, reward))
    }
}

fn symmetric(rng: &mut Rng, half_range: f64) -> f64 {
    if half_range > 0.0 {
        rng.random_range(-half_range..=half_range)
    } else {
        0.0
    }
}
